use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{nll_cached, LearnedChannel, LosCache};
use crate::env::MeasurementRecord;
use crate::error::{Error, Result};
use crate::seed;
use crate::world::CityMap;

/// Global-best particle swarm settings; bounds come from the map extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Velocity clamp as a fraction of each bound's extent.
    pub velocity_clamp_frac: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            particles: 50,
            iterations: 100,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            velocity_clamp_frac: 0.2,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("pso particles must be >= 2".into()));
        }
        if !(self.velocity_clamp_frac > 0.0) {
            return Err(Error::Config("pso velocity_clamp_frac must be > 0".into()));
        }
        Ok(())
    }
}

/// Outcome of localizing one device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub device_id: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub nll: f64,
    pub n_measurements: usize,
    /// Set when the estimate did not come from a converged search.
    pub low_confidence: bool,
}

/// Localize one device by global-best PSO over the measurement negative
/// log-likelihood. The search runs in metric (x, y) over the map extent;
/// LoS class labels are re-derived per candidate from raycasting. With
/// `iterations = 0` the best initial particle is returned. Deterministic
/// for a fixed `cfg.seed`.
pub fn localize(
    device_id: usize,
    records: &[MeasurementRecord],
    channel: &LearnedChannel,
    map: &CityMap,
    cfg: &PsoConfig,
    min_measurements: usize,
    warm_start: Option<(f64, f64)>,
) -> Result<LocalizationResult> {
    cfg.validate()?;
    if records.len() < min_measurements {
        return Err(Error::EnvLearn(format!(
            "device {device_id}: localization needs at least {min_measurements} measurements, have {}",
            records.len()
        )));
    }
    let mut cache = LosCache::new();
    let result = localize_with_cache(device_id, records, channel, map, cfg, warm_start, &mut cache);
    Ok(result)
}

/// Cache-sharing variant for callers that localize repeatedly on one map.
pub fn localize_with_cache(
    device_id: usize,
    records: &[MeasurementRecord],
    channel: &LearnedChannel,
    map: &CityMap,
    cfg: &PsoConfig,
    warm_start: Option<(f64, f64)>,
    cache: &mut LosCache,
) -> LocalizationResult {
    let bounds = ((0.0, map.width_m()), (0.0, map.height_m()));
    let vmax = (
        cfg.velocity_clamp_frac * (bounds.0 .1 - bounds.0 .0),
        cfg.velocity_clamp_frac * (bounds.1 .1 - bounds.1 .0),
    );
    let mut rng = seed::rng(cfg.seed, "pso", device_id as u64);

    let mut positions: Vec<(f64, f64)> = (0..cfg.particles)
        .map(|_| {
            (
                rng.gen_range(bounds.0 .0..=bounds.0 .1),
                rng.gen_range(bounds.1 .0..=bounds.1 .1),
            )
        })
        .collect();
    if let Some(w) = warm_start {
        positions[0] = (
            w.0.clamp(bounds.0 .0, bounds.0 .1),
            w.1.clamp(bounds.1 .0, bounds.1 .1),
        );
    }
    let mut velocities: Vec<(f64, f64)> = (0..cfg.particles)
        .map(|_| {
            (
                rng.gen_range(-vmax.0..=vmax.0),
                rng.gen_range(-vmax.1..=vmax.1),
            )
        })
        .collect();

    let mut personal_best = positions.clone();
    let mut personal_best_val: Vec<f64> = positions
        .iter()
        .map(|&p| nll_cached(records, p, channel, map, cache))
        .collect();
    let mut gbest_idx = 0;
    for i in 1..cfg.particles {
        if personal_best_val[i] < personal_best_val[gbest_idx] {
            gbest_idx = i;
        }
    }
    let mut gbest = personal_best[gbest_idx];
    let mut gbest_val = personal_best_val[gbest_idx];

    for _ in 0..cfg.iterations {
        for i in 0..cfg.particles {
            let (r1x, r1y) = (rng.gen::<f64>(), rng.gen::<f64>());
            let (r2x, r2y) = (rng.gen::<f64>(), rng.gen::<f64>());
            let (px, py) = positions[i];
            let (bx, by) = personal_best[i];
            let mut vx = cfg.inertia * velocities[i].0
                + cfg.cognitive * r1x * (bx - px)
                + cfg.social * r2x * (gbest.0 - px);
            let mut vy = cfg.inertia * velocities[i].1
                + cfg.cognitive * r1y * (by - py)
                + cfg.social * r2y * (gbest.1 - py);
            vx = vx.clamp(-vmax.0, vmax.0);
            vy = vy.clamp(-vmax.1, vmax.1);
            velocities[i] = (vx, vy);
            let nx = (px + vx).clamp(bounds.0 .0, bounds.0 .1);
            let ny = (py + vy).clamp(bounds.1 .0, bounds.1 .1);
            positions[i] = (nx, ny);
            let val = nll_cached(records, (nx, ny), channel, map, cache);
            if val < personal_best_val[i] {
                personal_best_val[i] = val;
                personal_best[i] = (nx, ny);
                if val < gbest_val {
                    gbest_val = val;
                    gbest = (nx, ny);
                }
            }
        }
    }

    LocalizationResult {
        device_id,
        x_m: gbest.0,
        y_m: gbest.1,
        nll: gbest_val,
        n_measurements: records.len(),
        low_confidence: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::env::DeviceSpec;
    use crate::envlearn::{grid_search_nll, nll, synthesize_measurements};
    use crate::world::{Cell, CityMap, GridPos};
    use rand::Rng;

    fn open_map() -> CityMap {
        CityMap::from_rows(
            10.0,
            &vec![vec![0.0; 20]; 20],
            Cell::new(0, 0),
            Cell::new(19, 19),
        )
        .unwrap()
    }

    fn spread_positions(map: &CityMap, n: usize, rng: &mut impl Rng) -> Vec<GridPos> {
        (0..n)
            .map(|_| {
                GridPos::new(
                    rng.gen_range(0..map.width_cells),
                    rng.gen_range(0..map.height_cells),
                    60.0,
                )
            })
            .collect()
    }

    #[test]
    fn noiseless_localization_attains_the_true_position_likelihood() {
        let map = open_map();
        let truth = ChannelParams {
            sigma_los: 0.0,
            sigma_nlos: 0.0,
            ..ChannelParams::default()
        };
        let mut learned = crate::envlearn::LearnedChannel::exact(&truth);
        learned.sigma_los_db = 1.0;
        learned.sigma_nlos_db = 1.0;
        let dev = DeviceSpec {
            id: 0,
            cell: Cell::new(13, 6),
            data_init: 10.0,
            anchor: false,
        };
        let mut rng = crate::seed::rng(10, "pso0", 0);
        let ups = spread_positions(&map, 30, &mut rng);
        let records = synthesize_measurements(&map, &truth, &dev, &ups, &mut rng);
        let cfg = PsoConfig {
            iterations: 200,
            seed: 1,
            ..PsoConfig::default()
        };
        let result = localize(0, &records, &learned, &map, &cfg, 10, None).unwrap();
        let truth_nll = nll(&records, map.cell_center(dev.cell), &learned, &map);
        assert!(result.nll <= truth_nll + 1e-6, "{} vs {}", result.nll, truth_nll);
        let err = ((result.x_m - 135.0).powi(2) + (result.y_m - 65.0).powi(2)).sqrt();
        assert!(err < 10.0, "position error {err} m");
    }

    #[test]
    fn pso_beats_the_grid_oracle() {
        let map = open_map();
        let truth = ChannelParams::default();
        let learned = crate::envlearn::LearnedChannel::exact(&truth);
        for trial in 0..5u64 {
            let dev = DeviceSpec {
                id: 0,
                cell: Cell::new(3 + (trial as usize * 3) % 14, 16 - (trial as usize * 2) % 12),
                data_init: 10.0,
                anchor: false,
            };
            let mut rng = crate::seed::rng(11, "pso1", trial);
            let ups = spread_positions(&map, 120, &mut rng);
            let records = synthesize_measurements(&map, &truth, &dev, &ups, &mut rng);
            let cfg = PsoConfig {
                seed: trial,
                ..PsoConfig::default()
            };
            let result = localize(0, &records, &learned, &map, &cfg, 10, None).unwrap();
            let mut cache = crate::envlearn::LosCache::new();
            let (grid_best, _) = grid_search_nll(&records, &learned, &map, &mut cache);
            assert!(
                result.nll <= grid_best + 1e-6,
                "trial {trial}: pso {} grid {grid_best}",
                result.nll
            );
        }
    }

    #[test]
    fn zero_iterations_returns_the_best_initial_particle() {
        let map = open_map();
        let truth = ChannelParams::default();
        let learned = crate::envlearn::LearnedChannel::exact(&truth);
        let dev = DeviceSpec {
            id: 0,
            cell: Cell::new(10, 10),
            data_init: 10.0,
            anchor: false,
        };
        let mut rng = crate::seed::rng(12, "pso2", 0);
        let ups = spread_positions(&map, 40, &mut rng);
        let records = synthesize_measurements(&map, &truth, &dev, &ups, &mut rng);
        let cfg = PsoConfig {
            iterations: 0,
            seed: 9,
            ..PsoConfig::default()
        };
        let result = localize(0, &records, &learned, &map, &cfg, 10, None).unwrap();
        // Reproduce the initial particle cloud and check the minimum.
        let mut rng2 = crate::seed::rng(9, "pso", 0);
        let positions: Vec<(f64, f64)> = (0..cfg.particles)
            .map(|_| {
                (
                    rng2.gen_range(0.0..=map.width_m()),
                    rng2.gen_range(0.0..=map.height_m()),
                )
            })
            .collect();
        let best = positions
            .iter()
            .map(|&p| nll(&records, p, &learned, &map))
            .fold(f64::INFINITY, f64::min);
        assert!((result.nll - best).abs() < 1e-12);
    }

    #[test]
    fn localization_is_deterministic_and_in_bounds() {
        let map = open_map();
        let truth = ChannelParams::default();
        let learned = crate::envlearn::LearnedChannel::exact(&truth);
        let dev = DeviceSpec {
            id: 3,
            cell: Cell::new(1, 18),
            data_init: 10.0,
            anchor: false,
        };
        let mut rng = crate::seed::rng(13, "pso3", 0);
        let ups = spread_positions(&map, 60, &mut rng);
        let records = synthesize_measurements(&map, &truth, &dev, &ups, &mut rng);
        let cfg = PsoConfig {
            seed: 4,
            ..PsoConfig::default()
        };
        let a = localize(3, &records, &learned, &map, &cfg, 10, None).unwrap();
        let b = localize(3, &records, &learned, &map, &cfg, 10, None).unwrap();
        assert_eq!(a, b);
        assert!(a.x_m >= 0.0 && a.x_m <= map.width_m());
        assert!(a.y_m >= 0.0 && a.y_m <= map.height_m());
    }

    #[test]
    fn too_few_measurements_is_an_error() {
        let map = open_map();
        let learned = crate::envlearn::LearnedChannel::exact(&ChannelParams::default());
        let err = localize(0, &[], &learned, &map, &PsoConfig::default(), 10, None).unwrap_err();
        assert!(err.to_string().contains("at least 10"), "{err}");
    }
}
