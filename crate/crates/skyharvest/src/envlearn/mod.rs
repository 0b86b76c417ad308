//! Environment-model learning from flight measurements: fit the gain
//! function on anchor-device data, estimate per-class shadowing spread,
//! and localize unknown devices by particle-swarm search over the
//! measurement negative log-likelihood.

mod pso;

pub use pso::{localize, localize_with_cache, LocalizationResult, PsoConfig};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{rate_from_snr, snr_from_gain, ChannelParams, LinkSample};
use crate::env::{DeviceSpec, EnvConfig, LinkModel, MeasurementRecord};
use crate::error::{Error, Result};
use crate::nnkernel::{adam_update, AdamState, Linear, ParamSet};
use crate::world::{is_los, los_between, CityMap, GridPos};

/// Fitted shadowing spreads are floored here; a zero spread would break
/// the likelihood.
pub const SIGMA_FLOOR_DB: f64 = 1e-3;

/// Accumulated channel-gain measurements across all real-world episodes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub records: Vec<MeasurementRecord>,
}

impl MeasurementSet {
    pub fn new() -> MeasurementSet {
        MeasurementSet::default()
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = MeasurementRecord>) {
        self.records.extend(records);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn for_device(&self, device_id: usize) -> Vec<MeasurementRecord> {
        self.records
            .iter()
            .filter(|r| r.device_id == device_id)
            .copied()
            .collect()
    }

    /// One device's measurements whose implied SNR clears a quality
    /// floor. Localization runs on these: very weak records carry noisy
    /// class labels whose mismatch penalties riddle the likelihood with
    /// false minima.
    pub fn for_device_min_snr(
        &self,
        device_id: usize,
        radio: &RadioConstants,
        snr_floor: f64,
    ) -> Vec<MeasurementRecord> {
        self.records
            .iter()
            .filter(|r| {
                r.device_id == device_id
                    && crate::channel::snr_from_gain(radio.tx_power_w, radio.noise_power_w, r.gain_db)
                        >= snr_floor
            })
            .copied()
            .collect()
    }
}

/// Radio constants that are known system parameters, as opposed to the
/// propagation behavior that has to be learned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadioConstants {
    pub tx_power_w: f64,
    pub noise_power_w: f64,
    pub snr_threshold: f64,
}

impl From<&ChannelParams> for RadioConstants {
    fn from(p: &ChannelParams) -> Self {
        RadioConstants {
            tx_power_w: p.tx_power_w,
            noise_power_w: p.noise_power_w,
            snr_threshold: p.snr_threshold,
        }
    }
}

/// Which function family the gain model is fitted in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiModel {
    /// Per-class log-linear gain: beta + alpha * log10(d).
    LogLinear {
        alpha_los: f64,
        beta_los: f64,
        alpha_nlos: f64,
        beta_nlos: f64,
    },
    /// Small feed-forward net over (log10 d, elevation angle, class flag).
    Mlp {
        l1: Linear,
        l2: Linear,
        gain_mean: f64,
        gain_std: f64,
    },
}

impl PsiModel {
    /// Mean gain in dB for a distance, elevation angle and LoS class.
    pub fn gain_db(&self, distance_m: f64, elevation_rad: f64, los: bool) -> f64 {
        let d = distance_m.max(1.0);
        match self {
            PsiModel::LogLinear {
                alpha_los,
                beta_los,
                alpha_nlos,
                beta_nlos,
            } => {
                if los {
                    beta_los + alpha_los * d.log10()
                } else {
                    beta_nlos + alpha_nlos * d.log10()
                }
            }
            PsiModel::Mlp {
                l1,
                l2,
                gain_mean,
                gain_std,
            } => {
                let input = [d.log10(), elevation_rad, if los { 1.0 } else { 0.0 }];
                let h: Vec<f64> = l1.forward(&input).iter().map(|v| v.tanh()).collect();
                l2.forward(&h)[0] * gain_std + gain_mean
            }
        }
    }
}

/// The learned channel: fitted gain function, per-class shadowing
/// spreads, and the known radio constants. Drop-in replacement for the
/// ground-truth model when building simulated environments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnedChannel {
    pub psi: PsiModel,
    pub sigma_los_db: f64,
    pub sigma_nlos_db: f64,
    pub tx_power_w: f64,
    pub noise_power_w: f64,
    pub snr_threshold: f64,
    /// False when the class had no measurements and copies the other.
    pub los_fitted: bool,
    pub nlos_fitted: bool,
}

impl LearnedChannel {
    /// Exact model for a known ground truth; mainly for tests and
    /// differential comparisons.
    pub fn exact(params: &ChannelParams) -> LearnedChannel {
        LearnedChannel {
            psi: PsiModel::LogLinear {
                alpha_los: params.alpha_los,
                beta_los: params.beta_los,
                alpha_nlos: params.alpha_nlos,
                beta_nlos: params.beta_nlos,
            },
            sigma_los_db: params.sigma_los,
            sigma_nlos_db: params.sigma_nlos,
            tx_power_w: params.tx_power_w,
            noise_power_w: params.noise_power_w,
            snr_threshold: params.snr_threshold,
            los_fitted: true,
            nlos_fitted: true,
        }
    }

    pub fn sample_link(
        &self,
        map: &CityMap,
        a: GridPos,
        b: GridPos,
        rng: &mut impl Rng,
    ) -> LinkSample {
        let los = is_los(map, a, b);
        let pa = map.metric(a);
        let pb = map.metric(b);
        let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2))
            .sqrt();
        let phi = elevation_angle(d, (pa[2] - pb[2]).abs());
        let sigma = if los { self.sigma_los_db } else { self.sigma_nlos_db };
        let shadow = Normal::new(0.0, sigma).expect("valid sigma").sample(rng);
        let gain = self.psi.gain_db(d, phi, los) + shadow;
        let snr = snr_from_gain(self.tx_power_w, self.noise_power_w, gain);
        LinkSample {
            gain_db: gain,
            los,
            snr,
            rate: rate_from_snr(snr),
        }
    }
}

/// Elevation angle between endpoints: arcsin(height gap / distance).
pub fn elevation_angle(distance_m: f64, height_gap_m: f64) -> f64 {
    if distance_m <= 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    (height_gap_m / distance_m).clamp(-1.0, 1.0).asin()
}

/// Gain-model fitting options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Minimum anchor measurements before a fit is attempted.
    pub min_samples: usize,
    pub model: FitModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    LogLinear,
    Mlp,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_samples: 50,
            model: FitModel::LogLinear,
        }
    }
}

/// Memoized line-of-sight lookups keyed by (uav cell, altitude, target
/// cell). Candidate positions are rounded to their cell center for the
/// raycast, which keeps the class labels piecewise constant and cheap.
#[derive(Default)]
pub struct LosCache {
    map: HashMap<(usize, usize, u64, usize, usize), bool>,
}

impl LosCache {
    pub fn new() -> LosCache {
        LosCache::default()
    }

    pub fn los(&mut self, map: &CityMap, uav: GridPos, target_x: f64, target_y: f64) -> bool {
        let cell = map.cell_at(target_x, target_y);
        let key = (uav.ix, uav.iy, uav.altitude_m.to_bits(), cell.ix, cell.iy);
        if let Some(&v) = self.map.get(&key) {
            return v;
        }
        let (cx, cy) = map.cell_center(cell);
        let v = los_between(map, map.metric(uav), [cx, cy, 0.0]);
        self.map.insert(key, v);
        v
    }
}

/// Negative log-likelihood of a device's measurements at a candidate
/// ground position:
///
/// log(sigma_L^2 / sigma_N^2) * sum(w)
///   + sum(w / sigma_L^2 * |g - psi|^2)
///   + sum((1-w) / sigma_N^2 * |g - psi|^2)
///
/// where w is the per-measurement LoS indicator re-derived from the map.
pub fn nll_cached(
    records: &[MeasurementRecord],
    candidate: (f64, f64),
    channel: &LearnedChannel,
    map: &CityMap,
    cache: &mut LosCache,
) -> f64 {
    assert!(!records.is_empty(), "nll needs at least one measurement");
    // Spreads are floored so zero-noise models keep a finite likelihood.
    let sigma_los = channel.sigma_los_db.max(SIGMA_FLOOR_DB);
    let sigma_nlos = channel.sigma_nlos_db.max(SIGMA_FLOOR_DB);
    let var_los = sigma_los * sigma_los;
    let var_nlos = sigma_nlos * sigma_nlos;
    let log_ratio = (var_los / var_nlos).ln();
    let mut total = 0.0;
    for r in records {
        let up = map.metric(r.uav_pos);
        let dx = up[0] - candidate.0;
        let dy = up[1] - candidate.1;
        let d = (dx * dx + dy * dy + up[2] * up[2]).sqrt();
        let phi = elevation_angle(d, up[2]);
        let los = cache.los(map, r.uav_pos, candidate.0, candidate.1);
        let residual = r.gain_db - channel.psi.gain_db(d, phi, los);
        if los {
            total += log_ratio + residual * residual / var_los;
        } else {
            total += residual * residual / var_nlos;
        }
    }
    total
}

/// Uncached variant of [`nll_cached`].
pub fn nll(
    records: &[MeasurementRecord],
    candidate: (f64, f64),
    channel: &LearnedChannel,
    map: &CityMap,
) -> f64 {
    nll_cached(records, candidate, channel, map, &mut LosCache::new())
}

/// Exhaustive cell-center search over the whole map; the independent
/// check for the swarm optimizer. Returns (best nll, best position).
pub fn grid_search_nll(
    records: &[MeasurementRecord],
    channel: &LearnedChannel,
    map: &CityMap,
    cache: &mut LosCache,
) -> (f64, (f64, f64)) {
    let mut best = f64::INFINITY;
    let mut best_pos = map.cell_center(map.start_cell);
    for iy in 0..map.height_cells {
        for ix in 0..map.width_cells {
            let pos = map.cell_center(crate::world::Cell::new(ix, iy));
            let v = nll_cached(records, pos, channel, map, cache);
            if v < best {
                best = v;
                best_pos = pos;
            }
        }
    }
    (best, best_pos)
}

/// Fit the gain model and shadowing spreads on anchor-device
/// measurements. Class labels come from raycasting against the known
/// anchor positions. When one class has no data the other class's
/// parameters are copied and the class is flagged unfitted.
pub fn fit_channel(
    measurements: &MeasurementSet,
    devices: &[DeviceSpec],
    map: &CityMap,
    radio: RadioConstants,
    opts: &FitOptions,
) -> Result<LearnedChannel> {
    let mut samples: Vec<(f64, f64, f64, bool)> = Vec::new(); // (log10 d, phi, gain, los)
    for r in &measurements.records {
        let Some(dev) = devices.iter().find(|d| d.id == r.device_id && d.anchor) else {
            continue;
        };
        let up = map.metric(r.uav_pos);
        let (dx_pos, dy_pos) = map.cell_center(dev.cell);
        let dx = up[0] - dx_pos;
        let dy = up[1] - dy_pos;
        let d = (dx * dx + dy * dy + up[2] * up[2]).sqrt();
        let los = is_los(map, r.uav_pos, GridPos::new(dev.cell.ix, dev.cell.iy, 0.0));
        samples.push((d.max(1.0).log10(), elevation_angle(d, up[2]), r.gain_db, los));
    }
    if samples.len() < opts.min_samples {
        return Err(Error::EnvLearn(format!(
            "channel fit needs at least {} anchor measurements, have {}",
            opts.min_samples,
            samples.len()
        )));
    }

    let psi = match opts.model {
        FitModel::LogLinear => fit_log_linear(&samples)?,
        FitModel::Mlp => fit_mlp(&samples),
    };

    // Residual spread per class.
    let mut resid = (Vec::new(), Vec::new());
    for &(logd, phi, gain, los) in &samples {
        let d = 10f64.powf(logd);
        let r = gain - psi.gain_db(d, phi, los);
        if los {
            resid.0.push(r);
        } else {
            resid.1.push(r);
        }
    }
    let los_fitted = !resid.0.is_empty();
    let nlos_fitted = !resid.1.is_empty();
    let sigma_los = sample_std(&resid.0);
    let sigma_nlos = sample_std(&resid.1);
    let (sigma_los, sigma_nlos) = match (sigma_los, sigma_nlos) {
        (Some(l), Some(n)) => (l, n),
        (Some(l), None) => (l, l),
        (None, Some(n)) => (n, n),
        (None, None) => {
            return Err(Error::EnvLearn(
                "channel fit needs at least two residuals in some class".into(),
            ))
        }
    };
    Ok(LearnedChannel {
        psi,
        sigma_los_db: sigma_los.max(SIGMA_FLOOR_DB),
        sigma_nlos_db: sigma_nlos.max(SIGMA_FLOOR_DB),
        tx_power_w: radio.tx_power_w,
        noise_power_w: radio.noise_power_w,
        snr_threshold: radio.snr_threshold,
        los_fitted,
        nlos_fitted,
    })
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Some(var.sqrt())
}

/// Per-class least squares of gain on log10(distance).
fn fit_log_linear(samples: &[(f64, f64, f64, bool)]) -> Result<PsiModel> {
    let fit_class = |los: bool| -> Result<Option<(f64, f64)>> {
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| s.3 == los)
            .map(|s| (s.0, s.2))
            .collect();
        if pts.is_empty() {
            return Ok(None);
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
        let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
        if sxx < 1e-12 {
            if pts.len() == 1 {
                // A lone measurement pins the intercept at its distance.
                return Ok(Some((0.0, my)));
            }
            return Err(Error::EnvLearn(
                "anchor measurements do not span distinct distances".into(),
            ));
        }
        let alpha = sxy / sxx;
        Ok(Some((alpha, my - alpha * mx)))
    };
    let los = fit_class(true)?;
    let nlos = fit_class(false)?;
    let (al, bl, an, bn) = match (los, nlos) {
        (Some((al, bl)), Some((an, bn))) => (al, bl, an, bn),
        (Some((al, bl)), None) => (al, bl, al, bl),
        (None, Some((an, bn))) => (an, bn, an, bn),
        (None, None) => unreachable!("min_samples > 0"),
    };
    Ok(PsiModel::LogLinear {
        alpha_los: al,
        beta_los: bl,
        alpha_nlos: an,
        beta_nlos: bn,
    })
}

/// One-hidden-layer net on (log10 d, elevation, class), tanh activation,
/// trained full-batch by Adam on normalized gains.
fn fit_mlp(samples: &[(f64, f64, f64, bool)]) -> PsiModel {
    const HIDDEN: usize = 32;
    const EPOCHS: usize = 400;
    let mut rng = crate::seed::rng(0x5100_F17, "psi-mlp", samples.len() as u64);
    let n = samples.len() as f64;
    let gain_mean = samples.iter().map(|s| s.2).sum::<f64>() / n;
    let gain_var = samples.iter().map(|s| (s.2 - gain_mean).powi(2)).sum::<f64>() / n;
    let gain_std = gain_var.sqrt().max(1e-6);

    struct Net {
        l1: Linear,
        l2: Linear,
    }
    impl ParamSet for Net {
        fn visit(&self, f: &mut dyn FnMut(&str, &crate::nnkernel::Tensor)) {
            self.l1.visit(&mut |n, t| f(&format!("l1.{n}"), t));
            self.l2.visit(&mut |n, t| f(&format!("l2.{n}"), t));
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut crate::nnkernel::Tensor)) {
            self.l1.visit_mut(f);
            self.l2.visit_mut(f);
        }
    }
    let mut net = Net {
        l1: Linear::init(3, HIDDEN, &mut rng),
        l2: Linear::init(HIDDEN, 1, &mut rng),
    };
    let mut adam = AdamState::new(net.flatten().len(), 1e-2);
    for _ in 0..EPOCHS {
        let mut grads = Net {
            l1: Linear::zeros(3, HIDDEN),
            l2: Linear::zeros(HIDDEN, 1),
        };
        for &(logd, phi, gain, los) in samples {
            let input = [logd, phi, if los { 1.0 } else { 0.0 }];
            let pre = net.l1.forward(&input);
            let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
            let out = net.l2.forward(&h)[0];
            let target = (gain - gain_mean) / gain_std;
            let dout = [2.0 * (out - target) / n];
            let mut dh = vec![0.0; HIDDEN];
            net.l2.backward(&h, &dout, &mut dh, &mut grads.l2);
            let dpre: Vec<f64> = dh
                .iter()
                .zip(&h)
                .map(|(&g, &hv)| g * (1.0 - hv * hv))
                .collect();
            let mut dinput = vec![0.0; 3];
            net.l1.backward(&input, &dpre, &mut dinput, &mut grads.l1);
        }
        let mut flat = net.flatten();
        adam_update(&mut flat.values, &grads.flatten().values, &mut adam);
        net.load(&flat).expect("same layout");
    }
    PsiModel::Mlp {
        l1: net.l1,
        l2: net.l2,
        gain_mean,
        gain_std,
    }
}

/// Assemble the simulated environment: anchors keep their true cells,
/// unknown devices take their estimated positions, link sampling runs
/// through the learned channel. Data volumes and UAV specs carry over.
pub fn build_simulated_env(
    real: &EnvConfig,
    learned: LearnedChannel,
    estimates: &std::collections::BTreeMap<usize, (f64, f64)>,
) -> Result<EnvConfig> {
    let mut devices = Vec::with_capacity(real.devices.len());
    for dev in &real.devices {
        if dev.anchor {
            devices.push(*dev);
        } else {
            let (x, y) = estimates.get(&dev.id).copied().ok_or_else(|| {
                Error::EnvLearn(format!("no position estimate for unknown device {}", dev.id))
            })?;
            devices.push(DeviceSpec {
                cell: real.map.cell_at(x, y),
                ..*dev
            });
        }
    }
    Ok(EnvConfig {
        map: real.map.clone(),
        devices,
        uavs: real.uavs.clone(),
        link_model: LinkModel::Learned(learned),
        dt: real.dt,
        measure_all_links: real.measure_all_links,
    })
}

/// Draw synthetic measurements of one device from the ground-truth
/// channel at the given UAV positions; evaluation and test aid.
pub fn synthesize_measurements(
    map: &CityMap,
    params: &ChannelParams,
    device: &DeviceSpec,
    uav_positions: &[GridPos],
    rng: &mut impl Rng,
) -> Vec<MeasurementRecord> {
    let dev_pos = GridPos::new(device.cell.ix, device.cell.iy, 0.0);
    uav_positions
        .iter()
        .enumerate()
        .map(|(t, &up)| {
            let link = crate::channel::sample_link(params, map, up, dev_pos, rng);
            MeasurementRecord {
                uav_id: 0,
                t,
                uav_pos: up,
                device_id: device.id,
                gain_db: link.gain_db,
            }
        })
        .collect()
}
