//! Experiment configuration: a JSON file referencing a map, the radio
//! parameters, the fleet, and all learner/federation knobs, validated
//! against every module invariant at load time. Also ships the built-in
//! scenario fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::env::{DeviceSpec, Env, EnvConfig, LinkModel, UavSpec};
use crate::envlearn::{FitOptions, PsoConfig};
use crate::error::{Error, Result};
use crate::federation::{FedConfig, FedSetup};
use crate::learner::LearnerConfig;
use crate::world::{load_map_file, CityMap};

fn default_dt() -> f64 {
    1.0
}
fn default_min_meas() -> usize {
    10
}
fn default_min_loc_snr() -> f64 {
    0.05
}
fn default_seed() -> u64 {
    1
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// On-disk experiment description. `map_path` is resolved relative to
/// the config file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub map_path: PathBuf,
    #[serde(default)]
    pub channel: ChannelParams,
    pub uavs: Vec<UavSpec>,
    /// Overrides the map file's device list when present.
    #[serde(default)]
    pub devices: Option<Vec<DeviceSpec>>,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub pso: PsoConfig,
    #[serde(default = "default_min_meas")]
    pub min_device_measurements: usize,
    #[serde(default = "default_min_loc_snr")]
    pub min_localization_snr: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub measure_all_links: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

/// A loaded and validated experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub env_cfg: EnvConfig,
}

impl Experiment {
    /// Load a config file, resolve the map, and validate everything.
    pub fn load(path: impl AsRef<Path>) -> Result<Experiment> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Experiment::from_config(config, base)
    }

    pub fn from_config(config: ExperimentConfig, base_dir: &Path) -> Result<Experiment> {
        let map_path = if config.map_path.is_absolute() {
            config.map_path.clone()
        } else {
            base_dir.join(&config.map_path)
        };
        let (map, map_devices) = load_map_file(&map_path)?;
        let devices = config.devices.clone().unwrap_or(map_devices);
        if devices.is_empty() {
            return Err(Error::Config("devices must not be empty".into()));
        }
        config.channel.validate()?;
        config.learner.validate()?;
        config.fed.validate()?;
        config.pso.validate()?;
        if !(config.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", config.dt)));
        }
        let env_cfg = EnvConfig {
            map: Arc::new(map),
            devices,
            uavs: config.uavs.clone(),
            link_model: LinkModel::Truth(config.channel),
            dt: config.dt,
            measure_all_links: config.measure_all_links,
        };
        // Dry-run construction checks mobility invariants (altitudes,
        // batteries, reachability).
        Env::new(env_cfg.clone(), 0)?;
        Ok(Experiment { config, env_cfg })
    }

    pub fn fed_setup(&self, seed_override: Option<u64>) -> FedSetup {
        FedSetup {
            real_env_cfg: self.env_cfg.clone(),
            learner_cfg: self.config.learner,
            fed_cfg: self.config.fed.clone(),
            fit_opts: self.config.fit.clone(),
            pso_cfg: self.config.pso,
            min_device_measurements: self.config.min_device_measurements,
            min_localization_snr: self.config.min_localization_snr,
            master_seed: seed_override.unwrap_or(self.config.seed),
        }
    }
}

/// Built-in scenario fixtures. The committed files under `fixtures/` are
/// generated from these builders; a test keeps them in sync.
pub mod fixtures {
    use super::*;
    use crate::world::{save_map_file, Cell};

    /// Block-pattern city: inside every 8x8 tile the 3x3 core holds a
    /// building whose height cycles through 15/25/35/45 m by tile index.
    fn block_city(width: usize, height: usize, cell_size_m: f64, start: Cell, terminal: Cell) -> CityMap {
        let mut rows = vec![vec![0.0; width]; height];
        for (iy, row) in rows.iter_mut().enumerate() {
            for (ix, cell) in row.iter_mut().enumerate() {
                let (bx, by) = (ix % 8, iy % 8);
                if (2..5).contains(&bx) && (2..5).contains(&by) {
                    let tile = ix / 8 + 2 * (iy / 8);
                    *cell = 15.0 + 10.0 * (tile % 4) as f64;
                }
            }
        }
        CityMap::from_rows(cell_size_m, &rows, start, terminal).expect("fixture map is valid")
    }

    fn devices(cells: &[(usize, usize)], anchors: &[usize], data_init: f64) -> Vec<DeviceSpec> {
        cells
            .iter()
            .enumerate()
            .map(|(id, &(ix, iy))| DeviceSpec {
                id,
                cell: Cell::new(ix, iy),
                data_init,
                anchor: anchors.contains(&id),
            })
            .collect()
    }

    /// Return-base scenario: 600 m x 800 m at 10 m cells, three UAVs
    /// starting and ending at the map center, ten devices with 16000
    /// data units, 60 battery units each.
    pub fn rbm_map() -> (CityMap, Vec<DeviceSpec>) {
        let map = block_city(60, 80, 10.0, Cell::new(30, 40), Cell::new(30, 40));
        let cells = [
            (8, 10),
            (25, 15),
            (45, 12),
            (12, 30),
            (49, 35),
            (30, 55),
            (9, 60),
            (40, 65),
            (55, 70),
            (20, 45),
        ];
        let devs = devices(&cells, &[0, 4, 7], 16_000.0);
        (map, devs)
    }

    pub fn rbm_experiment() -> ExperimentConfig {
        ExperimentConfig {
            map_path: PathBuf::from("maps/rbm_map.json"),
            channel: ChannelParams::default(),
            uavs: vec![
                UavSpec { id: 0, altitude_m: 55.0, battery_init: 60.0 },
                UavSpec { id: 1, altitude_m: 60.0, battery_init: 60.0 },
                UavSpec { id: 2, altitude_m: 65.0, battery_init: 60.0 },
            ],
            devices: None,
            learner: LearnerConfig::default(),
            fed: FedConfig::default(),
            fit: FitOptions::default(),
            pso: PsoConfig::default(),
            min_device_measurements: 10,
            min_localization_snr: 0.05,
            dt: 1.0,
            measure_all_links: false,
            seed: 1,
            out_dir: PathBuf::from("out/rbm"),
        }
    }

    /// Reach-destination scenario: roughly 1 km x 1.2 km, corner to
    /// corner. 30 m cells keep the crossing within the 80-unit battery.
    pub fn rdm_map() -> (CityMap, Vec<DeviceSpec>) {
        let map = block_city(34, 40, 30.0, Cell::new(1, 1), Cell::new(32, 38));
        let cells = [
            (6, 8),
            (14, 5),
            (25, 7),
            (8, 17),
            (17, 15),
            (30, 18),
            (9, 28),
            (21, 26),
            (14, 33),
            (27, 34),
        ];
        let devs = devices(&cells, &[1, 4, 8], 20_000.0);
        (map, devs)
    }

    pub fn rdm_experiment() -> ExperimentConfig {
        ExperimentConfig {
            map_path: PathBuf::from("maps/rdm_map.json"),
            uavs: vec![
                UavSpec { id: 0, altitude_m: 55.0, battery_init: 80.0 },
                UavSpec { id: 1, altitude_m: 60.0, battery_init: 80.0 },
                UavSpec { id: 2, altitude_m: 65.0, battery_init: 80.0 },
            ],
            out_dir: PathBuf::from("out/rdm"),
            ..rbm_experiment()
        }
    }

    /// Desk-scale scenario for fast end-to-end runs: 200 m x 200 m, two
    /// UAVs, four devices (two anchors), 25 battery units. Every device
    /// sits within round-trip range of the central start so the policy
    /// ceiling clearly separates from random wandering; uneven buffer
    /// sizes and distinct collection radii give the task one dominant
    /// role split, which keeps independently trained learners in the
    /// same solution basin.
    pub fn desk_map() -> (CityMap, Vec<DeviceSpec>) {
        let mut rows = vec![vec![0.0; 20]; 20];
        for iy in 4..6 {
            for ix in 4..6 {
                rows[iy][ix] = 30.0;
            }
        }
        for iy in 12..14 {
            for ix in 13..15 {
                rows[iy][ix] = 30.0;
            }
        }
        let map = CityMap::from_rows(10.0, &rows, Cell::new(10, 10), Cell::new(10, 10))
            .expect("fixture map is valid");
        let cells = [(6, 15), (15, 13), (5, 7), (14, 6)];
        let mut devs = devices(&cells, &[1, 2], 20.0);
        devs[0].data_init = 120.0;
        devs[1].data_init = 80.0;
        (map, devs)
    }

    pub fn desk_experiment() -> ExperimentConfig {
        ExperimentConfig {
            map_path: PathBuf::from("maps/desk_map.json"),
            // Collection requires flying within a few cells of a device.
            channel: ChannelParams { snr_threshold: 33.0, ..ChannelParams::default() },
            uavs: vec![
                UavSpec { id: 0, altitude_m: 12.0, battery_init: 25.0 },
                UavSpec { id: 1, altitude_m: 24.0, battery_init: 25.0 },
            ],
            devices: None,
            learner: LearnerConfig {
                epsilon_end: 0.3,
                batch_episodes: 16,
                hidden_dim: 16,
                embed_dim: 8,
                hypernet_hidden: 16,
                buffer_capacity: 500,
                epsilon_decay_steps: 30_000,
                gamma: 0.95,
                learning_rate: 5e-4,
                ..LearnerConfig::default()
            },
            fed: FedConfig {
                learners: 2,
                aggregation_period: 50,
                episodes_per_iteration: 300,
                real_world_episodes: 10,
                // Light exploration on real flights diversifies the
                // measurement geometry for localization.
                real_epsilon: 0.25,
                ..FedConfig::default()
            },
            fit: FitOptions { min_samples: 30, ..FitOptions::default() },
            pso: PsoConfig { particles: 100, iterations: 150, ..PsoConfig::default() },
            min_device_measurements: 10,
            min_localization_snr: 0.05,
            dt: 1.0,
            measure_all_links: true,
            seed: 1,
            out_dir: PathBuf::from("out/desk"),
        }
    }

    /// Write every fixture (maps and experiment configs) under `dir`.
    pub fn write_all(dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let maps = dir.join("maps");
        fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
        for (name, (map, devs)) in [
            ("rbm_map.json", rbm_map()),
            ("rdm_map.json", rdm_map()),
            ("desk_map.json", desk_map()),
        ] {
            save_map_file(maps.join(name), &map, &devs)?;
        }
        for (name, cfg) in [
            ("rbm.json", rbm_experiment()),
            ("rdm.json", rdm_experiment()),
            ("desk.json", desk_experiment()),
        ] {
            let path = dir.join(name);
            let mut body = serde_json::to_string_pretty(&cfg)
                .map_err(|e| Error::parse(&path, e.to_string()))?;
            body.push('\n');
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
