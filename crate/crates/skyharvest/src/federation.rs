//! The model-aided federated training loop: per-UAV learners in private
//! simulated environments, periodic parameter averaging, and the outer
//! alternation of real-world rollouts, environment learning, and
//! simulated training.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::env::{Env, EnvConfig, LinkModel};
use crate::envlearn::{
    fit_channel, localize_with_cache, FitOptions, LearnedChannel, LocalizationResult, LosCache,
    MeasurementSet, PsoConfig, RadioConstants,
};
use crate::error::{Error, Result};
use crate::learner::{
    greedy_rollout, run_episode, EpsilonSchedule, Learner, LearnerConfig, LearnerMode, NetDims,
    Networks, RolloutOutcome,
};
use crate::nnkernel::{ParamSet, ParamVector};
use crate::seed;

/// Outer-loop configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    /// Number of federated learners (one per UAV in the full setup).
    pub learners: usize,
    /// Episodes between aggregation rounds.
    pub aggregation_period: usize,
    /// Simulated episodes per learner per outer iteration.
    pub episodes_per_iteration: usize,
    /// Real-world episodes, one per outer iteration.
    pub real_world_episodes: usize,
    /// Drop buffered experience when the simulated world is rebuilt.
    pub reset_buffers: bool,
    /// Exploration during real-world rollouts (greedy by default).
    pub real_epsilon: f64,
    /// Run learners on threads instead of sequentially.
    pub concurrent: bool,
    /// Explicit per-learner seeds; derived from the master seed if empty.
    pub learner_seeds: Vec<u64>,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            learners: 3,
            aggregation_period: 50,
            episodes_per_iteration: 1000,
            real_world_episodes: 30,
            reset_buffers: false,
            real_epsilon: 0.0,
            concurrent: false,
            learner_seeds: Vec::new(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learners == 0 {
            return Err(Error::Config("fed learners must be >= 1".into()));
        }
        if self.aggregation_period == 0 {
            return Err(Error::Config("fed aggregation_period must be >= 1".into()));
        }
        if !self.learner_seeds.is_empty() && self.learner_seeds.len() != self.learners {
            return Err(Error::Config(format!(
                "fed learner_seeds has {} entries for {} learners",
                self.learner_seeds.len(),
                self.learners
            )));
        }
        if !(0.0..=1.0).contains(&self.real_epsilon) {
            return Err(Error::Config("fed real_epsilon must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Elementwise mean of parameter vectors with identical layouts.
///
/// Computed as first + mean(residuals) so that averaging identical
/// vectors returns them bit-exactly (a plain sum divided by the count
/// would not).
pub fn aggregate(params: &[ParamVector]) -> Result<ParamVector> {
    let first = params
        .first()
        .ok_or_else(|| Error::Runtime("aggregate needs at least one parameter vector".into()))?;
    for p in &params[1..] {
        if p.layout != first.layout {
            return Err(Error::Runtime("aggregate: parameter layout mismatch".into()));
        }
    }
    let mut residual = first.zeros_like();
    for p in &params[1..] {
        for ((r, v), base) in residual.values.iter_mut().zip(&p.values).zip(&first.values) {
            *r += v - base;
        }
    }
    let inv = 1.0 / params.len() as f64;
    let mut mean = first.clone();
    for (m, r) in mean.values.iter_mut().zip(&residual.values) {
        *m += r * inv;
    }
    Ok(mean)
}

/// Everything a federated run needs up front.
#[derive(Clone, Debug)]
pub struct FedSetup {
    pub real_env_cfg: EnvConfig,
    pub learner_cfg: LearnerConfig,
    pub fed_cfg: FedConfig,
    pub fit_opts: FitOptions,
    pub pso_cfg: PsoConfig,
    /// Minimum measurements before a device is localized.
    pub min_device_measurements: usize,
    /// Implied-SNR floor for measurements used in localization.
    pub min_localization_snr: f64,
    pub master_seed: u64,
}

/// Per-iteration log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub real_world_episodes: usize,
    pub collection_ratio: f64,
    pub mean_loss: Option<f64>,
    pub mean_localization_error_m: Option<f64>,
}

struct LearnerSlot {
    learner: Learner,
    env: Option<Env>,
    losses: Vec<f64>,
}

/// A running instance of the outer loop. Drive it with
/// [`FedRun::outer_iteration`] once per real-world episode.
pub struct FedRun {
    setup: FedSetup,
    dims: NetDims,
    global: ParamVector,
    policy: Networks,
    real_env: Env,
    real_rng: rand_chacha::ChaCha8Rng,
    slots: Vec<LearnerSlot>,
    measurements: MeasurementSet,
    estimates: BTreeMap<usize, (f64, f64)>,
    low_confidence: BTreeMap<usize, bool>,
    learned: Option<LearnedChannel>,
    iteration: usize,
    simulated_episodes: u64,
    pub metrics: Vec<IterationMetrics>,
    pub localizations: Vec<LocalizationResult>,
}

impl FedRun {
    pub fn new(setup: FedSetup) -> Result<FedRun> {
        setup.fed_cfg.validate()?;
        setup.learner_cfg.validate()?;
        setup.pso_cfg.validate()?;
        let master = setup.master_seed;
        let real_env = Env::new(setup.real_env_cfg.clone(), seed::derive(master, "real-env", 0))?;
        let dims = NetDims::of_env(&real_env);
        let slots: Vec<LearnerSlot> = (0..setup.fed_cfg.learners)
            .map(|i| {
                let learner_seed = setup
                    .fed_cfg
                    .learner_seeds
                    .get(i)
                    .copied()
                    .unwrap_or_else(|| seed::derive(master, "learner-seed", i as u64));
                LearnerSlot {
                    learner: Learner::new(setup.learner_cfg, dims, learner_seed),
                    env: None,
                    losses: Vec::new(),
                }
            })
            .collect();
        // The aggregator initializes the global model; every learner
        // starts from that same model.
        let global = {
            let mut rng = seed::rng(master, "global-init", 0);
            Networks::init(&setup.learner_cfg, &dims, &mut rng).flatten()
        };
        let mut run = FedRun {
            policy: {
                let mut rng = seed::rng(master, "global-init", 0);
                Networks::init(&setup.learner_cfg, &dims, &mut rng)
            },
            real_rng: seed::rng(master, "real-rollout", 0),
            slots,
            dims,
            real_env,
            measurements: MeasurementSet::new(),
            estimates: BTreeMap::new(),
            low_confidence: BTreeMap::new(),
            learned: None,
            iteration: 0,
            simulated_episodes: 0,
            metrics: Vec::new(),
            localizations: Vec::new(),
            global,
            setup,
        };
        run.broadcast()?;
        Ok(run)
    }

    pub fn global_params(&self) -> &ParamVector {
        &self.global
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn real_episodes(&self) -> usize {
        self.iteration
    }

    pub fn simulated_episodes(&self) -> u64 {
        self.simulated_episodes
    }

    pub fn measurements(&self) -> &MeasurementSet {
        &self.measurements
    }

    pub fn learned_channel(&self) -> Option<&LearnedChannel> {
        self.learned.as_ref()
    }

    /// Install the global model into every learner. Target networks are
    /// re-synced too: after averaging, a stale per-learner target would
    /// pull the shared parameters back toward that learner's old
    /// solution, and the learners would never settle into one basin.
    fn broadcast(&mut self) -> Result<()> {
        for slot in &mut self.slots {
            slot.learner.import_params(&self.global)?;
            slot.learner.sync_targets();
        }
        self.policy.load(&self.global)
    }

    /// Run one outer iteration: a real-world episode with the global
    /// policy, environment learning on all accumulated measurements, and
    /// one round of federated training in the rebuilt simulations.
    pub fn outer_iteration(&mut self) -> Result<&IterationMetrics> {
        // 1) Real-world experiment.
        self.policy.load(&self.global)?;
        let real_schedule = EpsilonSchedule {
            start: self.setup.fed_cfg.real_epsilon,
            end: self.setup.fed_cfg.real_epsilon,
            decay_steps: 1,
        };
        let outcome: RolloutOutcome = run_episode(
            &self.policy.agent,
            &mut self.real_env,
            &real_schedule,
            0,
            &mut self.real_rng,
        );
        self.measurements.extend(outcome.measurements.iter().copied());
        let collection_ratio = outcome.collection_ratio;

        // 2) Learn the environment and rebuild the simulations.
        self.learn_environment()?;
        let sim_cfg = self.simulated_config()?;
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let env_seed = seed::derive(
                self.setup.master_seed,
                "sim-env",
                (self.iteration as u64) << 16 | i as u64,
            );
            slot.env = Some(Env::new(sim_cfg.clone(), env_seed)?);
            if self.setup.fed_cfg.reset_buffers {
                slot.learner.buffer =
                    crate::learner::EpisodeBuffer::new(self.setup.learner_cfg.buffer_capacity);
            }
            slot.losses.clear();
        }

        // 3) Simulated-world experiment with periodic aggregation.
        let total = self.setup.fed_cfg.episodes_per_iteration;
        let period = self.setup.fed_cfg.aggregation_period;
        let mut done = 0;
        while done < total {
            let chunk = period.min(total - done);
            self.run_chunk(chunk);
            done += chunk;
            let params: Vec<ParamVector> = self
                .slots
                .iter()
                .map(|s| s.learner.export_params())
                .collect();
            self.global = aggregate(&params)?;
            self.broadcast()?;
        }
        self.simulated_episodes += (total * self.slots.len()) as u64;

        let losses: Vec<f64> = self.slots.iter().flat_map(|s| s.losses.iter().copied()).collect();
        let mean_loss = if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        };
        let mean_loc_err = self.mean_localization_error();
        self.iteration += 1;
        self.metrics.push(IterationMetrics {
            iteration: self.iteration - 1,
            real_world_episodes: self.iteration,
            collection_ratio,
            mean_loss,
            mean_localization_error_m: mean_loc_err,
        });
        Ok(self.metrics.last().expect("just pushed"))
    }

    fn run_chunk(&mut self, episodes: usize) {
        if self.setup.fed_cfg.concurrent {
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for slot in self.slots.iter_mut() {
                    handles.push(scope.spawn(move || run_slot_episodes(slot, episodes)));
                }
                for h in handles {
                    h.join().expect("learner thread panicked");
                }
            });
        } else {
            for slot in self.slots.iter_mut() {
                run_slot_episodes(slot, episodes);
            }
        }
    }

    /// Fit the channel and localize unknown devices on everything
    /// gathered so far. Falls back to the previous model (or a wide
    /// prior) when the fit cannot run yet.
    fn learn_environment(&mut self) -> Result<()> {
        let real = &self.setup.real_env_cfg;
        let radio = match &real.link_model {
            LinkModel::Truth(p) => RadioConstants::from(p),
            LinkModel::Learned(l) => RadioConstants {
                tx_power_w: l.tx_power_w,
                noise_power_w: l.noise_power_w,
                snr_threshold: l.snr_threshold,
            },
        };
        match fit_channel(
            &self.measurements,
            &real.devices,
            &real.map,
            radio,
            &self.setup.fit_opts,
        ) {
            Ok(learned) => self.learned = Some(learned),
            Err(e) => {
                if self.learned.is_none() {
                    self.learned = Some(fallback_prior(radio));
                }
                // Keep the previous model otherwise; early iterations can
                // legitimately lack data.
                let _ = e;
            }
        }
        let learned = self.learned.clone().expect("set above");

        self.localizations.clear();
        let mut cache = LosCache::new();
        for dev in real.devices.iter().filter(|d| !d.anchor) {
            let records = self.measurements.for_device_min_snr(
                dev.id,
                &radio,
                self.setup.min_localization_snr,
            );
            if records.len() < self.setup.min_device_measurements {
                let entry = self.estimates.entry(dev.id).or_insert_with(|| {
                    // First guess: uniform over the map, flagged.
                    let mut rng = seed::rng(self.setup.master_seed, "loc-guess", dev.id as u64);
                    (
                        rng.gen_range(0.0..real.map.width_m()),
                        rng.gen_range(0.0..real.map.height_m()),
                    )
                });
                self.low_confidence.insert(dev.id, true);
                self.localizations.push(LocalizationResult {
                    device_id: dev.id,
                    x_m: entry.0,
                    y_m: entry.1,
                    nll: f64::NAN,
                    n_measurements: records.len(),
                    low_confidence: true,
                });
                continue;
            }
            let pso = PsoConfig {
                seed: seed::derive(
                    self.setup.master_seed,
                    "pso",
                    (self.iteration as u64) << 16 | dev.id as u64,
                ),
                ..self.setup.pso_cfg
            };
            let warm = self.estimates.get(&dev.id).copied();
            let result = localize_with_cache(
                dev.id,
                &records,
                &learned,
                &real.map,
                &pso,
                warm,
                &mut cache,
            );
            self.estimates.insert(dev.id, (result.x_m, result.y_m));
            self.low_confidence.insert(dev.id, false);
            self.localizations.push(result);
        }
        Ok(())
    }

    fn simulated_config(&self) -> Result<EnvConfig> {
        let learned = self
            .learned
            .clone()
            .ok_or_else(|| Error::Runtime("no learned channel".into()))?;
        crate::envlearn::build_simulated_env(&self.setup.real_env_cfg, learned, &self.estimates)
    }

    /// Mean distance between estimates and true unknown-device positions;
    /// evaluation-only, the truth never feeds back into training.
    fn mean_localization_error(&self) -> Option<f64> {
        let real = &self.setup.real_env_cfg;
        let mut errs = Vec::new();
        for dev in real.devices.iter().filter(|d| !d.anchor) {
            if let Some(&(x, y)) = self.estimates.get(&dev.id) {
                let (tx, ty) = real.map.cell_center(dev.cell);
                errs.push(((x - tx).powi(2) + (y - ty).powi(2)).sqrt());
            }
        }
        if errs.is_empty() {
            None
        } else {
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
    }

    /// Greedy evaluation of the current global policy in the ground-truth
    /// environment, without consuming the run's random streams.
    pub fn evaluate_global(&mut self, eval_seed: u64) -> Result<RolloutOutcome> {
        self.policy.load(&self.global)?;
        let mut env = Env::new(self.setup.real_env_cfg.clone(), eval_seed)?;
        Ok(greedy_rollout(&self.policy.agent, &mut env))
    }
}

fn run_slot_episodes(slot: &mut LearnerSlot, episodes: usize) {
    let env = slot.env.as_mut().expect("simulated environment not built");
    for _ in 0..episodes {
        slot.learner.run_training_episode(env);
        if slot.learner.buffer.len() >= slot.learner.cfg.batch_episodes {
            let loss = slot.learner.train_step().expect("buffer checked");
            slot.losses.push(loss);
        }
    }
}

/// Wide engineering prior used before the first successful fit.
fn fallback_prior(radio: RadioConstants) -> LearnedChannel {
    LearnedChannel::exact(&ChannelParams {
        alpha_los: -20.0,
        beta_los: -40.0,
        sigma_los: 6.0,
        alpha_nlos: -30.0,
        beta_nlos: -50.0,
        sigma_nlos: 8.0,
        tx_power_w: radio.tx_power_w,
        noise_power_w: radio.noise_power_w,
        snr_threshold: radio.snr_threshold,
    })
}

/// Convenience driver: the full outer loop, returning the final global
/// parameters and the per-iteration metrics.
pub fn run_algorithm(setup: FedSetup) -> Result<(ParamVector, Vec<IterationMetrics>)> {
    let mut run = FedRun::new(setup)?;
    for _ in 0..run.setup.fed_cfg.real_world_episodes {
        run.outer_iteration()?;
    }
    let metrics = run.metrics.clone();
    Ok((run.global, metrics))
}

/// Baseline algorithms for comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Train directly in the real environment; every episode is real.
    QmixReal,
    /// Independent learners in the real environment, no mixer.
    IqlReal,
    /// The model-aided loop with a single learner.
    ModelAidedQmix,
}

/// Run a baseline. Real-mode baselines log one metrics row per training
/// episode; the model-aided baseline logs one row per outer iteration.
pub fn run_baseline(
    mode: BaselineMode,
    mut setup: FedSetup,
    episodes: usize,
) -> Result<(ParamVector, Vec<IterationMetrics>)> {
    match mode {
        BaselineMode::ModelAidedQmix => {
            setup.fed_cfg.learners = 1;
            setup.fed_cfg.learner_seeds.truncate(1);
            run_algorithm(setup)
        }
        BaselineMode::QmixReal | BaselineMode::IqlReal => {
            let mut learner_cfg = setup.learner_cfg;
            learner_cfg.mode = match mode {
                BaselineMode::QmixReal => LearnerMode::Qmix,
                _ => LearnerMode::Iql,
            };
            let mut env = Env::new(
                setup.real_env_cfg.clone(),
                seed::derive(setup.master_seed, "real-env", 0),
            )?;
            let dims = NetDims::of_env(&env);
            let mut learner = Learner::new(
                learner_cfg,
                dims,
                seed::derive(setup.master_seed, "learner-seed", 0),
            );
            let mut metrics = Vec::with_capacity(episodes);
            for e in 0..episodes {
                let outcome = learner.run_training_episode(&mut env);
                let loss = if learner.buffer.len() >= learner.cfg.batch_episodes {
                    Some(learner.train_step()?)
                } else {
                    None
                };
                metrics.push(IterationMetrics {
                    iteration: e,
                    real_world_episodes: e + 1,
                    collection_ratio: outcome.collection_ratio,
                    mean_loss: loss,
                    mean_localization_error_m: None,
                });
            }
            Ok((learner.export_params(), metrics))
        }
    }
}
