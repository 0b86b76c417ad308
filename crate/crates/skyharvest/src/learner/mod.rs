//! Value learners over the harvesting environment: recurrent per-agent
//! Q-networks with either a monotonic mixing network (joint-value
//! factorization) or independent per-agent TD targets, an episode replay
//! buffer, epsilon-greedy action selection over feasible sets, and
//! TD-loss training with periodically synced target networks.

mod agent;
mod buffer;
mod mixer;
mod rollout;

pub use agent::{act, greedy_action, AgentNet};
pub use buffer::{EpisodeBuffer, EpisodeRecord};
pub use mixer::MixerNet;
pub use rollout::{
    agent_input, greedy_rollout, run_episode, EpsilonSchedule, RolloutOutcome, TrajStep, TrajUav,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nnkernel::{adam_update, AdamState, ParamSet, ParamVector, Tensor};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerMode {
    Qmix,
    Iql,
}

/// Learner hyperparameters. Defaults follow the standard recipe for
/// value-factorization training; desk-scale scenarios override the sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub mode: LearnerMode,
    pub gamma: f64,
    /// Episodes per training batch.
    pub batch_episodes: usize,
    /// Train calls between hard target-network syncs.
    pub target_update_period: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub hypernet_hidden: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    pub learning_rate: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            mode: LearnerMode::Qmix,
            gamma: 0.99,
            batch_episodes: 32,
            target_update_period: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 50_000,
            hidden_dim: 64,
            embed_dim: 32,
            hypernet_hidden: 64,
            buffer_capacity: 5_000,
            learning_rate: 5e-4,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "learner gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.batch_episodes < 1 {
            return Err(Error::Config("learner batch_episodes must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.hypernet_hidden == 0 {
            return Err(Error::Config("learner network dims must be positive".into()));
        }
        if self.target_update_period == 0 {
            return Err(Error::Config("learner target_update_period must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learner learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            decay_steps: self.epsilon_decay_steps,
        }
    }
}

/// Environment-derived dimensions the networks are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub n_agents: usize,
    pub obs_len: usize,
    pub state_len: usize,
}

impl NetDims {
    pub fn of_env(env: &Env) -> NetDims {
        NetDims {
            n_agents: env.num_agents(),
            obs_len: env.obs_len(),
            state_len: env.state_len(),
        }
    }

    pub fn agent_input_dim(&self) -> usize {
        self.obs_len + NUM_ACTIONS + self.n_agents
    }
}

/// The trainable parameter set: shared agent network plus the mixer in
/// joint-value mode. This struct defines the canonical flat layout used
/// for aggregation and checkpoints.
#[derive(Clone, Debug)]
pub struct Networks {
    pub agent: AgentNet,
    pub mixer: Option<MixerNet>,
}

impl Networks {
    pub fn init(cfg: &LearnerConfig, dims: &NetDims, rng: &mut ChaCha8Rng) -> Networks {
        let agent = AgentNet::init(dims.agent_input_dim(), cfg.hidden_dim, rng);
        let mixer = match cfg.mode {
            LearnerMode::Qmix => Some(MixerNet::init(
                dims.state_len,
                dims.n_agents,
                cfg.embed_dim,
                cfg.hypernet_hidden,
                rng,
            )),
            LearnerMode::Iql => None,
        };
        Networks { agent, mixer }
    }

    pub fn zeros_like(&self) -> Networks {
        Networks {
            agent: AgentNet::zeros(self.agent.input_dim(), self.agent.hidden_dim()),
            mixer: self.mixer.as_ref().map(|m| {
                MixerNet::zeros(m.state_dim(), m.n_agents, m.embed_dim, m.hyper_w1_a.output_dim())
            }),
        }
    }
}

impl ParamSet for Networks {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.agent.visit(&mut |n, t| f(&format!("agent.{n}"), t));
        if let Some(m) = &self.mixer {
            m.visit(&mut |n, t| f(&format!("mixer.{n}"), t));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.agent.visit_mut(f);
        if let Some(m) = &mut self.mixer {
            m.visit_mut(f);
        }
    }
}

fn masked_max(q: &[f64], mask: &[bool; 6]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in 0..NUM_ACTIONS {
        if mask[a] && q[a] > best {
            best = q[a];
        }
    }
    debug_assert!(best.is_finite(), "empty feasibility mask in stored episode");
    best
}

/// Squared TD error of one episode, summed over steps, with optional
/// gradient accumulation into `grads`.
///
/// Joint mode: the step target is r + gamma * Mix(s', per-agent feasible
/// greedy target Q-values) computed entirely from the target networks;
/// the final transition never bootstraps. Independent mode: per-agent
/// targets r + gamma * max Q_i, summed over agents, no mixer.
pub fn episode_loss(
    mode: LearnerMode,
    gamma: f64,
    n_agents: usize,
    nets: &Networks,
    target_nets: &Networks,
    ep: &EpisodeRecord,
    mut grads: Option<&mut Networks>,
) -> f64 {
    let t_len = ep.len();
    assert!(t_len > 0, "empty episode");
    let hidden_dim = nets.agent.hidden_dim();

    // Inputs carry the previous action, so build them once per agent.
    let inputs: Vec<Vec<Vec<f64>>> = (0..n_agents)
        .map(|i| {
            (0..t_len)
                .map(|t| {
                    let prev = if t == 0 { None } else { Some(ep.actions[t - 1][i]) };
                    agent_input(&ep.obs[t][i], prev, i, n_agents)
                })
                .collect()
        })
        .collect();

    let mut online_q = vec![vec![Vec::new(); n_agents]; t_len];
    let mut target_q = vec![vec![Vec::new(); n_agents]; t_len];
    let mut caches: Vec<Vec<agent::AgentStepCache>> = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let mut h = vec![0.0; hidden_dim];
        let mut agent_caches = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (q, h_new, cache) = nets.agent.forward_step(&inputs[i][t], &h);
            online_q[t][i] = q;
            agent_caches.push(cache);
            h = h_new;
        }
        caches.push(agent_caches);
        let mut th = vec![0.0; target_nets.agent.hidden_dim()];
        for t in 0..t_len {
            let (q, th_new) = target_nets.agent.q_values(&inputs[i][t], &th);
            target_q[t][i] = q;
            th = th_new;
        }
    }

    let mut loss = 0.0;
    let mut dq_by_step = vec![vec![[0.0; NUM_ACTIONS]; n_agents]; t_len];
    match mode {
        LearnerMode::Qmix => {
            let mixer = nets.mixer.as_ref().expect("joint mode requires a mixer");
            let target_mixer = target_nets.mixer.as_ref().expect("target mixer");
            for t in 0..t_len {
                let chosen: Vec<f64> = (0..n_agents)
                    .map(|i| online_q[t][i][ep.actions[t][i]])
                    .collect();
                let (q_tot, cache) = mixer.forward(&ep.states[t], &chosen);
                let y = if t + 1 < t_len {
                    let greedy_next: Vec<f64> = (0..n_agents)
                        .map(|i| masked_max(&target_q[t + 1][i], &ep.masks[t + 1][i]))
                        .collect();
                    let (q_tot_next, _) = target_mixer.forward(&ep.states[t + 1], &greedy_next);
                    ep.rewards[t] + gamma * q_tot_next
                } else {
                    ep.rewards[t]
                };
                let err = q_tot - y;
                loss += err * err;
                if let Some(g) = grads.as_deref_mut() {
                    let mut dqs = vec![0.0; n_agents];
                    mixer.backward(&cache, 2.0 * err, &mut dqs, g.mixer.as_mut().unwrap());
                    for i in 0..n_agents {
                        dq_by_step[t][i][ep.actions[t][i]] += dqs[i];
                    }
                }
            }
        }
        LearnerMode::Iql => {
            for t in 0..t_len {
                for i in 0..n_agents {
                    let a = ep.actions[t][i];
                    let chosen = online_q[t][i][a];
                    let y = if t + 1 < t_len {
                        ep.rewards[t]
                            + gamma * masked_max(&target_q[t + 1][i], &ep.masks[t + 1][i])
                    } else {
                        ep.rewards[t]
                    };
                    let err = chosen - y;
                    loss += err * err;
                    if grads.is_some() {
                        dq_by_step[t][i][a] += 2.0 * err;
                    }
                }
            }
        }
    }

    if let Some(g) = grads.as_deref_mut() {
        for i in 0..n_agents {
            let dqs: Vec<Vec<f64>> = (0..t_len).map(|t| dq_by_step[t][i].to_vec()).collect();
            nets.agent.backward_episode(&caches[i], &dqs, &mut g.agent);
        }
    }
    loss
}

/// One value learner: online and target networks, optimizer state,
/// replay buffer, exploration bookkeeping.
pub struct Learner {
    pub cfg: LearnerConfig,
    pub dims: NetDims,
    pub nets: Networks,
    pub target_nets: Networks,
    adam: AdamState,
    pub buffer: EpisodeBuffer,
    rng: ChaCha8Rng,
    train_calls: u64,
    env_steps: u64,
}

impl Learner {
    pub fn new(cfg: LearnerConfig, dims: NetDims, seed_value: u64) -> Learner {
        let mut init_rng = seed::rng(seed_value, "net-init", 0);
        let nets = Networks::init(&cfg, &dims, &mut init_rng);
        let target_nets = nets.clone();
        let n_params = nets.flatten().len();
        Learner {
            adam: AdamState::new(n_params, cfg.learning_rate),
            buffer: EpisodeBuffer::new(cfg.buffer_capacity),
            rng: seed::rng(seed_value, "learner", 0),
            train_calls: 0,
            env_steps: 0,
            cfg,
            dims,
            nets,
            target_nets,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon_schedule().at(self.env_steps)
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn train_calls(&self) -> u64 {
        self.train_calls
    }

    /// Run one exploratory episode, store it, advance the exploration
    /// clock.
    pub fn run_training_episode(&mut self, env: &mut Env) -> RolloutOutcome {
        let schedule = self.cfg.epsilon_schedule();
        let outcome = run_episode(&self.nets.agent, env, &schedule, self.env_steps, &mut self.rng);
        self.env_steps += outcome.steps as u64;
        self.buffer.push(outcome.record.clone());
        outcome
    }

    /// One optimization step on a batch of episodes sampled from the
    /// buffer. Returns the summed squared TD error of the batch.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.cfg.batch_episodes;
        if self.buffer.len() < batch {
            return Err(Error::Runtime(format!(
                "train_step needs {batch} buffered episodes, have {}",
                self.buffer.len()
            )));
        }
        let indices = self.buffer.sample_indices(batch, &mut self.rng);
        let mut grads = self.nets.zeros_like();
        let mut total_loss = 0.0;
        for &ei in &indices {
            total_loss += episode_loss(
                self.cfg.mode,
                self.cfg.gamma,
                self.dims.n_agents,
                &self.nets,
                &self.target_nets,
                self.buffer.get(ei),
                Some(&mut grads),
            );
        }
        let mut flat = self.nets.flatten();
        let flat_grads = grads.flatten();
        adam_update(&mut flat.values, &flat_grads.values, &mut self.adam);
        self.nets.load(&flat)?;
        self.train_calls += 1;
        if self.train_calls % self.cfg.target_update_period == 0 {
            self.sync_targets();
        }
        Ok(total_loss)
    }

    pub fn sync_targets(&mut self) {
        self.target_nets = self.nets.clone();
    }

    pub fn export_params(&self) -> ParamVector {
        self.nets.flatten()
    }

    /// Install parameters (e.g. a federated average) into the online
    /// networks. Target networks and optimizer state stay local.
    pub fn import_params(&mut self, params: &ParamVector) -> Result<()> {
        self.nets.load(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::env::{DeviceSpec, EnvConfig, LinkModel, UavSpec};
    use crate::world::{Cell, CityMap};
    use std::sync::Arc;

    fn tiny_env(seed_value: u64) -> Env {
        let map = Arc::new(
            CityMap::from_rows(
                10.0,
                &vec![vec![0.0; 3]; 3],
                Cell::new(0, 0),
                Cell::new(2, 2),
            )
            .unwrap(),
        );
        let cfg = EnvConfig {
            map,
            devices: vec![DeviceSpec { id: 0, cell: Cell::new(1, 1), data_init: 100.0, anchor: true }],
            uavs: vec![
                UavSpec { id: 0, altitude_m: 10.0, battery_init: 6.0 },
                UavSpec { id: 1, altitude_m: 12.0, battery_init: 6.0 },
            ],
            link_model: LinkModel::Truth(ChannelParams::default()),
            dt: 1.0,
            measure_all_links: false,
        };
        Env::new(cfg, seed_value).unwrap()
    }

    fn small_cfg(mode: LearnerMode) -> LearnerConfig {
        LearnerConfig {
            mode,
            gamma: 0.9,
            batch_episodes: 2,
            target_update_period: 3,
            hidden_dim: 8,
            embed_dim: 4,
            hypernet_hidden: 8,
            buffer_capacity: 16,
            ..LearnerConfig::default()
        }
    }

    fn fill_buffer(learner: &mut Learner, env: &mut Env, episodes: usize) {
        for _ in 0..episodes {
            learner.run_training_episode(env);
        }
    }

    #[test]
    fn rollouts_respect_the_safety_controller() {
        let mut env = tiny_env(1);
        let mut learner = Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&env), 7);
        let outcome = learner.run_training_episode(&mut env);
        assert!(outcome.steps <= 12);
        for u in &env.state().uavs {
            assert_eq!(u.pos.cell(), env.map().terminal_cell);
            assert_eq!(u.battery, 0.0);
        }
        assert!(outcome.collection_ratio >= 0.0 && outcome.collection_ratio <= 1.0);
    }

    #[test]
    fn greedy_rollout_is_deterministic() {
        let env_builder = |s| tiny_env(s);
        let learner = Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&tiny_env(1)), 9);
        let mut env1 = env_builder(5);
        let mut env2 = env_builder(5);
        let a = greedy_rollout(&learner.nets.agent, &mut env1);
        let b = greedy_rollout(&learner.nets.agent, &mut env2);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.collected, b.collected);
    }

    #[test]
    fn train_step_requires_a_full_batch() {
        let mut env = tiny_env(2);
        let mut learner = Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&env), 11);
        assert!(learner.train_step().is_err());
        fill_buffer(&mut learner, &mut env, 2);
        assert!(learner.train_step().is_ok());
    }

    #[test]
    fn targets_hard_sync_every_period() {
        let mut env = tiny_env(3);
        let mut learner = Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&env), 13);
        fill_buffer(&mut learner, &mut env, 4);
        learner.train_step().unwrap();
        assert_ne!(learner.nets.flatten(), learner.target_nets.flatten());
        learner.train_step().unwrap();
        learner.train_step().unwrap(); // third call: sync
        assert_eq!(learner.nets.flatten(), learner.target_nets.flatten());
    }

    #[test]
    fn gamma_zero_loss_is_squared_reward_error() {
        let mut env = tiny_env(4);
        let mut learner = Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&env), 17);
        let outcome = learner.run_training_episode(&mut env);
        let ep = &outcome.record;
        let loss = episode_loss(
            LearnerMode::Qmix,
            0.0,
            2,
            &learner.nets,
            &learner.target_nets,
            ep,
            None,
        );
        // With gamma = 0 every step reduces to (r - Q_tot)^2.
        let mut expected = 0.0;
        let mixer = learner.nets.mixer.as_ref().unwrap();
        let hidden_dim = learner.nets.agent.hidden_dim();
        for i in 0..2usize {
            let _ = i;
        }
        let mut hs = vec![vec![0.0; hidden_dim]; 2];
        for t in 0..ep.len() {
            let mut chosen = Vec::new();
            for i in 0..2 {
                let prev = if t == 0 { None } else { Some(ep.actions[t - 1][i]) };
                let input = agent_input(&ep.obs[t][i], prev, i, 2);
                let (q, h_new) = learner.nets.agent.q_values(&input, &hs[i]);
                hs[i] = h_new;
                chosen.push(q[ep.actions[t][i]]);
            }
            let (q_tot, _) = mixer.forward(&ep.states[t], &chosen);
            expected += (ep.rewards[t] - q_tot) * (ep.rewards[t] - q_tot);
        }
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn batch_loss_is_invariant_to_episode_order() {
        let mut env = tiny_env(5);
        let mut learner = Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&env), 19);
        fill_buffer(&mut learner, &mut env, 3);
        let eps: Vec<EpisodeRecord> =
            (0..3).map(|i| learner.buffer.get(i).clone()).collect();
        let loss_of = |order: &[usize]| -> f64 {
            order
                .iter()
                .map(|&i| {
                    episode_loss(
                        LearnerMode::Qmix,
                        0.9,
                        2,
                        &learner.nets,
                        &learner.target_nets,
                        &eps[i],
                        None,
                    )
                })
                .sum()
        };
        let a = loss_of(&[0, 1, 2]);
        let b = loss_of(&[2, 0, 1]);
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn qmix_loss_gradient_passes_finite_difference_check() {
        use crate::nnkernel::grad_check;
        let mut env = tiny_env(6);
        let mut learner = Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&env), 23);
        let outcome = learner.run_training_episode(&mut env);
        let ep = outcome.record;
        let mut grads = learner.nets.zeros_like();
        episode_loss(
            LearnerMode::Qmix,
            0.9,
            2,
            &learner.nets,
            &learner.target_nets,
            &ep,
            Some(&mut grads),
        );
        let point = learner.nets.flatten();
        let analytic = grads.flatten();
        let target_nets = learner.target_nets.clone();
        let base = learner.nets.clone();
        let report = grad_check(
            |p| {
                let mut nets = base.clone();
                nets.load(&ParamVector {
                    layout: point.layout.clone(),
                    values: p.to_vec(),
                })
                .unwrap();
                episode_loss(LearnerMode::Qmix, 0.9, 2, &nets, &target_nets, &ep, None)
            },
            &analytic.values,
            &point.values,
            1e-5,
            1e-4,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn iql_mode_has_no_mixer_and_trains() {
        let mut env = tiny_env(7);
        let mut learner = Learner::new(small_cfg(LearnerMode::Iql), NetDims::of_env(&env), 29);
        assert!(learner.nets.mixer.is_none());
        fill_buffer(&mut learner, &mut env, 2);
        let loss = learner.train_step().unwrap();
        assert!(loss.is_finite());

        // Gradient check in independent mode too.
        use crate::nnkernel::grad_check;
        let ep = learner.buffer.get(0).clone();
        let mut grads = learner.nets.zeros_like();
        episode_loss(
            LearnerMode::Iql,
            0.9,
            2,
            &learner.nets,
            &learner.target_nets,
            &ep,
            Some(&mut grads),
        );
        let point = learner.nets.flatten();
        let analytic = grads.flatten();
        let base = learner.nets.clone();
        let target_nets = learner.target_nets.clone();
        let report = grad_check(
            |p| {
                let mut nets = base.clone();
                nets.load(&ParamVector {
                    layout: point.layout.clone(),
                    values: p.to_vec(),
                })
                .unwrap();
                episode_loss(LearnerMode::Iql, 0.9, 2, &nets, &target_nets, &ep, None)
            },
            &analytic.values,
            &point.values,
            1e-5,
            1e-4,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn training_is_reproducible_for_equal_seeds() {
        let run = || {
            let mut env = tiny_env(8);
            let mut learner =
                Learner::new(small_cfg(LearnerMode::Qmix), NetDims::of_env(&env), 31);
            let mut losses = Vec::new();
            for _ in 0..6 {
                learner.run_training_episode(&mut env);
                if learner.buffer.len() >= learner.cfg.batch_episodes {
                    losses.push(learner.train_step().unwrap());
                }
            }
            (losses, learner.export_params())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }
}
