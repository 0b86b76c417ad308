use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{act, AgentNet};
use super::buffer::EpisodeRecord;
use crate::env::{Action, Env, MeasurementRecord, NUM_ACTIONS};

/// Linear exploration schedule over environment steps.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub const GREEDY: EpsilonSchedule = EpsilonSchedule {
        start: 0.0,
        end: 0.0,
        decay_steps: 1,
    };

    pub fn at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// One UAV's slice of a trajectory step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajUav {
    pub ix: usize,
    pub iy: usize,
    pub battery: f64,
    pub assigned: Option<usize>,
}

/// One row of an exported trajectory. Row t carries the situation at time
/// t; `assigned` and `reward` describe the collection that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajStep {
    pub t: usize,
    pub uavs: Vec<TrajUav>,
    pub reward: f64,
}

/// Everything a finished episode yields.
pub struct RolloutOutcome {
    pub record: EpisodeRecord,
    /// Raw data units collected.
    pub collected: f64,
    pub collection_ratio: f64,
    pub steps: usize,
    pub measurements: Vec<MeasurementRecord>,
    pub trajectory: Vec<TrajStep>,
}

/// Roll one full episode with the shared agent network. Rewards in the
/// record are scaled by the total initial data so TD targets stay O(1);
/// `collected` reports raw units. `step_offset` positions the epsilon
/// schedule.
pub fn run_episode(
    agent: &AgentNet,
    env: &mut Env,
    schedule: &EpsilonSchedule,
    step_offset: u64,
    rng: &mut ChaCha8Rng,
) -> RolloutOutcome {
    let n_agents = env.num_agents();
    assert_eq!(
        agent.input_dim(),
        env.obs_len() + NUM_ACTIONS + n_agents,
        "agent network does not fit this environment"
    );
    let reward_scale = {
        let total = env.total_data_init();
        if total > 0.0 {
            1.0 / total
        } else {
            1.0
        }
    };

    let reset = env.reset();
    let mut obs_seq = vec![reset.observations.clone()];
    let mut mask_seq = vec![(0..n_agents).map(|i| env.feasible_mask(i)).collect::<Vec<_>>()];
    let mut state_seq = vec![reset.global_state.clone()];
    let mut actions_seq: Vec<Vec<usize>> = Vec::new();
    let mut rewards = Vec::new();
    let mut measurements = Vec::new();
    let mut trajectory = vec![snapshot(env, 0, &reset.schedule, 0.0)];

    let mut hidden: Vec<Vec<f64>> = vec![vec![0.0; agent.hidden_dim()]; n_agents];
    let mut prev_actions: Vec<Option<usize>> = vec![None; n_agents];
    let mut collected = 0.0;
    let mut step = 0u64;

    loop {
        let epsilon = schedule.at(step_offset + step);
        let mut joint = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let input = agent_input(&obs_seq.last().unwrap()[i], prev_actions[i], i, n_agents);
            let mask = mask_seq.last().unwrap()[i];
            let (a, h_new) = act(agent, &hidden[i], &input, &mask, epsilon, rng);
            hidden[i] = h_new;
            joint.push(Action::from_index(a));
        }
        let outcome = env.step(&joint);
        step += 1;
        collected += outcome.reward;

        actions_seq.push(joint.iter().map(|a| a.index()).collect());
        rewards.push(outcome.reward * reward_scale);
        obs_seq.push(outcome.observations.clone());
        mask_seq.push((0..n_agents).map(|i| env.feasible_mask(i)).collect());
        state_seq.push(outcome.global_state.clone());
        measurements.extend_from_slice(&outcome.measurements);
        trajectory.push(snapshot(env, step as usize, &outcome.schedule, outcome.reward));
        for (p, a) in prev_actions.iter_mut().zip(&joint) {
            *p = Some(a.index());
        }
        if outcome.episode_done {
            break;
        }
    }

    let collection_ratio = if env.total_data_init() > 0.0 {
        collected / env.total_data_init()
    } else {
        0.0
    };
    RolloutOutcome {
        record: EpisodeRecord {
            obs: obs_seq,
            masks: mask_seq,
            states: state_seq,
            actions: actions_seq,
            rewards,
        },
        collected,
        collection_ratio,
        steps: step as usize,
        measurements,
        trajectory,
    }
}

/// Pure-greedy episode; consumes no randomness from the policy side.
pub fn greedy_rollout(agent: &AgentNet, env: &mut Env) -> RolloutOutcome {
    let mut unused = crate::seed::rng(0, "greedy-unused", 0);
    run_episode(agent, env, &EpsilonSchedule::GREEDY, 0, &mut unused)
}

fn snapshot(env: &Env, t: usize, schedule: &[Option<usize>], reward: f64) -> TrajStep {
    TrajStep {
        t,
        uavs: env
            .state()
            .uavs
            .iter()
            .zip(schedule)
            .map(|(u, s)| TrajUav {
                ix: u.pos.ix,
                iy: u.pos.iy,
                battery: u.battery,
                assigned: *s,
            })
            .collect(),
        reward,
    }
}

/// Agent-net input: observation, one-hot previous action (zeros on the
/// first step), one-hot agent id.
pub fn agent_input(obs: &[f64], prev_action: Option<usize>, agent: usize, n_agents: usize) -> Vec<f64> {
    let mut input = Vec::with_capacity(obs.len() + NUM_ACTIONS + n_agents);
    input.extend_from_slice(obs);
    let mut onehot = [0.0; NUM_ACTIONS];
    if let Some(a) = prev_action {
        onehot[a] = 1.0;
    }
    input.extend_from_slice(&onehot);
    for i in 0..n_agents {
        input.push(if i == agent { 1.0 } else { 0.0 });
    }
    input
}
