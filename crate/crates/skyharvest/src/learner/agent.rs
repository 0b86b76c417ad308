use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::NUM_ACTIONS;
use crate::nnkernel::{relu, GruCache, GruCell, Linear, ParamSet, Tensor};

/// Recurrent per-agent Q-network: linear input layer with ReLU, a gated
/// recurrent cell over the episode, and a linear head with one Q-value
/// per action. Shared across agents; the input carries an agent-id
/// one-hot so sharing does not erase specialization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentNet {
    pub fc1: Linear,
    pub gru: GruCell,
    pub fc2: Linear,
}

/// Per-step activations for backprop through time.
pub struct AgentStepCache {
    input: Vec<f64>,
    fc1_pre: Vec<f64>,
    gru: GruCache,
    h_new: Vec<f64>,
}

impl AgentNet {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> AgentNet {
        AgentNet {
            fc1: Linear::zeros(input_dim, hidden_dim),
            gru: GruCell::zeros(hidden_dim, hidden_dim),
            fc2: Linear::zeros(hidden_dim, NUM_ACTIONS),
        }
    }

    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> AgentNet {
        AgentNet {
            fc1: Linear::init(input_dim, hidden_dim, rng),
            gru: GruCell::init(hidden_dim, hidden_dim, rng),
            fc2: Linear::init(hidden_dim, NUM_ACTIONS, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    /// Advance one step: returns the six Q-values and the new hidden state.
    pub fn forward_step(&self, input: &[f64], hidden: &[f64]) -> (Vec<f64>, Vec<f64>, AgentStepCache) {
        let fc1_pre = self.fc1.forward(input);
        let fc1_post: Vec<f64> = fc1_pre.iter().map(|&v| relu(v)).collect();
        let (h_new, gru_cache) = self.gru.forward(&fc1_post, hidden);
        let q = self.fc2.forward(&h_new);
        let cache = AgentStepCache {
            input: input.to_vec(),
            fc1_pre,
            gru: gru_cache,
            h_new: h_new.clone(),
        };
        (q, h_new, cache)
    }

    /// Forward without caching, for action selection.
    pub fn q_values(&self, input: &[f64], hidden: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let fc1_post: Vec<f64> = self.fc1.forward(input).iter().map(|&v| relu(v)).collect();
        let (h_new, _) = self.gru.forward(&fc1_post, hidden);
        let q = self.fc2.forward(&h_new);
        (q, h_new)
    }

    /// BPTT over a full episode: `dqs[t]` is the gradient of the loss in
    /// the step-t Q-values. Caches must come from consecutive
    /// `forward_step` calls starting at a zero hidden state.
    pub fn backward_episode(&self, caches: &[AgentStepCache], dqs: &[Vec<f64>], grads: &mut AgentNet) {
        assert_eq!(caches.len(), dqs.len());
        let hidden_dim = self.hidden_dim();
        let mut dh_carry = vec![0.0; hidden_dim];
        for (cache, dq) in caches.iter().zip(dqs).rev() {
            let mut dh = dh_carry;
            self.fc2.backward(&cache.h_new, dq, &mut dh, &mut grads.fc2);
            let mut dh_prev = vec![0.0; hidden_dim];
            let mut d_fc1_post = vec![0.0; hidden_dim];
            self.gru
                .backward(&cache.gru, &dh, &mut d_fc1_post, &mut dh_prev, &mut grads.gru);
            let d_fc1_pre: Vec<f64> = d_fc1_post
                .iter()
                .zip(&cache.fc1_pre)
                .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
                .collect();
            let mut d_input = vec![0.0; cache.input.len()];
            self.fc1
                .backward(&cache.input, &d_fc1_pre, &mut d_input, &mut grads.fc1);
            dh_carry = dh_prev;
        }
    }
}

impl ParamSet for AgentNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&mut |n, t| f(&format!("fc1.{n}"), t));
        self.gru.visit(&mut |n, t| f(&format!("gru.{n}"), t));
        self.fc2.visit(&mut |n, t| f(&format!("fc2.{n}"), t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.fc1.visit_mut(f);
        self.gru.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Greedy or exploratory action choice over the feasible set. Infeasible
/// actions are excluded outright; Q-ties resolve to the lowest action
/// index. Consumes randomness only when exploration can trigger.
pub fn act(
    net: &AgentNet,
    hidden: &[f64],
    input: &[f64],
    mask: &[bool; 6],
    epsilon: f64,
    rng: &mut impl Rng,
) -> (usize, Vec<f64>) {
    assert!(mask.iter().any(|&m| m), "empty feasible mask");
    let (q, h_new) = net.q_values(input, hidden);
    let choice = if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let feasible: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| mask[a]).collect();
        feasible[rng.gen_range(0..feasible.len())]
    } else {
        greedy_action(&q, mask)
    };
    (choice, h_new)
}

/// Argmax over feasible actions, ties to the lowest index.
pub fn greedy_action(q: &[f64], mask: &[bool; 6]) -> usize {
    let mut best = usize::MAX;
    let mut best_q = f64::NEG_INFINITY;
    for a in 0..NUM_ACTIONS {
        if mask[a] && q[a] > best_q {
            best_q = q[a];
            best = a;
        }
    }
    assert!(best != usize::MAX, "empty feasible mask");
    best
}
