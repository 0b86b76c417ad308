use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nnkernel::{elu, elu_grad, relu, Linear, ParamSet, Tensor};

/// State-conditioned monotonic mixing network. Hypernetworks map the
/// global state to the mixing weights; taking absolute values of the
/// generated weights makes the joint value monotone in every agent
/// Q-value.
///
/// q_tot = |w2|^T elu(|W1| q + b1) + v(s)
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixerNet {
    pub hyper_w1_a: Linear,
    pub hyper_w1_b: Linear,
    pub hyper_b1: Linear,
    pub hyper_w2_a: Linear,
    pub hyper_w2_b: Linear,
    pub hyper_v_a: Linear,
    pub hyper_v_b: Linear,
    pub n_agents: usize,
    pub embed_dim: usize,
}

pub struct MixerCache {
    state: Vec<f64>,
    qs: Vec<f64>,
    w1h_pre: Vec<f64>,
    w1h: Vec<f64>,
    w1_raw: Vec<f64>,
    w2h_pre: Vec<f64>,
    w2h: Vec<f64>,
    w2_raw: Vec<f64>,
    vh_pre: Vec<f64>,
    vh: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl MixerNet {
    pub fn zeros(state_dim: usize, n_agents: usize, embed_dim: usize, hyper_hidden: usize) -> Self {
        MixerNet {
            hyper_w1_a: Linear::zeros(state_dim, hyper_hidden),
            hyper_w1_b: Linear::zeros(hyper_hidden, n_agents * embed_dim),
            hyper_b1: Linear::zeros(state_dim, embed_dim),
            hyper_w2_a: Linear::zeros(state_dim, hyper_hidden),
            hyper_w2_b: Linear::zeros(hyper_hidden, embed_dim),
            hyper_v_a: Linear::zeros(state_dim, embed_dim),
            hyper_v_b: Linear::zeros(embed_dim, 1),
            n_agents,
            embed_dim,
        }
    }

    pub fn init(
        state_dim: usize,
        n_agents: usize,
        embed_dim: usize,
        hyper_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MixerNet {
            hyper_w1_a: Linear::init(state_dim, hyper_hidden, rng),
            hyper_w1_b: Linear::init(hyper_hidden, n_agents * embed_dim, rng),
            hyper_b1: Linear::init(state_dim, embed_dim, rng),
            hyper_w2_a: Linear::init(state_dim, hyper_hidden, rng),
            hyper_w2_b: Linear::init(hyper_hidden, embed_dim, rng),
            hyper_v_a: Linear::init(state_dim, embed_dim, rng),
            hyper_v_b: Linear::init(embed_dim, 1, rng),
            n_agents,
            embed_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.hyper_w1_a.input_dim()
    }

    /// Mix per-agent Q-values into the joint value under the given state.
    pub fn forward(&self, state: &[f64], qs: &[f64]) -> (f64, MixerCache) {
        assert_eq!(qs.len(), self.n_agents);
        let w1h_pre = self.hyper_w1_a.forward(state);
        let w1h: Vec<f64> = w1h_pre.iter().map(|&v| relu(v)).collect();
        let w1_raw = self.hyper_w1_b.forward(&w1h);
        let b1 = self.hyper_b1.forward(state);
        let w2h_pre = self.hyper_w2_a.forward(state);
        let w2h: Vec<f64> = w2h_pre.iter().map(|&v| relu(v)).collect();
        let w2_raw = self.hyper_w2_b.forward(&w2h);
        let vh_pre = self.hyper_v_a.forward(state);
        let vh: Vec<f64> = vh_pre.iter().map(|&v| relu(v)).collect();
        let v = self.hyper_v_b.forward(&vh)[0];

        let mut hidden_pre = b1;
        for e in 0..self.embed_dim {
            for (i, &q) in qs.iter().enumerate() {
                hidden_pre[e] += w1_raw[e * self.n_agents + i].abs() * q;
            }
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| elu(v)).collect();
        let q_tot = hidden
            .iter()
            .zip(&w2_raw)
            .map(|(h, w)| w.abs() * h)
            .sum::<f64>()
            + v;
        let cache = MixerCache {
            state: state.to_vec(),
            qs: qs.to_vec(),
            w1h_pre,
            w1h,
            w1_raw,
            w2h_pre,
            w2h,
            w2_raw,
            vh_pre,
            vh,
            hidden_pre,
            hidden,
        };
        (q_tot, cache)
    }

    /// Accumulate parameter gradients and the gradient w.r.t. the agent
    /// Q-values for an upstream d(loss)/d(q_tot).
    pub fn backward(&self, cache: &MixerCache, dq_tot: f64, dqs: &mut [f64], grads: &mut MixerNet) {
        let n = self.n_agents;
        let embed = self.embed_dim;

        // v head
        let dvh_out = [dq_tot];
        let mut dvh = vec![0.0; embed];
        self.hyper_v_b.backward(&cache.vh, &dvh_out, &mut dvh, &mut grads.hyper_v_b);
        let dvh_pre: Vec<f64> = dvh
            .iter()
            .zip(&cache.vh_pre)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let mut sink = vec![0.0; self.state_dim()];
        self.hyper_v_a
            .backward(&cache.state, &dvh_pre, &mut sink, &mut grads.hyper_v_a);

        // w2 head
        let mut dw2_raw = vec![0.0; embed];
        let mut dhidden = vec![0.0; embed];
        for e in 0..embed {
            dw2_raw[e] = dq_tot * cache.hidden[e] * sign(cache.w2_raw[e]);
            dhidden[e] = dq_tot * cache.w2_raw[e].abs();
        }
        let mut dw2h = vec![0.0; cache.w2h.len()];
        self.hyper_w2_b
            .backward(&cache.w2h, &dw2_raw, &mut dw2h, &mut grads.hyper_w2_b);
        let dw2h_pre: Vec<f64> = dw2h
            .iter()
            .zip(&cache.w2h_pre)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let mut sink = vec![0.0; self.state_dim()];
        self.hyper_w2_a
            .backward(&cache.state, &dw2h_pre, &mut sink, &mut grads.hyper_w2_a);

        // through the elu embedding
        let dhidden_pre: Vec<f64> = dhidden
            .iter()
            .zip(&cache.hidden_pre)
            .map(|(&g, &p)| g * elu_grad(p))
            .collect();

        // b1 head
        let mut sink = vec![0.0; self.state_dim()];
        self.hyper_b1
            .backward(&cache.state, &dhidden_pre, &mut sink, &mut grads.hyper_b1);

        // w1 head and the q gradient
        let mut dw1_raw = vec![0.0; n * embed];
        for e in 0..embed {
            for i in 0..n {
                let raw = cache.w1_raw[e * n + i];
                dqs[i] += dhidden_pre[e] * raw.abs();
                dw1_raw[e * n + i] = dhidden_pre[e] * cache.qs[i] * sign(raw);
            }
        }
        let mut dw1h = vec![0.0; cache.w1h.len()];
        self.hyper_w1_b
            .backward(&cache.w1h, &dw1_raw, &mut dw1h, &mut grads.hyper_w1_b);
        let dw1h_pre: Vec<f64> = dw1h
            .iter()
            .zip(&cache.w1h_pre)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let mut sink = vec![0.0; self.state_dim()];
        self.hyper_w1_a
            .backward(&cache.state, &dw1h_pre, &mut sink, &mut grads.hyper_w1_a);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl ParamSet for MixerNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hyper_w1_a.visit(&mut |n, t| f(&format!("hyper_w1_a.{n}"), t));
        self.hyper_w1_b.visit(&mut |n, t| f(&format!("hyper_w1_b.{n}"), t));
        self.hyper_b1.visit(&mut |n, t| f(&format!("hyper_b1.{n}"), t));
        self.hyper_w2_a.visit(&mut |n, t| f(&format!("hyper_w2_a.{n}"), t));
        self.hyper_w2_b.visit(&mut |n, t| f(&format!("hyper_w2_b.{n}"), t));
        self.hyper_v_a.visit(&mut |n, t| f(&format!("hyper_v_a.{n}"), t));
        self.hyper_v_b.visit(&mut |n, t| f(&format!("hyper_v_b.{n}"), t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.hyper_w1_a.visit_mut(f);
        self.hyper_w1_b.visit_mut(f);
        self.hyper_b1.visit_mut(f);
        self.hyper_w2_a.visit_mut(f);
        self.hyper_w2_b.visit_mut(f);
        self.hyper_v_a.visit_mut(f);
        self.hyper_v_b.visit_mut(f);
    }
}
