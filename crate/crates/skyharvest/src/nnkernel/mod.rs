//! Minimal differentiable kernel: dense double-precision tensors, a linear
//! layer and a gated recurrent cell with exact reverse-mode backward
//! passes, the Adam optimizer, flat parameter vectors for aggregation and
//! checkpointing, and a finite-difference gradient checker.
//!
//! There is no general tape. The model zoo is fixed and small, so every
//! backward pass is written out per layer and episodes are unrolled
//! explicitly.

mod gru;
mod linear;

pub use gru::{GruCache, GruCell};
pub use linear::Linear;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of doubles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init_uniform(&mut self, fan_in: usize, rng: &mut impl rand::Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for x in self.data.iter_mut() {
            *x = rng.gen_range(-bound..=bound);
        }
    }
}

/// Ordered (name, shape) pairs describing how a flat vector unpacks.
pub type Layout = Vec<(String, Vec<usize>)>;

/// Flattened network parameters: the unit of aggregation and
/// checkpointing. Two vectors are compatible iff their layouts match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }
}

/// Anything made of named tensors. `visit` and `visit_mut` must yield the
/// same tensors in the same order.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn flatten(&self) -> ParamVector {
        let mut layout = Layout::new();
        let mut values = Vec::new();
        self.visit(&mut |name, t| {
            layout.push((name.to_string(), t.shape.clone()));
            values.extend_from_slice(&t.data);
        });
        ParamVector { layout, values }
    }

    fn load(&mut self, pv: &ParamVector) -> Result<()> {
        let expected = self.flatten();
        if expected.layout != pv.layout {
            return Err(Error::Checkpoint(format!(
                "parameter layout mismatch: expected {} entries / {} values, got {} / {}",
                expected.layout.len(),
                expected.values.len(),
                pv.layout.len(),
                pv.values.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |t| {
            let n = t.data.len();
            t.data.copy_from_slice(&pv.values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Zero every tensor; used on gradient accumulators.
    fn zero(&mut self) {
        self.visit_mut(&mut |t| t.fill(0.0));
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> AdamState {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_update(params: &mut [f64], grads: &[f64], st: &mut AdamState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), st.m.len());
    st.step += 1;
    let b1t = 1.0 - st.beta1.powi(st.step as i32);
    let b2t = 1.0 - st.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
        let m_hat = st.m[i] / b1t;
        let v_hat = st.v[i] / b2t;
        params[i] -= st.learning_rate * m_hat / (v_hat.sqrt() + st.epsilon);
    }
}

/// Elementwise activations.
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradient-check report: worst coordinate of the comparison between an
/// analytic gradient and central finite differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Compare `analytic` against central differences of `loss` around
/// `point`. The error at each coordinate is |a - n| / max(|a| + |n|,
/// 1e-2); the floor keeps finite-difference noise on near-zero
/// coordinates from dominating.
pub fn grad_check(
    loss: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    h: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), point.len());
    let mut x = point.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-2);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        pass: max_rel_err < tolerance,
    }
}
