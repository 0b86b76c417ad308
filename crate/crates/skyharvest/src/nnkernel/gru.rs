use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, ParamSet, Tensor};

/// Gated recurrent cell.
///
/// r = sigmoid(Wr x + Ur h + br)
/// z = sigmoid(Wz x + Uz h + bz)
/// n = tanh(Wn x + r * (Un h) + bn)
/// h' = (1 - z) * n + z * h
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_n: Tensor,
    pub u_n: Tensor,
    pub b_n: Tensor,
}

/// Per-step activations kept for backprop through time.
#[derive(Clone, Debug)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// Un h, needed for the reset-gate gradient.
    u_n_h: Vec<f64>,
}

impl GruCell {
    pub fn zeros(input: usize, hidden: usize) -> GruCell {
        GruCell {
            w_r: Tensor::zeros(&[hidden, input]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            b_r: Tensor::zeros(&[hidden]),
            w_z: Tensor::zeros(&[hidden, input]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            w_n: Tensor::zeros(&[hidden, input]),
            u_n: Tensor::zeros(&[hidden, hidden]),
            b_n: Tensor::zeros(&[hidden]),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> GruCell {
        let mut cell = GruCell::zeros(input, hidden);
        cell.visit_mut(&mut |t| {
            let fan_in = if t.shape.len() == 2 { t.shape[1] } else { hidden };
            t.init_uniform(fan_in, rng);
        });
        cell
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.shape[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_r.shape[0]
    }

    fn affine(w: &Tensor, x: &[f64], u: &Tensor, h: &[f64], b: &Tensor, out: &mut [f64]) {
        let hidden = b.len();
        let in_dim = w.shape[1];
        for o in 0..hidden {
            let mut acc = b.data[o];
            let wrow = &w.data[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                acc += wrow[i] * x[i];
            }
            let urow = &u.data[o * hidden..(o + 1) * hidden];
            for j in 0..hidden {
                acc += urow[j] * h[j];
            }
            out[o] = acc;
        }
    }

    pub fn forward(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, GruCache) {
        let hidden = self.hidden_dim();
        assert_eq!(x.len(), self.input_dim(), "gru input shape mismatch");
        assert_eq!(h_prev.len(), hidden, "gru hidden shape mismatch");
        let mut r = vec![0.0; hidden];
        let mut z = vec![0.0; hidden];
        Self::affine(&self.w_r, x, &self.u_r, h_prev, &self.b_r, &mut r);
        Self::affine(&self.w_z, x, &self.u_z, h_prev, &self.b_z, &mut z);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        z.iter_mut().for_each(|v| *v = sigmoid(*v));

        let in_dim = self.input_dim();
        let mut u_n_h = vec![0.0; hidden];
        for o in 0..hidden {
            let urow = &self.u_n.data[o * hidden..(o + 1) * hidden];
            u_n_h[o] = urow.iter().zip(h_prev).map(|(u, h)| u * h).sum();
        }
        let mut n = vec![0.0; hidden];
        for o in 0..hidden {
            let wrow = &self.w_n.data[o * in_dim..(o + 1) * in_dim];
            let pre = self.b_n.data[o]
                + wrow.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
                + r[o] * u_n_h[o];
            n[o] = pre.tanh();
        }

        let mut h_new = vec![0.0; hidden];
        for o in 0..hidden {
            h_new[o] = (1.0 - z[o]) * n[o] + z[o] * h_prev[o];
        }
        let cache = GruCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            r,
            z,
            n,
            u_n_h,
        };
        (h_new, cache)
    }

    /// One BPTT step: fold `dh_new` back into gradients for x, h_prev and
    /// the parameters. `dx` and `dh_prev` are accumulated.
    pub fn backward(
        &self,
        cache: &GruCache,
        dh_new: &[f64],
        dx: &mut [f64],
        dh_prev: &mut [f64],
        grads: &mut GruCell,
    ) {
        let hidden = self.hidden_dim();
        let in_dim = self.input_dim();
        let GruCache { x, h_prev, r, z, n, u_n_h } = cache;

        let mut d_pre_r = vec![0.0; hidden];
        let mut d_pre_z = vec![0.0; hidden];
        let mut d_pre_n = vec![0.0; hidden];
        for o in 0..hidden {
            let dh = dh_new[o];
            // h' = (1 - z) n + z h
            let dz = dh * (h_prev[o] - n[o]);
            let dn = dh * (1.0 - z[o]);
            dh_prev[o] += dh * z[o];
            d_pre_n[o] = dn * (1.0 - n[o] * n[o]);
            let dr = d_pre_n[o] * u_n_h[o];
            d_pre_r[o] = dr * r[o] * (1.0 - r[o]);
            d_pre_z[o] = dz * z[o] * (1.0 - z[o]);
        }

        for o in 0..hidden {
            grads.b_r.data[o] += d_pre_r[o];
            grads.b_z.data[o] += d_pre_z[o];
            grads.b_n.data[o] += d_pre_n[o];
            let du_n_h = d_pre_n[o] * r[o];
            for i in 0..in_dim {
                grads.w_r.data[o * in_dim + i] += d_pre_r[o] * x[i];
                grads.w_z.data[o * in_dim + i] += d_pre_z[o] * x[i];
                grads.w_n.data[o * in_dim + i] += d_pre_n[o] * x[i];
                dx[i] += d_pre_r[o] * self.w_r.data[o * in_dim + i]
                    + d_pre_z[o] * self.w_z.data[o * in_dim + i]
                    + d_pre_n[o] * self.w_n.data[o * in_dim + i];
            }
            for j in 0..hidden {
                grads.u_r.data[o * hidden + j] += d_pre_r[o] * h_prev[j];
                grads.u_z.data[o * hidden + j] += d_pre_z[o] * h_prev[j];
                grads.u_n.data[o * hidden + j] += du_n_h * h_prev[j];
                dh_prev[j] += d_pre_r[o] * self.u_r.data[o * hidden + j]
                    + d_pre_z[o] * self.u_z.data[o * hidden + j]
                    + du_n_h * self.u_n.data[o * hidden + j];
            }
        }
    }
}

impl ParamSet for GruCell {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_r", &self.w_r);
        f("u_r", &self.u_r);
        f("b_r", &self.b_r);
        f("w_z", &self.w_z);
        f("u_z", &self.u_z);
        f("b_z", &self.b_z);
        f("w_n", &self.w_n);
        f("u_n", &self.u_n);
        f("b_n", &self.b_n);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w_r);
        f(&mut self.u_r);
        f(&mut self.b_r);
        f(&mut self.w_z);
        f(&mut self.u_z);
        f(&mut self.b_z);
        f(&mut self.w_n);
        f(&mut self.u_n);
        f(&mut self.b_n);
    }
}
