use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};

/// Dense layer y = W x + b with weights stored [out][in].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Linear {
        Linear {
            w: Tensor::zeros(&[output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Linear {
        let mut layer = Linear::zeros(input, output);
        layer.w.init_uniform(input, rng);
        layer.b.init_uniform(input, rng);
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (out_dim, in_dim) = (self.output_dim(), self.input_dim());
        assert_eq!(x.len(), in_dim, "linear input shape mismatch");
        let mut y = Vec::with_capacity(out_dim);
        for o in 0..out_dim {
            let row = &self.w.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = self.b.data[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            y.push(acc);
        }
        y
    }

    /// Accumulate parameter gradients and the input gradient for an
    /// upstream gradient `dy`. `dx` is accumulated, not overwritten.
    pub fn backward(&self, x: &[f64], dy: &[f64], dx: &mut [f64], grads: &mut Linear) {
        let (out_dim, in_dim) = (self.output_dim(), self.input_dim());
        assert_eq!(dy.len(), out_dim);
        assert_eq!(dx.len(), in_dim);
        for o in 0..out_dim {
            let g = dy[o];
            grads.b.data[o] += g;
            let wrow = &self.w.data[o * in_dim..(o + 1) * in_dim];
            let grow = &mut grads.w.data[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                grow[i] += g * x[i];
                dx[i] += g * wrow[i];
            }
        }
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::grad_check;
    use rand::Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut layer = Linear::zeros(3, 3);
        for i in 0..3 {
            layer.w.data[i * 3 + i] = 1.0;
        }
        let x = [0.5, -1.0, 2.0];
        assert_eq!(layer.forward(&x), x.to_vec());
    }

    #[test]
    fn bias_gradient_of_sum_is_ones() {
        let mut rng = crate::seed::rng(2, "linear", 0);
        let layer = Linear::init(4, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grads = Linear::zeros(4, 3);
        let mut dx = vec![0.0; 4];
        // d(sum(y))/dy = ones
        layer.backward(&x, &[1.0, 1.0, 1.0], &mut dx, &mut grads);
        assert_eq!(grads.b.data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = crate::seed::rng(3, "linear-fd", 0);
        let layer = Linear::init(5, 4, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Loss: squared error against a fixed target.
        let loss_of = |l: &Linear, x: &[f64]| -> f64 {
            l.forward(x)
                .iter()
                .zip(&target)
                .map(|(y, t)| (y - t) * (y - t))
                .sum()
        };

        let y = layer.forward(&x);
        let dy: Vec<f64> = y.iter().zip(&target).map(|(y, t)| 2.0 * (y - t)).collect();
        let mut grads = Linear::zeros(5, 4);
        let mut dx = vec![0.0; 5];
        layer.backward(&x, &dy, &mut dx, &mut grads);

        let analytic = grads.flatten();
        let point = layer.flatten();
        let report = grad_check(
            |p| {
                let mut l = layer.clone();
                l.load(&crate::nnkernel::ParamVector {
                    layout: point.layout.clone(),
                    values: p.to_vec(),
                })
                .unwrap();
                loss_of(&l, &x)
            },
            &analytic.values,
            &point.values,
            1e-5,
            1e-6,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);

        // Input gradient, same oracle.
        let input_report = grad_check(
            |xv| loss_of(&layer, xv),
            &dx,
            &x,
            1e-5,
            1e-6,
        );
        assert!(input_report.pass, "input grad err {}", input_report.max_rel_err);
    }
}
