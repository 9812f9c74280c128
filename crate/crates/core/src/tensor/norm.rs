use ndarray::{Array1, IxDyn};

use super::{Tensor, Var};

/// Per-channel batch statistics observed during a training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Unbiased variance, the convention used for running estimates.
    pub var_unbiased: Array1<f64>,
}

fn broadcast_param(p: &Var, ndim: usize, axis: usize) -> Var {
    let mut shape = vec![1; ndim];
    shape[axis] = p.shape()[0];
    p.reshape(&shape)
}

impl Var {
    /// Batch normalization using statistics of the current batch, reduced over
    /// every axis except `axis`.
    pub fn batch_norm_train(&self, gamma: &Var, beta: &Var, axis: usize, eps: f64) -> (Var, BatchStats) {
        let x = self.value().as_standard_layout().into_owned();
        let shape = x.shape().to_vec();
        let channels = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let count = outer * inner;
        assert!(count > 0, "batch norm over empty reduction");
        assert_eq!(gamma.shape(), &[channels], "batch norm gamma must be [channels]");
        assert_eq!(beta.shape(), &[channels], "batch norm beta must be [channels]");
        // lane (o, c) covers xs[(o * channels + c) * inner..][..inner]
        let lane = move |o: usize, c: usize| (o * channels + c) * inner;
        let xs = x.as_slice().unwrap();
        let mut mean = Array1::zeros(channels);
        let mut var = Array1::zeros(channels);
        for c in 0..channels {
            let mut sum = 0.0;
            for o in 0..outer {
                sum += xs[lane(o, c)..lane(o, c) + inner].iter().sum::<f64>();
            }
            let m = sum / count as f64;
            let mut sq = 0.0;
            for o in 0..outer {
                sq += xs[lane(o, c)..lane(o, c) + inner].iter().map(|&v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[c] = m;
            var[c] = sq / count as f64;
        }
        let inv_std = var.mapv(|v: f64| 1.0 / (v + eps).sqrt());
        let gv = gamma.value().iter().copied().collect::<Vec<f64>>();
        let bv = beta.value().iter().copied().collect::<Vec<f64>>();
        let mut x_hat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for c in 0..channels {
                let r = lane(o, c)..lane(o, c) + inner;
                let (m, s, g, b) = (mean[c], inv_std[c], gv[c], bv[c]);
                for ((h, out), &v) in x_hat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xs[r]) {
                    *h = (v - m) * s;
                    *out = g * *h + b;
                }
            }
        }
        let stats = BatchStats {
            mean,
            var_unbiased: var.mapv(|v| {
                if count > 1 {
                    v * count as f64 / (count - 1) as f64
                } else {
                    v
                }
            }),
        };
        let value = Tensor::from_shape_vec(IxDyn(&shape), y).unwrap();
        let out_shape = shape.clone();
        let y = Var::from_op(value, &[self, gamma, beta], move |g, needs| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut g_gamma = vec![0.0; channels];
            let mut g_beta = vec![0.0; channels];
            for o in 0..outer {
                for c in 0..channels {
                    let r = lane(o, c)..lane(o, c) + inner;
                    for (&gv, &h) in gs[r.clone()].iter().zip(&x_hat[r]) {
                        g_beta[c] += gv;
                        g_gamma[c] += gv * h;
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; gs.len()];
                for o in 0..outer {
                    for c in 0..channels {
                        let r = lane(o, c)..lane(o, c) + inner;
                        let k = gv[c] * inv_std[c];
                        let (gm, ghm) = (g_beta[c] / count as f64, g_gamma[c] / count as f64);
                        for ((d, &gval), &h) in gx[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&x_hat[r]) {
                            *d = k * (gval - gm - h * ghm);
                        }
                    }
                }
                Tensor::from_shape_vec(IxDyn(&out_shape), gx).unwrap()
            });
            vec![
                gx,
                needs[1].then(|| Tensor::from_shape_vec(IxDyn(&[channels]), g_gamma).unwrap()),
                needs[2].then(|| Tensor::from_shape_vec(IxDyn(&[channels]), g_beta).unwrap()),
            ]
        });
        (y, stats)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        axis: usize,
        eps: f64,
    ) -> Var {
        let nd = self.shape().len();
        let mean = Var::constant(running_mean.clone());
        let inv_std = Var::constant(running_var.mapv(|v| 1.0 / (v + eps).sqrt()));
        self.sub(&broadcast_param(&mean, nd, axis))
            .mul(&broadcast_param(&inv_std, nd, axis))
            .mul(&broadcast_param(gamma, nd, axis))
            .add(&broadcast_param(beta, nd, axis))
    }
}
