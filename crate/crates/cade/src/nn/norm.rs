//! Batch normalization over `(N, D, H, W)` per channel, with running
//! statistics for inference.

use ndarray::{Array1, Array5, ArrayD, Axis};

use super::{Elem, Param, Phase, VisitParams};

pub struct BatchNorm3d<F: Elem> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    cache: Vec<BnCache<F>>,
}

struct BnCache<F: Elem> {
    x_hat: Array5<F>,
    inv_std: Array1<F>,
    count: usize,
}

impl<F: Elem> BatchNorm3d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        let (n, c, d, h, w) = x.dim();
        assert_eq!(c, self.channels, "batchnorm channels");
        let count = n * d * h * w;
        let eps = F::of(self.eps);
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let beta = self.beta.value.as_slice().unwrap().to_vec();

        if !phase.batch_stats() {
            let mut out = x.clone();
            for ci in 0..c {
                let inv = (self.running_var[ci] + eps).sqrt().recip();
                let mean = self.running_mean[ci];
                out.index_axis_mut(Axis(1), ci)
                    .mapv_inplace(|v| (v - mean) * inv * gamma[ci] + beta[ci]);
            }
            return out;
        }

        let mut mean = Array1::<F>::zeros(c);
        let mut var = Array1::<F>::zeros(c);
        for ci in 0..c {
            let slab = x.index_axis(Axis(1), ci);
            let m = slab.sum() / F::from_usize(count).unwrap();
            let v = slab.iter().map(|&t| (t - m) * (t - m)).sum::<F>()
                / F::from_usize(count).unwrap();
            mean[ci] = m;
            var[ci] = v;
        }

        let mut x_hat = x.clone();
        let mut inv_std = Array1::<F>::zeros(c);
        for ci in 0..c {
            let inv = (var[ci] + eps).sqrt().recip();
            inv_std[ci] = inv;
            let m = mean[ci];
            x_hat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - m) * inv);
        }
        let mut out = x_hat.clone();
        for ci in 0..c {
            out.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * gamma[ci] + beta[ci]);
        }

        if phase == Phase::Train {
            // Exponential running estimates (unbiased variance).
            let m = F::of(self.momentum);
            let om = F::one() - m;
            let unbias = if count > 1 {
                F::from_usize(count).unwrap() / F::from_usize(count - 1).unwrap()
            } else {
                F::one()
            };
            for ci in 0..c {
                self.running_mean[ci] = om * self.running_mean[ci] + m * mean[ci];
                self.running_var[ci] = om * self.running_var[ci] + m * var[ci] * unbias;
            }
            self.cache.push(BnCache { x_hat, inv_std, count });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array5<F>) -> Array5<F> {
        let BnCache { x_hat, inv_std, count } =
            self.cache.pop().expect("batchnorm backward without cached forward");
        let (_, c, _, _, _) = grad_out.dim();
        let nf = F::from_usize(count).unwrap();
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();

        let mut grad_in = grad_out.clone();
        {
            let ggrad = self.gamma.grad.as_slice_mut().unwrap();
            let bgrad = self.beta.grad.as_slice_mut().unwrap();
            for ci in 0..c {
                let go = grad_out.index_axis(Axis(1), ci);
                let xh = x_hat.index_axis(Axis(1), ci);
                let sum_dy = go.sum();
                let sum_dy_xhat = ndarray::Zip::from(&go).and(&xh).fold(F::zero(), |acc, &g, &x| {
                    acc + g * x
                });
                ggrad[ci] = ggrad[ci] + sum_dy_xhat;
                bgrad[ci] = bgrad[ci] + sum_dy;

                let scale = gamma[ci] * inv_std[ci] / nf;
                let mut gi = grad_in.index_axis_mut(Axis(1), ci);
                ndarray::Zip::from(&mut gi).and(&xh).for_each(|g, &x| {
                    *g = scale * (nf * *g - sum_dy - x * sum_dy_xhat);
                });
            }
        }
        grad_in
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

impl<F: Elem> VisitParams<F> for BatchNorm3d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<F>)) {
        let mut rm = self.running_mean.clone().into_dyn();
        f(format!("{prefix}.running_mean"), &mut rm);
        self.running_mean = rm.into_dimensionality().unwrap();
        let mut rv = self.running_var.clone().into_dyn();
        f(format!("{prefix}.running_var"), &mut rv);
        self.running_var = rv.into_dimensionality().unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_input_gradient, random_tensor};

    #[test]
    fn normalizes_batch_statistics() {
        let mut bn = BatchNorm3d::<f64>::new(3);
        let x = random_tensor((2, 3, 4, 5, 6), 3) * 4.0 + 2.0;
        let y = bn.forward(&x, Phase::Train);
        for ci in 0..3 {
            let slab = y.index_axis(Axis(1), ci);
            let mean = slab.mean().unwrap();
            let var = slab.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                / slab.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
        bn.clear_cache();
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm3d::<f64>::new(2);
        let x = random_tensor((4, 2, 3, 3, 3), 5) * 3.0 + 1.0;
        for _ in 0..200 {
            bn.forward(&x, Phase::Train);
        }
        bn.clear_cache();
        let y_eval = bn.forward(&x, Phase::Eval);
        let y_train = bn.forward(&x, Phase::Train);
        bn.clear_cache();
        let diff = (&y_eval - &y_train).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-2, "running stats diverge from batch stats: {diff}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm3d::<f64>::new(2);
        // Non-trivial gamma/beta.
        bn.gamma.value.as_slice_mut().unwrap().copy_from_slice(&[1.3, 0.7]);
        bn.beta.value.as_slice_mut().unwrap().copy_from_slice(&[0.2, -0.4]);
        let x = random_tensor((2, 2, 3, 4, 3), 7);
        let lw = random_tensor((2, 2, 3, 4, 3), 9);

        let _ = bn.forward(&x, Phase::Train);
        let analytic = bn.backward(&lw);
        let mut bn_probe = BatchNorm3d::<f64>::new(2);
        bn_probe.gamma.value.assign(&bn.gamma.value);
        bn_probe.beta.value.assign(&bn.beta.value);
        check_input_gradient(
            &x,
            &analytic,
            |xp| {
                let y = bn_probe.forward(xp, Phase::Train);
                bn_probe.clear_cache();
                (&y * &lw).sum()
            },
            20,
            11,
            1e-6,
        );

        // gamma/beta grads.
        let eps = 1e-6;
        for ci in 0..2 {
            let orig = bn.gamma.value.as_slice().unwrap()[ci];
            bn_probe.gamma.value.as_slice_mut().unwrap()[ci] = orig + eps;
            let lp = (&bn_probe.forward(&x, Phase::Train) * &lw).sum();
            bn_probe.clear_cache();
            bn_probe.gamma.value.as_slice_mut().unwrap()[ci] = orig - eps;
            let lm = (&bn_probe.forward(&x, Phase::Train) * &lw).sum();
            bn_probe.clear_cache();
            bn_probe.gamma.value.as_slice_mut().unwrap()[ci] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = bn.gamma.grad.as_slice().unwrap()[ci];
            assert!((fd - an).abs() / fd.abs().max(1e-8) < 1e-6, "gamma {ci}: {fd} vs {an}");
        }
    }
}
