//! Max pooling with stride-ceil "same" padding (padding acts as -inf).

use ndarray::{Array5, Axis};
use rayon::prelude::*;

use super::{ceil_shape, same_ceil_padding, Elem, Phase};

pub struct MaxPool3d<F: Elem> {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    cache: Vec<PoolCache>,
    _marker: std::marker::PhantomData<F>,
}

struct PoolCache {
    in_dim: (usize, usize, usize, usize, usize),
    /// Flat input index (within one (n, c) slab) of each output's maximum.
    argmax: Vec<u32>,
}

impl<F: Elem> MaxPool3d<F> {
    pub fn new(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self { kernel, stride, cache: Vec::new(), _marker: std::marker::PhantomData }
    }

    pub fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        let (n, c, d, h, w) = x.dim();
        let [od, oh, ow] = ceil_shape([d, h, w], self.stride);
        let pad = same_ceil_padding([d, h, w], self.kernel, self.stride);
        let v_total = od * oh * ow;

        let slabs: Vec<(Vec<F>, Vec<u32>)> = (0..n * c)
            .into_par_iter()
            .map(|nc| {
                let (bi, ci) = (nc / c, nc % c);
                let xs = x
                    .index_axis(Axis(0), bi)
                    .index_axis_move(Axis(0), ci)
                    .to_slice()
                    .expect("standard layout")
                    .to_vec();
                let mut vals = vec![F::zero(); v_total];
                let mut arg = vec![0u32; v_total];
                let mut v = 0usize;
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = F::neg_infinity();
                            let mut best_idx = 0u32;
                            for kz in 0..self.kernel[0] {
                                let iz = (oz * self.stride[0] + kz) as i64 - pad[0] as i64;
                                if iz < 0 || iz >= d as i64 {
                                    continue;
                                }
                                for ky in 0..self.kernel[1] {
                                    let iy = (oy * self.stride[1] + ky) as i64 - pad[1] as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    for kx in 0..self.kernel[2] {
                                        let ix =
                                            (ox * self.stride[2] + kx) as i64 - pad[2] as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        let idx =
                                            (iz as usize * h + iy as usize) * w + ix as usize;
                                        if xs[idx] > best {
                                            best = xs[idx];
                                            best_idx = idx as u32;
                                        }
                                    }
                                }
                            }
                            vals[v] = best;
                            arg[v] = best_idx;
                            v += 1;
                        }
                    }
                }
                (vals, arg)
            })
            .collect();

        let mut out = Array5::<F>::zeros((n, c, od, oh, ow));
        let mut argmax = Vec::with_capacity(n * c * v_total);
        {
            let os = out.as_slice_mut().unwrap();
            for (nc, (vals, arg)) in slabs.into_iter().enumerate() {
                os[nc * v_total..(nc + 1) * v_total].copy_from_slice(&vals);
                argmax.extend_from_slice(&arg);
            }
        }
        if phase.cache() {
            self.cache.push(PoolCache { in_dim: x.dim(), argmax });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array5<F>) -> Array5<F> {
        let PoolCache { in_dim, argmax } =
            self.cache.pop().expect("maxpool backward without cached forward");
        let (n, c, d, h, w) = in_dim;
        let v_total = grad_out.len() / (n * c);
        let mut grad_in = Array5::<F>::zeros(in_dim);
        {
            let gs = grad_in.as_slice_mut().unwrap();
            let go = grad_out.as_slice().expect("standard layout");
            let slab = d * h * w;
            for nc in 0..n * c {
                let base = nc * slab;
                for v in 0..v_total {
                    let idx = base + argmax[nc * v_total + v] as usize;
                    gs[idx] = gs[idx] + go[nc * v_total + v];
                }
            }
        }
        grad_in
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_input_gradient, random_tensor};

    #[test]
    fn pool_shapes_and_values() {
        let mut pool = MaxPool3d::<f64>::new([3, 3, 3], [2, 2, 2]);
        let x = random_tensor((1, 2, 5, 6, 7), 3);
        let y = pool.forward(&x, Phase::Eval);
        assert_eq!(y.dim(), (1, 2, 3, 3, 4));
        // Every output must be the max of its window, hence >= center value.
        for oz in 0..3 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let center = x[(0, 0, (oz * 2).min(4), (oy * 2).min(5), (ox * 2).min(6))];
                    assert!(y[(0, 0, oz, oy, ox)] >= center);
                }
            }
        }
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let mut pool = MaxPool3d::<f64>::new([3, 3, 3], [2, 2, 2]);
        let x = random_tensor((2, 2, 4, 5, 4), 7);
        let y = pool.forward(&x, Phase::Train);
        let lw = random_tensor((2, 2, 2, 3, 2), 9);
        assert_eq!(y.dim(), lw.dim());
        let analytic = pool.backward(&lw);
        let mut probe = MaxPool3d::<f64>::new([3, 3, 3], [2, 2, 2]);
        check_input_gradient(&x, &analytic, |xp| (&probe.forward(xp, Phase::Eval) * &lw).sum(), 30, 11, 1e-6);
    }
}
