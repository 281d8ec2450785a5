//! Trilinear interpolation to an explicit target shape (half-pixel centers).
//!
//! The top-down pyramid pathway upsamples merged maps onto the exact shape of
//! the next lateral output, so odd sizes (e.g. 8 -> 15) resolve without any
//! power-of-two assumption.

use ndarray::{Array5, Axis};
use rayon::prelude::*;

use super::{Elem, Phase};

#[derive(Default)]
pub struct TrilinearResize<F: Elem> {
    cache: Vec<Plan>,
    _marker: std::marker::PhantomData<F>,
}

struct Plan {
    in_dim: (usize, usize, usize, usize, usize),
    out_spatial: [usize; 3],
    axes: [AxisPlan; 3],
}

struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

fn axis_plan(in_len: usize, out_len: usize) -> AxisPlan {
    let scale = in_len as f64 / out_len as f64;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut w_hi = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        lo.push(i0);
        hi.push(i1);
        w_hi.push(src - i0 as f64);
    }
    AxisPlan { lo, hi, w_hi }
}

impl<F: Elem> TrilinearResize<F> {
    pub fn new() -> Self {
        Self { cache: Vec::new(), _marker: std::marker::PhantomData }
    }

    pub fn forward(&mut self, x: &Array5<F>, target: [usize; 3], phase: Phase) -> Array5<F> {
        let (n, c, d, h, w) = x.dim();
        let [od, oh, ow] = target;
        let axes = [axis_plan(d, od), axis_plan(h, oh), axis_plan(w, ow)];

        let slabs: Vec<Vec<F>> = (0..n * c)
            .into_par_iter()
            .map(|nc| {
                let (bi, ci) = (nc / c, nc % c);
                let xs = x
                    .index_axis(Axis(0), bi)
                    .index_axis_move(Axis(0), ci)
                    .to_slice()
                    .expect("standard layout");
                let mut out = vec![F::zero(); od * oh * ow];
                let mut v = 0usize;
                for oz in 0..od {
                    let (z0, z1, wz) = (axes[0].lo[oz], axes[0].hi[oz], axes[0].w_hi[oz]);
                    for oy in 0..oh {
                        let (y0, y1, wy) = (axes[1].lo[oy], axes[1].hi[oy], axes[1].w_hi[oy]);
                        for ox in 0..ow {
                            let (x0, x1, wx) =
                                (axes[2].lo[ox], axes[2].hi[ox], axes[2].w_hi[ox]);
                            let at = |z: usize, y: usize, xx: usize| {
                                xs[(z * h + y) * w + xx].as_f64()
                            };
                            let c00 = at(z0, y0, x0) * (1.0 - wx) + at(z0, y0, x1) * wx;
                            let c01 = at(z0, y1, x0) * (1.0 - wx) + at(z0, y1, x1) * wx;
                            let c10 = at(z1, y0, x0) * (1.0 - wx) + at(z1, y0, x1) * wx;
                            let c11 = at(z1, y1, x0) * (1.0 - wx) + at(z1, y1, x1) * wx;
                            let c0 = c00 * (1.0 - wy) + c01 * wy;
                            let c1 = c10 * (1.0 - wy) + c11 * wy;
                            out[v] = F::of(c0 * (1.0 - wz) + c1 * wz);
                            v += 1;
                        }
                    }
                }
                out
            })
            .collect();

        let mut out = Array5::<F>::zeros((n, c, od, oh, ow));
        {
            let os = out.as_slice_mut().unwrap();
            let slab = od * oh * ow;
            for (nc, vals) in slabs.into_iter().enumerate() {
                os[nc * slab..(nc + 1) * slab].copy_from_slice(&vals);
            }
        }
        if phase.cache() {
            self.cache.push(Plan { in_dim: x.dim(), out_spatial: target, axes });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array5<F>) -> Array5<F> {
        let Plan { in_dim, out_spatial, axes } =
            self.cache.pop().expect("resize backward without cached forward");
        let (n, c, d, h, w) = in_dim;
        let [od, oh, ow] = out_spatial;

        let slabs: Vec<Vec<F>> = (0..n * c)
            .into_par_iter()
            .map(|nc| {
                let (bi, ci) = (nc / c, nc % c);
                let go = grad_out
                    .index_axis(Axis(0), bi)
                    .index_axis_move(Axis(0), ci)
                    .to_slice()
                    .expect("standard layout");
                let mut gx = vec![F::zero(); d * h * w];
                let mut v = 0usize;
                for oz in 0..od {
                    let (z0, z1, wz) = (axes[0].lo[oz], axes[0].hi[oz], axes[0].w_hi[oz]);
                    for oy in 0..oh {
                        let (y0, y1, wy) = (axes[1].lo[oy], axes[1].hi[oy], axes[1].w_hi[oy]);
                        for ox in 0..ow {
                            let (x0, x1, wx) =
                                (axes[2].lo[ox], axes[2].hi[ox], axes[2].w_hi[ox]);
                            let g = go[v].as_f64();
                            v += 1;
                            let mut add = |z: usize, y: usize, xx: usize, weight: f64| {
                                let idx = (z * h + y) * w + xx;
                                gx[idx] = gx[idx] + F::of(g * weight);
                            };
                            add(z0, y0, x0, (1.0 - wz) * (1.0 - wy) * (1.0 - wx));
                            add(z0, y0, x1, (1.0 - wz) * (1.0 - wy) * wx);
                            add(z0, y1, x0, (1.0 - wz) * wy * (1.0 - wx));
                            add(z0, y1, x1, (1.0 - wz) * wy * wx);
                            add(z1, y0, x0, wz * (1.0 - wy) * (1.0 - wx));
                            add(z1, y0, x1, wz * (1.0 - wy) * wx);
                            add(z1, y1, x0, wz * wy * (1.0 - wx));
                            add(z1, y1, x1, wz * wy * wx);
                        }
                    }
                }
                gx
            })
            .collect();

        let mut grad_in = Array5::<F>::zeros(in_dim);
        {
            let gs = grad_in.as_slice_mut().unwrap();
            let slab = d * h * w;
            for (nc, vals) in slabs.into_iter().enumerate() {
                gs[nc * slab..(nc + 1) * slab].copy_from_slice(&vals);
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
    use ndarray::Array5;

    #[test]
    fn constant_input_stays_constant() {
        let mut up = TrilinearResize::<f64>::new();
        let x = Array5::from_elem((1, 2, 3, 4, 5), 3.25);
        let y = up.forward(&x, [7, 8, 9], Phase::Eval);
        assert_eq!(y.dim(), (1, 2, 7, 8, 9));
        for &v in y.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_interpolates_linearly_in_the_interior() {
        let mut up = TrilinearResize::<f64>::new();
        // Linear ramp along x; interior interpolation must stay on the ramp.
        let x = Array5::from_shape_fn((1, 1, 1, 1, 8), |(_, _, _, _, xx)| xx as f64);
        let y = up.forward(&x, [1, 1, 16], Phase::Eval);
        for ox in 2..14 {
            let src = (ox as f64 + 0.5) * 0.5 - 0.5;
            assert!((y[(0, 0, 0, 0, ox)] - src).abs() < 1e-12, "ox={ox}");
        }
    }

    #[test]
    fn resize_backward_matches_finite_differences() {
        let mut up = TrilinearResize::<f64>::new();
        let x = random_tensor((2, 2, 3, 4, 3), 3);
        let _ = up.forward(&x, [5, 7, 4], Phase::Train);
        let lw = random_tensor((2, 2, 5, 7, 4), 5);
        let analytic = up.backward(&lw);
        let mut probe = TrilinearResize::<f64>::new();
        check_input_gradient(
            &x,
            &analytic,
            |xp| (&probe.forward(xp, [5, 7, 4], Phase::Eval) * &lw).sum(),
            24,
            7,
            1e-6,
        );
    }
}
