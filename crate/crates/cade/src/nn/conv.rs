//! 3D convolution with stride-ceil "same" padding, implemented as chunked
//! im2col GEMM.

use ndarray::{s, Array2, Array5, ArrayView2, Axis};
use rayon::prelude::*;

use super::{same_ceil_padding, Elem, Initializer, Param, Phase, VisitParams};

/// How a convolution's weights are initialized.
#[derive(Debug, Clone, Copy)]
pub enum ConvInit {
    /// He-normal scaled by fan-in (backbone convolutions).
    HeNormal,
    /// N(0, 0.01) with zero bias (pyramid and subnet convolutions).
    Gaussian01,
    /// N(0, 0.01) with the class-prior bias `-ln((1-p)/p)`.
    PriorBias(f64),
}

pub struct Conv3d<F: Elem> {
    pub weight: Param<F>, // (Cout, Cin, kz, ky, kx)
    pub bias: Option<Param<F>>,
    pub stride: [usize; 3],
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 3],
    cache: Vec<Array5<F>>,
}

struct Geometry {
    in_spatial: [usize; 3],
    out_spatial: [usize; 3],
    pad: [usize; 3],
}

impl<F: Elem> Conv3d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        with_bias: bool,
        init: ConvInit,
        rng: &mut Initializer,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let fan_in = in_channels * kernel[0] * kernel[1] * kernel[2];
        let weight = match init {
            ConvInit::HeNormal => rng.he_normal::<F>(&shape, fan_in),
            ConvInit::Gaussian01 | ConvInit::PriorBias(_) => rng.normal::<F>(&shape, 0.01),
        };
        let bias = with_bias.then(|| {
            let mut b = ndarray::ArrayD::<F>::zeros(vec![out_channels]);
            if let ConvInit::PriorBias(p) = init {
                b.fill(F::of(-((1.0 - p) / p).ln()));
            }
            Param::new(b)
        });
        Self {
            weight: Param::new(weight),
            bias,
            stride,
            in_channels,
            out_channels,
            kernel,
            cache: Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    fn geometry(&self, in_spatial: [usize; 3]) -> Geometry {
        let out_spatial = super::ceil_shape(in_spatial, self.stride);
        let pad = same_ceil_padding(in_spatial, self.kernel, self.stride);
        Geometry { in_spatial, out_spatial, pad }
    }

    /// Output voxels per im2col chunk, keeping the patch buffer around 8 MB.
    fn chunk_len(&self) -> usize {
        let k = self.in_channels * self.kernel.iter().product::<usize>();
        ((8 << 20) / (k * std::mem::size_of::<F>())).clamp(64, 8192)
    }

    pub fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        let (n, cin, d, h, w) = x.dim();
        assert_eq!(cin, self.in_channels, "conv input channels");
        let geom = self.geometry([d, h, w]);
        let [od, oh, ow] = geom.out_spatial;
        let v_total = od * oh * ow;
        let k = self.in_channels * self.kernel.iter().product::<usize>();

        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .expect("weight is contiguous");

        let chunk = self.chunk_len();
        let mut jobs = Vec::new();
        for bi in 0..n {
            let mut v0 = 0;
            while v0 < v_total {
                jobs.push((bi, v0, (v0 + chunk).min(v_total)));
                v0 += chunk;
            }
        }

        let results: Vec<(usize, usize, Array2<F>)> = jobs
            .par_iter()
            .map(|&(bi, v0, v1)| {
                let xs = x
                    .index_axis(Axis(0), bi)
                    .to_slice()
                    .expect("input is standard layout");
                let patch = build_patch(xs, self.in_channels, self.kernel, self.stride, &geom, v0, v1);
                let pv = ArrayView2::from_shape((k, v1 - v0), &patch).unwrap();
                (bi, v0, w2.dot(&pv))
            })
            .collect();

        let mut out = Array5::<F>::zeros((n, self.out_channels, od, oh, ow));
        {
            let out_slice = out.as_slice_mut().expect("freshly allocated");
            for (bi, v0, block) in results {
                let base = bi * self.out_channels * v_total;
                for co in 0..self.out_channels {
                    let row = block.row(co);
                    let row = row.as_slice().expect("gemm row contiguous");
                    let start = base + co * v_total + v0;
                    out_slice[start..start + row.len()].copy_from_slice(row);
                }
            }
        }
        if let Some(b) = &self.bias {
            let bv = b.value.as_slice().unwrap();
            for bi in 0..n {
                for co in 0..self.out_channels {
                    out.slice_mut(s![bi, co, .., .., ..]).mapv_inplace(|v| v + bv[co]);
                }
            }
        }

        if phase.cache() {
            self.cache.push(x.clone());
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// Must be called once per `forward(train=true)`, in reverse order.
    pub fn backward(&mut self, grad_out: &Array5<F>) -> Array5<F> {
        let x = self.cache.pop().expect("conv backward without cached forward");
        let (n, cin, d, h, w) = x.dim();
        let geom = self.geometry([d, h, w]);
        let [od, oh, ow] = geom.out_spatial;
        let v_total = od * oh * ow;
        debug_assert_eq!(grad_out.dim(), (n, self.out_channels, od, oh, ow));
        let k = cin * self.kernel.iter().product::<usize>();
        let chunk = self.chunk_len();

        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .expect("weight is contiguous");

        // One task per batch item; chunks run sequentially inside so the
        // input-gradient scatter never races. Reduction order is fixed.
        let partials: Vec<(Vec<F>, Array2<F>, Vec<F>)> = (0..n)
            .into_par_iter()
            .map(|bi| {
                let xs = x.index_axis(Axis(0), bi).to_slice().expect("standard layout");
                let go = grad_out
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((self.out_channels, v_total))
                    .expect("grad is standard layout");
                let mut gx = vec![F::zero(); cin * d * h * w];
                let mut dw = Array2::<F>::zeros((self.out_channels, k));
                let mut db = vec![F::zero(); self.out_channels];
                let mut v0 = 0;
                while v0 < v_total {
                    let v1 = (v0 + chunk).min(v_total);
                    let patch =
                        build_patch(xs, cin, self.kernel, self.stride, &geom, v0, v1);
                    let pv = ArrayView2::from_shape((k, v1 - v0), &patch).unwrap();
                    let gchunk = go.slice(s![.., v0..v1]);
                    dw = dw + gchunk.dot(&pv.t());
                    let dpatch = w2.t().dot(&gchunk);
                    scatter_patch(
                        &mut gx,
                        dpatch.as_slice().expect("contiguous"),
                        cin,
                        self.kernel,
                        self.stride,
                        &geom,
                        v0,
                        v1,
                    );
                    for co in 0..self.out_channels {
                        db[co] = db[co] + gchunk.row(co).sum();
                    }
                    v0 = v1;
                }
                (gx, dw, db)
            })
            .collect();

        let mut grad_in = Array5::<F>::zeros((n, cin, d, h, w));
        {
            let gs = grad_in.as_slice_mut().unwrap();
            let per = cin * d * h * w;
            let mut wgrad = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_channels, k))
                .expect("contiguous");
            for (bi, (gx, dw, db)) in partials.into_iter().enumerate() {
                gs[bi * per..(bi + 1) * per].copy_from_slice(&gx);
                wgrad += &dw;
                if let Some(b) = &mut self.bias {
                    let bg = b.grad.as_slice_mut().unwrap();
                    for co in 0..self.out_channels {
                        bg[co] = bg[co] + db[co];
                    }
                }
            }
        }
        grad_in
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }

    pub fn cache_depth(&self) -> usize {
        self.cache.len()
    }
}

/// im2col for output voxels `[v0, v1)`: a `(K, v1-v0)` row-major buffer whose
/// rows follow the weight layout `(ci, kz, ky, kx)`.
#[allow(clippy::too_many_arguments)]
fn build_patch<F: Elem>(
    xs: &[F],
    cin: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    geom: &Geometry,
    v0: usize,
    v1: usize,
) -> Vec<F> {
    let [d, h, w] = geom.in_spatial;
    let [_, oh, ow] = geom.out_spatial;
    let vlen = v1 - v0;
    let k = cin * kernel[0] * kernel[1] * kernel[2];
    let mut patch = vec![F::zero(); k * vlen];

    // Base input coordinates (top-front-left of each window), may be negative.
    let mut bz = Vec::with_capacity(vlen);
    let mut by = Vec::with_capacity(vlen);
    let mut bx = Vec::with_capacity(vlen);
    for v in v0..v1 {
        let oz = v / (oh * ow);
        let rem = v % (oh * ow);
        bz.push((oz * stride[0]) as i64 - geom.pad[0] as i64);
        by.push(((rem / ow) * stride[1]) as i64 - geom.pad[1] as i64);
        bx.push(((rem % ow) * stride[2]) as i64 - geom.pad[2] as i64);
    }

    let dhw = d * h * w;
    let mut row = 0usize;
    for ci in 0..cin {
        let xc = &xs[ci * dhw..(ci + 1) * dhw];
        for kz in 0..kernel[0] as i64 {
            for ky in 0..kernel[1] as i64 {
                for kx in 0..kernel[2] as i64 {
                    let dst = &mut patch[row * vlen..(row + 1) * vlen];
                    for j in 0..vlen {
                        let iz = bz[j] + kz;
                        let iy = by[j] + ky;
                        let ix = bx[j] + kx;
                        if (iz as u64) < d as u64 && (iy as u64) < h as u64 && (ix as u64) < w as u64
                        {
                            dst[j] = xc[(iz as usize * h + iy as usize) * w + ix as usize];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    patch
}

/// Reverse of [`build_patch`]: scatter-add patch gradients into the input
/// gradient.
#[allow(clippy::too_many_arguments)]
fn scatter_patch<F: Elem>(
    gx: &mut [F],
    dpatch: &[F],
    cin: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    geom: &Geometry,
    v0: usize,
    v1: usize,
) {
    let [d, h, w] = geom.in_spatial;
    let [_, oh, ow] = geom.out_spatial;
    let vlen = v1 - v0;
    let dhw = d * h * w;

    let mut bz = Vec::with_capacity(vlen);
    let mut by = Vec::with_capacity(vlen);
    let mut bx = Vec::with_capacity(vlen);
    for v in v0..v1 {
        let oz = v / (oh * ow);
        let rem = v % (oh * ow);
        bz.push((oz * stride[0]) as i64 - geom.pad[0] as i64);
        by.push(((rem / ow) * stride[1]) as i64 - geom.pad[1] as i64);
        bx.push(((rem % ow) * stride[2]) as i64 - geom.pad[2] as i64);
    }

    let mut row = 0usize;
    for ci in 0..cin {
        let base = ci * dhw;
        for kz in 0..kernel[0] as i64 {
            for ky in 0..kernel[1] as i64 {
                for kx in 0..kernel[2] as i64 {
                    let src = &dpatch[row * vlen..(row + 1) * vlen];
                    for j in 0..vlen {
                        let iz = bz[j] + kz;
                        let iy = by[j] + ky;
                        let ix = bx[j] + kx;
                        if (iz as u64) < d as u64 && (iy as u64) < h as u64 && (ix as u64) < w as u64
                        {
                            let idx = base + (iz as usize * h + iy as usize) * w + ix as usize;
                            gx[idx] = gx[idx] + src[j];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<F: Elem> VisitParams<F> for Conv3d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_input_gradient, random_tensor};
    use ndarray::Array5;

    fn naive_conv(
        x: &Array5<f64>,
        weight: &ndarray::ArrayD<f64>,
        bias: Option<&[f64]>,
        stride: [usize; 3],
    ) -> Array5<f64> {
        let (n, cin, d, h, w) = x.dim();
        let ws = weight.shape();
        let (cout, kz, ky, kx) = (ws[0], ws[2], ws[3], ws[4]);
        let od = d.div_ceil(stride[0]);
        let oh = h.div_ceil(stride[1]);
        let ow = w.div_ceil(stride[2]);
        let pad = same_ceil_padding([d, h, w], [kz, ky, kx], stride);
        let mut out = Array5::<f64>::zeros((n, cout, od, oh, ow));
        for bi in 0..n {
            for co in 0..cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias.map_or(0.0, |b| b[co]);
                            for ci in 0..cin {
                                for z in 0..kz {
                                    for y in 0..ky {
                                        for xk in 0..kx {
                                            let iz = (oz * stride[0] + z) as i64 - pad[0] as i64;
                                            let iy = (oy * stride[1] + y) as i64 - pad[1] as i64;
                                            let ix = (ox * stride[2] + xk) as i64 - pad[2] as i64;
                                            if iz >= 0
                                                && iy >= 0
                                                && ix >= 0
                                                && (iz as usize) < d
                                                && (iy as usize) < h
                                                && (ix as usize) < w
                                            {
                                                acc += x[(
                                                    bi,
                                                    ci,
                                                    iz as usize,
                                                    iy as usize,
                                                    ix as usize,
                                                )] * weight[[co, ci, z, y, xk]];
                                            }
                                        }
                                    }
                                }
                            }
                            out[(bi, co, oz, oy, ox)] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = Initializer::new(3);
        for &(stride, shape) in &[
            ([1, 1, 1], (2, 3, 4, 5, 6)),
            ([2, 2, 2], (1, 2, 5, 7, 6)),
            ([2, 2, 2], (2, 2, 1, 4, 4)),
        ] {
            let mut conv =
                Conv3d::<f64>::new(shape.1, 4, [3, 3, 3], stride, true, ConvInit::HeNormal, &mut rng);
            let x = random_tensor(shape, 11);
            let got = conv.forward(&x, Phase::Eval);
            let want = naive_conv(
                &x,
                &conv.weight.value,
                Some(conv.bias.as_ref().unwrap().value.as_slice().unwrap()),
                stride,
            );
            let err = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "stride {stride:?}: max err {err}");
        }
    }

    #[test]
    fn output_shape_is_ceil_of_stride() {
        let mut rng = Initializer::new(5);
        let mut conv =
            Conv3d::<f64>::new(2, 3, [3, 3, 3], [2, 2, 2], false, ConvInit::HeNormal, &mut rng);
        let x = random_tensor((1, 2, 15, 9, 8), 1);
        let y = conv.forward(&x, Phase::Eval);
        assert_eq!(y.dim(), (1, 3, 8, 5, 4));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Initializer::new(7);
        let mut conv =
            Conv3d::<f64>::new(2, 3, [3, 3, 3], [2, 2, 2], true, ConvInit::HeNormal, &mut rng);
        let x = random_tensor((2, 2, 4, 5, 6), 13);

        // Loss = weighted sum of outputs, fixed weights.
        let y0 = conv.forward(&x, Phase::Train);
        let lw = random_tensor(
            (y0.dim().0, y0.dim().1, y0.dim().2, y0.dim().3, y0.dim().4),
            17,
        );
        let analytic_in = conv.backward(&(&lw * 1.0));

        // Input gradient.
        check_input_gradient(
            &x,
            &analytic_in,
            |xp| (&conv.forward(xp, Phase::Eval) * &lw).sum(),
            24,
            19,
            1e-6,
        );

        // Weight gradient.
        let wgrad = conv.weight.grad.clone();
        let eps = 1e-6;
        use rand::{Rng, SeedableRng};
        let mut prng = rand_chacha::ChaCha20Rng::seed_from_u64(23);
        for _ in 0..16 {
            let flat = prng.gen_range(0..conv.weight.value.len());
            let orig = conv.weight.value.as_slice().unwrap()[flat];
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig + eps;
            let lp = (&conv.forward(&x, Phase::Eval) * &lw).sum();
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig - eps;
            let lm = (&conv.forward(&x, Phase::Eval) * &lw).sum();
            conv.weight.value.as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = wgrad.as_slice().unwrap()[flat];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-5,
                "weight grad mismatch: fd={fd:.8e} an={an:.8e}"
            );
        }

        // Bias gradient equals the plain sum of loss weights per channel.
        let bgrad = conv.bias.as_ref().unwrap().grad.clone();
        for co in 0..3 {
            let want: f64 = lw.slice(s![.., co, .., .., ..]).sum();
            let got = bgrad.as_slice().unwrap()[co];
            assert!((want - got).abs() < 1e-9);
        }
    }

    #[test]
    fn cache_is_stack_ordered_for_shared_weights() {
        let mut rng = Initializer::new(9);
        let mut conv =
            Conv3d::<f64>::new(2, 2, [3, 3, 3], [1, 1, 1], false, ConvInit::HeNormal, &mut rng);
        let a = random_tensor((1, 2, 3, 3, 3), 29);
        let b = random_tensor((1, 2, 4, 4, 4), 31);
        let ya = conv.forward(&a, Phase::Train);
        let yb = conv.forward(&b, Phase::Train);
        assert_eq!(conv.cache_depth(), 2);
        let gb = conv.backward(&Array5::ones(yb.dim()));
        assert_eq!(gb.dim(), b.dim());
        let ga = conv.backward(&Array5::ones(ya.dim()));
        assert_eq!(ga.dim(), a.dim());
        assert_eq!(conv.cache_depth(), 0);
    }
}
