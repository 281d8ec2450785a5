//! Minimal 3D CNN building blocks with explicit forward/backward passes.
//!
//! Tensors are `ndarray` arrays in `(N, C, D, H, W)` layout, generic over
//! `f32`/`f64` so gradient checks can run in double precision. Layers own
//! their parameters and keep forward caches on a stack: call `backward` in
//! exact reverse order of `forward` calls (weight-sharing across pyramid
//! levels relies on this).

pub mod adam;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod relu;
pub mod upsample;

use ndarray::{ArrayD, NdFloat};
use num_traits::FromPrimitive;

pub use adam::Adam;
pub use conv::Conv3d;
pub use norm::BatchNorm3d;
pub use pool::MaxPool3d;
pub use relu::Relu;
pub use upsample::TrilinearResize;

/// Execution mode of a forward pass.
///
/// `Train` uses batch statistics, pushes backward caches and updates running
/// estimates. `Probe` evaluates the same function as `Train` but with no side
/// effects (finite-difference probing). `Eval` switches normalization to the
/// frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Probe,
    Eval,
}

impl Phase {
    pub fn cache(self) -> bool {
        self == Phase::Train
    }

    pub fn batch_stats(self) -> bool {
        self != Phase::Eval
    }
}

/// Scalar element of every tensor in the network.
pub trait Elem: NdFloat + FromPrimitive + std::iter::Sum<Self> + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F: Elem> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Elem> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Walk all trainable parameters with hierarchical names. The visit order is
/// fixed by construction, which keeps optimizer state and checkpoints stable.
pub trait VisitParams<F: Elem> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));

    /// Non-trainable state that still belongs in checkpoints (running
    /// batch-norm statistics). Default: none.
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut ArrayD<F>)) {}
}

/// Seeded weight initialization streams.
pub struct Initializer {
    rng: rand_chacha::ChaCha20Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self { rng: rand_chacha::ChaCha20Rng::seed_from_u64(seed) }
    }

    /// He-normal draw for a conv weight with the given fan-in.
    pub fn he_normal<F: Elem>(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<F> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn normal<F: Elem>(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0f64, std).expect("valid std");
        ArrayD::from_shape_simple_fn(shape.to_vec(), || F::of(dist.sample(&mut self.rng)))
    }
}

/// `ceil(n / d)` for the stride shape arithmetic.
pub fn ceil_div(n: usize, d: usize) -> usize {
    n.div_ceil(d)
}

/// Output spatial shape of a stride-`s` op with ceil semantics.
pub fn ceil_shape(input: [usize; 3], stride: [usize; 3]) -> [usize; 3] {
    [
        ceil_div(input[0], stride[0]),
        ceil_div(input[1], stride[1]),
        ceil_div(input[2], stride[2]),
    ]
}

/// Total/front padding per axis so that `out = ceil(in / stride)` with the
/// window never falling entirely outside the input.
pub fn same_ceil_padding(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> [usize; 3] {
    let mut front = [0usize; 3];
    for a in 0..3 {
        let out = ceil_div(input[a], stride[a]);
        let total = ((out - 1) * stride[a] + kernel[a]).saturating_sub(input[a]);
        front[a] = total / 2;
    }
    front
}

#[cfg(test)]
pub(crate) mod testutil {
    use ndarray::Array5;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    pub fn random_tensor(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array5::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    /// Central finite difference of `loss(x)` against `analytic` at `probes`
    /// randomly chosen coordinates of `x`.
    pub fn check_input_gradient<L>(
        x: &Array5<f64>,
        analytic: &Array5<f64>,
        mut loss: L,
        probes: usize,
        seed: u64,
        tol: f64,
    ) where
        L: FnMut(&Array5<f64>) -> f64,
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let coords: Vec<usize> = (0..probes).map(|_| rng.gen_range(0..x.len())).collect();
        let eps = 1e-5;
        for &flat in &coords {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[flat] += eps;
            xm.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[flat];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "input grad mismatch at {flat}: fd={fd:.8e} analytic={an:.8e}"
            );
        }
    }
}
