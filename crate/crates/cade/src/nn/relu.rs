//! Rectifier with a cached activation mask.

use ndarray::Array5;

use super::{Elem, Phase};

#[derive(Default)]
pub struct Relu<F: Elem> {
    cache: Vec<Array5<F>>,
}

impl<F: Elem> Relu<F> {
    pub fn new() -> Self {
        Self { cache: Vec::new() }
    }

    pub fn forward(&mut self, x: &Array5<F>, phase: Phase) -> Array5<F> {
        let y = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
        if phase.cache() {
            self.cache.push(y.clone());
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Array5<F>) -> Array5<F> {
        let y = self.cache.pop().expect("relu backward without cached forward");
        let mut grad = grad_out.clone();
        ndarray::Zip::from(&mut grad).and(&y).for_each(|g, &v| {
            if v <= F::zero() {
                *g = F::zero();
            }
        });
        grad
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
    fn relu_forward_and_backward() {
        let mut relu = Relu::<f64>::new();
        let x = random_tensor((1, 2, 3, 3, 3), 3);
        let y = relu.forward(&x, Phase::Train);
        assert!(y.iter().all(|&v| v >= 0.0));
        let lw = random_tensor((1, 2, 3, 3, 3), 5);
        let analytic = relu.backward(&lw);
        let mut probe = Relu::<f64>::new();
        check_input_gradient(&x, &analytic, |xp| (&probe.forward(xp, Phase::Eval) * &lw).sum(), 20, 7, 1e-6);
    }
}
