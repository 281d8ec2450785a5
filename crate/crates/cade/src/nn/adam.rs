//! Adam optimizer over named parameters.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{Elem, Param};

pub struct Adam<F: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: HashMap<String, ArrayD<F>>,
    second_moment: HashMap<String, ArrayD<F>>,
}

impl<F: Elem> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Call once per optimization step, after gradients are accumulated.
    /// Apply through a parameter visitor:
    /// `net.visit_params("net", &mut |name, p| adam.update(&name, p))`,
    /// with `begin_step()` first.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Param<F>) {
        let m = self
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
        let v = self
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));

        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let bias1 = F::of(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = F::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);

        ndarray::Zip::from(&mut param.value)
            .and(m)
            .and(v)
            .and(&param.grad)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(w) = sum((w - 3)^2), gradient 2(w - 3).
        let mut p = Param::<f64>::new(ArrayD::zeros(vec![4]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            adam.begin_step();
            p.zero_grad();
            let g: Vec<f64> = p.value.iter().map(|&w| 2.0 * (w - 3.0)).collect();
            p.grad.as_slice_mut().unwrap().copy_from_slice(&g);
            adam.update("w", &mut p);
        }
        for &w in p.value.iter() {
            assert!((w - 3.0).abs() < 1e-3, "w={w}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, the first Adam step is ~lr * sign(g).
        let mut p = Param::<f64>::new(ArrayD::zeros(vec![1]));
        let mut adam = Adam::new(0.05);
        adam.begin_step();
        p.grad.fill(7.0);
        adam.update("w", &mut p);
        assert!((p.value[[0]] + 0.05).abs() < 1e-6);
    }
}
