//! Adam optimizer with per-parameter state kept in registration order.

use std::collections::BTreeMap;

use super::scalar::{sc, Scalar};
use super::tensor::{Parameter, Tensor};

pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            learning_rate: sc(learning_rate),
            beta1: sc(betas.0),
            beta2: sc(betas.1),
            eps: sc(eps),
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Apply one update. `params` must always arrive in the same order;
    /// parameters without a gradient this step are skipped (their moments
    /// still decay toward zero only when updated, matching lazy semantics).
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], grads: &BTreeMap<String, Tensor<T>>) {
        if self.first_moment.is_empty() {
            for p in params.iter() {
                self.first_moment.push(Tensor::zeros(p.value.shape()));
                self.second_moment.push(Tensor::zeros(p.value.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (idx, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(&p.name) else { continue };
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            for j in 0..g.numel() {
                let gj = g.data()[j];
                let mj = self.beta1 * m.data()[j] + (one - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (one - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let upd = self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                p.value.data_mut()[j] = p.value.data()[j] - upd;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut p = Parameter::new("w", Tensor::<f32>::full(&[4], 1.5));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::<f32>::full(&[4], 0.3));
        let mut opt = Adam::new(0.0, (0.9, 0.98), 1e-9);
        let before = p.value.clone();
        opt.step(&mut [&mut p], &grads);
        assert_eq!(p.value, before);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2, gradient 2(w - 3)
        let mut p = Parameter::new("w", Tensor::<f64>::full(&[1], 0.0));
        let mut opt = Adam::new(0.05, (0.9, 0.98), 1e-9);
        for _ in 0..500 {
            let g = 2.0 * (p.value.item() - 3.0);
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::from_vec(vec![g]));
            opt.step(&mut [&mut p], &grads);
        }
        assert!((p.value.item() - 3.0).abs() < 1e-3);
    }
}
