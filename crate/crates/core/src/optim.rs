//! Adam with per-group learning rates.

use crate::tensor::{round_to_f32, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    pub feature: f64,
    pub offset: f64,
    pub scale: f64,
    /// Bank, attention and head networks.
    pub network: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            feature: 2.5e-3,
            offset: 1e-2,
            scale: 7e-3,
            network: 2e-3,
        }
    }
}

impl LearningRates {
    pub fn for_tensor(&self, name: &str) -> f64 {
        if name.starts_with("anchor.feature") {
            self.feature
        } else if name.starts_with("anchor.offset") {
            self.offset
        } else if name.starts_with("anchor.log_scale") {
            self.scale
        } else {
            self.network
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(parameter_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
        }
    }

    /// Applies one bias-corrected update, rounds the parameters to `f32`
    /// and clears `grads`.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &mut P, lr: impl Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut flat_grads = Vec::with_capacity(self.m.len());
        grads.visit("", &mut |_, g| flat_grads.extend_from_slice(g.data()));
        assert_eq!(flat_grads.len(), self.m.len(), "gradient layout does not match optimizer state");
        let mut offset = 0;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, p| {
            let rate = lr(&name);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let j = offset + i;
                let g = flat_grads[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                *x -= rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            offset += p.len();
        });
        round_to_f32(params);
        grads.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[derive(Clone)]
    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
            f(crate::tensor::join(prefix, "x"), &self.0);
        }

        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(crate::tensor::join(prefix, "x"), &mut self.0);
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Tensor::from_vec(&[1], vec![v]))
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar(0.75);
        let mut g = scalar(0.0);
        let mut adam = Adam::new(1);
        for _ in 0..3 {
            adam.step(&mut p, &mut g, |_| 0.1);
        }
        assert_eq!(p.0.data()[0], 0.75);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        let mut g = scalar(1.0);
        let mut adam = Adam::new(1);
        adam.step(&mut p, &mut g, |_| 0.01);
        assert!((p.0.data()[0] - 0.99).abs() < 1e-7);
        assert_eq!(g.0.data()[0], 0.0);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let mut p = scalar(2.0);
        let mut g = scalar(0.0);
        let mut adam = Adam::new(1);
        let loss = |x: f64| (x - 0.5) * (x - 0.5);
        let mut last = loss(2.0);
        for _ in 0..10 {
            g.0.data_mut()[0] = 2.0 * (p.0.data()[0] - 0.5);
            adam.step(&mut p, &mut g, |_| 0.1);
            let now = loss(p.0.data()[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn groups_resolve_by_name() {
        let lr = LearningRates::default();
        assert_eq!(lr.for_tensor("anchor.feature"), 2.5e-3);
        assert_eq!(lr.for_tensor("anchor.offset"), 1e-2);
        assert_eq!(lr.for_tensor("anchor.log_scale"), 7e-3);
        assert_eq!(lr.for_tensor("hgsa.structural.w_q"), 2e-3);
    }
}
