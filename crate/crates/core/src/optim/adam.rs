use crate::error::{Error, Result};
use crate::tensor::{ParamTensor, Tensor};

/// Adam with bias correction. L2 decay adds `2·λ·w` to the gradient of conv weights
/// only.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_weight_decay(mut self, lambda: f32) -> Self {
        assert!(lambda >= 0.0, "weight decay must be non-negative");
        self.weight_decay = lambda;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from [`Adam::moments`] and [`Adam::t`].
    pub fn restore(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid("Adam moments disagree in count or shape"));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Gradient after L2 decay, as the update sees it.
    pub fn effective_grad(&self, p: &ParamTensor) -> Tensor {
        let mut g = p.grad.clone();
        if p.role.decays() && self.weight_decay > 0.0 {
            let k = 2.0 * self.weight_decay;
            for (g, &w) in g.data_mut().iter_mut().zip(p.value.data()) {
                *g += k * w;
            }
        }
        g
    }

    /// One update over `params`, which must arrive in the same order every call.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut ParamTensor>) -> Result<()> {
        let mut params: Vec<&mut ParamTensor> = params.into_iter().collect();
        for (i, p) in params.iter().enumerate() {
            if let Some((j, v)) = p.grad.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {i} ({:?}, shape {})", p.role, p.value.shape()),
                    detail: format!("element {j} is {v}"),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros_unchecked(p.value.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.shape() != p.value.shape()) {
            return Err(Error::invalid("parameter list changed between Adam steps"));
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, p) in params.iter_mut().enumerate() {
            let g = self.effective_grad(p);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.epsilon as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamRole, Shape};

    fn scalar(w: f32, role: ParamRole) -> ParamTensor {
        ParamTensor::new(Tensor::full(Shape::new(1, 1, 1, 1), w).unwrap(), role)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0, ParamRole::ConvWeight);
        p.grad.fill(1.0);
        let mut adam = Adam::new(1e-3);
        adam.step([&mut p]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.value.data()[0] as f64 - expected).abs() < 1e-9);
        assert_eq!(adam.t(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_but_counts() {
        let mut p = scalar(0.7, ParamRole::ConvWeight);
        let mut adam = Adam::new(1e-2);
        adam.step([&mut p]).unwrap();
        adam.step([&mut p]).unwrap();
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(adam.t(), 2);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = scalar(0.0, ParamRole::ConvWeight);
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let w = p.value.data()[0];
            p.grad.fill(2.0 * (w - 3.0));
            adam.step([&mut p]).unwrap();
        }
        assert!((p.value.data()[0] - 3.0).abs() < 0.1, "{}", p.value.data()[0]);
    }

    #[test]
    fn decay_only_touches_conv_weights() {
        let adam = Adam::new(1e-3).with_weight_decay(2e-4);
        for role in [ParamRole::ConvWeight, ParamRole::ConvBias, ParamRole::BnGamma, ParamRole::BnBeta] {
            let p = scalar(0.5, role);
            let g = adam.effective_grad(&p).data()[0];
            let expected = if role == ParamRole::ConvWeight { 2.0 * 2e-4 * 0.5 } else { 0.0 };
            assert_eq!(g, expected, "{role:?}");
        }
        let mut w = scalar(0.5, ParamRole::ConvWeight);
        let mut b = scalar(0.5, ParamRole::ConvBias);
        let mut adam = adam;
        adam.step([&mut w, &mut b]).unwrap();
        assert!(w.value.data()[0] < 0.5);
        assert_eq!(b.value.data()[0], 0.5);
    }

    #[test]
    fn rejects_nan_gradients() {
        let mut p = scalar(0.0, ParamRole::BnGamma);
        p.grad.fill(f32::NAN);
        let err = Adam::new(1e-3).step([&mut p]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
