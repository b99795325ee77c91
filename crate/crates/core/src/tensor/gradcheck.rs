//! Central-difference gradient checking.
//!
//! A tensor-valued op is reduced to a scalar `L = Σ rᵢ·yᵢ` with fixed seeded weights `r`,
//! so the analytic side is simply `backward(inputs, r)`. The numeric side perturbs one
//! input element at a time and accumulates `L` in `f64`. The step actually taken is
//! recovered from the rounded `f32` values, which keeps linear ops exact.
//!
//! Relative error is `|a − n| / max(|a|, |n|, floor)` where the floor is the larger of an
//! absolute minimum and a fraction of the RMS of that input's analytic gradient. Entries
//! far below the gradient's own scale are otherwise dominated by `f32` rounding in the
//! forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub const MIN_EPSILON: f32 = 1e-5;
pub const MAX_EPSILON: f32 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f32,
    /// Seed for the reduction weights.
    pub seed: u64,
    /// Absolute denominator floor.
    pub abs_floor: f64,
    /// Denominator floor as a fraction of each input's analytic-gradient RMS.
    pub scale_floor: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Elements whose probe crossed a non-differentiable point and were left out.
    pub skipped: usize,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = rel;
            self.worst = Some((input, index));
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

impl GradCheck {
    pub fn new(epsilon: f32) -> Self {
        GradCheck {
            epsilon,
            seed: 0x5eed,
            abs_floor: 1e-6,
            scale_floor: 0.5,
        }
    }

    pub fn with_scale_floor(mut self, scale_floor: f64) -> Self {
        self.scale_floor = scale_floor;
        self
    }

    /// Smallest denominator in the relative error; absorbs rounding noise in `f`.
    pub fn with_abs_floor(mut self, abs_floor: f64) -> Self {
        self.abs_floor = abs_floor;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(MIN_EPSILON..=MAX_EPSILON).contains(&self.epsilon) {
            return Err(Error::invalid(format!(
                "gradient-check epsilon {} outside [{MIN_EPSILON}, {MAX_EPSILON}]",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Checks an op given as a forward closure and its analytic backward.
    pub fn run<F, B>(&self, inputs: &[Tensor], forward: F, backward: B) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Tensor,
        B: Fn(&[Tensor], &Tensor) -> Vec<Tensor>,
    {
        self.validate()?;
        let out = forward(inputs);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let weights = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng)?;
        let analytic = backward(inputs, &weights);
        let reduce = |t: &[Tensor]| {
            let y = forward(t);
            Some(
                y.data()
                    .iter()
                    .zip(weights.data())
                    .map(|(&a, &r)| a as f64 * r as f64)
                    .sum::<f64>(),
            )
        };
        self.run_scalar(inputs, reduce, &analytic)
    }

    /// Checks a scalar function against precomputed analytic gradients.
    ///
    /// `f` returns `None` when a probe should be discarded (e.g. it crossed a ReLU kink
    /// or flipped a max-pool winner).
    pub fn run_scalar<F>(&self, inputs: &[Tensor], mut f: F, analytic: &[Tensor]) -> Result<GradCheckReport>
    where
        F: FnMut(&[Tensor]) -> Option<f64>,
    {
        self.validate()?;
        if analytic.len() != inputs.len() {
            return Err(Error::invalid(format!(
                "{} analytic gradients for {} inputs",
                analytic.len(),
                inputs.len()
            )));
        }
        for (i, (a, x)) in analytic.iter().zip(inputs).enumerate() {
            if a.numel() != x.numel() {
                return Err(Error::shape(format!(
                    "analytic gradient {i} has {} elements, input has {}",
                    a.numel(),
                    x.numel()
                )));
            }
        }
        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for input in 0..inputs.len() {
            let a = analytic[input].data();
            let rms = (a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
            let floor = self.abs_floor.max(self.scale_floor * rms);
            for index in 0..inputs[input].numel() {
                let orig = inputs[input].data()[index];
                let plus = orig + self.epsilon;
                let minus = orig - self.epsilon;
                work[input].data_mut()[index] = plus;
                let lp = f(&work);
                work[input].data_mut()[index] = minus;
                let lm = f(&work);
                work[input].data_mut()[index] = orig;
                match (lp, lm) {
                    (Some(lp), Some(lm)) => {
                        let numeric = (lp - lm) / (plus as f64 - minus as f64);
                        let a = a[index] as f64;
                        report.record(input, index, a, numeric, floor);
                    }
                    _ => report.skipped += 1,
                }
            }
        }
        Ok(report)
    }
}

/// Worst relative error between analytic and central-difference gradients of `forward`.
pub fn finite_diff_check<F, B>(inputs: &[Tensor], forward: F, backward: B, epsilon: f32) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Tensor,
    B: Fn(&[Tensor], &Tensor) -> Vec<Tensor>,
{
    GradCheck::new(epsilon)
        .run(inputs, forward, backward)
        .map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn rejects_out_of_range_epsilon() {
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1)).unwrap();
        let fwd = |t: &[Tensor]| t[0].clone();
        let bwd = |_: &[Tensor], dy: &Tensor| vec![dy.clone()];
        assert!(finite_diff_check(&[x.clone()], fwd, bwd, 1e-6).is_err());
        assert!(finite_diff_check(&[x], fwd, bwd, 0.1).is_err());
    }

    #[test]
    fn catches_a_wrong_backward() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 0.5).unwrap();
        let fwd = |t: &[Tensor]| {
            let mut y = t[0].clone();
            y.scale(3.0);
            y
        };
        let wrong = |_: &[Tensor], dy: &Tensor| {
            let mut g = dy.clone();
            g.scale(2.0);
            vec![g]
        };
        let err = finite_diff_check(&[x], fwd, wrong, 1e-3).unwrap();
        assert!(err > 0.3, "{err}");
    }
}
