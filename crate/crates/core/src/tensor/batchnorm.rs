use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f32 = 0.9;
pub const DEFAULT_EPSILON: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Infer,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Weight kept on the old running value at each update.
    momentum: f32,
    epsilon: f32,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self::with_hyper(channels, DEFAULT_MOMENTUM, DEFAULT_EPSILON)
    }

    pub fn with_hyper(channels: usize, momentum: f32, epsilon: f32) -> Self {
        assert!(momentum > 0.0 && momentum < 1.0, "momentum must lie in (0, 1)");
        assert!(epsilon > 0.0, "epsilon must be positive");
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mode: BnMode,
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

fn check(x: Shape, gamma: &Tensor, beta: &Tensor, state: &BnState) -> Result<()> {
    if gamma.numel() != x.c || beta.numel() != x.c || state.channels() != x.c {
        return Err(Error::shape(format!(
            "batchnorm over {} channels got gamma {}, beta {}, state {}",
            x.c,
            gamma.numel(),
            beta.numel(),
            state.channels()
        )));
    }
    Ok(())
}

pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BnState,
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let s = x.shape();
    check(s, gamma, beta, state)?;
    let count = s.n * s.plane();
    if mode == BnMode::Train && count < 2 {
        return Err(Error::shape(format!(
            "train-mode batchnorm needs n*h*w >= 2, got {count}"
        )));
    }
    let plane = s.plane();
    let mut inv_std = vec![0.0f32; s.c];
    let mut mean = vec![0.0f32; s.c];
    match mode {
        BnMode::Train => {
            for c in 0..s.c {
                let mut sum = 0.0f64;
                for n in 0..s.n {
                    let off = s.index(n, c, 0, 0);
                    sum += x.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0f64;
                for n in 0..s.n {
                    let off = s.index(n, c, 0, 0);
                    sq += x.data()[off..off + plane]
                        .iter()
                        .map(|&v| (v as f64 - mu).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                mean[c] = mu as f32;
                inv_std[c] = (1.0 / (var + state.epsilon as f64).sqrt()) as f32;
                let unbiased = sq / (count - 1) as f64;
                let m = state.momentum;
                state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * mu as f32;
                state.running_var[c] = m * state.running_var[c] + (1.0 - m) * unbiased as f32;
            }
        }
        BnMode::Infer => {
            for c in 0..s.c {
                mean[c] = state.running_mean[c];
                inv_std[c] = 1.0 / (state.running_var[c] + state.epsilon).sqrt();
            }
        }
    }
    let mut xhat = Tensor::zeros_unchecked(s);
    let mut y = Tensor::zeros_unchecked(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = s.index(n, c, 0, 0);
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            for i in off..off + plane {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    Ok((y, BnCache { mode, xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`; `dgamma`/`dbeta` are shaped `(1, c, 1, 1)`.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = dy.shape();
    if s != cache.xhat.shape() || gamma.numel() != s.c {
        return Err(Error::shape(format!(
            "batchnorm gradient {} does not match cached input {}",
            s,
            cache.xhat.shape()
        )));
    }
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut dgamma = Tensor::zeros_unchecked(Shape::new(1, s.c, 1, 1));
    let mut dbeta = Tensor::zeros_unchecked(Shape::new(1, s.c, 1, 1));
    let mut dx = Tensor::zeros_unchecked(s);
    for c in 0..s.c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..s.n {
            let off = s.index(n, c, 0, 0);
            for i in off..off + plane {
                let d = dy.data()[i] as f64;
                sum_dy += d;
                sum_dy_xhat += d * cache.xhat.data()[i] as f64;
            }
        }
        dgamma.data_mut()[c] = sum_dy_xhat as f32;
        dbeta.data_mut()[c] = sum_dy as f32;
        let scale = gamma.data()[c] * cache.inv_std[c];
        for n in 0..s.n {
            let off = s.index(n, c, 0, 0);
            for i in off..off + plane {
                dx.data_mut()[i] = match cache.mode {
                    BnMode::Train => {
                        let t = count * dy.data()[i] as f64
                            - sum_dy
                            - cache.xhat.data()[i] as f64 * sum_dy_xhat;
                        (scale as f64 * t / count) as f32
                    }
                    BnMode::Infer => scale * dy.data()[i],
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
