//! Batch normalisation over the folded time-and-batch axis.

use crate::autodiff::channel_moments;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel affine parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Applies `γ·(x − μ)/√(σ² + ε) + β` per channel of `x: [M, C, ...]`.
pub(crate) fn normalize(x: &Tensor, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let c = x.shape()[1];
    let spatial: usize = x.shape()[2..].iter().product();
    let scale: Vec<f64> = (0..c).map(|ch| gamma[ch] / (var[ch] + eps).sqrt()).collect();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / spatial) % c;
        *v = (*v - mean[ch]) * scale[ch] + beta[ch];
    }
    out
}

/// Exponential moving average of the running statistics; the variance is
/// stored unbiased over the `count` folded samples.
pub(crate) fn update_running(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mean: &[f64],
    var: &[f64],
    count: usize,
    momentum: f64,
) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for ch in 0..mean.len() {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch] * unbias;
    }
}

/// Batch norm of a time-folded signal `x: [N·B, C, ...]`. Training mode uses
/// the folded statistics and updates the running ones; evaluation mode uses
/// the running statistics.
pub fn bn_timefold(x: &Tensor, params: &mut BnParams, mode: Mode) -> Result<Tensor> {
    if x.rank() < 2 {
        bail!(Dimension, "batch norm needs [N*B, C, ...], got {:?}", x.shape());
    }
    let c = x.shape()[1];
    if c != params.channels()
        || params.beta.len() != c
        || params.running_mean.len() != c
        || params.running_var.len() != c
    {
        bail!(
            Dimension,
            "batch norm has {} channels but input has {c}",
            params.channels()
        );
    }
    if !(params.eps > 0.0) {
        bail!(Parameter, "batch norm eps must be positive");
    }
    if !(params.momentum > 0.0 && params.momentum < 1.0) {
        bail!(Parameter, "batch norm momentum must lie in (0, 1)");
    }
    match mode {
        Mode::Train => {
            let (mean, var) = channel_moments(x);
            let count = x.numel() / c;
            update_running(
                &mut params.running_mean,
                &mut params.running_var,
                &mean,
                &var,
                count,
                params.momentum,
            );
            Ok(normalize(x, &mean, &var, &params.gamma, &params.beta, params.eps))
        }
        Mode::Eval => Ok(normalize(
            x,
            &params.running_mean,
            &params.running_var,
            &params.gamma,
            &params.beta,
            params.eps,
        )),
    }
}
