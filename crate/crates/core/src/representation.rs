//! Spike representations (scaled firing rates), the clamp maps they track,
//! constant-current closed forms and the quantization/deviation split of the
//! representation error.

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::neuron::{constant_current_spikes, NeuronModel, NeuronParams, SpikeTrain};
use crate::tensor::Tensor;

/// A layer representation `o` with its admissible upper bound `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub o: Tensor,
    pub model: NeuronModel,
    pub bound: f64,
}

/// `e_r = e_q + e_d`, elementwise over neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub e_r: Tensor,
    pub e_q: Tensor,
    pub e_d: Tensor,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        bail!(Parameter, "lambda must lie in (0, 1), got {lambda}");
    }
    Ok(())
}

/// Weights `λ^{N−n}` for n = 1..N.
fn leak_weights(lambda: f64, n_steps: usize) -> Vec<f64> {
    let mut w = vec![1.0; n_steps];
    for n in (0..n_steps.saturating_sub(1)).rev() {
        w[n] = w[n + 1] * lambda;
    }
    w
}

fn weighted_time_sum(x: &Tensor, weights: &[f64]) -> Vec<f64> {
    let width = x.numel() / weights.len();
    let mut acc = vec![0.0; width];
    for (row, &w) in x.data().chunks_exact(width).zip(weights) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += w * v;
        }
    }
    acc
}

/// `(V_th/N)·Σₙ s[n]`.
pub fn rep_if(s: &SpikeTrain, v_th: f64) -> Result<Representation> {
    if !(v_th > 0.0) {
        bail!(Parameter, "threshold must be positive, got {v_th}");
    }
    let n = s.time_steps() as f64;
    let counts = weighted_time_sum(s.tensor(), &vec![1.0; s.time_steps()]);
    Ok(Representation {
        o: Tensor::new(s.neuron_shape().to_vec(), counts.iter().map(|c| v_th * c / n).collect())?,
        model: NeuronModel::If,
        bound: v_th,
    })
}

/// `V_th·Σ λ^{N−n} s[n] / (Σ λ^{N−n}·Δt)`.
pub fn rep_lif(s: &SpikeTrain, v_th: f64, lambda: f64, dt: f64) -> Result<Representation> {
    check_lambda(lambda)?;
    if !(v_th > 0.0) || !(dt > 0.0) {
        bail!(Parameter, "threshold and dt must be positive");
    }
    let w = leak_weights(lambda, s.time_steps());
    let norm: f64 = w.iter().sum::<f64>() * dt;
    let acc = weighted_time_sum(s.tensor(), &w);
    Ok(Representation {
        o: Tensor::new(s.neuron_shape().to_vec(), acc.iter().map(|a| v_th * a / norm).collect())?,
        model: NeuronModel::Lif,
        bound: v_th / dt,
    })
}

/// Representation of the (possibly real-valued) input frames. The input layer
/// carries no threshold factor. `lambda` and `dt` are ignored for IF.
pub fn rep_input(s0: &Tensor, model: NeuronModel, lambda: f64, dt: f64) -> Result<Tensor> {
    if s0.rank() < 2 {
        bail!(Dimension, "input frames need a leading time axis, got {:?}", s0.shape());
    }
    let n_steps = s0.shape()[0];
    let shape = s0.shape()[1..].to_vec();
    match model {
        NeuronModel::If => s0.mean_leading(),
        NeuronModel::Lif => {
            check_lambda(lambda)?;
            let w = leak_weights(lambda, n_steps);
            let norm: f64 = w.iter().sum::<f64>() * dt;
            let acc = weighted_time_sum(s0, &w);
            Tensor::new(shape, acc.iter().map(|a| a / norm).collect())
        }
    }
}

/// Graph form of `clamp(W z, 0, V_th)` for `z` of shape `[B, k]` and `W` of shape `[m, k]`.
pub fn if_map_graph(g: &mut Graph, z: Var, w: Var, v_th: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let pre = g.matmul(z, wt)?;
    g.clamp(pre, 0.0, v_th)
}

/// Graph form of `clamp(W z / τ, 0, V_th/Δt)`.
pub fn lif_map_graph(g: &mut Graph, z: Var, w: Var, v_th: Var, tau: f64, dt: f64) -> Result<Var> {
    if dt >= tau {
        bail!(Parameter, "LIF map needs dt < tau (dt = {dt}, tau = {tau})");
    }
    let wt = g.transpose(w)?;
    let pre = g.matmul(z, wt)?;
    let pre = g.scale(pre, 1.0 / tau);
    let hi = g.scale(v_th, 1.0 / dt);
    g.clamp(pre, 0.0, hi)
}

/// Promotes a vector to a one-row batch; returns whether it did.
fn as_batch(z: &Tensor) -> Result<(Tensor, bool)> {
    match z.rank() {
        1 => Ok((z.clone().reshape(&[1, z.numel()])?, true)),
        2 => Ok((z.clone(), false)),
        _ => bail!(Dimension, "expected a vector or [batch, features], got {:?}", z.shape()),
    }
}

fn eval_map(z_prev: &Tensor, w: &Tensor, v_th: f64, lif: Option<(f64, f64)>) -> Result<Tensor> {
    let (z, squeeze) = as_batch(z_prev)?;
    let mut g = Graph::new();
    let z = g.constant(z);
    let w = g.constant(w.clone());
    let th = g.constant(Tensor::scalar(v_th));
    let out = match lif {
        None => if_map_graph(&mut g, z, w, th)?,
        Some((tau, dt)) => lif_map_graph(&mut g, z, w, th, tau, dt)?,
    };
    let out = g.value(out).clone();
    if squeeze {
        let m = out.numel();
        out.reshape(&[m])
    } else {
        Ok(out)
    }
}

/// `clamp(W z_prev, 0, V_th)`.
pub fn surrogate_map_if(z_prev: &Tensor, w: &Tensor, v_th: f64) -> Result<Tensor> {
    eval_map(z_prev, w, v_th, None)
}

/// `clamp(W z_prev / τ, 0, V_th/Δt)`.
pub fn surrogate_map_lif(z_prev: &Tensor, w: &Tensor, tau: f64, v_th: f64, dt: f64) -> Result<Tensor> {
    eval_map(z_prev, w, v_th, Some((tau, dt)))
}

/// Staircase value of a single IF neuron under constant current `i_star`.
/// Closed forms for α ∈ {1, 0.5}; other α values are simulated.
pub fn closed_form_rate_if(i_star: f64, v_th: f64, n_steps: usize, alpha: f64) -> f64 {
    let n = n_steps as f64;
    let x = n * i_star / v_th;
    let count = if alpha == 1.0 {
        x.floor().clamp(0.0, n)
    } else if alpha == 0.5 {
        // fire-at-equality rounds halves up
        (x + 0.5).floor().clamp(0.0, n)
    } else {
        let p = NeuronParams {
            model: NeuronModel::If,
            v_th,
            tau: 1.0,
            dt: 1.0,
            alpha,
        };
        constant_current_spikes(i_star, n_steps, &p) as f64
    };
    v_th * count / n
}

/// Weighted rate of a single LIF neuron driven by a constant current.
pub fn constant_rate_lif(i_star: f64, n_steps: usize, p: &NeuronParams) -> Result<f64> {
    let currents = Tensor::full(&[n_steps, 1], i_star);
    let (train, _) = crate::neuron::simulate_layer(&crate::neuron::NeuronState::zeros(&[1]), &currents, p)?;
    Ok(rep_lif(&train, p.v_th, p.lambda(), p.dt)?.o.item())
}

/// Per-neuron mean current: plain for IF, `λ^{N−n}`-weighted for LIF.
fn mean_current(currents: &Tensor, p: &NeuronParams) -> Result<Tensor> {
    match p.model {
        NeuronModel::If => currents.mean_leading(),
        NeuronModel::Lif => {
            let w = leak_weights(p.lambda(), currents.shape()[0]);
            let norm: f64 = w.iter().sum();
            let acc = weighted_time_sum(currents, &w);
            Tensor::new(currents.shape()[1..].to_vec(), acc.iter().map(|a| a / norm).collect())
        }
    }
}

fn clamp_map(mean: f64, p: &NeuronParams) -> f64 {
    match p.model {
        NeuronModel::If => mean.clamp(0.0, p.v_th),
        NeuronModel::Lif => (mean / p.tau).clamp(0.0, p.v_th / p.dt),
    }
}

/// Splits the representation error of a simulated train into the part a
/// constant current would also incur (`e_q`) and the remainder (`e_d`).
pub fn decompose_error(s: &SpikeTrain, currents: &Tensor, p: &NeuronParams) -> Result<ErrorDecomposition> {
    if s.tensor().shape() != currents.shape() {
        bail!(
            Dimension,
            "spike train shape {:?} does not match currents {:?}",
            s.tensor().shape(),
            currents.shape()
        );
    }
    p.validate()?;
    let n_steps = s.time_steps();
    let rep = match p.model {
        NeuronModel::If => rep_if(s, p.v_th)?,
        NeuronModel::Lif => rep_lif(s, p.v_th, p.lambda(), p.dt)?,
    };
    let mean = mean_current(currents, p)?;
    let m = mean.numel();
    let (mut e_r, mut e_q, mut e_d) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for j in 0..m {
        let target = clamp_map(mean.data()[j], p);
        let staircase = match p.model {
            NeuronModel::If => closed_form_rate_if(mean.data()[j], p.v_th, n_steps, p.alpha),
            NeuronModel::Lif => constant_rate_lif(mean.data()[j], n_steps, p)?,
        };
        e_r[j] = rep.o.data()[j] - target;
        e_q[j] = staircase - target;
        e_d[j] = e_r[j] - e_q[j];
    }
    let shape = mean.shape().to_vec();
    Ok(ErrorDecomposition {
        e_r: Tensor::new(shape.clone(), e_r)?,
        e_q: Tensor::new(shape.clone(), e_q)?,
        e_d: Tensor::new(shape, e_d)?,
    })
}

/// Diagnostic split of the final IF potential `V[N] = V⁻ + V⁺`, where `V⁻`
/// is the charge lost to the clamp and `V⁺` the residue inside the range.
pub fn residual_split_if(currents: &[f64], final_v: f64, v_th: f64) -> (f64, f64) {
    let n = currents.len() as f64;
    let total: f64 = currents.iter().sum();
    let v_minus = if total < 0.0 {
        total
    } else if total > n * v_th {
        total - n * v_th
    } else {
        0.0
    };
    (v_minus, final_v - v_minus)
}

/// Mean |e_q| of a constant-current LIF neuron over `grid`, for each α in `alphas`.
pub fn sweep_alpha_lif(base: &NeuronParams, n_steps: usize, grid: &[f64], alphas: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let p = NeuronParams { alpha, ..*base };
        p.validate()?;
        let mut total = 0.0;
        for &i in grid {
            total += (constant_rate_lif(i, n_steps, &p)? - clamp_map(i, &p)).abs();
        }
        out.push((alpha, total / grid.len() as f64));
    }
    Ok(out)
}
