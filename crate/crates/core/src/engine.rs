//! Training by differentiating spike representations.
//!
//! A step simulates the network forward without gradient tracking, then
//! rebuilds a differentiable chain from the recorded representations: each
//! spiking layer becomes `clamp(pre, 0, b)` whose forward value is replaced
//! by the simulated representation while its backward pass follows the clamp.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{channel_moments, BnStats, Graph, Var};
use crate::data::{AugmentConfig, Dataset};
use crate::error::{bail, DsrError, Result};
use crate::network::{ForwardRecord, Layer, Mode, Network, ParamKind, Trace};
use crate::neuron::NeuronModel;
use crate::tensor::Tensor;

/// How the clamp-bound part of a threshold gradient is rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdScale {
    /// Divide by the batch size; for LIF also multiply by `Δt`.
    BatchModel,
    /// Divide by the batch size only.
    Batch,
    /// Leave the summed gradient as is.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub time_steps: usize,
    pub train_thresholds: bool,
    pub threshold_l2: f64,
    pub threshold_scale: ThresholdScale,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine schedule length in epochs; 0 keeps the learning rate constant.
    pub lr_horizon: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            time_steps: 20,
            train_thresholds: true,
            threshold_l2: 1e-3,
            threshold_scale: ThresholdScale::BatchModel,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_horizon: 200,
            batch_size: 128,
            epochs: 200,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_steps == 0 {
            bail!(Parameter, "time_steps must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Parameter, "batch_size must be at least 1");
        }
        if !(self.lr >= 0.0) || !(self.threshold_l2 >= 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Parameter, "lr, threshold_l2 and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Parameter, "momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Simulates the network and returns every recorded quantity; the logits are
/// `record.logits()`.
pub fn forward_collect(
    net: &Network,
    frames: &Tensor,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardRecord> {
    net.forward(frames, mode, rng)
}

/// Loss, logits and per-parameter gradients of the surrogate chain.
#[derive(Debug, Clone)]
pub struct SurrogateGrads {
    pub loss: f64,
    pub logits: Tensor,
    /// Indexed like `net.params()`; `None` for buffers. Threshold entries
    /// are the unscaled gradients of the batch-mean loss.
    pub grads: Vec<Option<Vec<f64>>>,
}

struct Chain<'a> {
    net: &'a Network,
    vars: Vec<Option<Var>>,
    traces: std::slice::Iter<'a, Trace>,
}

impl Chain<'_> {
    fn next_trace(&mut self) -> Result<&Trace> {
        match self.traces.next() {
            Some(t) => Ok(t),
            None => bail!(Usage, "forward record is missing representations for this network"),
        }
    }

    fn var(&self, id: usize) -> Var {
        self.vars[id].expect("trainable parameter has a graph leaf")
    }

    fn run(&mut self, g: &mut Graph, layers: &[Layer], mut x: Var) -> Result<Var> {
        for layer in layers {
            x = self.apply(g, layer, x)?;
        }
        Ok(x)
    }

    fn apply(&mut self, g: &mut Graph, layer: &Layer, x: Var) -> Result<Var> {
        Ok(match layer {
            &Layer::Fc { weight, .. } => {
                let wt = g.transpose(self.var(weight))?;
                g.matmul(x, wt)?
            }
            &Layer::Conv {
                weight,
                stride,
                padding,
            } => g.conv2d(x, self.var(weight), stride, padding)?,
            &Layer::AvgPool { kernel } => g.avg_pool2d(x, kernel)?,
            &Layer::BatchNorm { gamma, beta, eps, .. } => {
                let Trace::BatchNorm { mean, var, mode, .. } = self.next_trace()? else {
                    bail!(Usage, "forward record does not match the network layers");
                };
                let stats = match mode {
                    // shift the batch moments of the representations onto the
                    // folded moments seen during simulation
                    Mode::Train => {
                        let (bm, bv) = channel_moments(g.value(x));
                        BnStats::Batch {
                            mean_offset: mean.iter().zip(&bm).map(|(a, b)| a - b).collect(),
                            var_offset: var.iter().zip(&bv).map(|(a, b)| a - b).collect(),
                        }
                    }
                    Mode::Eval => BnStats::Fixed {
                        mean: mean.clone(),
                        var: var.clone(),
                    },
                };
                g.batch_norm(x, self.var(gamma), self.var(beta), stats, eps)?
            }
            &Layer::Spiking { threshold, .. } => {
                let Trace::Spiking { rep, .. } = self.next_trace()? else {
                    bail!(Usage, "forward record does not match the network layers");
                };
                let rep = rep.clone();
                let th = self.var(threshold);
                let neuron = self.net.neuron();
                let clamped = match neuron.model {
                    NeuronModel::If => g.clamp(x, 0.0, th)?,
                    NeuronModel::Lif => {
                        let pre = g.scale(x, 1.0 / neuron.tau);
                        let hi = g.scale(th, 1.0 / neuron.dt);
                        g.clamp(pre, 0.0, hi)?
                    }
                };
                g.substitute(clamped, rep)?
            }
            Layer::Dropout { .. } => {
                let Trace::Dropout { mask } = self.next_trace()? else {
                    bail!(Usage, "forward record does not match the network layers");
                };
                match mask {
                    Some(m) => {
                        let m = g.constant(m.clone());
                        g.mul(x, m)?
                    }
                    None => x,
                }
            }
            Layer::Flatten => {
                let shape = g.value(x).shape();
                let (b, rest) = (shape[0], shape[1..].iter().product::<usize>());
                g.reshape(x, &[b, rest])?
            }
            Layer::Residual { body, shortcut } => {
                let main = self.run(g, body, x)?;
                let side = self.run(g, shortcut, x)?;
                g.add(main, side)?
            }
        })
    }
}

/// Builds the surrogate chain from `record` and backpropagates the
/// softmax cross-entropy of `labels` through it.
pub fn surrogate_backward(net: &Network, record: &ForwardRecord, labels: &[usize]) -> Result<SurrogateGrads> {
    if labels.len() != record.batch {
        bail!(Dimension, "{} labels for a batch of {}", labels.len(), record.batch);
    }
    let mut g = Graph::new();
    let vars: Vec<Option<Var>> = net
        .params()
        .iter()
        .map(|p| p.kind.trainable().then(|| g.param(p.value.clone())))
        .collect();
    let input = g.constant(record.input.clone());
    let mut chain = Chain {
        net,
        vars,
        traces: record.traces.iter(),
    };
    let out = chain.run(&mut g, net.layers(), input)?;
    if chain.traces.next().is_some() {
        bail!(Usage, "forward record has more layers than the network");
    }
    let loss = g.softmax_cross_entropy(out, labels)?;
    g.backward(loss)?;
    let grads = chain
        .vars
        .iter()
        .zip(net.params())
        .map(|(v, p)| {
            v.map(|v| {
                g.grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
        })
        .collect();
    Ok(SurrogateGrads {
        loss: g.value(loss).item(),
        logits: g.value(out).clone(),
        grads,
    })
}

/// Rescales a threshold gradient summed over the batch.
pub fn scale_threshold_grad(raw: f64, batch_size: usize, model: NeuronModel, dt: f64, rule: ThresholdScale) -> f64 {
    match rule {
        ThresholdScale::None => raw,
        ThresholdScale::Batch => raw / batch_size as f64,
        ThresholdScale::BatchModel => match model {
            NeuronModel::If => raw / batch_size as f64,
            NeuronModel::Lif => raw / batch_size as f64 * dt,
        },
    }
}

/// `coeff·Σ V_th²` and its gradient `2·coeff·V_th`.
pub fn regularize_thresholds(thresholds: &[f64], coeff: f64) -> (f64, Vec<f64>) {
    let term = coeff * thresholds.iter().map(|v| v * v).sum::<f64>();
    (term, thresholds.iter().map(|v| 2.0 * coeff * v).collect())
}

/// `lr₀·(1 + cos(π·e/horizon))/2`, held at 0 past the horizon.
pub fn cosine_lr(epoch: usize, lr0: f64, horizon: usize) -> f64 {
    if horizon == 0 {
        return lr0;
    }
    let e = epoch.min(horizon) as f64;
    lr0 * (1.0 + (std::f64::consts::PI * e / horizon as f64).cos()) / 2.0
}

/// SGD with momentum or Adam. Weight decay applies to every trainable
/// parameter except thresholds.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.momentum, cfg.weight_decay)
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Option<Vec<f64>>], lr: f64) {
        let params = net.params_mut();
        if self.first.len() != params.len() {
            self.first = vec![None; params.len()];
            self.second = vec![None; params.len()];
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let decay = if p.kind == ParamKind::Threshold {
                0.0
            } else {
                self.weight_decay
            };
            let w = p.value.data_mut();
            let d: Vec<f64> = g.iter().zip(w.iter()).map(|(g, w)| g + decay * w).collect();
            match self.kind {
                OptimizerKind::Sgd => {
                    let buf = self.first[i].get_or_insert_with(|| vec![0.0; d.len()]);
                    for ((b, di), wi) in buf.iter_mut().zip(&d).zip(w.iter_mut()) {
                        *b = self.momentum * *b + di;
                        *wi -= lr * *b;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| vec![0.0; d.len()]);
                    let v = self.second[i].get_or_insert_with(|| vec![0.0; d.len()]);
                    let c1 = 1.0 - self.beta1.powi(self.step as i32);
                    let c2 = 1.0 - self.beta2.powi(self.step as i32);
                    for j in 0..d.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d[j] * d[j];
                        w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub reg_loss: f64,
    pub correct: usize,
    pub batch: usize,
    pub firing: Vec<(usize, usize)>,
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Gradients of one batch with threshold scaling and regularisation applied,
/// as used by [`train_step`].
pub fn step_gradients(
    net: &Network,
    record: &ForwardRecord,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(SurrogateGrads, f64)> {
    let mut sg = surrogate_backward(net, record, labels)?;
    if !sg.loss.is_finite() {
        return Err(DsrError::NonFinite(format!("loss is {}", sg.loss)));
    }
    let b = labels.len();
    let neuron = net.neuron();
    let mut reg_loss = 0.0;
    let ids = net.threshold_ids();
    let (term, reg_grads) = regularize_thresholds(&net.thresholds(), cfg.threshold_l2);
    if cfg.train_thresholds {
        reg_loss = term;
    }
    for (&id, rg) in ids.iter().zip(reg_grads) {
        let entry = &mut sg.grads[id];
        if cfg.train_thresholds {
            let g = entry.as_mut().expect("thresholds are trainable");
            // the chain differentiates the batch mean; the rule expects the batch sum
            let raw = g[0] * b as f64;
            g[0] = scale_threshold_grad(raw, b, neuron.model, neuron.dt, cfg.threshold_scale) + rg;
        } else {
            *entry = None;
        }
    }
    for (g, p) in sg.grads.iter().zip(net.params()) {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DsrError::NonFinite(format!("gradient of {} is not finite", p.name)));
            }
        }
    }
    Ok((sg, reg_loss))
}

/// Forward, surrogate backward, regularised and scaled threshold gradients,
/// optimiser update, then the threshold floor.
pub fn train_step(
    net: &mut Network,
    opt: &mut Optimizer,
    frames: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let record = net.forward(frames, Mode::Train, Some(rng))?;
    let (sg, reg_loss) = step_gradients(net, &record, labels, cfg)?;
    net.commit_running_stats(&record)?;
    opt.step(net, &sg.grads, lr);
    let floor = net.neuron().v_th_floor;
    net.floor_thresholds(floor);
    Ok(StepStats {
        loss: sg.loss,
        reg_loss,
        correct: count_correct(&sg.logits, labels),
        batch: labels.len(),
        firing: record.firing_counts(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    /// Fraction of (neuron, step) pairs that fired, per spiking layer.
    pub firing_rates: Vec<f64>,
}

fn rates(counts: &[(usize, usize)]) -> Vec<f64> {
    counts
        .iter()
        .map(|&(s, n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
        .collect()
}

fn add_counts(acc: &mut Vec<(usize, usize)>, counts: &[(usize, usize)]) {
    if acc.is_empty() {
        acc.resize(counts.len(), (0, 0));
    }
    for (a, c) in acc.iter_mut().zip(counts) {
        a.0 += c.0;
        a.1 += c.1;
    }
}

/// Evaluation-mode accuracy, mean loss and firing rates over a dataset.
pub fn evaluate(net: &Network, data: &Dataset, time_steps: usize, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        bail!(Parameter, "cannot evaluate on an empty dataset");
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut loss_sum) = (0, 0.0);
    let mut counts = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (frames, labels) = data.batch::<ChaCha8Rng>(chunk, time_steps, None)?;
        let record = net.forward(&frames, Mode::Eval, None)?;
        let logits = record.logits();
        correct += count_correct(logits, &labels);
        loss_sum += cross_entropy_sum(logits, &labels)?;
        add_counts(&mut counts, &record.firing_counts());
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        correct,
        total: data.len(),
        firing_rates: rates(&counts),
    })
}

fn cross_entropy_sum(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.softmax_cross_entropy(l, labels)?;
    Ok(g.value(loss).item() * labels.len() as f64)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub reg_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub thresholds: Vec<f64>,
    /// Test-set firing rates per spiking layer.
    pub firing_rates: Vec<f64>,
}

/// Owns the optimiser state and the random stream of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub augment: AugmentConfig,
    opt: Optimizer,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, augment: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: Optimizer::from_config(&cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            augment,
            epoch: 0,
        })
    }

    /// Trains one epoch over a shuffled pass of `train`, then evaluates on `test`.
    pub fn run_epoch(&mut self, net: &mut Network, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        if train.is_empty() {
            bail!(Parameter, "empty training set");
        }
        let lr = cosine_lr(self.epoch, self.cfg.lr, self.cfg.lr_horizon);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut reg_sum, mut correct, mut steps) = (0.0, 0.0, 0, 0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let aug = (!self.augment.is_identity()).then_some((&self.augment, &mut self.rng));
            let (frames, labels) = train.batch(chunk, self.cfg.time_steps, aug)?;
            let s = train_step(net, &mut self.opt, &frames, &labels, &self.cfg, lr, &mut self.rng)?;
            loss_sum += s.loss * s.batch as f64;
            reg_sum += s.reg_loss;
            correct += s.correct;
            steps += 1;
        }
        let eval = evaluate(net, test, self.cfg.time_steps, self.cfg.batch_size)?;
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            reg_loss: reg_sum / steps as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: eval.accuracy,
            thresholds: net.thresholds(),
            firing_rates: eval.firing_rates,
        })
    }

    /// Runs `cfg.epochs` epochs, reporting each to `on_epoch`.
    pub fn fit(
        &mut self,
        net: &mut Network,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&EpochMetrics, &Network) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let m = self.run_epoch(net, train, test)?;
            on_epoch(&m, net)?;
            out.push(m);
        }
        Ok(out)
    }
}
