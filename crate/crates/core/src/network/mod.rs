//! Spiking networks built from a [`NetworkSpec`], with a time-folded forward
//! simulation.
//!
//! Signals between layers are laid out `[N·B, ...]` with row index `n·B + b`,
//! so linear, convolutional and normalisation layers process all time steps
//! in one call. Spiking layers integrate over the time axis and emit
//! `spike_weight·s[n]`.

mod batchnorm;
mod spec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use batchnorm::{bn_timefold, BnParams, Mode};
pub use spec::{architecture_preset, digits_conv, preact_resnet, vgg11, LayerSpec, NetworkSpec, ARCHITECTURE_PRESETS};

use crate::autodiff::channel_moments;
use crate::error::{bail, Result};
use crate::kernels::{self, ConvGeom};
use crate::neuron::{integrate_folded, NeuronConfig, NeuronModel, NeuronParams};
use crate::representation::rep_input;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamKind {
    Weight,
    Threshold,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not optimised.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Fc {
        weight: usize,
        inputs: usize,
        outputs: usize,
    },
    Conv {
        weight: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        kernel: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
        eps: f64,
        momentum: f64,
    },
    Spiking {
        threshold: usize,
        alpha: f64,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// Per-layer quantities recorded by a forward pass, in layer order
/// (residual bodies before shortcuts).
#[derive(Debug, Clone, PartialEq)]
pub enum Trace {
    /// Representation `o` of shape `[B, ...]` plus firing counts.
    Spiking {
        rep: Tensor,
        spikes: usize,
        neuron_steps: usize,
    },
    /// Statistics used to normalise: folded batch moments in training mode,
    /// running statistics in evaluation mode.
    BatchNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        count: usize,
        mode: Mode,
    },
    /// Dropout mask of shape `[B, ...]`, if one was applied.
    Dropout { mask: Option<Tensor> },
}

#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub time_steps: usize,
    pub batch: usize,
    /// Input representation `[B, ...]`.
    pub input: Tensor,
    pub traces: Vec<Trace>,
    /// Binary spike trains `[N, B, ...]` per spiking layer, when requested.
    pub spikes: Vec<Tensor>,
}

impl ForwardRecord {
    pub fn representations(&self) -> Vec<&Tensor> {
        self.traces
            .iter()
            .filter_map(|t| match t {
                Trace::Spiking { rep, .. } => Some(rep),
                _ => None,
            })
            .collect()
    }

    /// Output representation `o^L`, used as logits.
    pub fn logits(&self) -> &Tensor {
        self.representations()
            .pop()
            .expect("network has a spiking output layer")
    }

    /// Fraction of (neuron, step) pairs that fired, per spiking layer.
    pub fn firing_counts(&self) -> Vec<(usize, usize)> {
        self.traces
            .iter()
            .filter_map(|t| match t {
                Trace::Spiking {
                    spikes, neuron_steps, ..
                } => Some((*spikes, *neuron_steps)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    neuron: NeuronConfig,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    neuron: &'a NeuronConfig,
}

/// Adds a spiking layer after every pooling layer that lacks one, and at the
/// end of the top-level list.
fn with_spiking(specs: &[LayerSpec], top: bool) -> Vec<LayerSpec> {
    let mut out = Vec::with_capacity(specs.len() + 1);
    for (i, s) in specs.iter().enumerate() {
        out.push(s.clone());
        if matches!(s, LayerSpec::Avgpool { .. }) && !matches!(specs.get(i + 1), Some(LayerSpec::Spiking { .. })) {
            out.push(LayerSpec::spiking());
        }
    }
    if top && !matches!(out.last(), Some(LayerSpec::Spiking { .. })) {
        out.push(LayerSpec::spiking());
    }
    out
}

impl Builder<'_> {
    fn add(&mut self, name: String, kind: ParamKind, value: Tensor) -> usize {
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.add(name, ParamKind::Weight, Tensor::new(shape.to_vec(), data).unwrap())
    }

    fn build(
        &mut self,
        specs: &[LayerSpec],
        mut shape: Vec<usize>,
        prefix: &str,
        top: bool,
    ) -> Result<(Vec<Layer>, Vec<usize>)> {
        let specs = with_spiking(specs, top);
        let mut layers = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            let name = format!("{prefix}{i}");
            let layer = match s {
                &LayerSpec::Fc { inputs, outputs } => {
                    if shape != [inputs] {
                        bail!(Spec, "layer {name}: fc expects input [{inputs}] but receives {shape:?}");
                    }
                    if outputs == 0 {
                        bail!(Spec, "layer {name}: fc needs at least one output");
                    }
                    shape = vec![outputs];
                    Layer::Fc {
                        weight: self.weight(format!("{name}.weight"), &[outputs, inputs], inputs),
                        inputs,
                        outputs,
                    }
                }
                &LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let &[c, h, w] = shape.as_slice() else {
                        bail!(Spec, "layer {name}: conv expects [C, H, W] but receives {shape:?}");
                    };
                    if c != in_channels {
                        bail!(
                            Spec,
                            "layer {name}: conv expects {in_channels} channels but receives {c}"
                        );
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        bail!(Spec, "layer {name}: conv kernel, stride and channels must be positive");
                    }
                    if kernel > h + 2 * padding || kernel > w + 2 * padding {
                        bail!(Spec, "layer {name}: kernel {kernel} exceeds padded input {h}x{w}");
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    shape = vec![out_channels, oh, ow];
                    let fan_in = in_channels * kernel * kernel;
                    Layer::Conv {
                        weight: self.weight(
                            format!("{name}.weight"),
                            &[out_channels, in_channels, kernel, kernel],
                            fan_in,
                        ),
                        stride,
                        padding,
                    }
                }
                &LayerSpec::Avgpool { kernel } => {
                    let &[c, h, w] = shape.as_slice() else {
                        bail!(Spec, "layer {name}: avgpool expects [C, H, W] but receives {shape:?}");
                    };
                    if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                        bail!(Spec, "layer {name}: {h}x{w} is not divisible by pool size {kernel}");
                    }
                    shape = vec![c, h / kernel, w / kernel];
                    Layer::AvgPool { kernel }
                }
                &LayerSpec::Bn { eps, momentum } => {
                    if !(eps > 0.0) || !(momentum > 0.0 && momentum < 1.0) {
                        bail!(Spec, "layer {name}: bn needs eps > 0 and momentum in (0, 1)");
                    }
                    let c = shape[0];
                    Layer::BatchNorm {
                        gamma: self.add(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::full(&[c], 1.0)),
                        beta: self.add(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(&[c])),
                        mean: self.add(
                            format!("{name}.running_mean"),
                            ParamKind::RunningMean,
                            Tensor::zeros(&[c]),
                        ),
                        var: self.add(
                            format!("{name}.running_var"),
                            ParamKind::RunningVar,
                            Tensor::full(&[c], 1.0),
                        ),
                        eps,
                        momentum,
                    }
                }
                &LayerSpec::Spiking { v_th, alpha } => {
                    let v_th = v_th.unwrap_or(self.neuron.v_th_init);
                    let alpha = alpha.unwrap_or(self.neuron.alpha);
                    self.neuron
                        .params(v_th, alpha)
                        .validate()
                        .map_err(|e| crate::DsrError::Spec(format!("layer {name}: {e}")))?;
                    Layer::Spiking {
                        threshold: self.add(format!("{name}.threshold"), ParamKind::Threshold, Tensor::scalar(v_th)),
                        alpha,
                    }
                }
                &LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        bail!(Spec, "layer {name}: dropout probability must lie in [0, 1)");
                    }
                    Layer::Dropout { p }
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::ResidualBlock { body, shortcut } => {
                    let (body, body_shape) = self.build(body, shape.clone(), &format!("{name}.body."), false)?;
                    let (shortcut, short_shape) =
                        self.build(shortcut, shape.clone(), &format!("{name}.shortcut."), false)?;
                    if body_shape != short_shape {
                        bail!(
                            Spec,
                            "layer {name}: residual body yields {body_shape:?} but shortcut yields {short_shape:?}"
                        );
                    }
                    shape = body_shape;
                    Layer::Residual { body, shortcut }
                }
            };
            layers.push(layer);
        }
        Ok((layers, shape))
    }
}

/// Builds a network with weights drawn from `N(0, 2/fan_in)` under `seed`.
pub fn build_network(spec: &NetworkSpec, neuron: &NeuronConfig, seed: u64) -> Result<Network> {
    neuron.validate()?;
    if spec.input.is_empty() || spec.input.iter().any(|&d| d == 0) {
        bail!(
            Spec,
            "input shape {:?} must be non-empty with positive extents",
            spec.input
        );
    }
    if spec.classes == 0 {
        bail!(Spec, "network needs at least one class");
    }
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        neuron,
    };
    let (layers, out) = b.build(&spec.layers, spec.input.clone(), "layers.", true)?;
    if out != [spec.classes] {
        bail!(
            Spec,
            "network output shape {out:?} does not match {} classes",
            spec.classes
        );
    }
    Ok(Network {
        spec: spec.clone(),
        neuron: *neuron,
        layers,
        params: b.params,
    })
}

struct Pass<'a> {
    n: usize,
    b: usize,
    mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    keep_spikes: bool,
    traces: Vec<Trace>,
    spikes: Vec<Tensor>,
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn neuron(&self) -> &NeuronConfig {
        &self.neuron
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Indices of threshold parameters, in layer order.
    pub fn threshold_ids(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].kind == ParamKind::Threshold)
            .collect()
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.threshold_ids()
            .iter()
            .map(|&i| self.params[i].value.item())
            .collect()
    }

    /// Raises every threshold to at least `floor`.
    pub fn floor_thresholds(&mut self, floor: f64) {
        for i in self.threshold_ids() {
            let v = &mut self.params[i].value.data_mut()[0];
            *v = v.max(floor);
        }
    }

    /// Neuron parameters of a spiking layer given its threshold index and alpha.
    pub(crate) fn neuron_params(&self, threshold: usize, alpha: f64) -> NeuronParams {
        self.neuron.params(self.params[threshold].value.item(), alpha)
    }

    /// SHA-256 of the architecture and the neuron model settings that
    /// determine how stored parameters are interpreted.
    pub fn digest(&self) -> [u8; 32] {
        let material = serde_json::json!({
            "network": self.spec,
            "model": self.neuron.model,
            "tau": self.neuron.tau,
            "dt": self.neuron.dt,
        });
        Sha256::digest(serde_json::to_vec(&material).expect("spec serialises")).into()
    }

    /// Simulates `frames: [N, B, ...input]` through every layer.
    ///
    /// Training mode needs `rng` when the network has dropout. Running BN
    /// statistics are not touched; see [`Network::commit_running_stats`].
    pub fn forward(&self, frames: &Tensor, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardRecord> {
        self.forward_impl(frames, mode, rng, false)
    }

    /// As [`Network::forward`], also returning every layer's spike train.
    pub fn forward_keep_spikes(
        &self,
        frames: &Tensor,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardRecord> {
        self.forward_impl(frames, mode, rng, true)
    }

    fn forward_impl(
        &self,
        frames: &Tensor,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        keep_spikes: bool,
    ) -> Result<ForwardRecord> {
        let shape = frames.shape();
        if shape.len() < 3 || shape[2..] != self.spec.input[..] {
            bail!(
                Dimension,
                "frames {:?} do not match [N, B, {:?}]",
                shape,
                self.spec.input
            );
        }
        let (n, b) = (shape[0], shape[1]);
        let per_step = frames.clone().reshape(&[n, frames.numel() / n])?;
        let lambda = self.neuron.params(1.0, 1.0).lambda();
        let mut sample_shape = vec![b];
        sample_shape.extend_from_slice(&self.spec.input);
        let input = rep_input(&per_step, self.neuron.model, lambda, self.neuron.dt)?.reshape(&sample_shape)?;

        let mut folded_shape = vec![n * b];
        folded_shape.extend_from_slice(&self.spec.input);
        let mut signal = frames.clone().reshape(&folded_shape)?;
        if self.neuron.model == NeuronModel::Lif {
            let inv_dt = 1.0 / self.neuron.dt;
            signal.data_mut().iter_mut().for_each(|v| *v *= inv_dt);
        }
        let mut pass = Pass {
            n,
            b,
            mode,
            rng,
            keep_spikes,
            traces: Vec::new(),
            spikes: Vec::new(),
        };
        self.run(&self.layers, signal, &mut pass)?;
        Ok(ForwardRecord {
            time_steps: n,
            batch: b,
            input,
            traces: pass.traces,
            spikes: pass.spikes,
        })
    }

    fn run(&self, layers: &[Layer], mut x: Tensor, pass: &mut Pass) -> Result<Tensor> {
        for layer in layers {
            x = self.apply(layer, x, pass)?;
        }
        Ok(x)
    }

    fn apply(&self, layer: &Layer, x: Tensor, pass: &mut Pass) -> Result<Tensor> {
        let rows = x.shape()[0];
        Ok(match layer {
            &Layer::Fc {
                weight,
                inputs,
                outputs,
            } => {
                let wt = kernels::transpose(self.params[weight].value.data(), outputs, inputs);
                Tensor::new(
                    vec![rows, outputs],
                    kernels::matmul(x.data(), &wt, rows, inputs, outputs),
                )?
            }
            &Layer::Conv {
                weight,
                stride,
                padding,
            } => {
                let w = &self.params[weight].value;
                let (xs, ws) = (x.shape(), w.shape());
                let g = ConvGeom {
                    batch: rows,
                    in_channels: xs[1],
                    height: xs[2],
                    width: xs[3],
                    out_channels: ws[0],
                    kernel_h: ws[2],
                    kernel_w: ws[3],
                    stride,
                    padding,
                };
                Tensor::new(
                    vec![rows, g.out_channels, g.out_height(), g.out_width()],
                    kernels::conv2d_forward(x.data(), w.data(), &g),
                )?
            }
            &Layer::AvgPool { kernel } => {
                let s = x.shape();
                let (c, h, w) = (s[1], s[2], s[3]);
                Tensor::new(
                    vec![rows, c, h / kernel, w / kernel],
                    kernels::avg_pool_forward(x.data(), rows * c, h, w, kernel),
                )?
            }
            &Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
                ..
            } => {
                let c = x.shape()[1];
                let count = x.numel() / c;
                let (m, v) = match pass.mode {
                    Mode::Train => channel_moments(&x),
                    Mode::Eval => (
                        self.params[mean].value.data().to_vec(),
                        self.params[var].value.data().to_vec(),
                    ),
                };
                let y = batchnorm::normalize(
                    &x,
                    &m,
                    &v,
                    self.params[gamma].value.data(),
                    self.params[beta].value.data(),
                    eps,
                );
                pass.traces.push(Trace::BatchNorm {
                    mean: m,
                    var: v,
                    count,
                    mode: pass.mode,
                });
                y
            }
            &Layer::Spiking { threshold, alpha } => {
                let p = self.neuron_params(threshold, alpha);
                let mut out = vec![0.0; x.numel()];
                let (acc, count) = integrate_folded(x.data(), pass.n, &p, &mut out);
                let factor = match p.model {
                    NeuronModel::If => p.v_th / pass.n as f64,
                    NeuronModel::Lif => {
                        let lambda = p.lambda();
                        let norm: f64 = (0..pass.n).map(|k| lambda.powi(k as i32)).sum();
                        p.v_th / (norm * p.dt)
                    }
                };
                let mut rep_shape = vec![pass.b];
                rep_shape.extend_from_slice(&x.shape()[1..]);
                let rep = Tensor::new(rep_shape, acc.iter().map(|a| a * factor).collect())?;
                if pass.keep_spikes {
                    let mut s_shape = vec![pass.n, pass.b];
                    s_shape.extend_from_slice(&x.shape()[1..]);
                    pass.spikes.push(Tensor::new(
                        s_shape,
                        out.iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect(),
                    )?);
                }
                pass.traces.push(Trace::Spiking {
                    rep,
                    spikes: count,
                    neuron_steps: x.numel(),
                });
                Tensor::new(x.shape().to_vec(), out)?
            }
            &Layer::Dropout { p } => {
                if pass.mode == Mode::Eval || p == 0.0 {
                    pass.traces.push(Trace::Dropout { mask: None });
                    x
                } else {
                    let Some(rng) = pass.rng.as_deref_mut() else {
                        bail!(Usage, "training-mode dropout needs a random generator");
                    };
                    let width = x.numel() / rows;
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..pass.b * width)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    let mut y = x;
                    for (i, v) in y.data_mut().iter_mut().enumerate() {
                        *v *= mask[i % (pass.b * width)];
                    }
                    let mut mask_shape = vec![pass.b];
                    mask_shape.extend_from_slice(&y.shape()[1..]);
                    pass.traces.push(Trace::Dropout {
                        mask: Some(Tensor::new(mask_shape, mask)?),
                    });
                    y
                }
            }
            Layer::Flatten => {
                let width = x.numel() / rows;
                x.reshape(&[rows, width])?
            }
            Layer::Residual { body, shortcut } => {
                let main = self.run(body, x.clone(), pass)?;
                let side = self.run(shortcut, x, pass)?;
                let mut y = main;
                for (a, b) in y.data_mut().iter_mut().zip(side.data()) {
                    *a += b;
                }
                y
            }
        })
    }

    /// Folds the training-mode BN statistics of `record` into the running
    /// averages.
    pub fn commit_running_stats(&mut self, record: &ForwardRecord) -> Result<()> {
        let mut bn_layers = Vec::new();
        collect_bn(&self.layers, &mut bn_layers);
        let bn_traces = record.traces.iter().filter_map(|t| match t {
            Trace::BatchNorm { mean, var, count, mode } => Some((mean, var, *count, *mode)),
            _ => None,
        });
        let bn_traces: Vec<_> = bn_traces.collect();
        if bn_traces.len() != bn_layers.len() {
            bail!(Usage, "forward record does not belong to this network");
        }
        for ((mean_id, var_id, momentum), (m, v, count, mode)) in bn_layers.into_iter().zip(bn_traces) {
            if mode != Mode::Train {
                continue;
            }
            let mut rm = self.params[mean_id].value.data().to_vec();
            let mut rv = self.params[var_id].value.data().to_vec();
            batchnorm::update_running(&mut rm, &mut rv, m, v, count, momentum);
            self.params[mean_id].value.data_mut().copy_from_slice(&rm);
            self.params[var_id].value.data_mut().copy_from_slice(&rv);
        }
        Ok(())
    }

    /// Names of the spiking layers, in forward order.
    pub fn spiking_layer_names(&self) -> Vec<String> {
        self.threshold_ids()
            .iter()
            .map(|&i| self.params[i].name.trim_end_matches(".threshold").to_string())
            .collect()
    }
}

fn collect_bn(layers: &[Layer], out: &mut Vec<(usize, usize, f64)>) {
    for l in layers {
        match l {
            &Layer::BatchNorm {
                mean, var, momentum, ..
            } => out.push((mean, var, momentum)),
            Layer::Residual { body, shortcut } => {
                collect_bn(body, out);
                collect_bn(shortcut, out);
            }
            _ => {}
        }
    }
}
