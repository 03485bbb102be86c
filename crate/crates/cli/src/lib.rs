//! Config handling and the `train`, `eval` and `analyze` commands behind the
//! `dsr` binary.
//!
//! A run is described by one TOML file with the sections `network`,
//! `neuron`, `train`, `data`, `augment` and `output`. A top-level
//! `presets = [...]` list names built-in tables that are merged in order
//! beneath the file's own values; see [`PRESETS`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dsr_core::analysis::{
    fit_bound_constant, quantize_weights, sweep_convergence, sweep_decomposition, sweep_lif_bound, sweep_staircase,
    ConvergenceSpec, QuantSpec, SweepResult,
};
use dsr_core::checkpoint;
use dsr_core::data::{load_cifar_binary, load_frame_dataset, load_idx, AugmentConfig, Dataset, Split};
use dsr_core::engine::{evaluate, EpochMetrics, EvalResult, TrainConfig, Trainer};
use dsr_core::network::{architecture_preset, build_network, LayerSpec, Network, NetworkSpec};
use dsr_core::neuron::{NeuronConfig, NeuronModel, NeuronParams};
use dsr_core::DsrError;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Built-in parameter tables, by name.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "if-default",
        r#"
[neuron]
model = "if"
v_th_init = 6.0
v_th_floor = 0.01
alpha = 0.5
"#,
    ),
    ("lif-n20", "[neuron]\nmodel = \"lif\"\nv_th_init = 0.3\nv_th_floor = 0.0005\ndt = 0.05\nalpha = 0.3\ntau = 1.0\n[train]\ntime_steps = 20\n"),
    ("lif-n15", "[neuron]\nmodel = \"lif\"\nv_th_init = 0.3\nv_th_floor = 0.0005\ndt = 0.05\nalpha = 0.4\ntau = 1.0\n[train]\ntime_steps = 15\n"),
    ("lif-n10", "[neuron]\nmodel = \"lif\"\nv_th_init = 0.3\nv_th_floor = 0.0005\ndt = 0.05\nalpha = 0.4\ntau = 1.0\n[train]\ntime_steps = 10\n"),
    ("lif-n5", "[neuron]\nmodel = \"lif\"\nv_th_init = 0.6\nv_th_floor = 0.001\ndt = 0.1\nalpha = 0.5\ntau = 1.0\n[train]\ntime_steps = 5\nlr = 0.05\n"),
    ("cifar10", "[train]\noptimizer = \"sgd\"\nepochs = 200\nlr_horizon = 200\nlr = 0.1\nbatch_size = 128\n[augment]\ncrop_pad = 4\nhflip_prob = 0.5\n"),
    ("cifar100", "[train]\noptimizer = \"sgd\"\nepochs = 200\nlr_horizon = 200\nlr = 0.1\nbatch_size = 128\n[augment]\ncrop_pad = 4\nhflip_prob = 0.5\n"),
    ("imagenet", "[train]\noptimizer = \"adam\"\nepochs = 90\nlr_horizon = 90\nlr = 0.001\nbatch_size = 144\n"),
    ("dvs-cifar10", "[train]\noptimizer = \"sgd\"\nepochs = 300\nlr_horizon = 300\nlr = 0.05\nbatch_size = 128\n"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Name of a built-in architecture; exclusive with `layers`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSpec>,
    /// Dropout probability used by architectures that have dropout.
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// IDX image and label files.
    Idx,
    /// CIFAR binary batches; labels are embedded.
    Cifar,
    /// Rank-5 SNNF frame tensors with IDX labels.
    Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Image files (several CIFAR batches are concatenated).
    pub train: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    pub test: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// Standardise channels with training-set statistics.
    #[serde(default)]
    pub normalize: bool,
    /// Nearest-neighbour resize to `[height, width]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<[usize; 2]>,
    /// Keep only the first samples of each split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Save `checkpoint-epochE.dsr` every this many epochs; 0 saves only the
    /// final `checkpoint.dsr`.
    pub save_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            save_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub presets: Vec<String>,
    pub network: NetworkConfig,
    pub neuron: NeuronConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
pub fn deep_merge(base: &mut Table, top: &Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => deep_merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn preset_table(name: &str) -> Result<Table> {
    let Some((_, text)) = PRESETS.iter().find(|(n, _)| *n == name) else {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        bail!("unknown preset {name:?}; available: {}", names.join(", "));
    };
    Ok(toml::from_str(text).expect("built-in presets parse"))
}

fn section<'a>(t: &'a Table, name: &str) -> Option<&'a Table> {
    t.get(name).and_then(Value::as_table)
}

impl RunConfig {
    /// Parses a config, resolving presets, neuron defaults and relative paths
    /// (against `base_dir`).
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let user: Table = toml::from_str(text).context("config is not valid TOML")?;
        let presets: Vec<String> = match user.get("presets") {
            None => Vec::new(),
            Some(v) => v.clone().try_into().context("`presets` must be a list of names")?,
        };
        let mut merged = Table::new();
        for p in &presets {
            deep_merge(&mut merged, &preset_table(p)?);
        }
        let mut user = user;
        user.remove("presets");
        deep_merge(&mut merged, &user);

        // neuron defaults depend on the model and the number of time steps
        let neuron_user = section(&merged, "neuron").cloned().unwrap_or_default();
        let model: NeuronModel = match neuron_user.get("model") {
            Some(v) => v.clone().try_into().context("neuron.model must be \"if\" or \"lif\"")?,
            None => NeuronModel::If,
        };
        let steps = section(&merged, "train")
            .and_then(|t| t.get("time_steps"))
            .and_then(Value::as_integer)
            .unwrap_or(TrainConfig::default().time_steps as i64)
            .max(1) as usize;
        let mut neuron = Table::try_from(NeuronConfig::defaults(model, steps)).expect("neuron config serialises");
        deep_merge(&mut neuron, &neuron_user);
        merged.insert("neuron".into(), Value::Table(neuron));

        let mut cfg: RunConfig = Value::Table(merged).try_into().context("invalid config")?;
        cfg.presets.clear();
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.train.iter_mut().chain(d.test.iter_mut()).for_each(fix);
        d.train_labels.iter_mut().chain(d.test_labels.iter_mut()).for_each(fix);
        if let Some(dir) = self.output.dir.as_mut() {
            fix(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.neuron.validate()?;
        match (&self.network.architecture, self.network.layers.is_empty()) {
            (Some(_), false) => bail!("network: give either `architecture` or `layers`, not both"),
            (None, true) => bail!("network: one of `architecture` or `layers` is required"),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.network.dropout) {
            bail!("network.dropout must lie in [0, 1)");
        }
        ensure!(
            !self.data.train.is_empty() && !self.data.test.is_empty(),
            "data: train and test files are required"
        );
        if self.data.format != DataFormat::Cifar {
            ensure!(
                self.data.train_labels.is_some() && self.data.test_labels.is_some(),
                "data: train_labels and test_labels are required for this format"
            );
            ensure!(
                self.data.train.len() == 1 && self.data.test.len() == 1,
                "data: only CIFAR batches may be given as several files"
            );
        }
        Ok(())
    }

    /// TOML text of the fully resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

fn load_split(format: DataFormat, files: &[PathBuf], labels: Option<&PathBuf>) -> Result<Dataset> {
    Ok(match format {
        DataFormat::Idx => load_idx(&files[0], labels.expect("validated"))?,
        DataFormat::Frames => load_frame_dataset(&files[0], labels.expect("validated"))?,
        DataFormat::Cifar => {
            let parts: Vec<Dataset> = files.iter().map(load_cifar_binary).collect::<dsr_core::Result<_>>()?;
            concat(parts)?
        }
    })
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let first = it.next().expect("at least one file");
    let mut data = first.samples().data().to_vec();
    let mut labels = first.labels().to_vec();
    let mut shape = first.samples().shape().to_vec();
    let mut classes = first.classes();
    for d in it {
        ensure!(
            d.samples().shape()[1..] == shape[1..],
            "CIFAR batches differ in sample shape"
        );
        data.extend_from_slice(d.samples().data());
        labels.extend_from_slice(d.labels());
        shape[0] += d.len();
        classes = classes.max(d.classes());
    }
    Ok(Dataset::new(
        dsr_core::Tensor::new(shape, data)?,
        labels,
        classes,
        Split::Train,
        first.is_temporal(),
    )?)
}

fn limit(d: Dataset, n: Option<usize>) -> Result<Dataset> {
    Ok(match n {
        Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>())?,
        _ => d,
    })
}

/// Training and test sets with resizing, normalisation and a shared class count.
pub fn load_data(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let train = load_split(cfg.format, &cfg.train, cfg.train_labels.as_ref()).context("loading training data")?;
    let test = load_split(cfg.format, &cfg.test, cfg.test_labels.as_ref()).context("loading test data")?;
    let (mut train, mut test) = (limit(train, cfg.train_limit)?, limit(test, cfg.test_limit)?);
    if let Some([h, w]) = cfg.resize {
        train = train.resized(h, w)?;
        test = test.resized(h, w)?;
    }
    if cfg.normalize {
        let (mean, std) = train.channel_stats();
        train = train.normalized(&mean, &std)?;
        test = test.normalized(&mean, &std)?;
    }
    ensure!(
        train.frame_shape() == test.frame_shape(),
        "training and test samples differ in shape"
    );
    let classes = train.classes().max(test.classes());
    Ok((
        train.with_classes(classes)?.with_split(Split::Train),
        test.with_classes(classes)?.with_split(Split::Test),
    ))
}

pub fn network_spec(cfg: &NetworkConfig, input: &[usize], classes: usize) -> Result<NetworkSpec> {
    Ok(match &cfg.architecture {
        Some(name) => architecture_preset(name, input, classes, cfg.dropout)?,
        None => NetworkSpec {
            input: input.to_vec(),
            classes,
            layers: cfg.layers.clone(),
        },
    })
}

/// Network for a config and the data it will see, initialised from the
/// training seed.
pub fn build_for(cfg: &RunConfig, data: &Dataset) -> Result<Network> {
    let spec = network_spec(&cfg.network, data.frame_shape(), data.classes())?;
    Ok(build_network(&spec, &cfg.neuron, cfg.train.seed)?)
}

pub fn metrics_header(net: &Network) -> String {
    let layers = net.threshold_ids().len();
    let mut cols = vec!["epoch", "lr", "train_loss", "reg_loss", "train_acc", "test_acc"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    cols.extend((1..=layers).map(|i| format!("vth_{i}")));
    cols.extend((1..=layers).map(|i| format!("rate_{i}")));
    cols.join(",")
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    let mut s = format!(
        "{},{},{},{},{},{}",
        m.epoch, m.lr, m.train_loss, m.reg_loss, m.train_acc, m.test_acc
    );
    for v in m.thresholds.iter().chain(&m.firing_rates) {
        let _ = write!(s, ",{v}");
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub network: Network,
}

/// Trains as configured, writing `config.resolved.toml`, `metrics.csv` and
/// checkpoints into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml())?;
    let (train, test) = load_data(&cfg.data)?;
    let mut net = build_for(cfg, &train)?;

    let metrics_path = out.join("metrics.csv");
    let mut csv = metrics_header(&net);
    csv.push('\n');
    fs::write(&metrics_path, &csv)?;

    let mut trainer = Trainer::new(cfg.train.clone(), cfg.augment)?;
    let save_every = cfg.output.save_every;
    let metrics = trainer.fit(&mut net, &train, &test, |m, net| {
        csv.push_str(&metrics_row(m));
        csv.push('\n');
        fs::write(&metrics_path, &csv)?;
        if save_every > 0 && m.epoch % save_every == 0 {
            checkpoint::save(net, out.join(format!("checkpoint-epoch{}.dsr", m.epoch)))?;
        }
        Ok(())
    })?;
    let checkpoint = out.join("checkpoint.dsr");
    checkpoint::save(&net, &checkpoint)?;
    Ok(TrainOutcome {
        metrics,
        checkpoint,
        network: net,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub full: EvalResult,
    pub quantized: Option<(u32, EvalResult)>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let rates = |r: &EvalResult| {
            r.firing_rates
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(
            s,
            "accuracy {:.4} ({}/{})",
            self.full.accuracy, self.full.correct, self.full.total
        );
        let _ = writeln!(s, "firing_rates {}", rates(&self.full));
        if let Some((bits, q)) = &self.quantized {
            let _ = writeln!(
                s,
                "quantized_{bits}bit_accuracy {:.4} ({}/{})",
                q.accuracy, q.correct, q.total
            );
            let _ = writeln!(s, "quantized_{bits}bit_firing_rates {}", rates(q));
        }
        s
    }
}

/// Test-set accuracy and firing rates of a checkpoint, optionally also with
/// weights quantized to `quant_bits`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, quant_bits: Option<u32>) -> Result<EvalReport> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.data)?;
    let mut net = build_for(cfg, &train)?;
    checkpoint::load_into(&mut net, checkpoint_path)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint_path.display()))?;
    eval_network(&net, &test, &cfg.train, quant_bits)
}

pub fn eval_network(net: &Network, test: &Dataset, train: &TrainConfig, quant_bits: Option<u32>) -> Result<EvalReport> {
    let full = evaluate(net, test, train.time_steps, train.batch_size)?;
    let quantized = match quant_bits {
        None => None,
        Some(bits) => {
            let q = quantize_weights(net, QuantSpec::new(bits)?);
            Some((bits, evaluate(&q, test, train.time_steps, train.batch_size)?))
        }
    };
    Ok(EvalReport { full, quantized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Staircase,
    Convergence,
    Decomposition,
    LifBound,
}

impl AnalyzeKind {
    pub fn name(self) -> &'static str {
        match self {
            AnalyzeKind::Staircase => "staircase",
            AnalyzeKind::Convergence => "convergence",
            AnalyzeKind::Decomposition => "decomposition",
            AnalyzeKind::LifBound => "lif-bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub kind: AnalyzeKind,
    pub v_th: f64,
    pub time_steps: usize,
    pub alpha: f64,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub n_list: Vec<usize>,
    pub tau: f64,
    pub dt: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            kind: AnalyzeKind::Staircase,
            v_th: 1.0,
            time_steps: 5,
            alpha: 1.0,
            grid_min: -0.5,
            grid_max: 1.5,
            grid_points: 200,
            n_list: vec![16, 64, 256, 1024],
            tau: 1.0,
            dt: 0.05,
            noise: 0.2,
            seed: 0,
        }
    }
}

impl AnalyzeOptions {
    /// Evenly spaced points strictly inside `[grid_min, grid_max]`
    /// (cell midpoints).
    pub fn grid(&self) -> Result<Vec<f64>> {
        if self.grid_points == 0 {
            return Err(DsrError::Parameter("empty sweep grid".into()).into());
        }
        if !(self.grid_max > self.grid_min) {
            return Err(DsrError::Parameter("grid_max must exceed grid_min".into()).into());
        }
        let step = (self.grid_max - self.grid_min) / self.grid_points as f64;
        Ok((0..self.grid_points)
            .map(|i| self.grid_min + (i as f64 + 0.5) * step)
            .collect())
    }
}

/// Runs one sweep and writes `<kind>.csv` into `out`.
pub fn cmd_analyze(opts: &AnalyzeOptions, out: &Path) -> Result<(PathBuf, SweepResult)> {
    let result = match opts.kind {
        AnalyzeKind::Staircase => sweep_staircase(opts.v_th, opts.time_steps, opts.alpha, &opts.grid()?)?,
        AnalyzeKind::Convergence => {
            let spec = ConvergenceSpec {
                v_th: opts.v_th,
                alpha: opts.alpha,
                ..ConvergenceSpec::default()
            };
            sweep_convergence(&spec, &opts.n_list, opts.seed)?
        }
        AnalyzeKind::Decomposition => {
            let p = NeuronParams::integrate_and_fire(opts.v_th, opts.alpha)?;
            sweep_decomposition(&p, opts.time_steps, &opts.grid()?, opts.noise, opts.seed)?
        }
        AnalyzeKind::LifBound => {
            let p = NeuronParams::leaky(opts.v_th, opts.tau, opts.dt, opts.alpha)?;
            let mut r = sweep_lif_bound(&p, &opts.n_list, &opts.grid()?)?;
            let c = fit_bound_constant(&r);
            r.columns.push("fitted_c".into());
            r.rows.iter_mut().for_each(|row| row.push(c));
            r
        }
    };
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join(format!("{}.csv", opts.kind.name()));
    result.write_csv(&path)?;
    Ok((path, result))
}
