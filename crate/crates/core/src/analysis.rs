//! Weight quantization, firing-rate reports and representation sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::engine::evaluate;
use crate::error::{bail, Result};
use crate::network::{build_network, LayerSpec, Mode, Network, NetworkSpec, ParamKind};
use crate::neuron::{constant_current_spikes, simulate_layer, NeuronConfig, NeuronModel, NeuronParams, NeuronState};
use crate::representation::{closed_form_rate_if, constant_rate_lif, decompose_error, surrogate_map_if};
use crate::tensor::Tensor;

/// Symmetric per-tensor quantization to signed `bits`-bit integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
}

impl QuantSpec {
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            bail!(Parameter, "quantization needs between 2 and 32 bits, got {bits}");
        }
        Ok(Self { bits })
    }

    /// Largest integer level, `2^{bits−1} − 1`.
    pub fn levels(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64
    }

    /// Step `max|w|/levels`, nudged by a few ulps when needed so that
    /// re-quantizing the result recovers the same step.
    pub fn scale(&self, t: &Tensor) -> f64 {
        let m = t.max_abs();
        let q = self.levels();
        let s0 = m / q;
        if m == 0.0 || (q * s0) == m {
            return s0;
        }
        let fixed = |s: f64| (q * s) / q == s;
        let mut up = s0;
        let mut down = s0;
        for _ in 0..64 {
            if fixed(up) {
                return up;
            }
            if fixed(down) {
                return down;
            }
            up = f64::from_bits(up.to_bits() + 1);
            down = f64::from_bits(down.to_bits() - 1);
        }
        s0
    }
}

/// `round(w/s)·s` elementwise.
pub fn quantize_tensor(t: &Tensor, spec: QuantSpec) -> Tensor {
    let s = spec.scale(t);
    if s == 0.0 {
        return t.clone();
    }
    t.map(|w| (w / s).round() * s)
}

/// Graph form with a straight-through backward, for quantization-aware training.
pub fn quantize_ste(g: &mut Graph, x: Var, spec: QuantSpec) -> Result<Var> {
    let s = spec.scale(g.value(x));
    if s == 0.0 {
        return Ok(x);
    }
    g.round_ste(x, s)
}

/// Copy of `net` with every weight tensor quantized; thresholds and BN
/// parameters are left as they are.
pub fn quantize_weights(net: &Network, spec: QuantSpec) -> Network {
    let mut out = net.clone();
    for p in out.params_mut() {
        if p.kind == ParamKind::Weight {
            p.value = quantize_tensor(&p.value, spec);
        }
    }
    out
}

/// Mean spike rate of every spiking layer over the dataset.
pub fn firing_rate_report(net: &Network, data: &Dataset, time_steps: usize) -> Result<Vec<f64>> {
    if data.is_empty() {
        bail!(Parameter, "empty dataset");
    }
    Ok(evaluate(net, data, time_steps, 128)?.firing_rates)
}

/// Named columns of finite values, one row per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SweepResult {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "sweep produced a non-finite value: {row:?}");
        }
        self.rows.push(row);
        Ok(())
    }
}

fn sorted_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        bail!(Parameter, "empty sweep grid");
    }
    if grid.iter().any(|v| !v.is_finite()) {
        bail!(Parameter, "sweep grid contains non-finite values");
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    Ok(g)
}

/// Constant-current IF rates: simulated, closed form and the clamp reference.
pub fn sweep_staircase(v_th: f64, n_steps: usize, alpha: f64, grid: &[f64]) -> Result<SweepResult> {
    if n_steps == 0 {
        bail!(Parameter, "need at least one time step");
    }
    let p = NeuronParams::integrate_and_fire(v_th, alpha)?;
    let mut out = SweepResult::new(&["i_star", "simulated", "closed_form", "clamp", "e_q"]);
    for i in sorted_grid(grid)? {
        let sim = v_th * constant_current_spikes(i, n_steps, &p) as f64 / n_steps as f64;
        let closed = closed_form_rate_if(i, v_th, n_steps, alpha);
        let clamp = i.clamp(0.0, v_th);
        out.push(vec![i, sim, closed, clamp, sim - clamp])?;
    }
    Ok(out)
}

/// Layer widths of a random fully connected IF network without normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSpec {
    pub widths: Vec<usize>,
    pub v_th: f64,
    pub alpha: f64,
    pub samples: usize,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 16, 8],
            v_th: 1.0,
            alpha: 1.0,
            samples: 8,
        }
    }
}

/// Builds the random network of a [`ConvergenceSpec`], weights `N(0, 1/fan_in)`.
pub fn convergence_network(spec: &ConvergenceSpec, seed: u64) -> Result<Network> {
    if spec.widths.len() < 2 {
        bail!(Parameter, "need an input width and at least one layer");
    }
    let mut layers = Vec::new();
    for w in spec.widths.windows(2) {
        layers.push(LayerSpec::fc(w[0], w[1]));
        layers.push(LayerSpec::spiking());
    }
    let net_spec = NetworkSpec {
        input: vec![spec.widths[0]],
        classes: *spec.widths.last().unwrap(),
        layers,
    };
    let neuron = NeuronConfig {
        model: NeuronModel::If,
        v_th_init: spec.v_th,
        v_th_floor: spec.v_th.min(0.01),
        alpha: spec.alpha,
        tau: 1.0,
        dt: 1.0,
    };
    let mut net = build_network(&net_spec, &neuron, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in net.params_mut() {
        if p.kind == ParamKind::Weight {
            let fan_in = p.value.shape()[1];
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            p.value.data_mut().iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
    }
    Ok(net)
}

/// Layerwise max |a^i[N] − z^i| of a random IF network under constant inputs
/// drawn from `[0, 1]`, for each `N` in `n_list`.
pub fn sweep_convergence(spec: &ConvergenceSpec, n_list: &[usize], seed: u64) -> Result<SweepResult> {
    if n_list.is_empty() || n_list.contains(&0) {
        bail!(Parameter, "need a non-empty list of positive step counts");
    }
    let net = convergence_network(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = spec.widths[0];
    let inputs: Vec<f64> = (0..spec.samples * width).map(|_| rng.random::<f64>()).collect();
    let x = Tensor::new(vec![spec.samples, width], inputs)?;
    convergence_rows(&net, &x, spec.v_th, n_list)
}

/// Convergence sweep of an existing fully connected IF network for the
/// constant inputs `x: [B, width]`.
pub fn convergence_rows(net: &Network, x: &Tensor, v_th: f64, n_list: &[usize]) -> Result<SweepResult> {
    let weights: Vec<&Tensor> = net
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| &p.value)
        .collect();
    let mut z = Vec::new();
    let mut prev = x.clone();
    for w in &weights {
        prev = surrogate_map_if(&prev, w, v_th)?;
        z.push(prev.clone());
    }
    let mut names = vec!["n".to_string()];
    names.extend((1..=weights.len()).map(|i| format!("layer{i}_err")));
    names.push("max_err".into());
    let mut out = SweepResult {
        columns: names,
        rows: Vec::new(),
    };
    let mut sorted = n_list.to_vec();
    sorted.sort_unstable();
    for n in sorted {
        let frames = crate::data::encode_static(x, n)?;
        let record = net.forward(&frames, Mode::Eval, None)?;
        let reps = record.representations();
        let errs: Vec<f64> = reps.iter().zip(&z).map(|(a, z)| a.max_abs_diff(z)).collect();
        let mut row = vec![n as f64];
        row.extend(&errs);
        row.push(errs.iter().cloned().fold(0.0, f64::max));
        out.push(row)?;
    }
    Ok(out)
}

/// Max |weighted rate − clamp(I*/τ, 0, V_th/Δt)| of a single LIF neuron over
/// `grid`, for each `N`.
pub fn sweep_lif_bound(p: &NeuronParams, n_list: &[usize], grid: &[f64]) -> Result<SweepResult> {
    if p.model != NeuronModel::Lif {
        bail!(Parameter, "LIF bound sweep needs LIF parameters");
    }
    p.validate()?;
    let grid = sorted_grid(grid)?;
    let mut out = SweepResult::new(&["n", "max_err", "bound"]);
    let mut sorted = n_list.to_vec();
    sorted.sort_unstable();
    for n in sorted {
        if n == 0 {
            bail!(Parameter, "need positive step counts");
        }
        let mut worst: f64 = 0.0;
        for &i in &grid {
            let target = (i / p.tau).clamp(0.0, p.v_th / p.dt);
            worst = worst.max((constant_rate_lif(i, n, p)? - target).abs());
        }
        out.push(vec![n as f64, worst, p.v_th / p.tau])?;
    }
    Ok(out)
}

/// Smallest `c ≥ 0` with `max_err ≤ bound + c/N` on every row of a
/// [`sweep_lif_bound`] result.
pub fn fit_bound_constant(result: &SweepResult) -> f64 {
    let (n, err, bound) = (
        result.column("n").unwrap_or_default(),
        result.column("max_err").unwrap_or_default(),
        result.column("bound").unwrap_or_default(),
    );
    n.iter()
        .zip(err.iter().zip(&bound))
        .map(|(n, (e, b))| n * (e - b).max(0.0))
        .fold(0.0, f64::max)
}

/// Error decomposition of a single IF neuron whose currents fluctuate around
/// each grid value by up to `noise` (uniform, seeded).
pub fn sweep_decomposition(
    p: &NeuronParams,
    n_steps: usize,
    grid: &[f64],
    noise: f64,
    seed: u64,
) -> Result<SweepResult> {
    if n_steps == 0 {
        bail!(Parameter, "need at least one time step");
    }
    if !(noise >= 0.0) {
        bail!(Parameter, "noise amplitude must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SweepResult::new(&["i_star", "e_r", "e_q", "e_d"]);
    for i in sorted_grid(grid)? {
        let currents: Vec<f64> = (0..n_steps)
            .map(|_| i + noise * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let currents = Tensor::new(vec![n_steps, 1], currents)?;
        let (train, _) = simulate_layer(&NeuronState::zeros(&[1]), &currents, p)?;
        let d = decompose_error(&train, &currents, p)?;
        out.push(vec![i, d.e_r.item(), d.e_q.item(), d.e_d.item()])?;
    }
    Ok(out)
}
