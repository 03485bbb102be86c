//! Discretised integrate-and-fire dynamics.
//!
//! Each step computes the pre-reset potential `U = f(V, I)`, fires when
//! `U ≥ α·V_th`, and resets by subtraction: `V' = U − V_th·s`. Potentials
//! start at zero and are never clipped from below.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronModel {
    /// Integrate-and-fire: `U = V + I`.
    If,
    /// Leaky integrate-and-fire: `U = λV + (1 − λ)I`, `λ = exp(−Δt/τ)`.
    Lif,
}

impl std::fmt::Display for NeuronModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NeuronModel::If => "if",
            NeuronModel::Lif => "lif",
        })
    }
}

/// Per-layer spiking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub model: NeuronModel,
    /// Spike threshold `V_th`.
    pub v_th: f64,
    /// Membrane time constant (LIF only).
    pub tau: f64,
    /// Discrete step (LIF only).
    pub dt: f64,
    /// Fraction of `V_th` at which a spike is emitted.
    pub alpha: f64,
}

impl NeuronParams {
    pub fn integrate_and_fire(v_th: f64, alpha: f64) -> Result<Self> {
        let p = Self {
            model: NeuronModel::If,
            v_th,
            tau: 1.0,
            dt: 1.0,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn leaky(v_th: f64, tau: f64, dt: f64, alpha: f64) -> Result<Self> {
        let p = Self {
            model: NeuronModel::Lif,
            v_th,
            tau,
            dt,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0) || !self.v_th.is_finite() {
            bail!(Parameter, "threshold must be positive, got {}", self.v_th);
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!(Parameter, "alpha must lie in [0, 1], got {}", self.alpha);
        }
        if self.model == NeuronModel::Lif {
            if !(self.dt > 0.0) || !(self.tau > 0.0) {
                bail!(Parameter, "tau and dt must be positive");
            }
            if self.dt >= self.tau {
                bail!(
                    Parameter,
                    "LIF discretisation needs dt < tau (dt = {}, tau = {})",
                    self.dt,
                    self.tau
                );
            }
        }
        Ok(())
    }

    /// Leak factor `exp(−Δt/τ)`; 1 for IF.
    pub fn lambda(&self) -> f64 {
        match self.model {
            NeuronModel::If => 1.0,
            NeuronModel::Lif => (-self.dt / self.tau).exp(),
        }
    }

    /// Upper end of the representation range: `V_th` (IF) or `V_th/Δt` (LIF).
    pub fn rep_bound(&self) -> f64 {
        match self.model {
            NeuronModel::If => self.v_th,
            NeuronModel::Lif => self.v_th / self.dt,
        }
    }

    /// Weight carried by one spike when it is passed on as input current.
    pub fn spike_weight(&self) -> f64 {
        self.rep_bound()
    }

    #[inline]
    pub(crate) fn update(&self, v: f64, i: f64) -> f64 {
        match self.model {
            NeuronModel::If => v + i,
            NeuronModel::Lif => {
                let lambda = self.lambda();
                lambda * v + (1.0 - lambda) * i
            }
        }
    }

    #[inline]
    pub(crate) fn fires(&self, u: f64) -> bool {
        u >= self.alpha * self.v_th
    }
}

/// Membrane potentials after (`v`) and before (`u`) the most recent reset.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub v: Tensor,
    pub u: Tensor,
}

impl NeuronState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            v: Tensor::zeros(shape),
            u: Tensor::zeros(shape),
        }
    }
}

/// Binary spikes with a leading time axis of extent `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    spikes: Tensor,
}

impl SpikeTrain {
    pub fn new(spikes: Tensor) -> Result<Self> {
        if spikes.rank() < 2 {
            bail!(
                Dimension,
                "spike train needs a leading time axis, got {:?}",
                spikes.shape()
            );
        }
        if spikes.data().iter().any(|&s| s != 0.0 && s != 1.0) {
            bail!(Input, "spike train entries must be 0 or 1");
        }
        Ok(Self { spikes })
    }

    /// Builds a single-neuron train from a slice of 0/1 values.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            bail!(Parameter, "empty spike train");
        }
        let data = bits.iter().map(|&b| b as f64).collect();
        Self::new(Tensor::new(vec![bits.len(), 1], data)?)
    }

    pub fn time_steps(&self) -> usize {
        self.spikes.shape()[0]
    }

    /// Shape of one time slice.
    pub fn neuron_shape(&self) -> &[usize] {
        &self.spikes.shape()[1..]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.spikes
    }

    pub fn count(&self) -> usize {
        self.spikes.data().iter().filter(|&&s| s == 1.0).count()
    }
}

fn step(state: &NeuronState, current: &Tensor, p: &NeuronParams) -> Result<(NeuronState, Tensor)> {
    if state.v.shape() != current.shape() {
        bail!(
            Dimension,
            "membrane shape {:?} does not match current shape {:?}",
            state.v.shape(),
            current.shape()
        );
    }
    p.validate()?;
    let shape = current.shape().to_vec();
    let n = current.numel();
    let (mut v, mut u, mut s) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        let uj = p.update(state.v.data()[j], current.data()[j]);
        let sj = if p.fires(uj) { 1.0 } else { 0.0 };
        u[j] = uj;
        s[j] = sj;
        v[j] = uj - p.v_th * sj;
    }
    Ok((
        NeuronState {
            v: Tensor::new(shape.clone(), v)?,
            u: Tensor::new(shape.clone(), u)?,
        },
        Tensor::new(shape, s)?,
    ))
}

/// One IF step: `U = V + I`, `s = [U ≥ α·V_th]`, `V' = U − V_th·s`.
pub fn if_step(state: &NeuronState, current: &Tensor, p: &NeuronParams) -> Result<(NeuronState, Tensor)> {
    if p.model != NeuronModel::If {
        bail!(Parameter, "if_step called with {} parameters", p.model);
    }
    step(state, current, p)
}

/// One LIF step: `U = λV + (1 − λ)I`, then fire and reset as for IF.
pub fn lif_step(state: &NeuronState, current: &Tensor, p: &NeuronParams) -> Result<(NeuronState, Tensor)> {
    if p.model != NeuronModel::Lif {
        bail!(Parameter, "lif_step called with {} parameters", p.model);
    }
    step(state, current, p)
}

/// Runs `N = currents.shape()[0]` steps from `initial`.
pub fn simulate_layer(initial: &NeuronState, currents: &Tensor, p: &NeuronParams) -> Result<(SpikeTrain, NeuronState)> {
    if currents.rank() < 2 {
        bail!(
            Parameter,
            "currents need a leading time axis of extent >= 1, got {:?}",
            currents.shape()
        );
    }
    let n_steps = currents.shape()[0];
    let slice_shape = currents.shape()[1..].to_vec();
    let width = currents.numel() / n_steps;
    let mut state = initial.clone();
    let mut spikes = Vec::with_capacity(currents.numel());
    for chunk in currents.data().chunks_exact(width) {
        let current = Tensor::new(slice_shape.clone(), chunk.to_vec())?;
        let (next, s) = step(&state, &current, p)?;
        spikes.extend_from_slice(s.data());
        state = next;
    }
    Ok((SpikeTrain::new(Tensor::new(currents.shape().to_vec(), spikes)?)?, state))
}

/// Spike count of one neuron driven by a constant current for `n_steps`.
pub fn constant_current_spikes(current: f64, n_steps: usize, p: &NeuronParams) -> usize {
    let mut v = 0.0;
    let mut count = 0;
    for _ in 0..n_steps {
        let u = p.update(v, current);
        if p.fires(u) {
            count += 1;
            v = u - p.v_th;
        } else {
            v = u;
        }
    }
    count
}

/// Time-folded integration used by the network forward pass.
///
/// `currents` is laid out `[N, width]`; spikes are written to `out` as
/// `spike_weight·s`. Returns per-neuron `Σ λ^{N−n} s[n]` and the spike count.
pub(crate) fn integrate_folded(
    currents: &[f64],
    n_steps: usize,
    p: &NeuronParams,
    out: &mut [f64],
) -> (Vec<f64>, usize) {
    let width = currents.len() / n_steps;
    let lambda = p.lambda();
    let weight = p.spike_weight();
    let mut v = vec![0.0; width];
    let mut acc = vec![0.0; width];
    let mut count = 0;
    for n in 0..n_steps {
        let row = &currents[n * width..(n + 1) * width];
        let out_row = &mut out[n * width..(n + 1) * width];
        for j in 0..width {
            let u = p.update(v[j], row[j]);
            let fired = p.fires(u);
            let s = if fired { 1.0 } else { 0.0 };
            v[j] = u - p.v_th * s;
            acc[j] = lambda * acc[j] + s;
            out_row[j] = weight * s;
            count += fired as usize;
        }
    }
    (acc, count)
}

/// Run-wide neuron settings shared by every spiking layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronConfig {
    pub model: NeuronModel,
    pub v_th_init: f64,
    pub v_th_floor: f64,
    pub alpha: f64,
    pub tau: f64,
    pub dt: f64,
}

impl NeuronConfig {
    /// Tabulated defaults. LIF settings depend on the number of time steps;
    /// untabulated values use the nearest tabulated one.
    pub fn defaults(model: NeuronModel, time_steps: usize) -> Self {
        match model {
            NeuronModel::If => Self {
                model,
                v_th_init: 6.0,
                v_th_floor: 0.01,
                alpha: 0.5,
                tau: 1.0,
                dt: 1.0,
            },
            NeuronModel::Lif => {
                const TABLE: [(usize, f64, f64, f64, f64); 4] = [
                    (5, 0.6, 0.001, 0.1, 0.5),
                    (10, 0.3, 0.0005, 0.05, 0.4),
                    (15, 0.3, 0.0005, 0.05, 0.4),
                    (20, 0.3, 0.0005, 0.05, 0.3),
                ];
                let &(_, v_th_init, v_th_floor, dt, alpha) =
                    TABLE.iter().rev().min_by_key(|row| row.0.abs_diff(time_steps)).unwrap();
                Self {
                    model,
                    v_th_init,
                    v_th_floor,
                    alpha,
                    tau: 1.0,
                    dt,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th_floor > 0.0) {
            bail!(
                Parameter,
                "threshold lower bound must be positive, got {}",
                self.v_th_floor
            );
        }
        if self.v_th_init < self.v_th_floor {
            bail!(
                Parameter,
                "initial threshold {} is below the lower bound {}",
                self.v_th_init,
                self.v_th_floor
            );
        }
        self.params(self.v_th_init, self.alpha).validate()
    }

    pub fn params(&self, v_th: f64, alpha: f64) -> NeuronParams {
        NeuronParams {
            model: self.model,
            v_th,
            tau: self.tau,
            dt: self.dt,
            alpha,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_state(v: f64) -> NeuronState {
        NeuronState {
            v: Tensor::scalar(v),
            u: Tensor::scalar(0.0),
        }
    }

    #[test]
    fn if_step_examples() {
        let p = NeuronParams::integrate_and_fire(1.0, 0.5).unwrap();
        let (st, s) = if_step(&scalar_state(0.0), &Tensor::scalar(0.7), &p).unwrap();
        assert_eq!(s.item(), 1.0);
        assert!((st.v.item() - (-0.3)).abs() < 1e-15);

        for alpha in [0.0, 0.3, 1.0] {
            let p = NeuronParams::integrate_and_fire(2.0, alpha).unwrap();
            let (st, s) = if_step(&scalar_state(0.0), &Tensor::scalar(0.0), &p).unwrap();
            // with alpha = 0 the equality convention fires at U = 0
            if alpha > 0.0 {
                assert_eq!(s.item(), 0.0);
                assert_eq!(st.v.item(), 0.0);
            }
        }

        let p = NeuronParams::integrate_and_fire(1.0, 1.0).unwrap();
        let (st, s) = if_step(&scalar_state(0.0), &Tensor::scalar(2.0), &p).unwrap();
        assert_eq!(s.item(), 1.0);
        assert_eq!(st.v.item(), 1.0);
    }

    #[test]
    fn if_step_shape_mismatch() {
        let p = NeuronParams::integrate_and_fire(1.0, 1.0).unwrap();
        let st = NeuronState::zeros(&[3]);
        assert!(matches!(
            if_step(&st, &Tensor::zeros(&[2]), &p),
            Err(crate::DsrError::Dimension(_))
        ));
    }

    #[test]
    fn lif_step_examples() {
        let p = NeuronParams::leaky(10.0, 1.0, 0.05, 0.5).unwrap();
        let (st, s) = lif_step(&scalar_state(1.0), &Tensor::scalar(0.0), &p).unwrap();
        assert_eq!(s.item(), 0.0);
        assert!((st.v.item() - (-0.05f64).exp()).abs() < 1e-15);
        assert!((st.v.item() - 0.951229).abs() < 1e-6);

        let (st, s) = lif_step(&scalar_state(0.0), &Tensor::scalar(0.0), &p).unwrap();
        assert_eq!((st.v.item(), s.item()), (0.0, 0.0));

        let p = NeuronParams::leaky(0.3, 1.0, 0.05, 0.5).unwrap();
        let drive = p.v_th / (1.0 - p.lambda());
        let (_, s) = lif_step(&scalar_state(0.0), &Tensor::scalar(drive), &p).unwrap();
        assert_eq!(s.item(), 1.0);
    }

    #[test]
    fn lif_rejects_coarse_step() {
        assert!(matches!(
            NeuronParams::leaky(1.0, 1.0, 1.0, 0.5),
            Err(crate::DsrError::Parameter(_))
        ));
        let mut p = NeuronParams::leaky(1.0, 1.0, 0.1, 0.5).unwrap();
        p.dt = 2.0;
        assert!(lif_step(&scalar_state(0.0), &Tensor::scalar(0.0), &p).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(NeuronParams::integrate_and_fire(0.0, 0.5).is_err());
        assert!(NeuronParams::integrate_and_fire(1.0, 1.5).is_err());
        assert!(NeuronParams::integrate_and_fire(1.0, -0.1).is_err());
    }

    #[test]
    fn simulate_constant_half_current() {
        let p = NeuronParams::integrate_and_fire(1.0, 1.0).unwrap();
        let currents = Tensor::new(vec![5, 1], vec![0.5; 5]).unwrap();
        let (train, _) = simulate_layer(&NeuronState::zeros(&[1]), &currents, &p).unwrap();
        assert_eq!(train.tensor().data(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(train.count(), 2);
    }

    #[test]
    fn simulate_zero_and_saturated() {
        let p = NeuronParams::integrate_and_fire(1.0, 0.5).unwrap();
        for n in [1, 7, 30] {
            let zero = Tensor::zeros(&[n, 3]);
            let (train, _) = simulate_layer(&NeuronState::zeros(&[3]), &zero, &p).unwrap();
            assert_eq!(train.count(), 0);
            let sat = Tensor::full(&[n, 3], 1.0);
            let (train, _) = simulate_layer(&NeuronState::zeros(&[3]), &sat, &p).unwrap();
            assert_eq!(train.count(), 3 * n);
        }
    }

    #[test]
    fn simulate_needs_time_axis() {
        let p = NeuronParams::integrate_and_fire(1.0, 1.0).unwrap();
        assert!(matches!(
            simulate_layer(&NeuronState::zeros(&[1]), &Tensor::scalar(1.0), &p),
            Err(crate::DsrError::Parameter(_))
        ));
    }

    #[test]
    fn lif_leak_is_geometric() {
        let p = NeuronParams::leaky(100.0, 1.0, 0.05, 1.0).unwrap();
        let mut st = scalar_state(0.8);
        let mut expected = 0.8;
        for _ in 0..50 {
            let (next, s) = lif_step(&st, &Tensor::scalar(0.0), &p).unwrap();
            assert_eq!(s.item(), 0.0);
            expected *= p.lambda();
            assert_eq!(next.v.item(), expected);
            st = next;
        }
    }

    #[test]
    fn folded_integration_matches_simulate_layer() {
        let p = NeuronParams::leaky(0.3, 1.0, 0.05, 0.4).unwrap();
        let data: Vec<f64> = (0..40).map(|i| ((i * 37 % 17) as f64) * 0.9 - 3.0).collect();
        let currents = Tensor::new(vec![10, 4], data.clone()).unwrap();
        let (train, _) = simulate_layer(&NeuronState::zeros(&[4]), &currents, &p).unwrap();
        let mut out = vec![0.0; 40];
        let (_, count) = integrate_folded(&data, 10, &p, &mut out);
        assert_eq!(count, train.count());
        for (o, s) in out.iter().zip(train.tensor().data()) {
            assert_eq!(*o, s * p.spike_weight());
        }
    }

    #[test]
    fn tabulated_defaults() {
        let c = NeuronConfig::defaults(NeuronModel::If, 10);
        assert_eq!((c.v_th_init, c.v_th_floor, c.alpha), (6.0, 0.01, 0.5));
        let c = NeuronConfig::defaults(NeuronModel::Lif, 20);
        assert_eq!((c.v_th_init, c.dt, c.alpha), (0.3, 0.05, 0.3));
        let c = NeuronConfig::defaults(NeuronModel::Lif, 5);
        assert_eq!((c.v_th_init, c.v_th_floor, c.dt, c.alpha), (0.6, 0.001, 0.1, 0.5));
        assert_eq!(NeuronConfig::defaults(NeuronModel::Lif, 12).alpha, 0.4);
        for n in [1, 5, 8, 10, 15, 20, 64] {
            assert!(NeuronConfig::defaults(NeuronModel::Lif, n).validate().is_ok());
        }
    }

    fn is_breakpoint(x: f64) -> bool {
        (x - x.round()).abs() < 1e-9 || (x - x.floor() - 0.5).abs() < 1e-9
    }

    proptest! {
        #[test]
        fn reset_identity_holds(
            currents in proptest::collection::vec(-2.0f64..3.0, 1..40),
            alpha in 0.0f64..=1.0,
            lif in any::<bool>(),
        ) {
            let p = if lif {
                NeuronParams::leaky(0.7, 1.0, 0.05, alpha).unwrap()
            } else {
                NeuronParams::integrate_and_fire(0.7, alpha).unwrap()
            };
            let mut st = NeuronState::zeros(&[1]);
            for &c in &currents {
                let (next, s) = step(&st, &Tensor::from_vec(vec![c]), &p).unwrap();
                let residual = next.v.item() - next.u.item() + p.v_th * s.item();
                prop_assert!(residual.abs() <= 1e-15 * (1.0 + next.u.item().abs()));
                prop_assert!(s.item() == 0.0 || s.item() == 1.0);
                st = next;
            }
        }

        #[test]
        fn if_closed_forms(frac in -0.5f64..1.5, n in 1usize..=64) {
            let v_th = 1.0;
            let x = n as f64 * frac;
            prop_assume!(!is_breakpoint(x));
            let p1 = NeuronParams::integrate_and_fire(v_th, 1.0).unwrap();
            let floor = (x.floor().max(0.0) as usize).min(n);
            prop_assert_eq!(constant_current_spikes(frac * v_th, n, &p1), floor);
            let p_half = NeuronParams::integrate_and_fire(v_th, 0.5).unwrap();
            let round = (x.round().max(0.0) as usize).min(n);
            prop_assert_eq!(constant_current_spikes(frac * v_th, n, &p_half), round);
        }
    }
}
