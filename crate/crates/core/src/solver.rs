//! Time stepping for the heat equation with memory, its small-noise family and the
//! controlled equation, plus the windowed Picard construction and the `Y/Z/J`
//! decomposition of a controlled path.
//!
//! One step of the semi-implicit scheme with `Lambda = diag((k pi)^2)`:
//!
//! ```text
//! (I + dt Lambda) u' = u + dt [F(u) + div B(u) + M_n] + dt G1(u) f_n
//!                    + dt int G2(u, x) (psi_n(x) - 1) nu(dx)
//!                    + sqrt(eps) G1(u) dW_n
//!                    + eps [sum_{jumps in step} G2(u, x) - eps^{-1} dt int G2(u, x) psi_n(x) nu(dx)]
//! ```
//!
//! where `M_n` is the memory term. The last two lines are skipped entirely at `eps = 0`,
//! so the skeleton is literally the same code path.

use crate::coefficients::Coefficients;
use crate::ldp::ControlPair;
use crate::memory::{Convolver, MemoryError, PastHistory};
use crate::noise::{
    sample_prm, thin_to_control, wiener_increments, JumpRealization, MarkGrid, NoiseError,
    NoiseSpec, Truncation,
};
use crate::spectral::{eigenvalue, SineBasis};
use crate::{Field, Kernel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;
use thiserror::Error;

pub mod io;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("numerical blow-up at step {step} (t = {t}); last finite diagnostics {last:?}")]
    BlowUp { step: usize, t: f64, last: Option<StepDiagnostics> },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("Picard iteration did not converge on window {window}: distances {distances:?}")]
    PicardDivergence { window: usize, distances: Vec<f64> },
    #[error("decomposition mismatch: sup distance {distance} exceeds {tolerance}")]
    Decomposition { distance: f64, tolerance: f64 },
}

fn config_err(field: &'static str, reason: impl Into<String>) -> SolverError {
    SolverError::Config {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SemiImplicitEuler,
    Picard,
}

/// How the prescribed past on `(-inf, 0]` is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PastSpec {
    Zero,
    /// constant extension of `u0`
    ConstantU0,
    /// `u0 exp(rate r)` for `r <= 0`
    ExpDecay { rate: f64 },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    pub n_modes: usize,
    pub scheme: Scheme,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub truncation: Truncation,
    pub coefficients: Arc<dyn Coefficients>,
    pub kernel: Kernel,
    pub noise: NoiseSpec,
    pub u0: Field,
    pub past: PastSpec,
}

impl SimConfig {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(config_err("dt", format!("{} must be > 0", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(config_err("T", format!("{} must be > 0", self.horizon)));
        }
        let ratio = self.horizon / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(config_err(
                "dt",
                format!("dt = {} does not divide T = {}", self.dt, self.horizon),
            ));
        }
        if self.n_modes == 0 {
            return Err(config_err("n_modes", "must be >= 1"));
        }
        if self.u0.n_modes() != self.n_modes {
            return Err(config_err(
                "u0",
                format!("has {} modes, expected {}", self.u0.n_modes(), self.n_modes),
            ));
        }
        if !(self.picard_tol.is_finite() && self.picard_tol > 0.0) {
            return Err(config_err("picard_tol", "must be > 0"));
        }
        if self.picard_max_iter == 0 {
            return Err(config_err("picard_max_iter", "must be >= 1"));
        }
        if self.noise.k_noise != self.coefficients.k_noise() {
            return Err(config_err(
                "k_noise",
                format!(
                    "noise has {} coordinates, coefficient set expects {}",
                    self.noise.k_noise,
                    self.coefficients.k_noise()
                ),
            ));
        }
        if let Truncation::Level(0) = self.truncation {
            return Err(config_err("m_truncation", "level must be >= 1"));
        }
        self.noise.validate()?;
        if let PastSpec::ExpDecay { rate } = self.past {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(config_err("past", "decay rate must be > 0"));
            }
        }
        Ok(())
    }

    pub fn past_history(&self) -> PastHistory<f64> {
        match self.past {
            PastSpec::Zero => PastHistory::Zero,
            PastSpec::ConstantU0 => PastHistory::Constant(self.u0.clone()),
            PastSpec::ExpDecay { rate } => PastHistory::ExpDecay {
                field: self.u0.clone(),
                rate,
            },
        }
    }

    /// Stable hash of every setting, including the coefficient parameters.
    pub fn fingerprint(&self) -> u64 {
        let text = format!(
            "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
            self.horizon,
            self.dt,
            self.n_modes,
            self.scheme,
            self.picard_tol,
            self.picard_max_iter,
            self.truncation,
            self.coefficients,
            self.kernel,
            self.noise,
            self.u0,
            self.past
        );
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub l2: f64,
    pub h1: f64,
    pub lq: f64,
    pub jumps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub sample: u64,
    pub eps: f64,
    pub scheme: Scheme,
    pub config_hash: u64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<Field>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub meta: TrajectoryMeta,
}

/// The three quantities of the moment estimate along one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub sup_l2_sq: f64,
    pub int_h1_sq: f64,
    pub int_lq_q: f64,
}

impl Trajectory {
    pub fn n_modes(&self) -> usize {
        self.states[0].n_modes()
    }

    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.dt).collect()
    }

    pub fn terminal(&self) -> &Field {
        self.states.last().expect("non-empty trajectory")
    }

    /// Left-endpoint time integrals.
    pub fn moments(&self) -> MomentSummary {
        let q = self.meta.q;
        let n = self.diagnostics.len() - 1;
        let sup = self.diagnostics.iter().map(|d| d.l2 * d.l2).fold(0.0, f64::max);
        let h1: f64 = self.diagnostics[..n].iter().map(|d| d.h1 * d.h1).sum::<f64>() * self.dt;
        let lq: f64 = self.diagnostics[..n].iter().map(|d| d.lq.powf(q)).sum::<f64>() * self.dt;
        MomentSummary {
            sup_l2_sq: sup,
            int_h1_sq: h1,
            int_lq_q: lq,
        }
    }

    pub fn sup_l2_distance(&self, other: &Trajectory) -> f64 {
        sup_l2_distance(&self.states, &other.states)
    }
}

pub fn sup_l2_distance(a: &[Field], b: &[Field]) -> f64 {
    assert_eq!(a.len(), b.len(), "paths on different grids");
    a.iter()
        .zip(b)
        .map(|(x, y)| x.sub(y).l2_norm())
        .fold(0.0, f64::max)
}

/// `sup_t ||a - b||^2 + int ||a - b||_{2,1}^2` (left-endpoint rule).
pub fn path_distance_sq(a: &[Field], b: &[Field], dt: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "paths on different grids");
    let mut sup: f64 = 0.0;
    let mut int = 0.0;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        let d = x.sub(y);
        sup = sup.max(d.l2_norm_sq());
        if k + 1 < a.len() {
            int += dt * d.h1_norm_sq();
        }
    }
    sup + int
}

/// The exact noise realization driving one path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub eps: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub k_noise: usize,
    /// row-major `n_steps x k_noise`
    pub dw: Vec<f64>,
    pub jumps: JumpRealization,
    pub seed: u64,
    pub sample: u64,
}

impl NoisePath {
    pub fn silent(cfg: &SimConfig) -> Self {
        let n = cfg.n_steps();
        Self {
            eps: 0.0,
            dt: cfg.dt,
            n_steps: n,
            k_noise: cfg.noise.k_noise,
            dw: vec![0.0; n * cfg.noise.k_noise],
            jumps: JumpRealization::empty(cfg.horizon, cfg.truncation),
            seed: cfg.noise.seed,
            sample: 0,
        }
    }

    pub fn dw_at(&self, n: usize) -> &[f64] {
        &self.dw[n * self.k_noise..(n + 1) * self.k_noise]
    }

    /// Sum consecutive increments in groups of `factor`; jumps are unchanged.
    pub fn coarsen(&self, factor: usize) -> Self {
        assert!(factor >= 1 && self.n_steps.is_multiple_of(factor), "factor must divide n_steps");
        let n = self.n_steps / factor;
        let k = self.k_noise;
        let mut dw = vec![0.0; n * k];
        for i in 0..self.n_steps {
            for c in 0..k {
                dw[(i / factor) * k + c] += self.dw[i * k + c];
            }
        }
        Self {
            dt: self.dt * factor as f64,
            n_steps: n,
            dw,
            ..self.clone()
        }
    }
}

/// Compiled stepper for one configuration.
#[derive(Debug)]
pub struct Solver {
    cfg: SimConfig,
    basis: SineBasis<f64>,
    marks: MarkGrid,
    conv: Convolver<f64>,
    denom: Vec<f64>,
    past: PastHistory<f64>,
    fingerprint: u64,
}

/// Per-step contribution of the lagged terms (`div B` and memory).
enum Lagged<'a> {
    Direct { states: &'a [Field] },
    Given(&'a Field),
}

impl Solver {
    pub fn new(cfg: SimConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        let n_steps = cfg.n_steps();
        let basis = SineBasis::for_modes(cfg.n_modes);
        let marks = MarkGrid::new(&cfg.noise.measure, cfg.truncation)?;
        let conv = Convolver::new(cfg.kernel.clone(), cfg.dt, n_steps + 1);
        let denom = (1..=cfg.n_modes)
            .map(|k| 1.0 + cfg.dt * eigenvalue::<f64>(k).expect("k >= 1"))
            .collect();
        let past = cfg.past_history();
        let fingerprint = cfg.fingerprint();
        Ok(Self {
            cfg,
            basis,
            marks,
            conv,
            denom,
            past,
            fingerprint,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn basis(&self) -> &SineBasis<f64> {
        &self.basis
    }

    pub fn marks(&self) -> &MarkGrid {
        &self.marks
    }

    pub fn n_steps(&self) -> usize {
        self.cfg.n_steps()
    }

    pub fn q(&self) -> f64 {
        self.cfg.coefficients.declared().q
    }

    /// A control pair of the right shape with `f = 0`, `g = 1`.
    pub fn zero_controls(&self) -> ControlPair {
        ControlPair::zero(
            self.n_steps(),
            self.cfg.dt,
            self.cfg.noise.k_noise,
            self.marks.n_bins(),
        )
    }

    fn check_controls(&self, c: &ControlPair) -> Result<(), SolverError> {
        if c.n_steps() != self.n_steps()
            || c.k_noise() != self.cfg.noise.k_noise
            || c.n_bins() != self.marks.n_bins()
        {
            return Err(config_err(
                "controls",
                format!(
                    "shape (steps {}, k {}, bins {}) does not match (steps {}, k {}, bins {})",
                    c.n_steps(),
                    c.k_noise(),
                    c.n_bins(),
                    self.n_steps(),
                    self.cfg.noise.k_noise,
                    self.marks.n_bins()
                ),
            ));
        }
        Ok(())
    }

    /// Sample the noise of path `sample` at level `eps`, thinned to `controls` if given.
    pub fn sample_noise(
        &self,
        eps: f64,
        sample: u64,
        controls: Option<&ControlPair>,
    ) -> Result<NoisePath, SolverError> {
        self.sample_noise_at(eps, sample, controls, self.cfg.dt)
    }

    /// As [`Self::sample_noise`] but with Wiener increments on a grid of step `dt`.
    pub fn sample_noise_at(
        &self,
        eps: f64,
        sample: u64,
        controls: Option<&ControlPair>,
        dt: f64,
    ) -> Result<NoisePath, SolverError> {
        if eps == 0.0 {
            return Ok(NoisePath::silent(&self.cfg));
        }
        if let Some(c) = controls {
            self.check_controls(c)?;
        }
        let spec: NoiseSpec = self.cfg.noise.with_eps(eps);
        spec.validate()?;
        let n_steps = (self.cfg.horizon / dt).round() as usize;
        let dw = wiener_increments(&spec, n_steps, dt, sample);
        let jumps = if self.cfg.coefficients.jump_free() {
            JumpRealization::empty(self.cfg.horizon, self.cfg.truncation)
        } else {
            match controls {
                None => sample_prm(&spec, self.cfg.truncation, self.cfg.horizon, sample, 1.0)?,
                Some(c) => {
                    let psi_max = c.psi_max();
                    let base =
                        sample_prm(&spec, self.cfg.truncation, self.cfg.horizon, sample, psi_max)?;
                    let psi = |t: f64, x: f64| c.psi(t, x, &self.marks);
                    thin_to_control(&base, &psi, psi_max)?
                }
            }
        };
        Ok(NoisePath {
            eps,
            dt,
            n_steps,
            k_noise: spec.k_noise,
            dw,
            jumps,
            seed: spec.seed,
            sample,
        })
    }

    fn diagnostics(&self, t: f64, u: &Field, jumps: usize) -> StepDiagnostics {
        StepDiagnostics {
            t,
            l2: u.l2_norm(),
            h1: u.h1_norm(),
            lq: self.basis.lq_norm(u, self.q()),
            jumps,
        }
    }

    fn lagged_direct(&self, n: usize, states: &[Field]) -> Field {
        let t = n as f64 * self.cfg.dt;
        let u = &states[n];
        let mut out = self.cfg.coefficients.div_flux(t, u, &self.basis);
        if !self.cfg.kernel.is_zero() {
            out.axpy(1.0, &self.conv.memory_term(states, &self.past, n));
        }
        out
    }

    /// Explicit right-hand side pieces of step `n`, excluding the lagged terms; returns
    /// the updated field before the implicit solve and the jump count.
    fn explicit_rhs(
        &self,
        n: usize,
        u: &Field,
        noise: &NoisePath,
        controls: Option<&ControlPair>,
    ) -> (Field, usize) {
        let cfg = &self.cfg;
        let coeffs = cfg.coefficients.as_ref();
        let (dt, t) = (cfg.dt, n as f64 * cfg.dt);
        let mut rhs = u.clone();
        rhs.axpy(dt, &coeffs.drift(t, u, &self.basis));

        let need_g1 = noise.eps > 0.0 || controls.is_some_and(|c| !c.f_is_zero());
        let g1 = need_g1.then(|| coeffs.gaussian(t, u));
        if let (Some(c), Some(g1)) = (controls, &g1) {
            if !c.f_is_zero() {
                g1.apply_into(c.f_at(n), dt, &mut rhs);
            }
        }
        let jump_terms = !coeffs.jump_free() && self.marks.n_bins() > 0;
        if let Some(c) = controls {
            if jump_terms && !c.g_is_one() {
                let w: Vec<f64> = self
                    .marks
                    .weights()
                    .iter()
                    .zip(self.marks.node_bin())
                    .map(|(w, b)| w * (c.g_at(n, *b) - 1.0))
                    .collect();
                rhs.axpy(dt, &coeffs.jump_sum(t, u, self.marks.nodes(), &w));
            }
        }
        let mut count = 0;
        if noise.eps > 0.0 {
            let eps = noise.eps;
            if let Some(g1) = &g1 {
                g1.apply_into(noise.dw_at(n), eps.sqrt(), &mut rhs);
            }
            if jump_terms {
                let events = noise.jumps.step_events(n, dt);
                count = events.len();
                if count > 0 {
                    let xs: Vec<f64> = events.iter().map(|e| e.mark).collect();
                    let ones = vec![1.0; xs.len()];
                    rhs.axpy(eps, &coeffs.jump_sum(t, u, &xs, &ones));
                }
                let w: Vec<f64> = match controls {
                    Some(c) if !c.g_is_one() => self
                        .marks
                        .weights()
                        .iter()
                        .zip(self.marks.node_bin())
                        .map(|(w, b)| w * c.g_at(n, *b))
                        .collect(),
                    _ => self.marks.weights().to_vec(),
                };
                rhs.axpy(-dt, &coeffs.jump_sum(t, u, self.marks.nodes(), &w));
            }
        }
        (rhs, count)
    }

    fn implicit_solve(&self, mut rhs: Field) -> Field {
        for (c, d) in rhs.coeffs_mut().iter_mut().zip(&self.denom) {
            *c /= d;
        }
        rhs
    }

    fn advance(
        &self,
        n: usize,
        u: &Field,
        lagged: Lagged<'_>,
        noise: &NoisePath,
        controls: Option<&ControlPair>,
    ) -> (Field, usize) {
        let (mut rhs, count) = self.explicit_rhs(n, u, noise, controls);
        let lag = match lagged {
            Lagged::Direct { states } => self.lagged_direct(n, states),
            Lagged::Given(f) => f.clone(),
        };
        rhs.axpy(self.cfg.dt, &lag);
        (self.implicit_solve(rhs), count)
    }

    /// One semi-implicit step from `states[n]`, where `states` holds the path on `[0, t_n]`.
    pub fn step(
        &self,
        n: usize,
        states: &[Field],
        noise: &NoisePath,
        controls: Option<&ControlPair>,
    ) -> Result<Field, SolverError> {
        let (next, _) = self.advance(n, &states[n], Lagged::Direct { states }, noise, controls);
        if !next.is_finite() {
            return Err(SolverError::BlowUp {
                step: n + 1,
                t: (n + 1) as f64 * self.cfg.dt,
                last: Some(self.diagnostics(n as f64 * self.cfg.dt, &states[n], 0)),
            });
        }
        Ok(next)
    }

    fn check_noise(&self, noise: &NoisePath) -> Result<(), SolverError> {
        if noise.n_steps != self.n_steps() || noise.k_noise != self.cfg.noise.k_noise {
            return Err(config_err("noise", "noise path does not match the time grid"));
        }
        Ok(())
    }

    fn meta(&self, noise: &NoisePath, scheme: Scheme) -> TrajectoryMeta {
        TrajectoryMeta {
            seed: noise.seed,
            sample: noise.sample,
            eps: noise.eps,
            scheme,
            config_hash: self.fingerprint,
            q: self.q(),
        }
    }

    /// Direct semi-implicit solve along a given noise path.
    pub fn solve_with_noise(
        &self,
        noise: &NoisePath,
        controls: Option<&ControlPair>,
    ) -> Result<Trajectory, SolverError> {
        self.check_noise(noise)?;
        if let Some(c) = controls {
            self.check_controls(c)?;
        }
        let n_steps = self.n_steps();
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(self.cfg.u0.clone());
        let mut diags = Vec::with_capacity(n_steps + 1);
        diags.push(self.diagnostics(0.0, &self.cfg.u0, 0));
        for n in 0..n_steps {
            let (next, jumps) =
                self.advance(n, &states[n], Lagged::Direct { states: &states }, noise, controls);
            let t = (n + 1) as f64 * self.cfg.dt;
            if !next.is_finite() {
                return Err(SolverError::BlowUp {
                    step: n + 1,
                    t,
                    last: diags.last().copied(),
                });
            }
            diags.push(self.diagnostics(t, &next, jumps));
            states.push(next);
        }
        Ok(Trajectory {
            dt: self.cfg.dt,
            states,
            diagnostics: diags,
            meta: self.meta(noise, Scheme::SemiImplicitEuler),
        })
    }

    /// Sample the noise for `sample` and solve with the configured scheme.
    pub fn solve(
        &self,
        eps: f64,
        sample: u64,
        controls: Option<&ControlPair>,
    ) -> Result<Trajectory, SolverError> {
        let noise = self.sample_noise(eps, sample, controls)?;
        match self.cfg.scheme {
            Scheme::SemiImplicitEuler => self.solve_with_noise(&noise, controls),
            Scheme::Picard => self.solve_picard_with_noise(&noise, controls).map(|(t, _)| t),
        }
    }

    /// Independent paths `0..n_samples` in parallel; results in sample order.
    pub fn ensemble<R: Send>(
        &self,
        eps: f64,
        n_samples: usize,
        controls: Option<&ControlPair>,
        map: impl Fn(Trajectory) -> R + Sync,
    ) -> Result<Vec<R>, SolverError> {
        (0..n_samples as u64)
            .into_par_iter()
            .map(|s| self.solve(eps, s, controls).map(&map))
            .collect()
    }

    /// Window length of the Picard construction in steps.
    pub fn picard_window_steps(&self) -> usize {
        let t0 = self.cfg.kernel.horizon();
        let n = self.n_steps();
        if !t0.is_finite() {
            return n;
        }
        ((t0 / self.cfg.dt).floor() as usize).clamp(1, n)
    }

    /// Windowed Picard construction along a frozen noise path. On each window the
    /// initial iterate is zero; iterate `k` is stepped with `F`, `G1`, `G2` at the new
    /// iterate and with `div B` and the memory term taken from iterate `k - 1` at the
    /// right end of each step.
    pub fn solve_picard_with_noise(
        &self,
        noise: &NoisePath,
        controls: Option<&ControlPair>,
    ) -> Result<(Trajectory, PicardReport), SolverError> {
        self.check_noise(noise)?;
        if let Some(c) = controls {
            self.check_controls(c)?;
        }
        let cfg = &self.cfg;
        let n_steps = self.n_steps();
        let w = self.picard_window_steps();
        let mut accepted: Vec<Field> = vec![cfg.u0.clone()];
        let mut diags = vec![self.diagnostics(0.0, &cfg.u0, 0)];
        let mut windows = Vec::new();
        let mut start = 0;
        while start < n_steps {
            let end = (start + w).min(n_steps);
            // combined[0..=start] is accepted; combined[start+1..=end] is the previous iterate
            let mut combined = accepted.clone();
            combined.extend((start..end).map(|_| Field::zeros(cfg.n_modes)));
            let mut distances = Vec::new();
            let mut converged = false;
            let mut counts = vec![0usize; end - start];
            for _ in 0..cfg.picard_max_iter {
                let mut next: Vec<Field> = Vec::with_capacity(end - start + 1);
                next.push(accepted[start].clone());
                for n in start..end {
                    let t1 = (n + 1) as f64 * cfg.dt;
                    let prev = &combined[n + 1];
                    let mut lag = cfg.coefficients.div_flux(t1, prev, &self.basis);
                    if !cfg.kernel.is_zero() {
                        lag.axpy(1.0, &self.conv.memory_term(&combined[..=n + 1], &self.past, n + 1));
                    }
                    let (u, c) = self.advance(n, &next[n - start], Lagged::Given(&lag), noise, controls);
                    if !u.is_finite() {
                        return Err(SolverError::BlowUp {
                            step: n + 1,
                            t: t1,
                            last: diags.last().copied(),
                        });
                    }
                    counts[n - start] = c;
                    next.push(u);
                }
                let d = next[1..]
                    .iter()
                    .zip(&combined[start + 1..=end])
                    .map(|(a, b)| a.sub(b).l2_norm())
                    .fold(0.0, f64::max);
                distances.push(d);
                combined.truncate(start + 1);
                combined.extend(next.into_iter().skip(1));
                if d < cfg.picard_tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(SolverError::PicardDivergence {
                    window: windows.len(),
                    distances,
                });
            }
            for n in start..end {
                let t = (n + 1) as f64 * cfg.dt;
                diags.push(self.diagnostics(t, &combined[n + 1], counts[n - start]));
            }
            windows.push(WindowReport {
                start: start as f64 * cfg.dt,
                end: end as f64 * cfg.dt,
                distances,
            });
            accepted = combined;
            start = end;
        }
        Ok((
            Trajectory {
                dt: cfg.dt,
                states: accepted,
                diagnostics: diags,
                meta: self.meta(noise, Scheme::Picard),
            },
            PicardReport {
                window_steps: w,
                windows,
            },
        ))
    }

    pub fn solve_picard(
        &self,
        eps: f64,
        sample: u64,
        controls: Option<&ControlPair>,
    ) -> Result<(Trajectory, PicardReport), SolverError> {
        let noise = self.sample_noise(eps, sample, controls)?;
        self.solve_picard_with_noise(&noise, controls)
    }

    /// `Y`, `Z` and both versions of `J` for a controlled path `V` driven by `noise`.
    pub fn decompose_yzj(
        &self,
        noise: &NoisePath,
        controls: &ControlPair,
        tolerance: f64,
    ) -> Result<Decomposition, SolverError> {
        let v = self.solve_with_noise(noise, Some(controls))?;
        let cfg = &self.cfg;
        let coeffs = cfg.coefficients.as_ref();
        let n_steps = self.n_steps();
        let dt = cfg.dt;
        let nm = cfg.n_modes;
        let jump_terms = !coeffs.jump_free() && self.marks.n_bins() > 0;
        let mut y = vec![Field::zeros(nm)];
        let mut z = vec![Field::zeros(nm)];
        let mut j = vec![cfg.u0.clone()];
        for n in 0..n_steps {
            let t = n as f64 * dt;
            let vn = &v.states[n];
            let g1 = coeffs.gaussian(t, vn);

            let mut ry = y[n].clone();
            let mut rz = z[n].clone();
            let mut rj = j[n].clone();
            if noise.eps > 0.0 {
                g1.apply_into(noise.dw_at(n), noise.eps.sqrt(), &mut ry);
                if jump_terms {
                    let events = noise.jumps.step_events(n, dt);
                    if !events.is_empty() {
                        let xs: Vec<f64> = events.iter().map(|e| e.mark).collect();
                        ry.axpy(noise.eps, &coeffs.jump_sum(t, vn, &xs, &vec![1.0; xs.len()]));
                    }
                    let w: Vec<f64> = self
                        .marks
                        .weights()
                        .iter()
                        .zip(self.marks.node_bin())
                        .map(|(w, b)| w * controls.g_at(n, *b))
                        .collect();
                    ry.axpy(-dt, &coeffs.jump_sum(t, vn, self.marks.nodes(), &w));
                }
            }
            if jump_terms {
                let w: Vec<f64> = self
                    .marks
                    .weights()
                    .iter()
                    .zip(self.marks.node_bin())
                    .map(|(w, b)| w * (controls.g_at(n, *b) - 1.0))
                    .collect();
                rz.axpy(dt, &coeffs.jump_sum(t, vn, self.marks.nodes(), &w));
            }
            rj.axpy(dt, &coeffs.drift(t, vn, &self.basis));
            rj.axpy(dt, &self.lagged_direct(n, &v.states));
            g1.apply_into(controls.f_at(n), dt, &mut rj);

            y.push(self.implicit_solve(ry));
            z.push(self.implicit_solve(rz));
            j.push(self.implicit_solve(rj));
        }
        let j_sub: Vec<Field> = v
            .states
            .iter()
            .zip(y.iter().zip(&z))
            .map(|(vv, (yy, zz))| vv.sub(yy).sub(zz))
            .collect();
        let distance = sup_l2_distance(&j_sub, &j);
        if distance > tolerance {
            return Err(SolverError::Decomposition {
                distance,
                tolerance,
            });
        }
        Ok(Decomposition {
            v,
            y,
            z,
            j_subtractive: j_sub,
            j_resolved: j,
            j_distance: distance,
        })
    }

    /// Picard solves at each truncation level from one seed, with the `K_top \ K_m`
    /// tail mass `T int h6^2 dnu` and the sup distance to the top level.
    pub fn truncation_sweep(
        &self,
        eps: f64,
        sample: u64,
        levels: &[u32],
    ) -> Result<Vec<TruncationLevelReport>, SolverError> {
        let top = *levels.iter().max().ok_or_else(|| config_err("levels", "empty"))?;
        let h6 = self.cfg.coefficients.declared().h6;
        let solve_at = |m: u32| -> Result<(Trajectory, MarkGrid), SolverError> {
            let cfg = SimConfig {
                truncation: Truncation::Level(m),
                ..self.cfg.clone()
            };
            let s = Solver::new(cfg)?;
            let (t, _) = s.solve_picard(eps, sample, None)?;
            Ok((t, s.marks.clone()))
        };
        let (reference, top_marks) = solve_at(top)?;
        let mut out = Vec::new();
        for &m in levels {
            let (traj, _) = solve_at(m)?;
            let inner = Truncation::Level(m);
            let tail = self.cfg.horizon
                * top_marks
                    .nodes()
                    .iter()
                    .zip(top_marks.weights())
                    .filter(|(x, _)| !inner.contains(**x))
                    .map(|(x, w)| w * h6.eval(*x).powi(2))
                    .sum::<f64>();
            out.push(TruncationLevelReport {
                level: m,
                tail_h6_mass: tail,
                sup_distance_to_top: traj.sup_l2_distance(&reference),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start: f64,
    pub end: f64,
    pub distances: Vec<f64>,
}

impl WindowReport {
    /// Successive distance ratios `d_{k+1} / d_k`.
    pub fn ratios(&self) -> Vec<f64> {
        self.distances.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub window_steps: usize,
    pub windows: Vec<WindowReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationLevelReport {
    pub level: u32,
    pub tail_h6_mass: f64,
    pub sup_distance_to_top: f64,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub v: Trajectory,
    pub y: Vec<Field>,
    pub z: Vec<Field>,
    pub j_subtractive: Vec<Field>,
    pub j_resolved: Vec<Field>,
    pub j_distance: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{PolynomialParams, PolynomialSet};
    use crate::noise::MarkMeasure;
    use std::f64::consts::PI;

    fn zero_set() -> Arc<dyn Coefficients> {
        let p = PolynomialParams {
            a: 0.0,
            b: 0.0,
            beta: 0.0,
            g1: 0.0,
            g2: 0.0,
            ..PolynomialParams::cubic()
        };
        Arc::new(PolynomialSet::new("zero", p).unwrap())
    }

    fn config(set: Arc<dyn Coefficients>, kernel: Kernel, horizon: f64, dt: f64, n_modes: usize) -> SimConfig {
        let k = set.k_noise();
        SimConfig {
            horizon,
            dt,
            n_modes,
            scheme: Scheme::SemiImplicitEuler,
            picard_tol: 1e-10,
            picard_max_iter: 50,
            truncation: Truncation::Full,
            coefficients: set,
            kernel,
            noise: NoiseSpec::new(k, MarkMeasure::Laplace { mass: 1.0 }, 1.0, 42).unwrap(),
            u0: Field::mode(n_modes, 1, 1.0).unwrap(),
            past: PastSpec::ConstantU0,
        }
    }

    #[test]
    fn one_step_heat_factor() {
        let s = Solver::new(config(zero_set(), Kernel::zero(), 0.01, 0.01, 4)).unwrap();
        let t = s.solve(0.0, 0, None).unwrap();
        let expected = 1.0 / (1.0 + 0.01 * PI * PI);
        assert!((t.terminal().coeffs()[0] - expected).abs() < 1e-15);
        assert!(t.terminal().coeffs()[1..].iter().all(|c| *c == 0.0));
    }

    #[test]
    fn heat_decay_converges_first_order() {
        let err = |dt: f64| {
            let s = Solver::new(config(zero_set(), Kernel::zero(), 0.1, dt, 8)).unwrap();
            let t = s.solve(0.0, 0, None).unwrap();
            (t.terminal().coeffs()[0] - (-PI * PI * 0.1).exp()).abs()
        };
        let (e1, e2) = (err(1e-3), err(5e-4));
        assert!(e1 / (-PI * PI * 0.1f64).exp() < 0.015);
        assert!((e1 / e2 - 2.0).abs() < 0.4, "{}", e1 / e2);
    }

    #[test]
    fn zero_data_stays_zero() {
        let mut cfg = config(zero_set(), Kernel::exponential(1.0, 2.0).unwrap(), 0.1, 0.01, 4);
        cfg.u0 = Field::zeros(4);
        let s = Solver::new(cfg).unwrap();
        let t = s.solve(1.0, 3, None).unwrap();
        assert!(t.states.iter().all(|f| f.is_zero()));
    }

    #[test]
    fn rejects_dt_not_dividing_horizon() {
        let cfg = config(zero_set(), Kernel::zero(), 0.1, 0.03, 4);
        match Solver::new(cfg) {
            Err(SolverError::Config { field, .. }) => assert_eq!(field, "dt"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_controls_at_zero_noise_match_uncontrolled_bitwise() {
        let set: Arc<dyn Coefficients> = Arc::new(PolynomialSet::builtin("cubic").unwrap());
        let s = Solver::new(config(set, Kernel::exponential(1.0, 2.0).unwrap(), 0.2, 0.01, 6)).unwrap();
        let plain = s.solve(0.0, 0, None).unwrap();
        let c = s.zero_controls();
        let ctrl = s.solve(0.0, 0, Some(&c)).unwrap();
        assert_eq!(plain.states, ctrl.states);
    }

    #[test]
    fn reproducible_jump_path() {
        let set: Arc<dyn Coefficients> = Arc::new(PolynomialSet::builtin("jump-only").unwrap());
        let s = Solver::new(config(set, Kernel::zero(), 0.5, 0.01, 4)).unwrap();
        let a = s.solve(0.1, 7, None).unwrap();
        let b = s.solve(0.1, 7, None).unwrap();
        assert_eq!(a, b);
        assert!(a.diagnostics.iter().map(|d| d.jumps).sum::<usize>() > 0);
    }

    #[test]
    fn cubic_single_mode_matches_ode_oracle() {
        // one mode, a = 1, b = 0, no flux/noise/memory: a' = -pi^2 a - 3/2 a^3
        let p = PolynomialParams {
            b: 0.0,
            beta: 0.0,
            g1: 0.0,
            g2: 0.0,
            ..PolynomialParams::cubic()
        };
        let set: Arc<dyn Coefficients> = Arc::new(PolynomialSet::new("c", p).unwrap());
        let mut cfg = config(set, Kernel::zero(), 0.2, 1e-4, 1);
        cfg.u0 = Field::mode(1, 1, 5.0).unwrap();
        let s = Solver::new(cfg).unwrap();
        let t = s.solve(0.0, 0, None).unwrap();
        // RK4 oracle on a fine grid
        let f = |a: f64| -PI * PI * a - 1.5 * a.powi(3);
        let mut a = 5.0;
        let h = 1e-5;
        for _ in 0..20_000 {
            let k1 = f(a);
            let k2 = f(a + 0.5 * h * k1);
            let k3 = f(a + 0.5 * h * k2);
            let k4 = f(a + h * k3);
            a += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((t.terminal().coeffs()[0] - a).abs() < 5e-3 * a.abs(), "{} vs {a}", t.terminal().coeffs()[0]);
        let l2: Vec<f64> = t.diagnostics.iter().map(|d| d.l2).collect();
        assert!(l2.windows(2).all(|w| w[1] <= w[0]));
        assert!(t.moments().int_lq_q.is_finite());
    }

    #[test]
    fn picard_zero_coefficients_converge_in_one_iterate() {
        let mut cfg = config(zero_set(), Kernel::zero(), 0.1, 0.01, 4);
        cfg.scheme = Scheme::Picard;
        let s = Solver::new(cfg).unwrap();
        let (t, rep) = s.solve_picard(0.0, 0, None).unwrap();
        let d = &rep.windows[0].distances;
        assert_eq!(d.len(), 2);
        assert!(d[0] > 0.0);
        assert_eq!(d[1], 0.0);
        let direct = s.solve(0.0, 0, None).unwrap();
        assert_eq!(t.states, direct.states);
    }

    #[test]
    fn picard_windows_follow_horizon() {
        let set: Arc<dyn Coefficients> = Arc::new(PolynomialSet::builtin("linear").unwrap());
        let cfg = config(set, Kernel::exponential(2.0, 2.0).unwrap(), 1.0, 0.01, 4);
        let s = Solver::new(cfg).unwrap();
        assert_eq!(s.picard_window_steps(), 34);
        let (_, rep) = s.solve_picard(0.1, 1, None).unwrap();
        assert_eq!(rep.windows.len(), 3);
        for w in &rep.windows {
            assert!(w.ratios().iter().all(|r| *r < 1.0), "{:?}", w.distances);
        }
    }

    #[test]
    fn decomposition_without_noise_or_control_is_all_j() {
        let set: Arc<dyn Coefficients> = Arc::new(PolynomialSet::builtin("cubic").unwrap());
        let s = Solver::new(config(set, Kernel::exponential(1.0, 2.0).unwrap(), 0.1, 0.01, 4)).unwrap();
        let noise = NoisePath::silent(s.config());
        let d = s.decompose_yzj(&noise, &s.zero_controls(), 1e-3).unwrap();
        assert!(d.y.iter().all(|f| f.is_zero()));
        assert!(d.z.iter().all(|f| f.is_zero()));
        assert_eq!(sup_l2_distance(&d.j_resolved, &d.v.states), 0.0);
    }

    #[test]
    fn decomposition_parts_sum_to_path() {
        let set: Arc<dyn Coefficients> = Arc::new(PolynomialSet::builtin("cubic").unwrap());
        let s = Solver::new(config(set, Kernel::exponential(1.0, 2.0).unwrap(), 0.2, 0.01, 4)).unwrap();
        let mut c = s.zero_controls();
        c.fill_f(0.5);
        c.fill_g(1.5);
        let noise = s.sample_noise(0.1, 2, Some(&c)).unwrap();
        let d = s.decompose_yzj(&noise, &c, 10.0 * 0.01).unwrap();
        assert!(d.j_distance < 1e-10);
        assert!(d.y.iter().any(|f| !f.is_zero()));
        assert!(d.z.iter().any(|f| !f.is_zero()));
    }

    #[test]
    fn coarsened_noise_sums_increments() {
        let set: Arc<dyn Coefficients> = Arc::new(PolynomialSet::builtin("gaussian-only").unwrap());
        let s = Solver::new(config(set, Kernel::zero(), 0.1, 0.01, 4)).unwrap();
        let fine = s.sample_noise_at(1.0, 0, None, 0.005).unwrap();
        let coarse = fine.coarsen(2);
        assert_eq!(coarse.n_steps, 10);
        let k = coarse.k_noise;
        assert!((coarse.dw[0] - fine.dw[0] - fine.dw[k]).abs() < 1e-15);
        assert!(s.solve_with_noise(&coarse, None).is_ok());
    }
}
