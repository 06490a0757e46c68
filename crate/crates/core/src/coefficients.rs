//! Coefficient operators `F`, `B`, `G1`, `G2` and sampling probes for their growth and
//! Lipschitz hypotheses.
//!
//! Every set carries *declared* constants and envelopes. [`probe_hypothesis`] draws random
//! inputs and reports the worst observed `lhs / rhs` ratio of each inequality; a ratio
//! above `1 + 1e-9` is a violation. Passing a probe does not prove anything.

use crate::spectral::SineBasis;
use crate::Field;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("invalid coefficient parameter: {0}")]
    Invalid(String),
    #[error("unknown hypothesis `{0}` (expected H1, H2, H3 or H4)")]
    UnknownHypothesis(String),
    #[error("unknown builtin coefficient set `{0}`")]
    UnknownSet(String),
    #[error("probe needs at least one sample")]
    NoSamples,
}

/// Diagonal or dense map from `k_noise` Wiener coordinates to field coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseOperator {
    /// entry `i` maps noise coordinate `i` onto mode `i + 1`
    Diagonal { n_modes: usize, entries: Vec<f64> },
    /// row-major `n_modes x k_noise`
    Dense { n_modes: usize, k_noise: usize, data: Vec<f64> },
}

impl NoiseOperator {
    pub fn zero(n_modes: usize, k_noise: usize) -> Self {
        NoiseOperator::Diagonal {
            n_modes,
            entries: vec![0.0; k_noise],
        }
    }

    pub fn k_noise(&self) -> usize {
        match self {
            NoiseOperator::Diagonal { entries, .. } => entries.len(),
            NoiseOperator::Dense { k_noise, .. } => *k_noise,
        }
    }

    pub fn n_modes(&self) -> usize {
        match self {
            NoiseOperator::Diagonal { n_modes, .. } | NoiseOperator::Dense { n_modes, .. } => {
                *n_modes
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            NoiseOperator::Diagonal { entries, .. } => entries.iter().all(|e| *e == 0.0),
            NoiseOperator::Dense { data, .. } => data.iter().all(|e| *e == 0.0),
        }
    }

    /// `out += alpha * G w`
    pub fn apply_into(&self, w: &[f64], alpha: f64, out: &mut Field) {
        assert_eq!(w.len(), self.k_noise(), "noise dimension mismatch");
        let c = out.coeffs_mut();
        match self {
            NoiseOperator::Diagonal { n_modes, entries } => {
                for (i, (e, wi)) in entries.iter().zip(w).enumerate().take(*n_modes) {
                    c[i] += alpha * e * wi;
                }
            }
            NoiseOperator::Dense { n_modes, k_noise, data } => {
                for (k, ck) in c.iter_mut().enumerate().take(*n_modes) {
                    let row = &data[k * k_noise..(k + 1) * k_noise];
                    *ck += alpha * row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    pub fn apply(&self, w: &[f64]) -> Field {
        let mut out = Field::zeros(self.n_modes());
        self.apply_into(w, 1.0, &mut out);
        out
    }

    /// Squared Hilbert-Schmidt (Frobenius) norm of the truncated matrix.
    pub fn hs_norm_sq(&self) -> f64 {
        match self {
            NoiseOperator::Diagonal { n_modes, entries } => {
                entries.iter().take(*n_modes).map(|e| e * e).sum()
            }
            NoiseOperator::Dense { data, .. } => data.iter().map(|e| e * e).sum(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        match (self, other) {
            (
                NoiseOperator::Diagonal { n_modes, entries },
                NoiseOperator::Diagonal { entries: e2, .. },
            ) => NoiseOperator::Diagonal {
                n_modes: *n_modes,
                entries: entries.iter().zip(e2).map(|(a, b)| a - b).collect(),
            },
            _ => {
                let (a, b) = (self.to_dense(), other.to_dense());
                if let (
                    NoiseOperator::Dense { n_modes, k_noise, data },
                    NoiseOperator::Dense { data: d2, .. },
                ) = (a, b)
                {
                    NoiseOperator::Dense {
                        n_modes,
                        k_noise,
                        data: data.iter().zip(&d2).map(|(x, y)| x - y).collect(),
                    }
                } else {
                    unreachable!()
                }
            }
        }
    }

    fn to_dense(&self) -> Self {
        match self {
            NoiseOperator::Dense { .. } => self.clone(),
            NoiseOperator::Diagonal { n_modes, entries } => {
                let k = entries.len();
                let mut data = vec![0.0; n_modes * k];
                for (i, e) in entries.iter().enumerate().take(*n_modes) {
                    data[i * k + i] = *e;
                }
                NoiseOperator::Dense {
                    n_modes: *n_modes,
                    k_noise: k,
                    data,
                }
            }
        }
    }
}

/// Mark-dependent envelope `h(x)` for the jump hypotheses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkEnvelope {
    /// `c |x|`
    Abs(f64),
    /// `c exp(-|x|)`
    Exp(f64),
    /// `c`
    Constant(f64),
}

impl MarkEnvelope {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            MarkEnvelope::Abs(c) => c * x.abs(),
            MarkEnvelope::Exp(c) => c * (-x.abs()).exp(),
            MarkEnvelope::Constant(c) => c,
        }
    }
}

/// Constants and envelopes a coefficient set claims to satisfy. Time envelopes
/// `h1..h4` are constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Declared {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub q: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
    pub h5: MarkEnvelope,
    pub h6: MarkEnvelope,
    /// exponent of the exponential-integrability class the mark envelopes are claimed
    /// to belong to; recorded, never verified
    pub exp_integrability: f64,
}

/// Drift, flux and noise coefficients of the heat equation with memory.
///
/// Spatial operations receive the [`SineBasis`] of the simulation so pointwise
/// nonlinearities can be evaluated on its quadrature grid.
pub trait Coefficients: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;

    /// Number of Wiener coordinates `G1` acts on.
    fn k_noise(&self) -> usize;

    /// `F(t, u)` projected onto the basis.
    fn drift(&self, t: f64, u: &Field, basis: &SineBasis<f64>) -> Field;

    /// Point values of `F(t, u)` on the quadrature grid.
    fn drift_values(&self, t: f64, u: &Field, basis: &SineBasis<f64>) -> Vec<f64> {
        basis.synthesize(&self.drift(t, u, basis))
    }

    /// Point values of the flux `B(t, u)` on the quadrature grid.
    fn flux_values(&self, t: f64, u: &Field, basis: &SineBasis<f64>) -> Vec<f64>;

    /// Galerkin coefficients of `div B(t, u)`.
    fn div_flux(&self, t: f64, u: &Field, basis: &SineBasis<f64>) -> Field {
        basis.weak_derivative(&self.flux_values(t, u, basis))
    }

    fn gaussian(&self, t: f64, u: &Field) -> NoiseOperator;

    /// `G2(t, u, x)`.
    fn jump(&self, t: f64, u: &Field, mark: f64) -> Field;

    /// `sum_j weights[j] * G2(t, u, marks[j])`.
    fn jump_sum(&self, t: f64, u: &Field, marks: &[f64], weights: &[f64]) -> Field {
        let mut out = Field::zeros(u.n_modes());
        for (x, w) in marks.iter().zip(weights) {
            out.axpy(*w, &self.jump(t, u, *x));
        }
        out
    }

    /// True when `G2` vanishes identically.
    fn jump_free(&self) -> bool {
        false
    }

    fn declared(&self) -> &Declared;
}

/// Parameters of the builtin polynomial family:
/// `F(u) = -a u^3 + b u`, `B(u) = beta u` (pointwise),
/// `G1` diagonal with `sigma_k(u) = g1 (k pi)^{-p} (1 + kappa ||u||_2)`,
/// `G2(u, x) = g2 x (1 + kappa ||u||_2) phi_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialParams {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub g1: f64,
    pub p: f64,
    pub g2: f64,
    /// 1 for state-dependent noise amplitudes, 0 for additive noise
    pub kappa: f64,
    pub k_noise: usize,
}

impl PolynomialParams {
    pub fn cubic() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            beta: 0.5,
            g1: 1.0,
            p: 1.0,
            g2: 0.5,
            kappa: 1.0,
            k_noise: 8,
        }
    }

    pub fn linear() -> Self {
        Self {
            a: 0.0,
            b: -1.0,
            ..Self::cubic()
        }
    }

    pub fn gaussian_only() -> Self {
        Self {
            g2: 0.0,
            ..Self::cubic()
        }
    }

    pub fn jump_only() -> Self {
        Self {
            g1: 0.0,
            ..Self::cubic()
        }
    }

    pub fn builtin(name: &str) -> Result<Self, CoefficientError> {
        match name {
            "cubic" => Ok(Self::cubic()),
            "linear" => Ok(Self::linear()),
            "gaussian-only" => Ok(Self::gaussian_only()),
            "jump-only" => Ok(Self::jump_only()),
            other => Err(CoefficientError::UnknownSet(other.to_string())),
        }
    }
}

pub const BUILTIN_SETS: [&str; 4] = ["cubic", "linear", "gaussian-only", "jump-only"];

#[derive(Debug, Clone)]
pub struct PolynomialSet {
    name: String,
    params: PolynomialParams,
    declared: Declared,
    /// `(k pi)^{-p}` for k = 1..=k_noise
    decay: Vec<f64>,
}

impl PolynomialSet {
    pub fn new(name: impl Into<String>, params: PolynomialParams) -> Result<Self, CoefficientError> {
        let p = &params;
        let finite = [p.a, p.b, p.beta, p.g1, p.p, p.g2, p.kappa];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(CoefficientError::Invalid("parameters must be finite".into()));
        }
        if p.a < 0.0 {
            return Err(CoefficientError::Invalid(format!(
                "cubic coefficient a = {} < 0 breaks the coercivity bound <v, F(v)> <= -c4 ||v||_q^q + h2 (1 + ||v||^2)",
                p.a
            )));
        }
        if p.p <= 0.5 {
            return Err(CoefficientError::Invalid(format!(
                "noise decay p = {} must exceed 1/2 for a Hilbert-Schmidt G1",
                p.p
            )));
        }
        if p.k_noise == 0 {
            return Err(CoefficientError::Invalid("k_noise must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&p.kappa) {
            return Err(CoefficientError::Invalid("kappa must lie in [0, 1]".into()));
        }
        let decay: Vec<f64> = (1..=p.k_noise)
            .map(|k| (k as f64 * PI).powf(-p.p))
            .collect();
        let declared = Self::derive_declared(&params, &decay);
        Ok(Self {
            name: name.into(),
            params,
            declared,
            decay,
        })
    }

    pub fn builtin(name: &str) -> Result<Self, CoefficientError> {
        Self::new(name, PolynomialParams::builtin(name)?)
    }

    /// Replace the declared constants (used to build deliberately wrong sets for probing).
    pub fn with_declared(mut self, declared: Declared) -> Self {
        self.declared = declared;
        self
    }

    pub fn params(&self) -> &PolynomialParams {
        &self.params
    }

    fn derive_declared(p: &PolynomialParams, decay: &[f64]) -> Declared {
        let hs: f64 = decay.iter().map(|d| d * d).sum();
        let cubic = p.a > 0.0;
        let q = if cubic { 4.0 } else { 2.0 };
        // <v, F v> = -a ||v||_4^4 + b ||v||^2
        let (c4, h2) = if cubic {
            (p.a, p.b.max(0.0))
        } else {
            (1.0, (p.b + 1.0).max(0.0) + 1.0)
        };
        // |-a v^3 + b v|^{q*}: for q = 4 use (x+y)^{4/3} <= 2^{1/3}(x^{4/3} + y^{4/3}) and |v|^{4/3} <= 1 + v^4
        let (c5, h3) = if cubic {
            let k = 2f64.powf(1.0 / 3.0);
            (k * (p.a.powf(4.0 / 3.0) + p.b.abs().powf(4.0 / 3.0)), k * p.b.abs().powf(4.0 / 3.0))
        } else {
            (p.b * p.b, 0.0)
        };
        Declared {
            c1: p.beta * p.beta,
            c2: p.beta * p.beta,
            c3: p.b.max(0.0),
            c4,
            c5,
            c6: p.g1 * p.g1 * p.kappa * p.kappa * hs,
            q,
            h1: 0.0,
            h2,
            h3,
            // (1 + kappa r)^2 <= 2 (1 + r^2)
            h4: 2.0 * p.g1 * p.g1 * hs,
            h5: MarkEnvelope::Abs(p.g2.abs() * p.kappa),
            h6: MarkEnvelope::Abs(p.g2.abs()),
            exp_integrability: 0.0,
        }
    }

    fn amplitude(&self, u: &Field) -> f64 {
        1.0 + self.params.kappa * u.l2_norm()
    }
}

impl Coefficients for PolynomialSet {
    fn name(&self) -> &str {
        &self.name
    }

    fn k_noise(&self) -> usize {
        self.params.k_noise
    }

    fn drift(&self, t: f64, u: &Field, basis: &SineBasis<f64>) -> Field {
        if self.params.a == 0.0 {
            return u.scaled(self.params.b);
        }
        let values = self.drift_values(t, u, basis);
        basis.analyze(&values).expect("values on the basis grid")
    }

    fn drift_values(&self, _t: f64, u: &Field, basis: &SineBasis<f64>) -> Vec<f64> {
        let (a, b) = (self.params.a, self.params.b);
        basis
            .synthesize(u)
            .into_iter()
            .map(|v| -a * v * v * v + b * v)
            .collect()
    }

    fn flux_values(&self, _t: f64, u: &Field, basis: &SineBasis<f64>) -> Vec<f64> {
        let beta = self.params.beta;
        basis.synthesize(u).into_iter().map(|v| beta * v).collect()
    }

    fn div_flux(&self, t: f64, u: &Field, basis: &SineBasis<f64>) -> Field {
        if self.params.beta == 0.0 {
            return Field::zeros(u.n_modes());
        }
        basis.weak_derivative(&self.flux_values(t, u, basis))
    }

    fn gaussian(&self, _t: f64, u: &Field) -> NoiseOperator {
        let amp = self.params.g1 * self.amplitude(u);
        NoiseOperator::Diagonal {
            n_modes: u.n_modes(),
            entries: self.decay.iter().map(|d| amp * d).collect(),
        }
    }

    fn jump(&self, _t: f64, u: &Field, mark: f64) -> Field {
        let mut out = Field::zeros(u.n_modes());
        out.coeffs_mut()[0] = self.params.g2 * mark * self.amplitude(u);
        out
    }

    fn jump_sum(&self, _t: f64, u: &Field, marks: &[f64], weights: &[f64]) -> Field {
        let mut out = Field::zeros(u.n_modes());
        if self.params.g2 == 0.0 {
            return out;
        }
        let m: f64 = marks.iter().zip(weights).map(|(x, w)| x * w).sum();
        out.coeffs_mut()[0] = self.params.g2 * self.amplitude(u) * m;
        out
    }

    fn jump_free(&self) -> bool {
        self.params.g2 == 0.0
    }

    fn declared(&self) -> &Declared {
        &self.declared
    }
}

pub fn builtin_set(name: &str) -> Result<Arc<dyn Coefficients>, CoefficientError> {
    Ok(Arc::new(PolynomialSet::builtin(name)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hypothesis {
    H1,
    H2,
    H3,
    H4,
}

impl Hypothesis {
    pub const ALL: [Hypothesis; 4] = [Hypothesis::H1, Hypothesis::H2, Hypothesis::H3, Hypothesis::H4];

    pub fn clauses(self) -> &'static [Clause] {
        match self {
            Hypothesis::H1 => &[Clause::FluxLipschitz, Clause::FluxGrowth],
            Hypothesis::H2 => &[
                Clause::DriftMonotone,
                Clause::DriftCoercive,
                Clause::DriftGrowth,
                Clause::DriftContinuity,
            ],
            Hypothesis::H3 => &[Clause::GaussLipschitz, Clause::GaussGrowth],
            Hypothesis::H4 => &[Clause::JumpLipschitz, Clause::JumpGrowth],
        }
    }
}

impl FromStr for Hypothesis {
    type Err = CoefficientError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "H1" => Ok(Hypothesis::H1),
            "H2" => Ok(Hypothesis::H2),
            "H3" => Ok(Hypothesis::H3),
            "H4" => Ok(Hypothesis::H4),
            _ => Err(CoefficientError::UnknownHypothesis(s.to_string())),
        }
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One inequality of a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clause {
    /// `||B(v1) - B(v2)||^2 <= c1 ||v1 - v2||^2`
    FluxLipschitz,
    /// `||B(v)||^2 <= c2 ||v||^2 + h1`
    FluxGrowth,
    /// `<v1 - v2, F(v1) - F(v2)> <= c3 ||v1 - v2||^2`
    DriftMonotone,
    /// `<v, F(v)> + c4 ||v||_q^q <= h2 (1 + ||v||^2)`
    DriftCoercive,
    /// `||F(v)||_{q*}^{q*} <= c5 ||v||_q^q + h3`
    DriftGrowth,
    /// refining the eta grid of `eta -> <x, F(y + eta z)>` halves the largest increment
    DriftContinuity,
    /// `||G1(v1) - G1(v2)||_HS^2 <= c6 ||v1 - v2||^2`
    GaussLipschitz,
    /// `||G1(v)||_HS^2 <= h4 (1 + ||v||^2)`
    GaussGrowth,
    /// `||G2(v1, x) - G2(v2, x)|| <= h5(x) ||v1 - v2||`
    JumpLipschitz,
    /// `||G2(v, x)|| <= h6(x) (1 + ||v||)`
    JumpGrowth,
}

impl Clause {
    pub fn index(self) -> usize {
        match self {
            Clause::FluxLipschitz | Clause::DriftMonotone | Clause::GaussLipschitz | Clause::JumpLipschitz => 1,
            Clause::FluxGrowth | Clause::DriftCoercive | Clause::GaussGrowth | Clause::JumpGrowth => 2,
            Clause::DriftGrowth => 3,
            Clause::DriftContinuity => 4,
        }
    }
}

/// Inputs of one probe evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub t: f64,
    pub v1: Field,
    pub v2: Field,
    pub mark: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub hypothesis: Hypothesis,
    pub clause: usize,
    pub n_samples: usize,
    pub worst_ratio: f64,
    pub violation: Option<(ProbeSample, f64, f64)>,
    pub passed: bool,
}

pub const PROBE_SLACK: f64 = 1e-9;

/// `lhs / rhs` with `0 / 0 = 0` and `x / 0 = inf` for `x > 0`.
fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs <= 0.0 {
        if rhs > 0.0 {
            lhs / rhs
        } else {
            0.0
        }
    } else if rhs > 0.0 {
        lhs / rhs
    } else {
        f64::INFINITY
    }
}

fn l2_of_values(basis: &SineBasis<f64>, values: &[f64]) -> f64 {
    basis.grid().lq_norm(values, 2.0)
}

/// Evaluate one inequality at one sample; returns `(lhs, rhs)`.
pub fn evaluate_clause(
    set: &dyn Coefficients,
    clause: Clause,
    s: &ProbeSample,
    basis: &SineBasis<f64>,
) -> (f64, f64) {
    let d = set.declared();
    let diff = s.v1.sub(&s.v2);
    let dn2 = diff.l2_norm_sq();
    match clause {
        Clause::FluxLipschitz => {
            let b1 = set.flux_values(s.t, &s.v1, basis);
            let b2 = set.flux_values(s.t, &s.v2, basis);
            let db: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a - b).collect();
            (l2_of_values(basis, &db).powi(2), d.c1 * dn2)
        }
        Clause::FluxGrowth => {
            let b = set.flux_values(s.t, &s.v1, basis);
            (l2_of_values(basis, &b).powi(2), d.c2 * s.v1.l2_norm_sq() + d.h1)
        }
        Clause::DriftMonotone => {
            let f1 = set.drift_values(s.t, &s.v1, basis);
            let f2 = set.drift_values(s.t, &s.v2, basis);
            let dv = basis.synthesize(&diff);
            let prod: Vec<f64> = dv
                .iter()
                .zip(f1.iter().zip(&f2))
                .map(|(x, (a, b))| x * (a - b))
                .collect();
            (basis.grid().integrate(&prod), d.c3 * dn2)
        }
        Clause::DriftCoercive => {
            let f = set.drift_values(s.t, &s.v1, basis);
            let v = basis.synthesize(&s.v1);
            let prod: Vec<f64> = v.iter().zip(&f).map(|(a, b)| a * b).collect();
            let lq = basis.grid().lq_norm(&v, d.q).powf(d.q);
            (
                basis.grid().integrate(&prod) + d.c4 * lq,
                d.h2 * (1.0 + s.v1.l2_norm_sq()),
            )
        }
        Clause::DriftGrowth => {
            let qs = d.q / (d.q - 1.0);
            let f = set.drift_values(s.t, &s.v1, basis);
            let v = basis.synthesize(&s.v1);
            (
                basis.grid().lq_norm(&f, qs).powf(qs),
                d.c5 * basis.grid().lq_norm(&v, d.q).powf(d.q) + d.h3,
            )
        }
        Clause::DriftContinuity => {
            // x = v1, y = v2, z = v1 - v2
            let max_step = |n: usize| {
                let vals: Vec<f64> = (0..n)
                    .map(|i| {
                        let eta = i as f64 / (n - 1) as f64;
                        let mut y = s.v2.clone();
                        y.axpy(eta, &diff);
                        let f = set.drift_values(s.t, &y, basis);
                        let x = basis.synthesize(&s.v1);
                        let prod: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a * b).collect();
                        basis.grid().integrate(&prod)
                    })
                    .collect();
                vals.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
            };
            let coarse = max_step(101);
            let fine = max_step(201);
            // a smooth map gives fine ~ coarse / 2; allow 10% for curvature
            (fine, 0.55 * coarse)
        }
        Clause::GaussLipschitz => {
            let g1 = set.gaussian(s.t, &s.v1);
            let g2 = set.gaussian(s.t, &s.v2);
            (g1.sub(&g2).hs_norm_sq(), d.c6 * dn2)
        }
        Clause::GaussGrowth => (
            set.gaussian(s.t, &s.v1).hs_norm_sq(),
            d.h4 * (1.0 + s.v1.l2_norm_sq()),
        ),
        Clause::JumpLipschitz => {
            let j = set.jump(s.t, &s.v1, s.mark).sub(&set.jump(s.t, &s.v2, s.mark));
            (j.l2_norm(), d.h5.eval(s.mark) * dn2.sqrt())
        }
        Clause::JumpGrowth => (
            set.jump(s.t, &s.v1, s.mark).l2_norm(),
            d.h6.eval(s.mark) * (1.0 + s.v1.l2_norm()),
        ),
    }
}

/// Probe settings beyond the sample count and radius.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub n_modes: usize,
    pub horizon: f64,
    pub mark_range: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            n_modes: 8,
            horizon: 1.0,
            mark_range: 10.0,
            seed: 0x5eed,
        }
    }
}

fn random_field(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Field {
    let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let r = radius * rng.random::<f64>();
    Field::new(dir.into_iter().map(|x| x * r / norm).collect()).expect("finite")
}

/// Falsification sampling of one hypothesis; one report per inequality.
pub fn probe_hypothesis(
    set: &dyn Coefficients,
    id: Hypothesis,
    n_samples: usize,
    field_radius: f64,
    opts: &ProbeOptions,
) -> Result<Vec<ProbeReport>, CoefficientError> {
    if n_samples == 0 {
        return Err(CoefficientError::NoSamples);
    }
    let basis = SineBasis::for_modes(opts.n_modes);
    let mut reports = Vec::new();
    for &clause in id.clauses() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(clause as u64 + 16 * id as u64);
        // the continuity clause is expensive and deterministic in shape; fewer draws suffice
        let n = if clause == Clause::DriftContinuity {
            n_samples.div_ceil(50)
        } else {
            n_samples
        };
        let mut worst = f64::NEG_INFINITY;
        let mut violation = None;
        for _ in 0..n {
            let v1 = random_field(&mut rng, opts.n_modes, field_radius);
            let v2 = random_field(&mut rng, opts.n_modes, field_radius);
            let sample = ProbeSample {
                t: opts.horizon * rng.random::<f64>(),
                v1,
                v2,
                mark: opts.mark_range * (2.0 * rng.random::<f64>() - 1.0),
            };
            let (lhs, rhs) = evaluate_clause(set, clause, &sample, &basis);
            let r = ratio(lhs, rhs);
            if r > worst {
                worst = r;
            }
            if (r > 1.0 + PROBE_SLACK || r.is_nan()) && violation.is_none() {
                violation = Some((sample, lhs, rhs));
            }
        }
        reports.push(ProbeReport {
            hypothesis: id,
            clause: clause.index(),
            n_samples: n,
            worst_ratio: worst,
            passed: violation.is_none(),
            violation,
        });
    }
    Ok(reports)
}

pub fn probe_all(
    set: &dyn Coefficients,
    n_samples: usize,
    field_radius: f64,
    opts: &ProbeOptions,
) -> Result<Vec<ProbeReport>, CoefficientError> {
    let mut out = Vec::new();
    for h in Hypothesis::ALL {
        out.extend(probe_hypothesis(set, h, n_samples, field_radius, opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_vanishes_at_zero() {
        let set = PolynomialSet::builtin("cubic").unwrap();
        let basis = SineBasis::for_modes(6);
        let f = set.drift(0.0, &Field::zeros(6), &basis);
        assert!(f.l2_norm() < 1e-15);
    }

    #[test]
    fn coercive_pairing_on_first_mode_matches_quadrature() {
        // <c phi_1, F(c phi_1)> = -c^4 ||phi_1||_4^4 with a = 1, b = 0; ||phi_1||_4^4 = 3/2
        let params = PolynomialParams { b: 0.0, ..PolynomialParams::cubic() };
        let set = PolynomialSet::new("t", params).unwrap();
        let basis = SineBasis::for_modes(8);
        let c = 1.7;
        let u = Field::mode(8, 1, c).unwrap();
        let pairing = u.dot(&set.drift(0.0, &u, &basis));
        // oracle: midpoint rule, 10^5 cells
        let n = 100_000;
        let phi4: f64 = (0..n)
            .map(|j| {
                let x = (j as f64 + 0.5) / n as f64;
                (2f64.sqrt() * (PI * x).sin()).powi(4)
            })
            .sum::<f64>()
            / n as f64;
        assert!((phi4 - 1.5).abs() < 1e-9);
        assert!((pairing + c.powi(4) * phi4).abs() < 1e-9);
    }

    #[test]
    fn zero_jump_amplitude_gives_zero_field() {
        let set = PolynomialSet::builtin("gaussian-only").unwrap();
        let u = Field::mode(4, 2, 3.0).unwrap();
        for x in [-3.0, 0.0, 0.5, 10.0] {
            assert!(set.jump(0.1, &u, x).is_zero());
        }
        assert!(set.jump_free());
    }

    #[test]
    fn rejects_negative_cubic_coefficient() {
        let params = PolynomialParams { a: -1.0, ..PolynomialParams::cubic() };
        assert!(matches!(PolynomialSet::new("bad", params), Err(CoefficientError::Invalid(_))));
        assert!(matches!(
            PolynomialSet::builtin("quartic"),
            Err(CoefficientError::UnknownSet(_))
        ));
    }

    #[test]
    fn unknown_hypothesis_is_a_domain_error() {
        assert_eq!("h3".parse::<Hypothesis>().unwrap(), Hypothesis::H3);
        assert!(matches!("H5".parse::<Hypothesis>(), Err(CoefficientError::UnknownHypothesis(_))));
    }

    #[test]
    fn builtin_h3_probe_passes() {
        let set = PolynomialSet::builtin("cubic").unwrap();
        let reports = probe_hypothesis(&set, Hypothesis::H3, 1000, 10.0, &ProbeOptions::default()).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert!(r.passed, "{r:?}");
            assert!(r.worst_ratio <= 1.0 + PROBE_SLACK);
        }
    }

    #[test]
    fn wrong_flux_constant_is_caught() {
        let set = PolynomialSet::builtin("linear").unwrap();
        let mut declared = set.declared().clone();
        declared.c1 = 0.0;
        let bad = set.with_declared(declared);
        let reports = probe_hypothesis(&bad, Hypothesis::H1, 100, 1.0, &ProbeOptions::default()).unwrap();
        let lip = reports.iter().find(|r| r.clause == 1).unwrap();
        assert!(!lip.passed);
        assert!(lip.violation.is_some());
        assert!(lip.worst_ratio.is_infinite());
    }

    #[test]
    fn lipschitz_lhs_vanishes_for_identical_inputs() {
        let basis = SineBasis::for_modes(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in BUILTIN_SETS {
            let set = PolynomialSet::builtin(name).unwrap();
            for _ in 0..20 {
                let v = random_field(&mut rng, 8, 10.0);
                let s = ProbeSample { t: 0.3, v1: v.clone(), v2: v, mark: 1.3 };
                for c in [Clause::FluxLipschitz, Clause::DriftMonotone, Clause::GaussLipschitz, Clause::JumpLipschitz] {
                    let (lhs, rhs) = evaluate_clause(&set, c, &s, &basis);
                    assert_eq!(lhs, 0.0, "{name} {c:?}");
                    assert!(rhs >= 0.0);
                }
            }
        }
    }

    #[test]
    fn continuity_increments_halve_under_refinement() {
        let set = PolynomialSet::builtin("cubic").unwrap();
        let basis = SineBasis::for_modes(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let s = ProbeSample {
                t: 0.0,
                v1: random_field(&mut rng, 8, 5.0),
                v2: random_field(&mut rng, 8, 5.0),
                mark: 0.0,
            };
            let (fine, bound) = evaluate_clause(&set, Clause::DriftContinuity, &s, &basis);
            assert!(fine <= bound, "{fine} > {bound}");
        }
    }

    #[test]
    fn noise_operator_hs_norm() {
        let set = PolynomialSet::builtin("cubic").unwrap();
        let g = set.gaussian(0.0, &Field::zeros(8));
        let expected: f64 = (1..=8).map(|k| (k as f64 * PI).powf(-2.0)).sum();
        assert!((g.hs_norm_sq() - expected).abs() < 1e-15);
        let w = vec![1.0; 8];
        let applied = g.apply(&w);
        assert!((applied.coeffs()[1] - (2.0 * PI).recip()).abs() < 1e-15);
    }
}

#[cfg(test)]
mod builtin_probe_tests {
    use super::*;

    #[test]
    fn every_builtin_passes_every_probe() {
        for name in BUILTIN_SETS {
            let set = PolynomialSet::builtin(name).unwrap();
            for r in probe_all(&set, 1000, 10.0, &ProbeOptions::default()).unwrap() {
                assert!(r.passed, "{name}: {r:?}");
            }
        }
    }
}
