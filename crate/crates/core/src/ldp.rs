//! Small-noise large deviations: the costs `Q1`, `Q2`, control pairs, the skeleton map,
//! rate-function estimation by penalized control optimization, and desk-scale
//! convergence and rare-event experiments.

use crate::noise::MarkGrid;
use crate::scalar::Real;
use crate::solver::{
    path_distance_sq, sup_l2_distance, NoisePath, Solver, SolverError, Trajectory,
};
use crate::Field;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::erf::erfc;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdpError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("control exceeds its budget m = {budget}: Q1 = {q1}, Q2 = {q2}")]
    Budget { budget: f64, q1: f64, q2: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `x log x - x + 1`, with `ell(0) = 1`.
pub fn ell<T: Real>(x: T) -> Result<T, LdpError> {
    if x < T::zero() || x.is_nan() {
        return Err(LdpError::Domain(format!("ell needs x >= 0, got {x}")));
    }
    if x == T::zero() {
        return Ok(T::one());
    }
    Ok(x * x.ln() - x + T::one())
}

/// `Q1(f) = 1/2 sum_n dt |f_n|^2` for a row-major `n_steps x k` array.
pub fn q1_values<T: Real>(f: &[T], dt: T) -> T {
    T::lit(0.5) * dt * f.iter().map(|v| *v * *v).sum::<T>()
}

/// Control `(f, g)` on the solver's time grid: `f` is `n_steps x k_noise`, `g` is
/// `n_steps x n_bins` over the signed mark bins, implicitly 1 off the truncation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPair {
    n_steps: usize,
    dt: f64,
    k_noise: usize,
    n_bins: usize,
    f: Vec<f64>,
    g: Vec<f64>,
    f_zero: bool,
    g_one: bool,
    budget: Option<f64>,
}

impl ControlPair {
    pub fn zero(n_steps: usize, dt: f64, k_noise: usize, n_bins: usize) -> Self {
        Self {
            n_steps,
            dt,
            k_noise,
            n_bins,
            f: vec![0.0; n_steps * k_noise],
            g: vec![1.0; n_steps * n_bins],
            f_zero: true,
            g_one: true,
            budget: None,
        }
    }

    pub fn new(
        dt: f64,
        k_noise: usize,
        n_bins: usize,
        f: Vec<f64>,
        g: Vec<f64>,
    ) -> Result<Self, LdpError> {
        if k_noise == 0 || !f.len().is_multiple_of(k_noise) {
            return Err(LdpError::Domain("f length must be a multiple of k_noise".into()));
        }
        let n_steps = f.len() / k_noise;
        if g.len() != n_steps * n_bins {
            return Err(LdpError::Domain(format!(
                "g has {} values, expected {} x {}",
                g.len(),
                n_steps,
                n_bins
            )));
        }
        let mut c = Self::zero(n_steps, dt, k_noise, n_bins);
        c.set_f(f)?;
        c.set_g(g)?;
        Ok(c)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn k_noise(&self) -> usize {
        self.k_noise
    }
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }
    pub fn f(&self) -> &[f64] {
        &self.f
    }
    pub fn g(&self) -> &[f64] {
        &self.g
    }
    pub fn budget(&self) -> Option<f64> {
        self.budget
    }

    pub fn f_at(&self, n: usize) -> &[f64] {
        &self.f[n * self.k_noise..(n + 1) * self.k_noise]
    }

    pub fn g_at(&self, n: usize, bin: usize) -> f64 {
        self.g[n * self.n_bins + bin]
    }

    pub fn f_is_zero(&self) -> bool {
        self.f_zero
    }

    pub fn g_is_one(&self) -> bool {
        self.g_one
    }

    pub fn set_f(&mut self, f: Vec<f64>) -> Result<(), LdpError> {
        if f.len() != self.f.len() {
            return Err(LdpError::Domain("f has the wrong length".into()));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(LdpError::Domain("f must be finite".into()));
        }
        self.f_zero = f.iter().all(|v| *v == 0.0);
        self.f = f;
        Ok(())
    }

    pub fn set_g(&mut self, g: Vec<f64>) -> Result<(), LdpError> {
        if g.len() != self.g.len() {
            return Err(LdpError::Domain("g has the wrong length".into()));
        }
        if g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LdpError::Domain("g must be finite and >= 0".into()));
        }
        self.g_one = g.iter().all(|v| *v == 1.0);
        self.g = g;
        Ok(())
    }

    pub fn fill_f(&mut self, v: f64) {
        self.set_f(vec![v; self.f.len()]).expect("finite fill");
    }

    pub fn fill_g(&mut self, v: f64) {
        self.set_g(vec![v; self.g.len()]).expect("nonnegative fill");
    }

    /// `c f` with the same `g`.
    pub fn scaled_f(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.set_f(self.f.iter().map(|v| c * v).collect()).expect("finite");
        out.budget = None;
        out
    }

    fn step_of(&self, t: f64) -> usize {
        let k = (t / self.dt).ceil() as usize;
        k.saturating_sub(1).min(self.n_steps.saturating_sub(1))
    }

    /// `psi(t, x)`: the value of `g` on the step owning `t` and the bin of `x`.
    pub fn psi(&self, t: f64, x: f64, marks: &MarkGrid) -> f64 {
        match marks.bin_of(x) {
            Some(b) if self.n_bins > 0 => self.g_at(self.step_of(t), b),
            _ => 1.0,
        }
    }

    pub fn psi_max(&self) -> f64 {
        self.g.iter().copied().fold(1.0, f64::max)
    }

    /// Claim membership of the level sets `S1^m x S2^m`.
    pub fn with_budget(mut self, m: f64, marks: &MarkGrid) -> Result<Self, LdpError> {
        let (a, b) = (q1(&self), q2(&self, marks)?);
        if a > m || b > m {
            return Err(LdpError::Budget { budget: m, q1: a, q2: b });
        }
        self.budget = Some(m);
        Ok(self)
    }
}

pub fn q1(c: &ControlPair) -> f64 {
    q1_values(&c.f, c.dt)
}

/// `sum_n sum_b dt ell(g_{n,b}) nu(bin b)`; bins off the truncation set do not exist.
pub fn q2(c: &ControlPair, marks: &MarkGrid) -> Result<f64, LdpError> {
    if marks.n_bins() != c.n_bins {
        return Err(LdpError::Domain("mark grid does not match the control".into()));
    }
    let mass = marks.bin_mass();
    let mut total = 0.0;
    for n in 0..c.n_steps {
        for (b, m) in mass.iter().enumerate() {
            let g = c.g_at(n, b);
            if g != 1.0 {
                total += c.dt * ell(g)? * m;
            }
        }
    }
    Ok(total)
}

/// The deterministic controlled equation: the solver's stepper with no noise.
pub fn skeleton_solve(solver: &Solver, controls: &ControlPair) -> Result<Trajectory, SolverError> {
    solver.solve_with_noise(&NoisePath::silent(solver.config()), Some(controls))
}

/// Terminal or path sets the rate function is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Everything,
    /// `||u(T) - center||_2 <= radius`
    Terminal { center: Field, radius: f64 },
    /// `<u(T), normal> >= level`
    HalfSpace { normal: Field, level: f64 },
    /// `sup_t ||u(t) - path(t)||_2 <= radius`
    Tube { path: Vec<Field>, radius: f64 },
}

impl Target {
    /// Distance from the set (zero inside).
    pub fn violation(&self, traj: &Trajectory) -> f64 {
        match self {
            Target::Everything => 0.0,
            Target::Terminal { center, radius } => {
                (traj.terminal().sub(center).l2_norm() - radius).max(0.0)
            }
            Target::HalfSpace { normal, level } => {
                let n = normal.l2_norm();
                ((level - traj.terminal().dot(normal)) / n).max(0.0)
            }
            Target::Tube { path, radius } => {
                (sup_l2_distance(&traj.states, path) - radius).max(0.0)
            }
        }
    }

    pub fn contains_terminal(&self, u: &Field) -> bool {
        match self {
            Target::Everything => true,
            Target::Terminal { center, radius } => u.sub(center).l2_norm() <= *radius,
            Target::HalfSpace { normal, level } => u.dot(normal) >= *level,
            Target::Tube { .. } => panic!("tube targets are path sets"),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Target::Everything => "everything".into(),
            Target::Terminal { center, radius } => {
                format!("terminal ball center={:?} radius={radius}", center.coeffs())
            }
            Target::HalfSpace { normal, level } => {
                format!("half-space normal={:?} level={level}", normal.coeffs())
            }
            Target::Tube { radius, .. } => format!("path tube radius={radius}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateOptions {
    pub n_blocks: usize,
    pub mu0: f64,
    pub mu_growth: f64,
    pub outer_loops: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
    pub n_starts: usize,
    pub start_scale: f64,
    pub seed: u64,
    pub clamp_g: bool,
    pub residual_tol: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            n_blocks: 10,
            mu0: 100.0,
            mu_growth: 10.0,
            outer_loops: 3,
            max_iter: 200,
            grad_tol: 1e-9,
            fd_step: 1e-6,
            n_starts: 3,
            start_scale: 0.5,
            seed: 0,
            clamp_g: false,
            residual_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub target: String,
    pub controls: ControlPair,
    pub value: f64,
    pub q1: f64,
    pub q2: f64,
    pub residual: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub penalty: f64,
    pub converged: bool,
}

/// Block parametrization `theta = (f blocks, log g blocks)`.
struct Param<'a> {
    solver: &'a Solver,
    n_steps: usize,
    n_blocks: usize,
    k: usize,
    n_bins: usize,
    with_g: bool,
}

impl Param<'_> {
    fn dim(&self) -> usize {
        self.n_blocks * self.k + if self.with_g { self.n_blocks * self.n_bins } else { 0 }
    }

    fn block(&self, n: usize) -> usize {
        n * self.n_blocks / self.n_steps
    }

    fn expand(&self, theta: &[f64]) -> ControlPair {
        let mut c = self.solver.zero_controls();
        let mut f = vec![0.0; self.n_steps * self.k];
        for n in 0..self.n_steps {
            let b = self.block(n);
            f[n * self.k..(n + 1) * self.k].copy_from_slice(&theta[b * self.k..(b + 1) * self.k]);
        }
        c.set_f(f).expect("finite theta");
        if self.with_g {
            let off = self.n_blocks * self.k;
            let mut g = vec![1.0; self.n_steps * self.n_bins];
            for n in 0..self.n_steps {
                let b = self.block(n);
                for j in 0..self.n_bins {
                    g[n * self.n_bins + j] = theta[off + b * self.n_bins + j].exp();
                }
            }
            c.set_g(g).expect("positive g");
        }
        c
    }
}

struct Eval {
    objective: f64,
    q1: f64,
    q2: f64,
    residual: f64,
}

fn evaluate(p: &Param<'_>, target: &Target, c: &ControlPair, mu: f64) -> Eval {
    let cost1 = q1(c);
    let cost2 = q2(c, p.solver.marks()).unwrap_or(f64::INFINITY);
    match skeleton_solve(p.solver, c) {
        Ok(traj) => {
            let r = target.violation(&traj);
            Eval {
                objective: cost1 + cost2 + mu * r * r,
                q1: cost1,
                q2: cost2,
                residual: r,
            }
        }
        Err(_) => Eval {
            objective: f64::INFINITY,
            q1: cost1,
            q2: cost2,
            residual: f64::INFINITY,
        },
    }
}

struct StartResult {
    theta: Vec<f64>,
    eval: Eval,
    iterations: usize,
    grad_norm: f64,
    mu: f64,
}

fn run_start(p: &Param<'_>, target: &Target, opts: &RateOptions, mut theta: Vec<f64>) -> StartResult {
    let obj = |th: &[f64], mu: f64| evaluate(p, target, &p.expand(th), mu).objective;
    let mut mu = opts.mu0;
    let mut iterations = 0;
    let mut grad_norm = 0.0;
    for loop_idx in 0..opts.outer_loops.max(1) {
        if loop_idx > 0 {
            mu *= opts.mu_growth;
        }
        let mut j = obj(&theta, mu);
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut alpha = 1e-2;
        for _ in 0..opts.max_iter {
            let grad: Vec<f64> = (0..theta.len())
                .into_par_iter()
                .map(|i| {
                    let h = opts.fd_step * theta[i].abs().max(1.0);
                    let mut tp = theta.clone();
                    tp[i] += h;
                    let mut tm = theta.clone();
                    tm[i] -= h;
                    (obj(&tp, mu) - obj(&tm, mu)) / (2.0 * h)
                })
                .collect();
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !grad_norm.is_finite() || grad_norm <= opts.grad_tol * (1.0 + j) {
                break;
            }
            if let Some((pt, pg)) = &prev {
                let s: Vec<f64> = theta.iter().zip(pt).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = grad.iter().zip(pg).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|a| a * a).sum();
                alpha = if sy > 0.0 { ss / sy } else { alpha * 2.0 };
            }
            let g2 = grad_norm * grad_norm;
            let mut accepted = None;
            for _ in 0..40 {
                let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - alpha * g).collect();
                let jc = obj(&cand, mu);
                if jc < j - 1e-4 * alpha * g2 {
                    accepted = Some((cand, jc));
                    break;
                }
                alpha *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some((cand, jc)) => {
                    let rel = (j - jc) / j.abs().max(1e-300);
                    prev = Some((std::mem::replace(&mut theta, cand), grad));
                    j = jc;
                    if rel < 1e-13 {
                        break;
                    }
                }
                None => break,
            }
        }
    }
    let eval = evaluate(p, target, &p.expand(&theta), mu);
    StartResult {
        theta,
        eval,
        iterations,
        grad_norm,
        mu,
    }
}

/// Upper estimate of `inf {Q1(f) + Q2(g) : u(f, g) in target}` over block-constant
/// controls. Never fails on stalls: convergence is reported in the estimate.
/// Any feasible `candidates` cheaper than the optimizer's result replace it.
pub fn rate_function(
    solver: &Solver,
    target: &Target,
    opts: &RateOptions,
    candidates: &[ControlPair],
) -> Result<RateEstimate, LdpError> {
    let n_steps = solver.n_steps();
    if opts.n_blocks == 0 || opts.n_blocks > n_steps {
        return Err(LdpError::Domain(format!(
            "n_blocks = {} must lie in 1..={n_steps}",
            opts.n_blocks
        )));
    }
    let coeffs = solver.config().coefficients.clone();
    let p = Param {
        solver,
        n_steps,
        n_blocks: opts.n_blocks,
        k: solver.config().noise.k_noise,
        n_bins: solver.marks().n_bins(),
        with_g: !opts.clamp_g && !coeffs.jump_free() && solver.marks().n_bins() > 0,
    };
    let dim = p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![vec![0.0; dim]];
    for _ in 1..opts.n_starts.max(1) {
        starts.push(
            (0..dim)
                .map(|_| opts.start_scale * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
        );
    }
    let results: Vec<StartResult> = starts
        .into_par_iter()
        .map(|th| run_start(&p, target, opts, th))
        .collect();
    let best = results
        .into_iter()
        .min_by(|a, b| {
            let fa = a.eval.residual <= opts.residual_tol;
            let fb = b.eval.residual <= opts.residual_tol;
            fb.cmp(&fa).then_with(|| {
                let ka = if fa { a.eval.q1 + a.eval.q2 } else { a.eval.objective };
                let kb = if fb { b.eval.q1 + b.eval.q2 } else { b.eval.objective };
                ka.total_cmp(&kb)
            })
        })
        .expect("at least one start");
    let mut est = RateEstimate {
        target: target.describe(),
        controls: p.expand(&best.theta),
        value: best.eval.q1 + best.eval.q2,
        q1: best.eval.q1,
        q2: best.eval.q2,
        residual: best.eval.residual,
        iterations: best.iterations,
        grad_norm: best.grad_norm,
        penalty: best.mu,
        converged: best.eval.residual <= opts.residual_tol,
    };
    for c in candidates {
        let e = evaluate(&p, target, c, 0.0);
        if e.residual <= opts.residual_tol && (!est.converged || e.q1 + e.q2 < est.value) {
            est.controls = c.clone();
            est.value = e.q1 + e.q2;
            est.q1 = e.q1;
            est.q2 = e.q2;
            est.residual = e.residual;
            est.converged = true;
        }
    }
    Ok(est)
}

/// Closed-form rate of the scalar problem `a' = -kappa a + sigma f`, `a(0) = a0`,
/// `a(T) = z`: `kappa (z - e^{-kappa T} a0)^2 / (sigma^2 (1 - e^{-2 kappa T}))`.
pub fn scalar_lq_rate(kappa: f64, sigma: f64, a0: f64, z: f64, horizon: f64) -> f64 {
    let m = (-kappa * horizon).exp() * a0;
    kappa * (z - m).powi(2) / (sigma * sigma * -(-2.0 * kappa * horizon).exp_m1())
}

/// Standard normal upper tail.
pub fn normal_tail(y: f64) -> f64 {
    0.5 * erfc(y / std::f64::consts::SQRT_2)
}

/// `ln P(Z >= y)`, accurate far into the tail.
pub fn ln_normal_tail(y: f64) -> f64 {
    if y < 20.0 {
        return normal_tail(y).ln();
    }
    // asymptotic series of the Mills ratio
    let z = 1.0 / (y * y);
    let series = 1.0 - z + 3.0 * z * z - 15.0 * z.powi(3) + 105.0 * z.powi(4);
    -0.5 * y * y - (y * (2.0 * PI).sqrt()).ln() + series.ln()
}

/// For a Gaussian endpoint with rate `I` at level `eps`: the exact tail rate
/// `-eps log P(Z >= sqrt(2 I / eps))` and the Mills-ratio gap `eps log(sqrt(2 pi)(1 + y^2) / y)`
/// bounding it above `I`.
pub fn gaussian_tail_rate(rate: f64, eps: f64) -> (f64, f64) {
    let y = (2.0 * rate / eps).sqrt();
    let exact = -eps * ln_normal_tail(y);
    let gap = eps * ((2.0 * PI).sqrt() * (1.0 + y * y) / y).ln();
    (exact, gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareEventRow {
    pub eps: f64,
    pub n_samples: usize,
    pub hits: usize,
    pub p_hat: f64,
    /// `-eps log p_hat`, or the lower bound from the one-sided upper bound on `p` with no hits
    pub rate_mc: f64,
    pub one_sided: bool,
    /// rate interval from a two-sided Clopper-Pearson interval on `p`
    pub rate_lo: f64,
    pub rate_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareEventReport {
    pub rows: Vec<RareEventRow>,
    /// MC rates non-increasing as `eps` decreases
    pub monotone: bool,
}

/// Two-sided Clopper-Pearson interval at level `1 - alpha`.
pub fn clopper_pearson(hits: usize, n: usize, alpha: f64) -> (f64, f64) {
    let (k, nf) = (hits as f64, n as f64);
    let lo = if hits == 0 {
        0.0
    } else {
        Beta::new(k, nf - k + 1.0).expect("valid beta").inverse_cdf(alpha / 2.0)
    };
    let hi = if hits == n {
        1.0
    } else {
        Beta::new(k + 1.0, nf - k).expect("valid beta").inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Default level of the intervals reported by [`rare_event_mc`] (about 3 sigma).
pub const RARE_EVENT_ALPHA: f64 = 0.003;

/// Estimate `P(U_eps(T) in A)` by counting over independent paths at each `eps`.
pub fn rare_event_mc(
    solver: &Solver,
    event: &Target,
    eps_schedule: &[f64],
    n_samples: usize,
) -> Result<RareEventReport, LdpError> {
    if n_samples == 0 {
        return Err(LdpError::Domain("need at least one sample".into()));
    }
    if matches!(event, Target::Tube { .. }) {
        return Err(LdpError::Domain("rare events are terminal sets".into()));
    }
    let mut rows = Vec::new();
    for &eps in eps_schedule {
        let hits: usize = solver
            .ensemble(eps, n_samples, None, |t| usize::from(event.contains_terminal(t.terminal())))?
            .into_iter()
            .sum();
        let n = n_samples as f64;
        let p_hat = hits as f64 / n;
        let (lo, hi) = clopper_pearson(hits, n_samples, RARE_EVENT_ALPHA);
        let to_rate = |p: f64| if p <= 0.0 { f64::INFINITY } else { -eps * p.ln() };
        let (rate_mc, one_sided) = if hits == 0 {
            // one-sided 95% upper bound 1 - 0.05^{1/n}
            (to_rate(-(0.05f64.ln() / n).exp_m1()), true)
        } else {
            (to_rate(p_hat), false)
        };
        rows.push(RareEventRow {
            eps,
            n_samples,
            hits,
            p_hat,
            rate_mc,
            one_sided,
            rate_lo: to_rate(hi),
            rate_hi: to_rate(lo),
        });
    }
    let mut by_eps = rows.clone();
    by_eps.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let monotone = by_eps.windows(2).all(|w| w[1].rate_mc <= w[0].rate_mc);
    Ok(RareEventReport { rows, monotone })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum C1Mode {
    /// `f_n = f + (1/n) sin(2 pi n t / T) e_1`
    OscillatingF,
    /// `g_n = g (1 + 1/2 sin(2 pi n t / T))`, converging to `g` only against test functions
    OscillatingG,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Row {
    pub n: usize,
    /// largest pairing of the control difference with the test dictionary
    pub control_distance: f64,
    pub output_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Report {
    pub mode: C1Mode,
    pub rows: Vec<C1Row>,
    pub monotone: bool,
    pub below_tolerance: bool,
}

/// Pairings of a time signal with `{1, cos(2 pi j t/T), sin(2 pi j t/T) : j <= n_dict}`.
fn dictionary_distance(signal: &[f64], dt: f64, horizon: f64, n_dict: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..=n_dict {
        let w = 2.0 * PI * j as f64 / horizon;
        let (mut c, mut s) = (0.0, 0.0);
        for (n, v) in signal.iter().enumerate() {
            let t = n as f64 * dt;
            c += dt * v * (w * t).cos();
            s += dt * v * (w * t).sin();
        }
        worst = worst.max(c.abs()).max(s.abs());
    }
    worst
}

pub fn c1_continuity_check(
    solver: &Solver,
    base: &ControlPair,
    mode: C1Mode,
    ns: &[usize],
    n_dict: usize,
    tolerance: f64,
) -> Result<C1Report, LdpError> {
    let reference = skeleton_solve(solver, base)?;
    let dt = solver.config().dt;
    let horizon = solver.config().horizon;
    let marks = solver.marks();
    let mut rows = Vec::new();
    for &n in ns {
        let mut c = base.clone();
        let osc: Vec<f64> = (0..base.n_steps())
            .map(|k| (2.0 * PI * n as f64 * k as f64 * dt / horizon).sin())
            .collect();
        let control_distance = match mode {
            C1Mode::OscillatingF => {
                let mut f = base.f().to_vec();
                for (k, o) in osc.iter().enumerate() {
                    f[k * base.k_noise()] += o / n as f64;
                }
                c.set_f(f)?;
                let sig: Vec<f64> = osc.iter().map(|o| o / n as f64).collect();
                dictionary_distance(&sig, dt, horizon, n_dict)
            }
            C1Mode::OscillatingG => {
                let nb = base.n_bins();
                let mut g = base.g().to_vec();
                for (k, o) in osc.iter().enumerate() {
                    for b in 0..nb {
                        g[k * nb + b] *= 1.0 + 0.5 * o;
                    }
                }
                c.set_g(g)?;
                // g-hat pairing: integrate the difference against nu over each bin, sum over bins
                let sig: Vec<f64> = (0..base.n_steps())
                    .map(|k| {
                        (0..nb)
                            .map(|b| (c.g_at(k, b) - base.g_at(k, b)) * marks.bin_mass()[b])
                            .sum()
                    })
                    .collect();
                dictionary_distance(&sig, dt, horizon, n_dict)
            }
        };
        let out = skeleton_solve(solver, &c)?;
        rows.push(C1Row {
            n,
            control_distance,
            output_distance: out.sup_l2_distance(&reference),
        });
    }
    let monotone = rows
        .windows(2)
        .all(|w| w[1].output_distance <= w[0].output_distance);
    let below_tolerance = rows.last().is_some_and(|r| r.output_distance < tolerance);
    Ok(C1Report {
        mode,
        rows,
        monotone,
        below_tolerance,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2Row {
    pub eps: f64,
    /// per-sample `sup_t ||V - u||^2`
    pub sup_sq: Vec<f64>,
    /// per-sample `sup_t ||V - u||^2 + int ||V - u||_{2,1}^2`
    pub full: Vec<f64>,
    pub median_sup_sq: f64,
    pub median_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2Report {
    pub rows: Vec<C2Row>,
    pub slope: f64,
    pub monotone: bool,
    pub below_tolerance: bool,
}

pub fn c2_convergence_experiment(
    solver: &Solver,
    controls: &ControlPair,
    eps_schedule: &[f64],
    n_samples: usize,
    tolerance: f64,
) -> Result<C2Report, LdpError> {
    let skeleton = skeleton_solve(solver, controls)?;
    let dt = solver.config().dt;
    let mut rows = Vec::new();
    for &eps in eps_schedule {
        let pairs: Vec<(f64, f64)> = if eps == 0.0 {
            let v = solver.solve(0.0, 0, Some(controls))?;
            vec![(sup_l2_distance(&v.states, &skeleton.states).powi(2), path_distance_sq(&v.states, &skeleton.states, dt))]
        } else {
            solver.ensemble(eps, n_samples, Some(controls), |v| {
                (
                    sup_l2_distance(&v.states, &skeleton.states).powi(2),
                    path_distance_sq(&v.states, &skeleton.states, dt),
                )
            })?
        };
        let sup_sq: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let full: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        rows.push(C2Row {
            eps,
            median_sup_sq: median(&sup_sq),
            median_full: median(&full),
            sup_sq,
            full,
        });
    }
    let positive: Vec<&C2Row> = rows.iter().filter(|r| r.eps > 0.0 && r.median_sup_sq > 0.0).collect();
    let slope = if positive.len() >= 2 {
        let x: Vec<f64> = positive.iter().map(|r| r.eps).collect();
        let y: Vec<f64> = positive.iter().map(|r| r.median_sup_sq).collect();
        loglog_slope(&x, &y)
    } else {
        f64::NAN
    };
    let monotone = rows.windows(2).all(|w| w[1].median_sup_sq <= w[0].median_sup_sq);
    let below_tolerance = rows.last().is_some_and(|r| r.median_sup_sq < tolerance);
    Ok(C2Report {
        rows,
        slope,
        monotone,
        below_tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YScalingRow {
    pub eps: f64,
    pub median_sup_y_sq: f64,
    pub max_j_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YScalingReport {
    pub rows: Vec<YScalingRow>,
    pub slope: f64,
}

/// Ensemble medians of `sup_t ||Y_eps||^2` for each `eps`, with the worst subtractive
/// versus re-solved `J` distance.
pub fn y_scaling(
    solver: &Solver,
    controls: &ControlPair,
    eps_schedule: &[f64],
    n_samples: usize,
    j_tolerance: f64,
) -> Result<YScalingReport, LdpError> {
    let mut rows = Vec::new();
    for &eps in eps_schedule {
        let out: Vec<(f64, f64)> = (0..n_samples as u64)
            .into_par_iter()
            .map(|s| {
                let noise = solver.sample_noise(eps, s, Some(controls))?;
                let d = solver.decompose_yzj(&noise, controls, j_tolerance)?;
                let sup = d.y.iter().map(|y| y.l2_norm_sq()).fold(0.0, f64::max);
                Ok((sup, d.j_distance))
            })
            .collect::<Result<_, SolverError>>()?;
        let sups: Vec<f64> = out.iter().map(|p| p.0).collect();
        rows.push(YScalingRow {
            eps,
            median_sup_y_sq: median(&sups),
            max_j_distance: out.iter().map(|p| p.1).fold(0.0, f64::max),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.median_sup_y_sq).collect();
    Ok(YScalingReport {
        slope: loglog_slope(&x, &y),
        rows,
    })
}
