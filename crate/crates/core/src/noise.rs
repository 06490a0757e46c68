//! Driving noise: truncated cylindrical Wiener increments and Poisson random measures
//! on `[0, T] x R` with symmetric mark intensity `nu`, sampled on the exhaustion
//! `K_m = {1/m <= |x| <= m}` and thinned for controlled intensities.
//!
//! Every sampler is a pure function of `(seed, sample index, purpose)`. Jumps of a
//! level-`m` realization are drawn shell by shell (`K_j \ K_{j-1}`), each shell from its
//! own substream, so realizations at levels `m < m'` agree on `K_m`.

use crate::spectral::gauss_legendre_unit;
use crate::Field;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise specification: {0}")]
    Invalid(String),
    #[error("full truncation requested for a measure of infinite mass")]
    InfiniteMass,
    #[error("control intensity {value} at (t = {t}, x = {x}) exceeds psi_max = {psi_max}")]
    ControlClass { t: f64, x: f64, value: f64, psi_max: f64 },
}

/// Symmetric mark intensity on `R \ {0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MarkMeasure {
    /// density `mass * exp(-|x|) / 2`
    Laplace { mass: f64 },
    /// density `c |x|^{-3/2}` on `0 < |x| <= 1`; infinite total mass
    PowerLaw { c: f64 },
}

impl Default for MarkMeasure {
    fn default() -> Self {
        MarkMeasure::Laplace { mass: 1.0 }
    }
}

impl MarkMeasure {
    pub fn validate(&self) -> Result<(), NoiseError> {
        let v = match *self {
            MarkMeasure::Laplace { mass } => mass,
            MarkMeasure::PowerLaw { c } => c,
        };
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(NoiseError::Invalid(format!("measure scale {v} must be finite and >= 0")))
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, MarkMeasure::Laplace { .. })
    }

    pub fn density(&self, x: f64) -> f64 {
        let r = x.abs();
        match *self {
            MarkMeasure::Laplace { mass } => 0.5 * mass * (-r).exp(),
            MarkMeasure::PowerLaw { c } => {
                if r > 0.0 && r <= 1.0 {
                    c * r.powf(-1.5)
                } else {
                    0.0
                }
            }
        }
    }

    /// `nu({a <= |x| <= b})` for `0 <= a <= b <= inf`.
    pub fn radial_mass(&self, a: f64, b: f64) -> f64 {
        match *self {
            MarkMeasure::Laplace { mass } => mass * ((-a).exp() - (-b).exp()),
            MarkMeasure::PowerLaw { c } => {
                let b = b.min(1.0);
                if a >= b {
                    0.0
                } else if a == 0.0 {
                    f64::INFINITY
                } else {
                    4.0 * c * (a.powf(-0.5) - b.powf(-0.5))
                }
            }
        }
    }

    /// Inverse of the radial distribution restricted to `[a, b]`, `u` in `[0, 1)`.
    fn radial_quantile(&self, a: f64, b: f64, u: f64) -> f64 {
        match *self {
            MarkMeasure::Laplace { .. } => {
                let r = a - (u * (-(b - a)).exp_m1()).ln_1p();
                r.clamp(a, b)
            }
            MarkMeasure::PowerLaw { .. } => {
                let b = b.min(1.0);
                let (ia, ib) = (a.powf(-0.5), b.powf(-0.5));
                (ia - u * (ia - ib)).powi(-2).clamp(a, b)
            }
        }
    }

    pub fn mass(&self, trunc: Truncation) -> Result<f64, NoiseError> {
        match trunc {
            Truncation::Full => {
                if self.is_finite() {
                    Ok(self.radial_mass(0.0, f64::INFINITY))
                } else {
                    Err(NoiseError::InfiniteMass)
                }
            }
            Truncation::Level(m) => {
                let m = m as f64;
                Ok(self.radial_mass(1.0 / m, m))
            }
        }
    }
}

/// Mark-space truncation: all of `R \ {0}` or `K_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truncation {
    Full,
    Level(u32),
}

impl Truncation {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Truncation::Full => x != 0.0,
            Truncation::Level(m) => {
                let (m, r) = (m as f64, x.abs());
                r >= 1.0 / m && r <= m
            }
        }
    }

    /// Radial intervals with their substream ids.
    fn radial_pieces(&self) -> Vec<(u64, f64, f64)> {
        match *self {
            Truncation::Full => vec![(1, 0.0, f64::INFINITY)],
            Truncation::Level(m) => {
                let mut out = Vec::new();
                for j in 2..=m as u64 {
                    let jf = j as f64;
                    out.push((2 * j, 1.0 / jf, 1.0 / (jf - 1.0)));
                    out.push((2 * j + 1, jf - 1.0, jf));
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub k_noise: usize,
    pub measure: MarkMeasure,
    pub eps: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(k_noise: usize, measure: MarkMeasure, eps: f64, seed: u64) -> Result<Self, NoiseError> {
        let spec = Self { k_noise, measure, eps, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.k_noise == 0 {
            return Err(NoiseError::Invalid("k_noise must be >= 1".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(NoiseError::Invalid(format!("eps = {} must be > 0", self.eps)));
        }
        self.measure.validate()
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }
}

/// Substream purposes.
pub mod purpose {
    pub const WIENER: u64 = 1;
    pub const JUMPS: u64 = 2;
    pub const PROBE: u64 = 3;
}

/// Deterministic generator for `(seed, sample, purpose, piece)`.
pub fn substream(seed: u64, sample: u64, purpose: u64, piece: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sample << 24) ^ (purpose << 16) ^ piece);
    rng
}

/// `n_steps` i.i.d. `N(0, dt I)` vectors of length `k_noise`, flattened row-major.
pub fn wiener_increments(spec: &NoiseSpec, n_steps: usize, dt: f64, sample: u64) -> Vec<f64> {
    let n = n_steps * spec.k_noise;
    if dt == 0.0 {
        return vec![0.0; n];
    }
    let sd = dt.sqrt();
    let mut rng = substream(spec.seed, sample, purpose::WIENER, 0);
    (0..n)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRealization {
    pub events: Vec<JumpEvent>,
    pub horizon: f64,
    pub truncation: Truncation,
    /// `eps^{-1} psi_max nu(K_m)` of the dominating process
    pub base_rate: f64,
    pub psi_max: f64,
    pub thinned: bool,
}

impl JumpRealization {
    pub fn empty(horizon: f64, truncation: Truncation) -> Self {
        Self {
            events: Vec::new(),
            horizon,
            truncation,
            base_rate: 0.0,
            psi_max: 1.0,
            thinned: false,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events in `(t0, t1]`.
    pub fn window(&self, t0: f64, t1: f64) -> &[JumpEvent] {
        let lo = self.events.partition_point(|e| e.time <= t0);
        let hi = self.events.partition_point(|e| e.time <= t1);
        &self.events[lo..hi]
    }

    /// Events of one time step `(k dt, (k+1) dt]`; the first step also owns `t = 0`.
    pub fn step_events(&self, k: usize, dt: f64) -> &[JumpEvent] {
        let t0 = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;
        if k == 0 {
            let hi = self.events.partition_point(|e| e.time <= t1);
            &self.events[..hi]
        } else {
            self.window(t0, t1)
        }
    }
}

/// Poisson random measure on `[0, T] x K_m` with intensity `rate_factor * eps^{-1} dt nu(dx)`.
///
/// `rate_factor` is the dominating `psi_max` when the result will be thinned.
pub fn sample_prm(
    spec: &NoiseSpec,
    trunc: Truncation,
    horizon: f64,
    sample: u64,
    rate_factor: f64,
) -> Result<JumpRealization, NoiseError> {
    if !(rate_factor.is_finite() && rate_factor >= 0.0) {
        return Err(NoiseError::Invalid(format!("rate factor {rate_factor} must be >= 0")));
    }
    let total = spec.measure.mass(trunc)?;
    let mut real = JumpRealization::empty(horizon, trunc);
    real.psi_max = rate_factor;
    real.base_rate = rate_factor * total / spec.eps;
    if real.base_rate == 0.0 || horizon <= 0.0 {
        return Ok(real);
    }
    for (piece, a, b) in trunc.radial_pieces() {
        let lambda = rate_factor * spec.measure.radial_mass(a, b) / spec.eps * horizon;
        if lambda <= 0.0 {
            continue;
        }
        let mut rng = substream(spec.seed, sample, purpose::JUMPS, piece);
        let count = Poisson::new(lambda)
            .map_err(|e| NoiseError::Invalid(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..count {
            let time = horizon * rng.random::<f64>();
            let r = spec.measure.radial_quantile(a, b, rng.random::<f64>());
            let mark = if rng.random::<bool>() { r } else { -r };
            let height = rng.random::<f64>();
            real.events.push(JumpEvent { time, mark, height });
        }
    }
    real.events.sort_by(|x, y| x.time.total_cmp(&y.time));
    Ok(real)
}

/// Keep event `(t, x, h)` iff `h <= psi(t, x) / psi_max`.
pub fn thin_to_control(
    base: &JumpRealization,
    psi: &dyn Fn(f64, f64) -> f64,
    psi_max: f64,
) -> Result<JumpRealization, NoiseError> {
    let mut kept = Vec::with_capacity(base.events.len());
    for e in &base.events {
        let v = psi(e.time, e.mark);
        if !(v >= 0.0 && v <= psi_max * (1.0 + 1e-12)) {
            return Err(NoiseError::ControlClass {
                t: e.time,
                x: e.mark,
                value: v,
                psi_max,
            });
        }
        if e.height * psi_max <= v {
            kept.push(*e);
        }
    }
    Ok(JumpRealization {
        events: kept,
        thinned: true,
        psi_max,
        ..base.clone()
    })
}

/// Signed bins and Gauss-Legendre nodes on a truncation set, for compensator and cost
/// integrals. Bin `2r` is the negative half of radial bin `r`, bin `2r + 1` the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkGrid {
    edges: Vec<f64>,
    bin_mass: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    node_bin: Vec<usize>,
    truncation: Truncation,
}

const NODES_PER_BIN: usize = 8;
const FULL_EDGES: [f64; 13] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 40.0];

impl MarkGrid {
    pub fn new(measure: &MarkMeasure, trunc: Truncation) -> Result<Self, NoiseError> {
        let edges: Vec<f64> = match trunc {
            Truncation::Full => {
                if !measure.is_finite() {
                    return Err(NoiseError::InfiniteMass);
                }
                FULL_EDGES.to_vec()
            }
            Truncation::Level(m) => {
                let mut e: Vec<f64> = (1..=m).rev().map(|j| 1.0 / j as f64).collect();
                e.extend((2..=m).map(|j| j as f64));
                if !measure.is_finite() {
                    e.retain(|x| *x <= 1.0);
                }
                if e.len() < 2 {
                    Vec::new()
                } else {
                    e
                }
            }
        };
        let (gx, gw) = gauss_legendre_unit(NODES_PER_BIN);
        let mut bin_mass = Vec::new();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut node_bin = Vec::new();
        for (r, w) in edges.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * measure.radial_mass(a, b);
            bin_mass.extend([half, half]);
            for (sign, bin) in [(-1.0, 2 * r), (1.0, 2 * r + 1)] {
                for (x, wt) in gx.iter().zip(&gw) {
                    let rad = a + (b - a) * x;
                    nodes.push(sign * rad);
                    weights.push(measure.density(rad) * (b - a) * wt);
                    node_bin.push(bin);
                }
            }
        }
        Ok(Self {
            edges,
            bin_mass,
            nodes,
            weights,
            node_bin,
            truncation: trunc,
        })
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn n_bins(&self) -> usize {
        self.bin_mass.len()
    }

    /// Radial bin edges; signed bin `2r` covers `-[e_{r+1}, e_r]`, `2r + 1` covers `[e_r, e_{r+1}]`.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Exact `nu` mass of each signed bin.
    pub fn bin_mass(&self) -> &[f64] {
        &self.bin_mass
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// `nu`-weights of the nodes.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node_bin(&self) -> &[usize] {
        &self.node_bin
    }

    pub fn total_mass(&self) -> f64 {
        self.bin_mass.iter().sum()
    }

    /// Signed bin containing `x`, `None` off the grid's support.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        let r = x.abs();
        if self.edges.len() < 2 || r < self.edges[0] || r > *self.edges.last().unwrap() || x == 0.0 {
            return None;
        }
        let idx = self.edges.partition_point(|e| *e <= r).saturating_sub(1);
        let idx = idx.min(self.edges.len() - 2);
        Some(2 * idx + usize::from(x > 0.0))
    }

    /// `int f(x) nu(dx)` by the node rule.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// Cumulative path at the grid times `k dt` of
/// `sum_{events} I(t, x) - int int I(t, x) c(t, x) nu(dx) dt`, with the compensator
/// integrated by the left-endpoint rule in time and the mark grid in `x`.
pub fn compensated_integral(
    realization: &JumpRealization,
    integrand: &dyn Fn(f64, f64) -> Field,
    compensator: &dyn Fn(f64, f64) -> f64,
    marks: &MarkGrid,
    n_modes: usize,
    n_steps: usize,
    dt: f64,
) -> Vec<Field> {
    let mut path = Vec::with_capacity(n_steps + 1);
    let mut acc = Field::zeros(n_modes);
    path.push(acc.clone());
    for k in 0..n_steps {
        let t = k as f64 * dt;
        for e in realization.step_events(k, dt) {
            acc.axpy(1.0, &integrand(e.time, e.mark));
        }
        for (x, w) in marks.nodes().iter().zip(marks.weights()) {
            let c = compensator(t, *x);
            if c != 0.0 {
                acc.axpy(-dt * w * c, &integrand(t, *x));
            }
        }
        path.push(acc.clone());
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpectralField;

    fn laplace(mass: f64, eps: f64, seed: u64) -> NoiseSpec {
        NoiseSpec::new(2, MarkMeasure::Laplace { mass }, eps, seed).unwrap()
    }

    #[test]
    fn zero_step_gives_zero_increments() {
        let w = wiener_increments(&laplace(1.0, 1.0, 9), 50, 0.0, 0);
        assert!(w.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn increment_moments() {
        let spec = laplace(1.0, 1.0, 1);
        let (n, dt) = (100_000, 0.01);
        let w = wiener_increments(&spec, n, dt, 0);
        for c in 0..2 {
            let xs: Vec<f64> = w.iter().skip(c).step_by(2).copied().collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
            assert!((var / dt - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn zero_mass_gives_empty() {
        let spec = laplace(0.0, 1.0, 1);
        assert!(sample_prm(&spec, Truncation::Full, 1.0, 0, 1.0).unwrap().is_empty());
        let spec = laplace(1.0, 1.0, 1);
        assert!(sample_prm(&spec, Truncation::Level(1), 1.0, 0, 1.0).unwrap().is_empty());
    }

    #[test]
    fn event_count_mean_and_eps_scaling() {
        for (eps, expected) in [(1.0, 2.0), (0.1, 20.0)] {
            let spec = laplace(2.0, eps, 77);
            let n = 10_000;
            let total: usize = (0..n)
                .map(|s| sample_prm(&spec, Truncation::Full, 1.0, s, 1.0).unwrap().len())
                .sum();
            let mean = total as f64 / n as f64;
            assert!((mean - expected).abs() < 3.0 * (expected / n as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn events_sorted_in_window_with_unit_heights() {
        let spec = laplace(5.0, 0.2, 3);
        let r = sample_prm(&spec, Truncation::Level(4), 2.0, 0, 1.0).unwrap();
        assert!(r.events.windows(2).all(|w| w[0].time < w[1].time));
        for e in &r.events {
            assert!((0.0..=2.0).contains(&e.time));
            assert!((0.0..=1.0).contains(&e.height));
            assert!(Truncation::Level(4).contains(e.mark));
        }
    }

    #[test]
    fn nested_levels_share_events() {
        for measure in [MarkMeasure::Laplace { mass: 3.0 }, MarkMeasure::PowerLaw { c: 0.5 }] {
            let spec = NoiseSpec::new(1, measure, 0.5, 21).unwrap();
            for s in 0..20 {
                let small = sample_prm(&spec, Truncation::Level(3), 1.0, s, 1.0).unwrap();
                let large = sample_prm(&spec, Truncation::Level(7), 1.0, s, 1.0).unwrap();
                let restricted: Vec<_> = large
                    .events
                    .iter()
                    .filter(|e| Truncation::Level(3).contains(e.mark))
                    .copied()
                    .collect();
                assert_eq!(small.events, restricted);
            }
        }
    }

    #[test]
    fn full_truncation_of_infinite_measure_is_rejected() {
        let spec = NoiseSpec::new(1, MarkMeasure::PowerLaw { c: 1.0 }, 1.0, 0).unwrap();
        assert_eq!(
            sample_prm(&spec, Truncation::Full, 1.0, 0, 1.0).unwrap_err(),
            NoiseError::InfiniteMass
        );
    }

    #[test]
    fn unit_control_keeps_everything_zero_control_drops_everything() {
        let spec = laplace(4.0, 0.5, 5);
        let base = sample_prm(&spec, Truncation::Full, 1.0, 0, 1.0).unwrap();
        let same = thin_to_control(&base, &|_, _| 1.0, 1.0).unwrap();
        assert_eq!(same.events, base.events);
        let none = thin_to_control(&base, &|_, _| 0.0, 1.0).unwrap();
        assert!(none.is_empty());
        assert!(matches!(
            thin_to_control(&base, &|_, _| 3.0, 2.0),
            Err(NoiseError::ControlClass { .. })
        ));
    }

    #[test]
    fn mark_grid_masses() {
        let measure = MarkMeasure::Laplace { mass: 2.0 };
        let g = MarkGrid::new(&measure, Truncation::Full).unwrap();
        assert!((g.total_mass() - 2.0).abs() < 1e-15 * 2.0 + 2.0 * (-40f64).exp());
        assert!((g.integrate(|_| 1.0) - g.total_mass()).abs() < 1e-12);
        // E|X| under Laplace(1) is 1
        assert!((g.integrate(f64::abs) - 2.0).abs() < 1e-10);
        let p = MarkMeasure::PowerLaw { c: 1.0 };
        let g = MarkGrid::new(&p, Truncation::Level(4)).unwrap();
        assert!((g.total_mass() - 4.0 * (2.0 - 1.0)).abs() < 1e-12);
        assert!((g.integrate(|_| 1.0) - 4.0).abs() < 1e-8);
        assert_eq!(g.bin_of(0.3), Some(1));
        assert_eq!(g.bin_of(-0.9), Some(2 * 2));
        assert_eq!(g.bin_of(0.2), None);
    }

    #[test]
    fn empty_realization_gives_pure_compensator_drift() {
        let measure = MarkMeasure::Laplace { mass: 1.0 };
        let marks = MarkGrid::new(&measure, Truncation::Level(3)).unwrap();
        let real = JumpRealization::empty(1.0, Truncation::Level(3));
        let integrand = |_: f64, x: f64| SpectralField::new(vec![x.abs(), 0.0]).unwrap();
        let path = compensated_integral(&real, &integrand, &|_, _| 1.0, &marks, 2, 10, 0.1);
        let expected = -marks.integrate(f64::abs);
        assert!((path[10].coeffs()[0] - expected).abs() < 1e-12);
        let zero = compensated_integral(&real, &|_, _| Field::zeros(2), &|_, _| 1.0, &marks, 2, 10, 0.1);
        assert!(zero.iter().all(|f| f.is_zero()));
    }

    #[test]
    fn reproducible_realizations() {
        let spec = laplace(3.0, 0.3, 123);
        let a = sample_prm(&spec, Truncation::Level(5), 1.0, 4, 2.0).unwrap();
        let b = sample_prm(&spec, Truncation::Level(5), 1.0, 4, 2.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(wiener_increments(&spec, 10, 0.1, 4), wiener_increments(&spec, 10, 0.1, 4));
        assert_ne!(wiener_increments(&spec, 10, 0.1, 4), wiener_increments(&spec, 10, 0.1, 5));
    }
}
