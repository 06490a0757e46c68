//! Memory kernel `gamma` on `(-inf, 0]`, its partial masses `delta_t`, the window length
//! `T0` at which `delta` reaches 1/2, and the history convolution
//! `int_{-inf}^0 gamma(r) Laplacian u(t + r) dr`.
//!
//! Kernels are parametrized by the lag `s = -r >= 0`, so `gamma(-s)` is what gets tabulated.

use crate::scalar::Real;
use crate::spectral::SpectralField;
use thiserror::Error;

/// Tail mass below which a tabulated kernel is truncated.
pub const TAIL_TOL: f64 = 1e-10;

/// `delta` level defining the Picard window length.
pub const WINDOW_DELTA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("history does not cover ({from}, {to}]")]
    Coverage { from: f64, to: f64 },
    #[error("time {0} is not on the history grid")]
    OffGrid(f64),
    #[error("history fields must share {expected} modes, got {got}")]
    ModeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelForm<T> {
    /// `gamma(r) = a exp(eta r)` for `r <= 0`.
    Exponential { a: T, eta: T },
    /// Piecewise-linear in the lag, zero outside the table. Lags strictly increasing.
    Tabulated { lags: Vec<T>, values: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryKernel<T> {
    form: KernelForm<T>,
}

impl<T: Real> MemoryKernel<T> {
    pub fn exponential(a: T, eta: T) -> Result<Self, MemoryError> {
        if !(a >= T::zero()) || !a.is_finite() {
            return Err(MemoryError::InvalidKernel(format!("amplitude must be >= 0, got {a}")));
        }
        if !(eta > T::zero()) || !eta.is_finite() {
            return Err(MemoryError::InvalidKernel(format!("rate must be > 0, got {eta}")));
        }
        Ok(Self {
            form: KernelForm::Exponential { a, eta },
        })
    }

    pub fn zero() -> Self {
        Self {
            form: KernelForm::Exponential {
                a: T::zero(),
                eta: T::one(),
            },
        }
    }

    /// From `(r, gamma(r))` samples with `r <= 0`, in any order.
    pub fn tabulated(points: &[(T, T)]) -> Result<Self, MemoryError> {
        if points.len() < 2 {
            return Err(MemoryError::InvalidKernel(
                "tabulated kernel needs at least two points".into(),
            ));
        }
        let mut pts: Vec<(T, T)> = points.iter().map(|&(r, g)| (-r, g)).collect();
        for &(s, g) in &pts {
            if !(s >= T::zero()) || !s.is_finite() {
                return Err(MemoryError::InvalidKernel(format!(
                    "kernel support must lie in r <= 0, got r = {}",
                    -s
                )));
            }
            if !(g >= T::zero()) || !g.is_finite() {
                return Err(MemoryError::InvalidKernel(format!(
                    "kernel values must be finite and >= 0, got {g}"
                )));
            }
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite lags"));
        if pts.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(MemoryError::InvalidKernel("duplicate grid point".into()));
        }
        let (mut lags, mut values): (Vec<T>, Vec<T>) = pts.into_iter().unzip();

        // drop the far tail once the mass beyond a node is below TAIL_TOL
        let tol = T::lit(TAIL_TOL);
        let mut tail = T::zero();
        let mut keep = lags.len();
        for i in (1..lags.len()).rev() {
            tail += T::lit(0.5) * (values[i] + values[i - 1]) * (lags[i] - lags[i - 1]);
            if tail < tol {
                keep = i;
            } else {
                break;
            }
        }
        if keep < lags.len() {
            lags.truncate(keep + 1);
            values.truncate(keep + 1);
            *values.last_mut().expect("nonempty") = T::zero();
        }
        Ok(Self {
            form: KernelForm::Tabulated { lags, values },
        })
    }

    pub fn form(&self) -> &KernelForm<T> {
        &self.form
    }

    pub fn is_zero(&self) -> bool {
        match &self.form {
            KernelForm::Exponential { a, .. } => *a == T::zero(),
            KernelForm::Tabulated { values, .. } => values.iter().all(|v| *v == T::zero()),
        }
    }

    /// `gamma(-s)`.
    pub fn at_lag(&self, s: T) -> T {
        match &self.form {
            KernelForm::Exponential { a, eta } => {
                if s < T::zero() {
                    T::zero()
                } else {
                    *a * (-*eta * s).exp()
                }
            }
            KernelForm::Tabulated { lags, values } => {
                let n = lags.len();
                if s < lags[0] || s > lags[n - 1] {
                    return T::zero();
                }
                let i = lags.partition_point(|l| *l <= s).min(n - 1).max(1);
                let (s0, s1) = (lags[i - 1], lags[i]);
                let th = (s - s0) / (s1 - s0);
                values[i - 1] + th * (values[i] - values[i - 1])
            }
        }
    }

    /// `delta_t = int_{-t}^0 |gamma(r)| dr`.
    pub fn delta(&self, t: T) -> Result<T, MemoryError> {
        if !(t >= T::zero()) {
            return Err(MemoryError::NegativeTime(t.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(self.delta_unchecked(t))
    }

    fn delta_unchecked(&self, t: T) -> T {
        match &self.form {
            KernelForm::Exponential { a, eta } => {
                if t.is_infinite() {
                    *a / *eta
                } else {
                    // (a / eta) (1 - e^{-eta t}) without cancellation for small eta t
                    -(*a / *eta) * (-*eta * t).exp_m1()
                }
            }
            KernelForm::Tabulated { lags, values } => {
                let mut acc = T::zero();
                for i in 1..lags.len() {
                    let (s0, s1) = (lags[i - 1], lags[i]);
                    if t <= s0 {
                        break;
                    }
                    let hi = if t < s1 { t } else { s1 };
                    let g_hi = self.at_lag(hi);
                    acc += T::lit(0.5) * (values[i - 1] + g_hi) * (hi - s0);
                }
                acc
            }
        }
    }

    /// `||gamma||_{L^1}`
    pub fn total_mass(&self) -> T {
        self.delta_unchecked(T::infinity())
    }

    /// Smallest `t` with `delta_t = 1/2`, by bisection to 1e-12; infinity if the level is
    /// never attained at a finite time.
    pub fn horizon(&self) -> T {
        let level = T::lit(WINDOW_DELTA);
        let attained = match &self.form {
            KernelForm::Exponential { .. } => self.total_mass() > level,
            KernelForm::Tabulated { .. } => self.total_mass() >= level,
        };
        if !attained {
            return T::infinity();
        }
        let mut hi = match &self.form {
            KernelForm::Tabulated { lags, .. } => *lags.last().expect("nonempty"),
            KernelForm::Exponential { .. } => {
                let mut hi = T::one();
                while self.delta_unchecked(hi) < level {
                    hi = hi + hi;
                }
                hi
            }
        };
        let mut lo = T::zero();
        let tol = T::lit(1e-12);
        while hi - lo > tol {
            let mid = T::lit(0.5) * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.delta_unchecked(mid) < level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        T::lit(0.5) * (lo + hi)
    }

    /// `int_t^inf gamma(-s) rho(t - s) ds` for the prescribed past.
    fn past_contribution(&self, past: &PastHistory<T>, t: T) -> Option<SpectralField<T>> {
        match past {
            PastHistory::Zero => None,
            PastHistory::Constant(c) => {
                let w = self.total_mass() - self.delta_unchecked(t);
                Some(c.scaled(w))
            }
            PastHistory::ExpDecay { field, rate } => {
                let w = match &self.form {
                    KernelForm::Exponential { a, eta } => *a * (-*eta * t).exp() / (*eta + *rate),
                    KernelForm::Tabulated { lags, .. } => {
                        // rho(t - s) = field * exp(rate (t - s)); Gauss-Legendre per table segment
                        let (xs, ws) = crate::spectral::gauss_legendre_unit(8);
                        let mut acc = T::zero();
                        for i in 1..lags.len() {
                            let s0 = if lags[i - 1] > t { lags[i - 1] } else { t };
                            let s1 = lags[i];
                            if s1 <= s0 {
                                continue;
                            }
                            let h = s1 - s0;
                            for (x, wq) in xs.iter().zip(&ws) {
                                let s = s0 + h * T::lit(*x);
                                acc += T::lit(*wq) * h * self.at_lag(s) * (*rate * (t - s)).exp();
                            }
                        }
                        acc
                    }
                };
                Some(field.scaled(w))
            }
        }
    }
}

/// The prescribed past `rho(s)`, `s <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum PastHistory<T> {
    Zero,
    Constant(SpectralField<T>),
    /// `rho(s) = field * exp(rate * s)`, `rate >= 0`.
    ExpDecay { field: SpectralField<T>, rate: T },
}

/// Computed states on the uniform grid `0, dt, 2 dt, ...` plus the prescribed past.
#[derive(Debug, Clone)]
pub struct HistoryBuffer<T> {
    dt: T,
    past: PastHistory<T>,
    states: Vec<SpectralField<T>>,
}

impl<T: Real> HistoryBuffer<T> {
    pub fn new(dt: T, past: PastHistory<T>) -> Self {
        assert!(dt > T::zero(), "history step must be positive");
        Self {
            dt,
            past,
            states: Vec::new(),
        }
    }

    pub fn from_states(
        dt: T,
        past: PastHistory<T>,
        states: Vec<SpectralField<T>>,
    ) -> Result<Self, MemoryError> {
        let mut h = Self::new(dt, past);
        for s in states {
            h.push(s)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, state: SpectralField<T>) -> Result<(), MemoryError> {
        let expected = self
            .states
            .first()
            .map(|s| s.n_modes())
            .or(match &self.past {
                PastHistory::Zero => None,
                PastHistory::Constant(f) | PastHistory::ExpDecay { field: f, .. } => {
                    Some(f.n_modes())
                }
            });
        if let Some(expected) = expected {
            if state.n_modes() != expected {
                return Err(MemoryError::ModeMismatch {
                    expected,
                    got: state.n_modes(),
                });
            }
        }
        self.states.push(state);
        Ok(())
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn past(&self) -> &PastHistory<T> {
        &self.past
    }

    pub fn states(&self) -> &[SpectralField<T>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last_time(&self) -> Option<T> {
        (!self.states.is_empty()).then(|| T::from_usize_lossy(self.states.len() - 1) * self.dt)
    }

    fn grid_index(&self, t: T) -> Result<usize, MemoryError> {
        let as_f64 = |x: T| x.to_f64().unwrap_or(f64::NAN);
        if !(t >= T::zero()) {
            return Err(MemoryError::NegativeTime(as_f64(t)));
        }
        let n = (t / self.dt).round();
        let tol = T::lit(1e-9) * (T::one() + n);
        if ((t / self.dt) - n).abs() > tol {
            return Err(MemoryError::OffGrid(as_f64(t)));
        }
        let n = n.to_usize().ok_or(MemoryError::OffGrid(as_f64(t)))?;
        if n >= self.states.len() {
            let from = match self.last_time() {
                Some(l) => as_f64(l),
                None => f64::NEG_INFINITY,
            };
            return Err(MemoryError::Coverage {
                from,
                to: as_f64(t),
            });
        }
        Ok(n)
    }
}

/// Precomputed trapezoid lag weights for one kernel and one step size.
#[derive(Debug, Clone)]
pub struct Convolver<T> {
    kernel: MemoryKernel<T>,
    dt: T,
    /// `gamma(-j dt)` for j = 0..len
    samples: Vec<T>,
}

impl<T: Real> Convolver<T> {
    pub fn new(kernel: MemoryKernel<T>, dt: T, max_steps: usize) -> Self {
        let samples = (0..=max_steps)
            .map(|j| kernel.at_lag(T::from_usize_lossy(j) * dt))
            .collect();
        Self {
            kernel,
            dt,
            samples,
        }
    }

    pub fn kernel(&self) -> &MemoryKernel<T> {
        &self.kernel
    }

    fn sample(&self, j: usize) -> T {
        match self.samples.get(j) {
            Some(v) => *v,
            None => self.kernel.at_lag(T::from_usize_lossy(j) * self.dt),
        }
    }

    /// `int_{-inf}^0 gamma(r) u(t_n + r) dr` (before the Laplacian), where `states[j]`
    /// is the state at `j dt` and `n < states.len()`.
    pub fn convolve(&self, states: &[SpectralField<T>], past: &PastHistory<T>, n: usize) -> SpectralField<T> {
        let n_modes = states[n].n_modes();
        let mut acc = SpectralField::zeros(n_modes);
        if self.kernel.is_zero() {
            return acc;
        }
        let t = T::from_usize_lossy(n) * self.dt;
        if n > 0 {
            let half = T::lit(0.5) * self.dt;
            for j in 0..=n {
                let g = self.sample(j);
                if g == T::zero() {
                    continue;
                }
                let w = if j == 0 || j == n { half } else { self.dt };
                acc.axpy(w * g, &states[n - j]);
            }
        }
        if let Some(p) = self.kernel.past_contribution(past, t) {
            acc.axpy(T::one(), &p);
        }
        acc
    }

    /// `sum_k -(k pi)^2 [int gamma(r) a_k(t_n + r) dr] phi_k`
    pub fn memory_term(&self, states: &[SpectralField<T>], past: &PastHistory<T>, n: usize) -> SpectralField<T> {
        self.convolve(states, past, n).laplacian()
    }
}

/// The memory drift at time `t` (on the history grid).
pub fn memory_term<T: Real>(
    kernel: &MemoryKernel<T>,
    history: &HistoryBuffer<T>,
    t: T,
) -> Result<SpectralField<T>, MemoryError> {
    let n = history.grid_index(t)?;
    let conv = Convolver::new(kernel.clone(), history.dt, n);
    Ok(conv.memory_term(&history.states, &history.past, n))
}
