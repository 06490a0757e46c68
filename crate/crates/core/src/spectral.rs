//! Fields on `(0, 1)` with homogeneous Dirichlet boundary, stored as coefficients in the
//! orthonormal sine eigenbasis `phi_k(x) = sqrt(2) sin(k pi x)` of the Laplacian.
//!
//! Pointwise work (nonlinear drifts, `L^q` norms) goes through a Gauss-Legendre grid:
//! [`SpatialGrid`] for one-off synthesis/analysis and [`SineBasis`] when the same mode
//! count is evaluated repeatedly.

use crate::scalar::Real;
use thiserror::Error;

/// Spatial dimension of the domain. Enters the weight of the negative Sobolev norm.
pub const DIM: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("mode index must be >= 1, got {0}")]
    ModeIndex(usize),
    #[error("coefficient {index} is not finite")]
    NonFinite { index: usize },
    #[error("field needs at least one mode")]
    Empty,
    #[error("L^q norm requested without a quadrature grid")]
    MissingGrid,
    #[error("L^q norm needs q >= 2, got {0}")]
    Exponent(f64),
    #[error("cannot resolve {n_modes} modes from {n_quad} quadrature points")]
    IllPosed { n_quad: usize, n_modes: usize },
    #[error("expected {expected} point values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("quadrature grid needs at least one point")]
    EmptyGrid,
}

/// `(k pi)^2`, the k-th eigenvalue of `-Laplacian` with Dirichlet boundary on `(0, 1)`.
pub fn eigenvalue<T: Real>(k: usize) -> Result<T, SpectralError> {
    if k == 0 {
        return Err(SpectralError::ModeIndex(k));
    }
    Ok(eigenvalue_unchecked(k))
}

#[inline]
pub(crate) fn eigenvalue_unchecked<T: Real>(k: usize) -> T {
    let kp = T::from_usize_lossy(k) * T::PI();
    kp * kp
}

/// Coefficients `a_k` of `u = sum_k a_k phi_k`, k = 1..=n_modes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField<T> {
    coeffs: Vec<T>,
}

impl<T: Real> SpectralField<T> {
    pub fn new(coeffs: Vec<T>) -> Result<Self, SpectralError> {
        if coeffs.is_empty() {
            return Err(SpectralError::Empty);
        }
        if let Some(index) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(SpectralError::NonFinite { index });
        }
        Ok(Self { coeffs })
    }

    /// Skips the finiteness scan. Callers that can produce non-finite values must check
    /// [`SpectralField::is_finite`] themselves.
    pub(crate) fn from_raw(coeffs: Vec<T>) -> Self {
        debug_assert!(!coeffs.is_empty());
        Self { coeffs }
    }

    pub fn zeros(n_modes: usize) -> Self {
        assert!(n_modes > 0, "field needs at least one mode");
        Self {
            coeffs: vec![T::zero(); n_modes],
        }
    }

    /// `scale * phi_k` (k is 1-based).
    pub fn mode(n_modes: usize, k: usize, scale: T) -> Result<Self, SpectralError> {
        if k == 0 || k > n_modes {
            return Err(SpectralError::ModeIndex(k));
        }
        let mut f = Self::zeros(n_modes);
        f.coeffs[k - 1] = scale;
        Ok(f)
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [T] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<T> {
        self.coeffs
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == T::zero())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.n_modes(), other.n_modes(), "mode count mismatch");
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += alpha * *b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in &mut self.coeffs {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(T::one(), other);
        out
    }

    /// L2 inner product (the basis is orthonormal).
    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.n_modes(), other.n_modes(), "mode count mismatch");
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| *a * *b)
            .sum()
    }

    /// Keep the first `n` modes (zero-padding if `n` exceeds the current count).
    pub fn truncated(&self, n: usize) -> Self {
        assert!(n > 0, "field needs at least one mode");
        let mut coeffs = vec![T::zero(); n];
        for (dst, src) in coeffs.iter_mut().zip(&self.coeffs) {
            *dst = *src;
        }
        Self { coeffs }
    }

    pub fn l2_norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn l2_norm_sq(&self) -> T {
        self.dot(self)
    }

    /// `||(-Laplacian)^{1/2} u||_2`, the H^1_0 norm.
    pub fn h1_norm(&self) -> T {
        self.h1_norm_sq().sqrt()
    }

    pub fn h1_norm_sq(&self) -> T {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| eigenvalue_unchecked::<T>(i + 1) * *a * *a)
            .sum()
    }

    /// Spectral dual-scale norm `sqrt(sum (k pi)^{-2 DIM} a_k^2)`.
    pub fn h_neg_norm(&self) -> T {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let lam: T = eigenvalue_unchecked(i + 1);
                *a * *a / lam.powi(DIM as i32)
            })
            .sum::<T>()
            .sqrt()
    }

    /// Apply the Dirichlet Laplacian mode-wise.
    pub fn laplacian(&self) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| -eigenvalue_unchecked::<T>(i + 1) * *a)
            .collect();
        Self { coeffs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind<T> {
    L2,
    H10,
    HNeg,
    Lq(T),
}

pub fn norm<T: Real>(
    field: &SpectralField<T>,
    kind: NormKind<T>,
    grid: Option<&SpatialGrid<T>>,
) -> Result<T, SpectralError> {
    match kind {
        NormKind::L2 => Ok(field.l2_norm()),
        NormKind::H10 => Ok(field.h1_norm()),
        NormKind::HNeg => Ok(field.h_neg_norm()),
        NormKind::Lq(q) => {
            if !(q >= T::lit(2.0)) {
                return Err(SpectralError::Exponent(q.to_f64().unwrap_or(f64::NAN)));
            }
            let grid = grid.ok_or(SpectralError::MissingGrid)?;
            let values = grid.synthesize(field);
            Ok(grid.lq_norm(&values, q))
        }
    }
}

/// Gauss-Legendre nodes and weights mapped to `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> SpatialGrid<T> {
    pub fn gauss_legendre(n_quad: usize) -> Result<Self, SpectralError> {
        if n_quad == 0 {
            return Err(SpectralError::EmptyGrid);
        }
        let (xs, ws) = gauss_legendre_unit(n_quad);
        Ok(Self {
            nodes: xs.into_iter().map(T::lit).collect(),
            weights: ws.into_iter().map(T::lit).collect(),
        })
    }

    /// Default resolution for `n_modes`: `max(4 n_modes, 256)` points.
    pub fn for_modes(n_modes: usize) -> Self {
        Self::gauss_legendre(default_quad_points(n_modes)).expect("nonzero point count")
    }

    pub fn n_quad(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn integrate(&self, values: &[T]) -> T {
        assert_eq!(values.len(), self.n_quad());
        self.weights.iter().zip(values).map(|(w, v)| *w * *v).sum()
    }

    pub fn lq_norm(&self, values: &[T], q: T) -> T {
        assert_eq!(values.len(), self.n_quad());
        let s: T = self
            .weights
            .iter()
            .zip(values)
            .map(|(w, v)| *w * abs_pow(*v, q))
            .sum();
        if q == T::lit(2.0) {
            s.sqrt()
        } else {
            s.powf(q.recip())
        }
    }

    /// `u(x_j) = sum_k a_k sqrt(2) sin(k pi x_j)`
    pub fn synthesize(&self, field: &SpectralField<T>) -> Vec<T> {
        let n = field.n_modes();
        let root2 = T::SQRT_2();
        self.nodes
            .iter()
            .map(|&x| {
                let mut acc = T::zero();
                for_each_sine(x, n, |k, s| acc += field.coeffs[k] * s);
                root2 * acc
            })
            .collect()
    }

    /// Weighted least-squares projection onto the first `n_modes` sines.
    pub fn analyze(&self, values: &[T], n_modes: usize) -> Result<SpectralField<T>, SpectralError> {
        SineBasis::new(self.clone(), n_modes)?.analyze(values)
    }
}

/// `|v|^q`, exact for small integer exponents.
#[inline]
fn abs_pow<T: Real>(v: T, q: T) -> T {
    let a = v.abs();
    if q == T::lit(2.0) {
        a * a
    } else if q == T::lit(4.0) {
        let a2 = a * a;
        a2 * a2
    } else if q == T::one() {
        a
    } else {
        a.powf(q)
    }
}

pub fn default_quad_points(n_modes: usize) -> usize {
    (4 * n_modes).max(256)
}

/// Calls `f(k, sin((k+1) pi x))` for k in 0..n using the Chebyshev recurrence.
#[inline]
fn for_each_sine<T: Real>(x: T, n: usize, mut f: impl FnMut(usize, T)) {
    let theta = T::PI() * x;
    let (s1, c1) = theta.sin_cos();
    let two_c = c1 + c1;
    let mut prev = T::zero();
    let mut cur = s1;
    for k in 0..n {
        f(k, cur);
        let next = two_c * cur - prev;
        prev = cur;
        cur = next;
    }
}

#[inline]
fn for_each_cosine<T: Real>(x: T, n: usize, mut f: impl FnMut(usize, T)) {
    let theta = T::PI() * x;
    let c1 = theta.cos();
    let two_c = c1 + c1;
    let mut prev = T::one();
    let mut cur = c1;
    for k in 0..n {
        f(k, cur);
        let next = two_c * cur - prev;
        prev = cur;
        cur = next;
    }
}

/// Nodes/weights of the n-point Gauss-Legendre rule on (0, 1), computed in f64.
pub(crate) fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * z * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { z } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
            z = 0.0;
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        xs[i] = 0.5 * (1.0 - z);
        xs[n - 1 - i] = 0.5 * (1.0 + z);
        ws[i] = 0.5 * w;
        ws[n - 1 - i] = 0.5 * w;
    }
    (xs, ws)
}

/// A quadrature grid with the sine table for a fixed mode count precomputed.
#[derive(Debug, Clone)]
pub struct SineBasis<T> {
    grid: SpatialGrid<T>,
    n_modes: usize,
    /// row-major, n_quad x n_modes: phi_k(x_j)
    table: Vec<T>,
    /// row-major, n_quad x n_modes: phi_k'(x_j)
    dtable: Vec<T>,
    /// Cholesky factor of the discrete Gram matrix, lower triangular, row-major.
    chol: Vec<T>,
}

impl<T: Real> SineBasis<T> {
    pub fn new(grid: SpatialGrid<T>, n_modes: usize) -> Result<Self, SpectralError> {
        if n_modes == 0 {
            return Err(SpectralError::Empty);
        }
        if grid.n_quad() < n_modes {
            return Err(SpectralError::IllPosed {
                n_quad: grid.n_quad(),
                n_modes,
            });
        }
        let nq = grid.n_quad();
        let root2 = T::SQRT_2();
        let mut table = vec![T::zero(); nq * n_modes];
        let mut dtable = vec![T::zero(); nq * n_modes];
        for (j, &x) in grid.nodes.iter().enumerate() {
            let row = &mut table[j * n_modes..(j + 1) * n_modes];
            for_each_sine(x, n_modes, |k, s| row[k] = root2 * s);
            let drow = &mut dtable[j * n_modes..(j + 1) * n_modes];
            for_each_cosine(x, n_modes, |k, c| {
                drow[k] = root2 * T::from_usize_lossy(k + 1) * T::PI() * c
            });
        }
        let mut gram = vec![T::zero(); n_modes * n_modes];
        for j in 0..nq {
            let w = grid.weights[j];
            let row = &table[j * n_modes..(j + 1) * n_modes];
            for a in 0..n_modes {
                for b in 0..=a {
                    gram[a * n_modes + b] += w * row[a] * row[b];
                }
            }
        }
        let chol = cholesky(&gram, n_modes).ok_or(SpectralError::IllPosed {
            n_quad: nq,
            n_modes,
        })?;
        Ok(Self {
            grid,
            n_modes,
            table,
            dtable,
            chol,
        })
    }

    pub fn for_modes(n_modes: usize) -> Self {
        Self::new(SpatialGrid::for_modes(n_modes), n_modes).expect("default grid resolves modes")
    }

    pub fn grid(&self) -> &SpatialGrid<T> {
        &self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn synthesize(&self, field: &SpectralField<T>) -> Vec<T> {
        assert_eq!(field.n_modes(), self.n_modes, "mode count mismatch");
        self.table
            .chunks_exact(self.n_modes)
            .map(|row| row.iter().zip(&field.coeffs).map(|(p, a)| *p * *a).sum())
            .collect()
    }

    /// Quadrature inner products `<phi_k, v>` without the Gram correction.
    fn moments(&self, values: &[T], table: &[T]) -> Vec<T> {
        let mut b = vec![T::zero(); self.n_modes];
        for ((row, w), v) in table
            .chunks_exact(self.n_modes)
            .zip(&self.grid.weights)
            .zip(values)
        {
            let wv = *w * *v;
            for (bk, p) in b.iter_mut().zip(row) {
                *bk += wv * *p;
            }
        }
        b
    }

    pub fn analyze(&self, values: &[T]) -> Result<SpectralField<T>, SpectralError> {
        if values.len() != self.grid.n_quad() {
            return Err(SpectralError::Length {
                expected: self.grid.n_quad(),
                got: values.len(),
            });
        }
        let b = self.moments(values, &self.table);
        Ok(SpectralField::from_raw(cholesky_solve(
            &self.chol,
            self.n_modes,
            b,
        )))
    }

    /// Galerkin coefficients of `d/dx b` for a pointwise flux `b`, via integration by parts:
    /// `<phi_k, b'> = -<phi_k', b>` (the boundary term vanishes since `phi_k(0) = phi_k(1) = 0`).
    pub fn weak_derivative(&self, flux: &[T]) -> SpectralField<T> {
        assert_eq!(flux.len(), self.grid.n_quad());
        let b = self.moments(flux, &self.dtable);
        let b: Vec<T> = b.into_iter().map(|x| -x).collect();
        SpectralField::from_raw(cholesky_solve(&self.chol, self.n_modes, b))
    }

    pub fn lq_norm(&self, field: &SpectralField<T>, q: T) -> T {
        self.grid.lq_norm(&self.synthesize(field), q)
    }
}

fn cholesky<T: Real>(a: &[T], n: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > T::zero()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve<T: Real>(l: &[T], n: usize, mut b: Vec<T>) -> Vec<T> {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    b
}
