//! Galerkin solver for a stochastic heat equation with memory, Lévy noise and
//! small-noise large deviation tools.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod ldp;
pub mod memory;
pub mod noise;
pub mod scalar;
pub mod solver;
pub mod spectral;

pub use scalar::Real;

pub type Field = spectral::SpectralField<f64>;
pub type Grid = spectral::SpatialGrid<f64>;
pub type Basis = spectral::SineBasis<f64>;
pub type Kernel = memory::MemoryKernel<f64>;
pub type History = memory::HistoryBuffer<f64>;
