//! Stochastic Galerkin solver for the Black-Scholes equation with a random
//! volatility expanded in orthonormal polynomials, plus a bi-fidelity
//! reconstruction layer for fast repeated solves.

pub mod bifidelity;
pub mod error;
pub mod fdsolver;
pub mod io;
pub mod multiindex;
pub mod orthopoly;
pub mod scalar;
pub mod sgsystem;
pub mod volfit;

pub use error::{Error, Result};
pub use fdsolver::{solve, stability_bound, GridSpec, MomentSurfaces, SolutionField, SolveOptions};
pub use multiindex::{build_index_set, IndexSet, MultiIndex};
pub use orthopoly::{galerkin_tensor, DistributionFamily, GalerkinTensor, PolynomialBasis, QuadratureRule};
pub use scalar::Real;
pub use sgsystem::{assemble_coupling, build_problem, check_parabolic, CouplingMatrix, OptionKind, OptionSpec, TransformedProblem};
pub use volfit::{bs_closed_form, fit_constrained_mle, implied_vol, FitMode, FitResult, VolatilityModel};

/// Day count used to turn maturities in days into years.
pub const TRADING_DAYS_PER_YEAR: f64 = 251.0;

pub type GalerkinTensorF64 = GalerkinTensor<f64>;
pub type GalerkinTensorF32 = GalerkinTensor<f32>;
pub type VolatilityModelF64 = VolatilityModel<f64>;
