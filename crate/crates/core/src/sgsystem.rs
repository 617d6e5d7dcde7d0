//! Assembly of the coupled deterministic system for the chaos coefficients
//! of the option value, after the change of variables `zeta = S / (S + K)`,
//! `v = V / (S + K)`, `tau = T - t`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiindex::IndexSet;
use crate::orthopoly::GalerkinTensor;
use crate::scalar::Real;
use crate::volfit::VolatilityModel;
use crate::TRADING_DAYS_PER_YEAR;

/// Smallest eigenvalue of the coupling matrix for the system to count as
/// parabolic.
pub const PARABOLIC_EPS: f64 = 1e-12;

/// `A[n][l] = sum_{a,b} s_a s_b M[a][b][l][n]`, i.e. `E[Sigma^2 p_l p_n]`.
#[derive(Clone, Debug)]
pub struct CouplingMatrix<T: Real> {
    sol_set: IndexSet,
    matrix: DMatrix<T>,
    symmetric: bool,
}

impl<T: Real> CouplingMatrix<T> {
    pub fn from_matrix(sol_set: IndexSet, matrix: DMatrix<T>) -> Result<Self> {
        if matrix.nrows() != sol_set.len() || matrix.ncols() != sol_set.len() {
            return Err(Error::config(format!(
                "coupling matrix is {}x{}, index set has {} entries",
                matrix.nrows(),
                matrix.ncols(),
                sol_set.len()
            )));
        }
        let symmetric = is_symmetric(&matrix);
        Ok(CouplingMatrix {
            sol_set,
            matrix,
            symmetric,
        })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn sol_set(&self) -> &IndexSet {
        &self.sol_set
    }

    pub fn len(&self) -> usize {
        self.sol_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sol_set.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

fn is_symmetric<T: Real>(m: &DMatrix<T>) -> bool {
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let tol = T::lit(1e-12) * scale.max(T::one());
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

pub fn assemble_coupling<T: Real>(
    tensor: &GalerkinTensor<T>,
    model: &VolatilityModel<T>,
) -> Result<CouplingMatrix<T>> {
    if tensor.families() != model.families() {
        return Err(Error::config(format!(
            "volatility model families {:?} differ from the tensor families {:?}",
            model.families(),
            tensor.families()
        )));
    }
    if model.degree() > tensor.vol_degree() {
        return Err(Error::config(format!(
            "volatility model degree {} exceeds the tensor degree K = {}",
            model.degree(),
            tensor.vol_degree()
        )));
    }
    // Model coefficients placed at their positions in the tensor's K-set.
    let nk = tensor.vol_set().len();
    let mut sigma = vec![T::zero(); nk];
    for (alpha, &c) in model.index_set().iter().zip(model.coefficients()) {
        sigma[tensor.vol_set().position_of(alpha)?] = c;
    }
    let nn = tensor.sol_set().len();
    let mut a = DMatrix::<T>::zeros(nn, nn);
    for ia in 0..nk {
        for ib in 0..nk {
            let w = sigma[ia] * sigma[ib];
            if w == T::zero() {
                continue;
            }
            for n in 0..nn {
                for l in 0..nn {
                    a[(n, l)] += w * tensor.at(ia, ib, l, n);
                }
            }
        }
    }
    CouplingMatrix::from_matrix(tensor.sol_set().clone(), a)
}

/// Spectrum summary of the coupling matrix.
#[derive(Clone, Debug, Serialize)]
pub struct ParabolicityReport {
    /// Smallest eigenvalue (smallest real part if the matrix is not
    /// symmetric).
    pub min_eig: f64,
    /// Largest eigenvalue (largest modulus if not symmetric).
    pub max_eig: f64,
    pub parabolic: bool,
    pub symmetric: bool,
}

/// Eigen-decomposition of a symmetric coupling matrix, ascending.
#[derive(Clone, Debug)]
pub struct Spectrum<T: Real> {
    pub eigenvalues: Vec<T>,
    /// Columns are the eigenvectors.
    pub eigenvectors: DMatrix<T>,
}

pub fn symmetric_spectrum<T: Real>(a: &CouplingMatrix<T>) -> Result<Spectrum<T>> {
    if !a.is_symmetric() {
        return Err(Error::Numerical("coupling matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::try_new(a.matrix().clone(), T::default_epsilon(), 0)
        .ok_or_else(|| Error::Numerical("eigen-decomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let n = order.len();
    let mut vecs = DMatrix::<T>::zeros(n, n);
    for (c, &j) in order.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(j));
    }
    Ok(Spectrum {
        eigenvalues: order.iter().map(|&j| eig.eigenvalues[j]).collect(),
        eigenvectors: vecs,
    })
}

pub fn check_parabolic<T: Real>(a: &CouplingMatrix<T>) -> Result<ParabolicityReport> {
    let (min_eig, max_eig) = if a.is_symmetric() {
        let s = symmetric_spectrum(a)?;
        (
            s.eigenvalues[0].as_f64(),
            s.eigenvalues[s.eigenvalues.len() - 1].as_f64(),
        )
    } else {
        let m = a.matrix().map(|v| v.as_f64());
        let ev = m
            .complex_eigenvalues();
        let min = ev.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let max = ev.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if !min.is_finite() {
            return Err(Error::Numerical("eigenvalues of the coupling matrix are not finite".into()));
        }
        (min, max)
    };
    Ok(ParabolicityReport {
        min_eig,
        max_eig,
        parabolic: min_eig > PARABOLIC_EPS,
        symmetric: a.is_symmetric(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    #[default]
    EuropeanCall,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    #[serde(default)]
    pub kind: OptionKind,
    pub strike: f64,
    pub maturity_days: f64,
    #[serde(default)]
    pub rate: f64,
}

impl OptionSpec {
    pub fn call(strike: f64, maturity_days: f64, rate: f64) -> Self {
        OptionSpec {
            kind: OptionKind::EuropeanCall,
            strike,
            maturity_days,
            rate,
        }
    }

    /// Maturity in years.
    pub fn maturity(&self) -> f64 {
        self.maturity_days / TRADING_DAYS_PER_YEAR
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return Err(Error::config(format!("strike must be positive, got {}", self.strike)));
        }
        if !(self.maturity_days > 0.0 && self.maturity_days.is_finite()) {
            return Err(Error::config(format!(
                "maturity must be positive, got {} days",
                self.maturity_days
            )));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::config(format!("rate must be nonnegative, got {}", self.rate)));
        }
        Ok(())
    }
}

/// The coupled system on `zeta in [0, 1]`, `tau in [0, T]`:
///
/// `v_tau = 1/2 zeta^2 (1-zeta)^2 A v_zz + r zeta (1-zeta) v_z - r (1-zeta) v`
///
/// with `v(zeta, 0) = ((2 zeta - 1)^+, 0, ..)`, `v(0, tau) = 0` and
/// `v(1, tau) = e_0`.
#[derive(Clone, Debug)]
pub struct TransformedProblem<T: Real> {
    pub coupling: CouplingMatrix<T>,
    pub option: OptionSpec,
    pub report: ParabolicityReport,
}

impl<T: Real> TransformedProblem<T> {
    pub fn len(&self) -> usize {
        self.coupling.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coupling.is_empty()
    }

    pub fn maturity(&self) -> f64 {
        self.option.maturity()
    }

    /// Transformed payoff `(2 zeta - 1)^+` in the mean coefficient.
    pub fn initial(&self, zeta: T) -> Vec<T> {
        let mut v = vec![T::zero(); self.len()];
        v[0] = (T::lit(2.0) * zeta - T::one()).max(T::zero());
        v
    }

    pub fn left_boundary(&self) -> Vec<T> {
        vec![T::zero(); self.len()]
    }

    pub fn right_boundary(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.len()];
        v[0] = T::one();
        v
    }

    /// Diffusion, convection and reaction scalar factors at `zeta`.
    pub fn coefficients_at(&self, zeta: T) -> (T, T, T) {
        let r = T::lit(self.option.rate);
        let one_m = T::one() - zeta;
        (
            T::lit(0.5) * zeta * zeta * one_m * one_m,
            r * zeta * one_m,
            r * one_m,
        )
    }
}

pub fn build_problem<T: Real>(
    tensor: &GalerkinTensor<T>,
    model: &VolatilityModel<T>,
    option: OptionSpec,
    allow_nonparabolic: bool,
) -> Result<TransformedProblem<T>> {
    option.validate()?;
    let coupling = assemble_coupling(tensor, model)?;
    let report = check_parabolic(&coupling)?;
    if !report.parabolic && !allow_nonparabolic {
        return Err(Error::NonParabolic {
            min_eig: report.min_eig,
        });
    }
    Ok(TransformedProblem {
        coupling,
        option,
        report,
    })
}
