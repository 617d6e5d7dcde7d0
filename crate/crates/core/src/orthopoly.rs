//! Orthonormal polynomial chaos bases for independent random inputs.
//!
//! Each input `Theta_i` carries a [`DistributionFamily`]. Univariate
//! polynomials are orthonormal with respect to that family's probability
//! measure and are evaluated through the symmetric three-term recurrence
//!
//! ```text
//! b_{n+1} p_{n+1}(x) = x p_n(x) - b_n p_{n-1}(x)
//! ```
//!
//! whose coefficients also form the Jacobi matrix used for Gauss rules
//! (Golub-Welsch). Multivariate polynomials are tensor products.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::multiindex::{build_index_set, IndexSet, MultiIndex};
use crate::scalar::Real;

/// Distribution of one independent random input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionFamily {
    /// `N(0, 1)`; probabilists' Hermite polynomials.
    StandardNormal,
    /// Uniform on `[-half_width, half_width]`; scaled Legendre polynomials.
    UniformSymmetric { half_width: f64 },
}

impl DistributionFamily {
    pub const UNIFORM_HALF: DistributionFamily =
        DistributionFamily::UniformSymmetric { half_width: 0.5 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistributionFamily::StandardNormal => Ok(()),
            DistributionFamily::UniformSymmetric { half_width } => {
                if half_width > 0.0 && half_width.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "uniform half width must be positive, got {half_width}"
                    )))
                }
            }
        }
    }

    /// Off-diagonal Jacobi coefficient `b_n`, `n >= 1`. Diagonals vanish for
    /// both symmetric families.
    fn recurrence_b<T: Real>(&self, n: usize) -> T {
        match *self {
            DistributionFamily::StandardNormal => T::of_usize(n).sqrt(),
            DistributionFamily::UniformSymmetric { half_width } => {
                let nf = T::of_usize(n);
                let four = T::lit(4.0);
                T::lit(half_width) * nf / (four * nf * nf - T::one()).sqrt()
            }
        }
    }

    /// Exact `E[X^d]` of the family, used by tests and diagnostics.
    pub fn moment(&self, d: u32) -> f64 {
        if d % 2 == 1 {
            return 0.0;
        }
        match *self {
            DistributionFamily::StandardNormal => (1..d).step_by(2).map(|k| k as f64).product(),
            DistributionFamily::UniformSymmetric { half_width } => {
                half_width.powi(d as i32) / (d as f64 + 1.0)
            }
        }
    }
}

impl fmt::Display for DistributionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionFamily::StandardNormal => write!(f, "normal"),
            DistributionFamily::UniformSymmetric { half_width } => write!(f, "uniform:{half_width}"),
        }
    }
}

impl FromStr for DistributionFamily {
    type Err = Error;

    /// Accepts `normal`, `uniform` (half width 0.5) and `uniform:<h>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let fam = match s {
            "normal" | "gaussian" | "hermite" => DistributionFamily::StandardNormal,
            "uniform" | "legendre" => DistributionFamily::UNIFORM_HALF,
            _ => match s.strip_prefix("uniform:") {
                Some(h) => DistributionFamily::UniformSymmetric {
                    half_width: h
                        .parse()
                        .map_err(|_| Error::config(format!("bad uniform half width in {s:?}")))?,
                },
                None => return Err(Error::config(format!("unknown distribution family {s:?}"))),
            },
        };
        fam.validate()?;
        Ok(fam)
    }
}

/// Value of the degree-`degree` orthonormal polynomial at `x`.
pub fn eval_1d<T: Real>(family: &DistributionFamily, degree: usize, x: T) -> T {
    *eval_1d_all(family, degree, x).last().unwrap()
}

/// Values of the orthonormal polynomials of degrees `0..=max_degree` at `x`.
pub fn eval_1d_all<T: Real>(family: &DistributionFamily, max_degree: usize, x: T) -> Vec<T> {
    let mut out = Vec::with_capacity(max_degree + 1);
    out.push(T::one());
    if max_degree == 0 {
        return out;
    }
    let b1: T = family.recurrence_b(1);
    out.push(x / b1);
    let mut b_prev = b1;
    for n in 1..max_degree {
        let b_next: T = family.recurrence_b(n + 1);
        let v = (x * out[n] - b_prev * out[n - 1]) / b_next;
        out.push(v);
        b_prev = b_next;
    }
    out
}

// `(p_n(x), p_n'(x))` by differentiating the three-term recurrence.
fn value_and_derivative<T: Real>(family: &DistributionFamily, n: usize, x: T) -> (T, T) {
    let (mut p0, mut p1) = (T::zero(), T::one());
    let (mut d0, mut d1) = (T::zero(), T::zero());
    let mut b_prev = T::zero();
    for k in 0..n {
        let b: T = family.recurrence_b(k + 1);
        let p2 = (x * p1 - b_prev * p0) / b;
        let d2 = (p1 + x * d1 - b_prev * d0) / b;
        p0 = p1;
        p1 = p2;
        d0 = d1;
        d1 = d2;
        b_prev = b;
    }
    (p1, d1)
}

/// Gauss rule against a probability measure: `sum w_j f(x_j) ~ E[f(X)]`.
#[derive(Clone, Debug)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    pub fn integrate(&self, mut f: impl FnMut(T) -> T) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + w * f(x))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `n_nodes`-point Gauss rule for the family, exact up to degree
/// `2 n_nodes - 1`. Nodes ascending, weights sum to one.
pub fn quadrature_rule<T: Real>(family: &DistributionFamily, n_nodes: usize) -> Result<QuadratureRule<T>> {
    if n_nodes == 0 {
        return Err(Error::config("quadrature needs at least one node"));
    }
    family.validate()?;
    let mut jacobi = DMatrix::<T>::zeros(n_nodes, n_nodes);
    for k in 1..n_nodes {
        let b: T = family.recurrence_b(k);
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eps = T::default_epsilon();
    let eig = SymmetricEigen::try_new(jacobi, eps, 0)
        .ok_or_else(|| Error::Numerical("Golub-Welsch eigenproblem did not converge".into()))?;
    let mut nodes: Vec<T> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Newton polish on p_n, then weights from the Christoffel function
    // 1 / sum_k p_k(x)^2, which keeps tiny tail weights relatively accurate.
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = value_and_derivative(family, n_nodes, *x);
            if dp == T::zero() {
                break;
            }
            let step = p / dp;
            if !step.is_finite_val() {
                break;
            }
            *x -= step;
        }
    }
    let mut weights: Vec<T> = nodes
        .iter()
        .map(|&x| {
            let s = eval_1d_all(family, n_nodes - 1, x)
                .iter()
                .fold(T::zero(), |acc, &p| acc + p * p);
            T::one() / s
        })
        .collect();
    let total = weights.iter().fold(T::zero(), |acc, &w| acc + w);
    for w in weights.iter_mut() {
        *w /= total;
    }
    // Symmetric measures have symmetric rules; enforce it exactly.
    let n = nodes.len();
    for j in 0..n / 2 {
        let x = (nodes[n - 1 - j] - nodes[j]) / T::lit(2.0);
        let w = (weights[j] + weights[n - 1 - j]) / T::lit(2.0);
        nodes[j] = -x;
        nodes[n - 1 - j] = x;
        weights[j] = w;
        weights[n - 1 - j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = T::zero();
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Tensor-product orthonormal basis over an [`IndexSet`].
#[derive(Clone, Debug)]
pub struct PolynomialBasis {
    families: Vec<DistributionFamily>,
    index_set: IndexSet,
}

impl PolynomialBasis {
    pub fn new(families: Vec<DistributionFamily>, max_degree: u32) -> Result<Self> {
        for f in &families {
            f.validate()?;
        }
        let index_set = build_index_set(families.len(), max_degree)?;
        Ok(PolynomialBasis {
            families,
            index_set,
        })
    }

    pub fn families(&self) -> &[DistributionFamily] {
        &self.families
    }

    pub fn index_set(&self) -> &IndexSet {
        &self.index_set
    }

    pub fn dim(&self) -> usize {
        self.families.len()
    }

    /// `p_alpha(x_1, .., x_L) = prod_i p_{alpha_i}(x_i)`.
    pub fn eval<T: Real>(&self, alpha: &MultiIndex, x: &[T]) -> T {
        alpha
            .entries()
            .iter()
            .zip(&self.families)
            .zip(x)
            .fold(T::one(), |acc, ((&a, fam), &xi)| acc * eval_1d(fam, a as usize, xi))
    }

    /// Values of every basis polynomial at `x`, in position order.
    pub fn eval_all<T: Real>(&self, x: &[T]) -> Vec<T> {
        let n = self.index_set.max_degree() as usize;
        let per_dim: Vec<Vec<T>> = self
            .families
            .iter()
            .zip(x)
            .map(|(fam, &xi)| eval_1d_all(fam, n, xi))
            .collect();
        self.index_set
            .iter()
            .map(|alpha| {
                alpha
                    .entries()
                    .iter()
                    .enumerate()
                    .fold(T::one(), |acc, (i, &a)| acc * per_dim[i][a as usize])
            })
            .collect()
    }
}

/// `M[a][b][g][d] = <p_a p_b p_g p_d> / <p_d^2>` for `|a|,|b| <= K` and
/// `|g|,|d| <= N`, stored densely in position order.
#[derive(Clone, Debug)]
pub struct GalerkinTensor<T> {
    families: Vec<DistributionFamily>,
    vol_set: IndexSet,
    sol_set: IndexSet,
    values: Vec<T>,
}

impl<T: Real> GalerkinTensor<T> {
    pub fn families(&self) -> &[DistributionFamily] {
        &self.families
    }

    /// Index set of the volatility expansion (`|a| <= K`).
    pub fn vol_set(&self) -> &IndexSet {
        &self.vol_set
    }

    /// Index set of the solution expansion (`|d| <= N`).
    pub fn sol_set(&self) -> &IndexSet {
        &self.sol_set
    }

    pub fn vol_degree(&self) -> u32 {
        self.vol_set.max_degree()
    }

    pub fn sol_degree(&self) -> u32 {
        self.sol_set.max_degree()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize, g: usize, d: usize) -> T {
        let nk = self.vol_set.len();
        let nn = self.sol_set.len();
        self.values[((a * nk + b) * nn + g) * nn + d]
    }

    pub fn entry(&self, a: &MultiIndex, b: &MultiIndex, g: &MultiIndex, d: &MultiIndex) -> Result<T> {
        Ok(self.at(
            self.vol_set.position_of(a)?,
            self.vol_set.position_of(b)?,
            self.sol_set.position_of(g)?,
            self.sol_set.position_of(d)?,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = TensorManifest {
            format: "sgbs-galerkin-tensor".into(),
            version: TENSOR_FORMAT_VERSION,
            dim: self.families.len(),
            vol_degree: self.vol_degree(),
            sol_degree: self.sol_degree(),
            families: self.families.clone(),
        };
        let data: Vec<f64> = self.values.iter().map(|v| v.as_f64()).collect();
        io::write_array(path, &manifest, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, data): (TensorManifest, Vec<f64>) = io::read_array(path)?;
        if m.format != "sgbs-galerkin-tensor" || m.version != TENSOR_FORMAT_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported tensor file {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        if m.families.len() != m.dim {
            return Err(Error::data("tensor manifest: family count does not match dimension"));
        }
        let vol_set = build_index_set(m.dim, m.vol_degree)?;
        let sol_set = build_index_set(m.dim, m.sol_degree)?;
        let expected = vol_set.len().pow(2) * sol_set.len().pow(2);
        if data.len() != expected {
            return Err(Error::data(format!(
                "tensor file holds {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(GalerkinTensor {
            families: m.families,
            vol_set,
            sol_set,
            values: data.into_iter().map(T::lit).collect(),
        })
    }
}

const TENSOR_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorManifest {
    format: String,
    version: u32,
    dim: usize,
    vol_degree: u32,
    sol_degree: u32,
    families: Vec<DistributionFamily>,
}

/// Builds the Galerkin tensor with `K + N + 1` Gauss nodes per dimension,
/// which integrates the degree `2K + 2N` integrands exactly.
pub fn galerkin_tensor<T: Real>(
    families: &[DistributionFamily],
    vol_degree: u32,
    sol_degree: u32,
) -> Result<GalerkinTensor<T>> {
    galerkin_tensor_with_nodes(
        families,
        vol_degree,
        sol_degree,
        (vol_degree + sol_degree + 1) as usize,
    )
}

pub fn galerkin_tensor_with_nodes<T: Real>(
    families: &[DistributionFamily],
    vol_degree: u32,
    sol_degree: u32,
    nodes_per_dim: usize,
) -> Result<GalerkinTensor<T>> {
    let min_nodes = (vol_degree + sol_degree + 1) as usize;
    if nodes_per_dim < min_nodes {
        return Err(Error::config(format!(
            "{nodes_per_dim} nodes per dimension cannot integrate the tensor exactly; need {min_nodes}"
        )));
    }
    let dim = families.len();
    let vol_set = build_index_set(dim, vol_degree)?;
    let sol_set = build_index_set(dim, sol_degree)?;
    let k = vol_degree as usize;
    let n = sol_degree as usize;

    // Per-dimension tables E[p_a p_b p_c p_d], one value per permutation orbit.
    let tables: Vec<HashMap<[usize; 4], T>> = families
        .iter()
        .map(|fam| {
            let rule = quadrature_rule::<T>(fam, nodes_per_dim)?;
            let vals: Vec<Vec<T>> = rule.nodes.iter().map(|&x| eval_1d_all(fam, n.max(k), x)).collect();
            let mut table = HashMap::new();
            for a in 0..=k {
                for b in a..=k {
                    for c in 0..=n {
                        for d in c..=n {
                            let mut key = [a, b, c, d];
                            key.sort_unstable();
                            table.entry(key).or_insert_with(|| {
                                vals.iter().zip(&rule.weights).fold(T::zero(), |acc, (v, &w)| {
                                    acc + w * v[a] * v[b] * v[c] * v[d]
                                })
                            });
                        }
                    }
                }
            }
            Ok(table)
        })
        .collect::<Result<_>>()?;

    let lookup = |dim_i: usize, q: [u32; 4]| -> T {
        let mut key = q.map(|x| x as usize);
        key.sort_unstable();
        tables[dim_i][&key]
    };

    let nk = vol_set.len();
    let nn = sol_set.len();
    let mut values = vec![T::zero(); nk * nk * nn * nn];
    for (ai, a) in vol_set.iter().enumerate() {
        for (bi, b) in vol_set.iter().enumerate().skip(ai) {
            for (gi, g) in sol_set.iter().enumerate() {
                for (di, d) in sol_set.iter().enumerate().skip(gi) {
                    let mut v = T::one();
                    for i in 0..dim {
                        v *= lookup(
                            i,
                            [a.entries()[i], b.entries()[i], g.entries()[i], d.entries()[i]],
                        );
                    }
                    // Orthonormal basis: <p_d^2> = 1.
                    for (x, y) in [(ai, bi), (bi, ai)] {
                        for (u, w) in [(gi, di), (di, gi)] {
                            values[((x * nk + y) * nn + u) * nn + w] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(GalerkinTensor {
        families: families.to_vec(),
        vol_set,
        sol_set,
        values,
    })
}
