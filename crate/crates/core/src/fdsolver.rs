//! Explicit finite differences for the transformed coupled system, the
//! stability checks for that scheme, and the moments of the option value.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::scalar::Real;
use crate::sgsystem::{symmetric_spectrum, OptionSpec, TransformedProblem};
use crate::TRADING_DAYS_PER_YEAR;

/// Uniform grid: `m_zeta` intervals in `zeta`, `n_tau` time steps. Only
/// every `store_every`-th time level is kept (the last one always is).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub m_zeta: usize,
    pub n_tau: usize,
    #[serde(default = "one")]
    pub store_every: usize,
}

fn one() -> usize {
    1
}

impl GridSpec {
    pub fn new(m_zeta: usize, n_tau: usize) -> Self {
        GridSpec {
            m_zeta,
            n_tau,
            store_every: 1,
        }
    }

    pub fn with_store_every(mut self, k: usize) -> Self {
        self.store_every = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_zeta < 2 {
            return Err(Error::config(format!("m_zeta must be at least 2, got {}", self.m_zeta)));
        }
        if self.n_tau < 1 {
            return Err(Error::config("n_tau must be at least 1"));
        }
        if self.store_every < 1 {
            return Err(Error::config("store_every must be at least 1"));
        }
        Ok(())
    }

    pub fn zeta(&self, m: usize) -> f64 {
        m as f64 / self.m_zeta as f64
    }

    /// Time steps whose level is stored, ascending, always including 0 and
    /// `n_tau`.
    pub fn stored_steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (0..=self.n_tau).filter(|n| n % self.store_every == 0).collect();
        if *s.last().unwrap() != self.n_tau {
            s.push(self.n_tau);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Stability

/// Sufficient condition for the explicit scheme,
/// `dtau (lambda_max(A) max_m zeta^2 (1-zeta)^2 / dzeta^2 + r) <= 1`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StabilityBound {
    pub dtau: f64,
    pub dtau_max: f64,
    pub n_tau_min: usize,
    pub stable: bool,
}

pub fn stability_bound_for(lambda_max: f64, rate: f64, maturity: f64, grid: &GridSpec) -> StabilityBound {
    let dz = 1.0 / grid.m_zeta as f64;
    let peak = (1..grid.m_zeta)
        .map(|m| {
            let z = grid.zeta(m);
            (z * (1.0 - z)).powi(2)
        })
        .fold(0.0, f64::max);
    let rate_of_change = lambda_max.max(0.0) * peak / (dz * dz) + rate;
    let dtau = maturity / grid.n_tau as f64;
    let dtau_max = if rate_of_change > 0.0 {
        1.0 / rate_of_change
    } else {
        f64::INFINITY
    };
    let n_tau_min = if dtau_max.is_finite() {
        ((maturity / dtau_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    } else {
        1
    };
    StabilityBound {
        dtau,
        dtau_max,
        n_tau_min,
        stable: dtau <= dtau_max,
    }
}

pub fn stability_bound<T: Real>(problem: &TransformedProblem<T>, grid: &GridSpec) -> StabilityBound {
    stability_bound_for(problem.report.max_eig, problem.option.rate, problem.maturity(), grid)
}

/// Per-node scheme weights `(cd, cv, cr)` at interior node `m`.
fn node_weights(grid: &GridSpec, option: &OptionSpec, m: usize) -> (f64, f64, f64) {
    let dz = 1.0 / grid.m_zeta as f64;
    let dtau = option.maturity() / grid.n_tau as f64;
    let z = grid.zeta(m);
    let r = option.rate;
    (
        dtau * 0.5 * (z * (1.0 - z)).powi(2) / (dz * dz),
        dtau * r * z * (1.0 - z) / (2.0 * dz),
        dtau * r * (1.0 - z),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMethod {
    /// Power iteration on each symmetrized eigen-mode block.
    PowerIteration,
    /// Dense eigenvalues for at least one block or for the whole operator.
    Dense,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SpectralRadius {
    pub rho: f64,
    pub method: RadiusMethod,
}

impl SpectralRadius {
    pub fn stable(&self) -> bool {
        self.rho <= 1.0 + 1e-9
    }
}

const POWER_ITERATIONS: usize = 3000;
const DENSE_LIMIT: usize = 2500;

/// Spectral radius of the one-step operator with homogeneous boundaries.
///
/// With a symmetric coupling matrix the operator splits into scalar
/// tridiagonal blocks, one per eigenvalue of `A`; blocks whose off-diagonal
/// products are positive are symmetrized and power-iterated, the others get
/// dense eigenvalues. A non-symmetric `A` means assembling the whole
/// operator, which is only done up to a few thousand unknowns. Power
/// iteration approaches the radius from below.
pub fn empirical_spectral_radius<T: Real>(problem: &TransformedProblem<T>, grid: &GridSpec) -> Result<SpectralRadius> {
    grid.validate()?;
    let interior = grid.m_zeta - 1;
    let w: Vec<(f64, f64, f64)> = (1..grid.m_zeta).map(|m| node_weights(grid, &problem.option, m)).collect();
    if problem.coupling.is_symmetric() {
        let spec = symmetric_spectrum(&problem.coupling)?;
        let lambdas: Vec<f64> = spec.eigenvalues.iter().map(|l| l.as_f64()).collect();
        let mut rho: f64 = 0.0;
        let mut method = RadiusMethod::PowerIteration;
        for &lam in &lambdas {
            let diag: Vec<f64> = w.iter().map(|&(cd, _, cr)| 1.0 - 2.0 * cd * lam - cr).collect();
            let sup: Vec<f64> = w.iter().map(|&(cd, cv, _)| cd * lam + cv).collect();
            let sub: Vec<f64> = w.iter().map(|&(cd, cv, _)| cd * lam - cv).collect();
            let symmetrizable = (0..interior.saturating_sub(1)).all(|j| sup[j] * sub[j + 1] > 0.0);
            if symmetrizable {
                // Off-diagonal between nodes j and j+1: sqrt(super_j * sub_{j+1}).
                let off: Vec<f64> = (0..interior.saturating_sub(1))
                    .map(|j| (sup[j] * sub[j + 1]).sqrt())
                    .collect();
                rho = rho.max(power_iteration_tridiagonal(&diag, &off, POWER_ITERATIONS));
            } else {
                method = RadiusMethod::Dense;
                let block = DMatrix::<f64>::from_fn(interior, interior, |i, j| {
                    if i == j {
                        diag[i]
                    } else if j == i + 1 {
                        sup[i]
                    } else if i == j + 1 {
                        sub[i]
                    } else {
                        0.0
                    }
                });
                rho = rho.max(block.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max));
            }
        }
        return Ok(SpectralRadius { rho, method });
    }
    let n = problem.len();
    let size = interior * n;
    if size > DENSE_LIMIT {
        return Err(Error::Numerical(format!(
            "dense spectral radius needs a {size}x{size} operator; limit is {DENSE_LIMIT}"
        )));
    }
    let a = problem.coupling.matrix().map(|v| v.as_f64());
    let mut op = DMatrix::<f64>::zeros(size, size);
    for (j, &(cd, cv, cr)) in w.iter().enumerate() {
        for i in 0..n {
            for k in 0..n {
                let row = j * n + i;
                let aik = cd * a[(i, k)];
                op[(row, j * n + k)] += -2.0 * aik;
                if j > 0 {
                    op[(row, (j - 1) * n + k)] += aik;
                }
                if j + 1 < interior {
                    op[(row, (j + 1) * n + k)] += aik;
                }
            }
            let row = j * n + i;
            op[(row, row)] += 1.0 - cr;
            if j > 0 {
                op[(row, (j - 1) * n + i)] -= cv;
            }
            if j + 1 < interior {
                op[(row, (j + 1) * n + i)] += cv;
            }
        }
    }
    let rho = op.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(SpectralRadius {
        rho,
        method: RadiusMethod::Dense,
    })
}

/// Largest `||J x_{k+1}|| / ||x_k||` over the iteration; for symmetric `J`
/// this ratio is nondecreasing and bounded by the spectral radius.
fn power_iteration_tridiagonal(diag: &[f64], off: &[f64], iters: usize) -> f64 {
    let n = diag.len();
    if n == 1 {
        return diag[0].abs();
    }
    // Deterministic start with weight on smooth and oscillatory modes.
    let mut x: Vec<f64> = (0..n)
        .map(|j| 1.0 + 0.5 * if j % 2 == 0 { 1.0 } else { -1.0 } + 0.1 * ((j + 1) as f64).sin())
        .collect();
    let mut norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut y = vec![0.0; n];
    let mut best: f64 = 0.0;
    for _ in 0..iters {
        for j in 0..n {
            let mut s = diag[j] * x[j];
            if j > 0 {
                s += off[j - 1] * x[j - 1];
            }
            if j + 1 < n {
                s += off[j] * x[j + 1];
            }
            y[j] = s;
        }
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ny == 0.0 {
            break;
        }
        best = best.max(ny / norm);
        for j in 0..n {
            x[j] = y[j] / ny;
        }
        norm = 1.0;
    }
    best
}

// ---------------------------------------------------------------------------
// Solver

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveOptions {
    /// Run even when the sufficient stability bound fails.
    pub allow_unstable: bool,
}

/// Chaos coefficients of `v` on the stored time levels. Layout is
/// time-major, then `zeta`, then coefficient.
#[derive(Clone, Debug)]
pub struct SolutionField<T> {
    pub grid: GridSpec,
    pub option: OptionSpec,
    pub n_coef: usize,
    /// Time step index of every stored level (`tau = step * dtau`).
    pub steps: Vec<usize>,
    pub values: Vec<T>,
    /// Wall time of the time stepping.
    pub seconds: f64,
}

impl<T: Real> SolutionField<T> {
    pub fn n_nodes(&self) -> usize {
        self.grid.m_zeta + 1
    }

    pub fn n_levels(&self) -> usize {
        self.steps.len()
    }

    pub fn dtau(&self) -> f64 {
        self.option.maturity() / self.grid.n_tau as f64
    }

    /// `tau` in years of stored level `l`.
    pub fn tau(&self, l: usize) -> f64 {
        self.steps[l] as f64 * self.dtau()
    }

    /// Coefficient vector at level `l`, node `m`.
    pub fn at(&self, l: usize, m: usize) -> &[T] {
        let n = self.n_coef;
        let off = (l * self.n_nodes() + m) * n;
        &self.values[off..off + n]
    }

    pub fn level(&self, l: usize) -> &[T] {
        let sz = self.n_nodes() * self.n_coef;
        &self.values[l * sz..(l + 1) * sz]
    }

    /// Last stored level, `tau = T`, i.e. today.
    pub fn final_level(&self) -> &[T] {
        self.level(self.n_levels() - 1)
    }

    pub fn moments(&self) -> MomentSurfaces {
        moments(self)
    }
}

pub fn solve<T: Real>(problem: &TransformedProblem<T>, grid: &GridSpec, opts: SolveOptions) -> Result<SolutionField<T>> {
    grid.validate()?;
    let bound = stability_bound(problem, grid);
    if !bound.stable && !opts.allow_unstable {
        return Err(Error::Unstable {
            dtau: bound.dtau,
            dtau_max: bound.dtau_max,
            n_tau_min: bound.n_tau_min,
        });
    }
    let start = Instant::now();
    let n = problem.len();
    let nodes = grid.m_zeta + 1;
    // Row-major copy of A for the inner loop.
    let a: Vec<T> = {
        let m = problem.coupling.matrix();
        (0..n).flat_map(|i| (0..n).map(move |k| m[(i, k)])).collect()
    };
    let weights: Vec<(T, T, T)> = (0..nodes)
        .map(|m| {
            let (cd, cv, cr) = node_weights(grid, &problem.option, m);
            (T::lit(cd), T::lit(cv), T::lit(cr))
        })
        .collect();

    let mut cur = vec![T::zero(); nodes * n];
    for m in 0..nodes {
        let init = problem.initial(T::lit(grid.zeta(m)));
        cur[m * n..(m + 1) * n].copy_from_slice(&init);
    }
    let right = problem.right_boundary();
    cur[grid.m_zeta * n..].copy_from_slice(&right);
    let mut next = cur.clone();

    let stored = grid.stored_steps();
    let mut values = Vec::with_capacity(stored.len() * nodes * n);
    values.extend_from_slice(&cur);
    let mut lap = vec![T::zero(); n];
    let two = T::lit(2.0);
    let mut store_ptr = 1;

    for step in 1..=grid.n_tau {
        for m in 1..grid.m_zeta {
            let (cd, cv, cr) = weights[m];
            let (lo, mid, hi) = ((m - 1) * n, m * n, (m + 1) * n);
            for i in 0..n {
                lap[i] = cur[hi + i] - two * cur[mid + i] + cur[lo + i];
            }
            for i in 0..n {
                let row = &a[i * n..(i + 1) * n];
                let acc = row.iter().zip(&lap).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                next[mid + i] =
                    cur[mid + i] + cd * acc + cv * (cur[hi + i] - cur[lo + i]) - cr * cur[mid + i];
            }
        }
        // Boundary nodes keep their Dirichlet values.
        std::mem::swap(&mut cur, &mut next);
        if cur.iter().any(|v| !v.is_finite_val()) {
            return Err(Error::Blowup { step });
        }
        if store_ptr < stored.len() && stored[store_ptr] == step {
            values.extend_from_slice(&cur);
            store_ptr += 1;
        }
    }
    Ok(SolutionField {
        grid: *grid,
        option: problem.option,
        n_coef: n,
        steps: stored,
        values,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Moments

/// Mean and variance of the option value on the stored levels, for the
/// nodes `zeta < 1`. Layout is level-major, then node.
#[derive(Clone, Debug, Serialize)]
pub struct MomentSurfaces {
    /// Calendar time in days, `t = T - tau`, one per stored level.
    pub t_days: Vec<f64>,
    /// Underlying values `S = K zeta / (1 - zeta)`.
    pub s: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Chaos coefficients at `zeta = 1` (the `S -> infinity` asymptote of
    /// `V / (S + K)`), from the final level.
    pub asymptote: Vec<f64>,
    pub strike: f64,
}

impl MomentSurfaces {
    pub fn n_nodes(&self) -> usize {
        self.s.len()
    }

    pub fn n_levels(&self) -> usize {
        self.t_days.len()
    }

    pub fn mean_at(&self, l: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.mean[l * n..(l + 1) * n]
    }

    pub fn variance_at(&self, l: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.variance[l * n..(l + 1) * n]
    }

    /// Level with `t = 0` (today).
    pub fn today(&self) -> usize {
        self.n_levels() - 1
    }

    /// Range of `S` where today's mean departs from the payoff by more than
    /// `1e-6 K`.
    pub fn smoothing_area(&self) -> Option<(f64, f64)> {
        let tol = 1e-6 * self.strike;
        let mean = self.mean_at(self.today());
        let mut range: Option<(f64, f64)> = None;
        for (s, v) in self.s.iter().zip(mean) {
            if (v - (s - self.strike).max(0.0)).abs() > tol {
                range = Some(match range {
                    None => (*s, *s),
                    Some((lo, _)) => (lo, *s),
                });
            }
        }
        range
    }

    /// `t_days,S,mean,variance` rows, level by level.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["t_days", "S", "mean", "variance"]).map_err(csv_err)?;
        for l in 0..self.n_levels() {
            for (m, s) in self.s.iter().enumerate() {
                let k = l * self.n_nodes() + m;
                w.write_record(&[
                    format!("{}", self.t_days[l]),
                    format!("{s}"),
                    format!("{}", self.mean[k]),
                    format!("{}", self.variance[k]),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::data(format!("csv: {other:?}")),
    }
}

pub fn moments<T: Real>(field: &SolutionField<T>) -> MomentSurfaces {
    let k = field.option.strike;
    let t_total = field.option.maturity_days;
    let nodes = field.grid.m_zeta;
    let s: Vec<f64> = (0..nodes)
        .map(|m| {
            let z = field.grid.zeta(m);
            k * z / (1.0 - z)
        })
        .collect();
    let levels = field.n_levels();
    let mut mean = Vec::with_capacity(levels * nodes);
    let mut variance = Vec::with_capacity(levels * nodes);
    for l in 0..levels {
        for (m, &sm) in s.iter().enumerate() {
            let c = field.at(l, m);
            let scale = sm + k;
            mean.push(scale * c[0].as_f64());
            let ss: f64 = c[1..].iter().map(|v| v.as_f64().powi(2)).sum();
            variance.push(scale * scale * ss);
        }
    }
    let t_days = (0..levels)
        .map(|l| t_total - field.tau(l) * TRADING_DAYS_PER_YEAR)
        .collect();
    MomentSurfaces {
        t_days,
        s,
        mean,
        variance,
        asymptote: field
            .at(levels - 1, nodes)
            .iter()
            .map(|v| v.as_f64())
            .collect(),
        strike: k,
    }
}

// ---------------------------------------------------------------------------
// Raw coefficient dump

pub const COEFF_FORMAT: &str = "sgbs-coefficients";
pub const COEFF_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CoefficientManifest {
    pub format: String,
    pub version: u32,
    pub grid: GridSpec,
    pub option: OptionSpec,
    pub n_coef: usize,
    pub steps: Vec<usize>,
}

pub fn write_coefficients<T: Real>(field: &SolutionField<T>, path: &Path) -> Result<()> {
    let m = CoefficientManifest {
        format: COEFF_FORMAT.into(),
        version: COEFF_FORMAT_VERSION,
        grid: field.grid,
        option: field.option,
        n_coef: field.n_coef,
        steps: field.steps.clone(),
    };
    let data: Vec<f64> = field.values.iter().map(|v| v.as_f64()).collect();
    io::write_array(path, &m, &data)
}

pub fn read_coefficients(path: &Path) -> Result<SolutionField<f64>> {
    let (m, values): (CoefficientManifest, Vec<f64>) = io::read_array(path)?;
    if m.format != COEFF_FORMAT || m.version != COEFF_FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: unsupported coefficient file {} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    let expected = m.steps.len() * (m.grid.m_zeta + 1) * m.n_coef;
    if values.len() != expected {
        return Err(Error::data(format!(
            "{}: {} values, expected {expected}",
            path.display(),
            values.len()
        )));
    }
    Ok(SolutionField {
        grid: m.grid,
        option: m.option,
        n_coef: m.n_coef,
        steps: m.steps,
        values,
        seconds: 0.0,
    })
}

/// `||x||_2` of a flat field slice in `f64`.
pub fn l2_norm<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Convenience for diagnostics: `A` as an `f64` matrix.
pub fn coupling_f64<T: Real>(problem: &TransformedProblem<T>) -> DMatrix<f64> {
    problem.coupling.matrix().map(|v| v.as_f64())
}

/// Mean coefficient as a column, mostly for tests.
pub fn mean_column<T: Real>(field: &SolutionField<T>, l: usize) -> DVector<f64> {
    DVector::from_iterator(field.n_nodes(), (0..field.n_nodes()).map(|m| field.at(l, m)[0].as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthopoly::{galerkin_tensor, DistributionFamily};
    use crate::sgsystem::build_problem;
    use crate::volfit::{bs_closed_form, VolatilityModel};

    const NU: [DistributionFamily; 2] = [DistributionFamily::StandardNormal, DistributionFamily::UNIFORM_HALF];

    fn problem(s: (f64, f64, f64), n: u32, days: f64, r: f64) -> TransformedProblem<f64> {
        let t = galerkin_tensor::<f64>(&NU, 1, n).unwrap();
        build_problem(&t, &VolatilityModel::normal_uniform(s.0, s.1, s.2), OptionSpec::call(100.0, days, r), false).unwrap()
    }

    fn max_err_vs_closed_form(ms: &MomentSurfaces, sigma: f64, r: f64, days: f64) -> f64 {
        let l = ms.today();
        ms.s.iter()
            .zip(ms.mean_at(l))
            .skip(1)
            .map(|(&s, &v)| (v - bs_closed_form(s, days / 251.0, 100.0, r, sigma)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic_matches_closed_form() {
        let p = problem((0.5, 0.0, 0.0), 1, 20.0, 0.0);
        let f = solve(&p, &GridSpec::new(200, 319), SolveOptions::default()).unwrap();
        let err = max_err_vs_closed_form(&f.moments(), 0.5, 0.0, 20.0);
        assert!(err < 0.2, "max error {err}");
    }

    #[test]
    fn deterministic_with_rate() {
        let p = problem((0.3, 0.0, 0.0), 0, 120.0, 0.05);
        let grid = GridSpec::new(200, 2000);
        let f = solve(&p, &grid, SolveOptions::default()).unwrap();
        let err = max_err_vs_closed_form(&f.moments(), 0.3, 0.05, 120.0);
        assert!(err < 0.2, "max error {err}");
    }

    #[test]
    fn refinement_reduces_error() {
        let e = |m: usize| {
            let p = problem((0.4, 0.0, 0.0), 0, 60.0, 0.0);
            let b = stability_bound(&p, &GridSpec::new(m, 1));
            let f = solve(&p, &GridSpec::new(m, b.n_tau_min * 2), SolveOptions::default()).unwrap();
            // Away from the kink the scheme is second order in zeta.
            let ms = f.moments();
            ms.s.iter()
                .zip(ms.mean_at(ms.today()))
                .filter(|(s, _)| (60.0..=160.0).contains(*s))
                .map(|(&s, &v)| (v - bs_closed_form(s, 60.0 / 251.0, 100.0, 0.0, 0.4)).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine) = (e(50), e(100));
        assert!(coarse / fine >= 1.5, "{coarse} -> {fine}");
    }

    #[test]
    fn mean_is_monotone_in_spot_and_tends_to_asymptote() {
        let p = problem((0.5, 0.2, 0.1), 3, 20.0, 0.0);
        let f = solve(&p, &GridSpec::new(100, 200), SolveOptions::default()).unwrap();
        let ms = f.moments();
        let mean = ms.mean_at(ms.today());
        for w in mean.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert_eq!(ms.asymptote[0], 1.0);
        assert!(ms.asymptote[1..].iter().all(|&c| c == 0.0));
        let m = ms.n_nodes() - 1;
        // Deep in the money the value is the forward intrinsic value.
        assert!((mean[m] - (ms.s[m] - 100.0)).abs() < 1e-6 * ms.s[m], "{}", mean[m]);
    }

    #[test]
    fn variance_vanishes_at_expiry_and_for_deterministic_model() {
        let p = problem((0.5, 0.2, 0.1), 3, 20.0, 0.0);
        let ms = solve(&p, &GridSpec::new(60, 100), SolveOptions::default()).unwrap().moments();
        assert!(ms.variance_at(0).iter().all(|&v| v <= 1e-20));
        assert!(ms.variance_at(ms.today()).iter().any(|&v| v > 1e-6));
        let d = problem((0.5, 0.0, 0.0), 3, 20.0, 0.0);
        let ms = solve(&d, &GridSpec::new(60, 100), SolveOptions::default()).unwrap().moments();
        assert!(ms.variance.iter().all(|&v| v <= 1e-20));
    }

    #[test]
    fn coarse_time_grid_is_rejected() {
        let p = problem((0.5, 0.2, 0.1), 5, 20.0, 0.0);
        let err = solve(&p, &GridSpec::new(200, 10), SolveOptions::default()).unwrap_err();
        match err {
            Error::Unstable { n_tau_min, .. } => assert!(n_tau_min > 10),
            e => panic!("{e}"),
        }
        assert_eq!(Error::Unstable { dtau: 0.0, dtau_max: 0.0, n_tau_min: 1 }.exit_code(), 3);
    }

    #[test]
    fn forced_unstable_run_blows_up_or_grows() {
        let p = problem((0.5, 0.0, 0.0), 0, 20.0, 0.0);
        let grid = GridSpec::new(200, 20);
        assert!(!stability_bound(&p, &grid).stable);
        let rho = empirical_spectral_radius(&p, &grid).unwrap();
        assert!(!rho.stable(), "{rho:?}");
    }

    #[test]
    fn zero_vol_no_rate_is_stable() {
        let set = crate::multiindex::IndexSet::new(2, 1).unwrap();
        let a = crate::sgsystem::CouplingMatrix::<f64>::from_matrix(set, DMatrix::zeros(3, 3)).unwrap();
        let report = crate::sgsystem::check_parabolic(&a).unwrap();
        let p = TransformedProblem { coupling: a, option: OptionSpec::call(100.0, 20.0, 0.0), report };
        let grid = GridSpec::new(50, 1);
        assert!(stability_bound(&p, &grid).stable);
        let f = solve(&p, &grid, SolveOptions::default()).unwrap();
        // Nothing moves: today's value is the payoff.
        assert_eq!(f.final_level(), f.level(0));
    }

    #[test]
    fn decoupled_modes_for_deterministic_vol() {
        let p = problem((0.5, 0.0, 0.0), 2, 20.0, 0.01);
        let f = solve(&p, &GridSpec::new(80, 200), SolveOptions::default()).unwrap();
        for l in 0..f.n_levels() {
            for m in 0..f.n_nodes() {
                // Off-diagonal tensor entries are quadrature zeros, exact up to rounding.
                assert!(f.at(l, m)[1..].iter().all(|&c| c.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn stored_steps_and_thinning() {
        let g = GridSpec::new(10, 25).with_store_every(10);
        assert_eq!(g.stored_steps(), vec![0, 10, 20, 25]);
        let p = problem((0.5, 0.1, 0.1), 2, 20.0, 0.0);
        let full = solve(&p, &GridSpec::new(10, 25), SolveOptions::default()).unwrap();
        let thin = solve(&p, &g, SolveOptions::default()).unwrap();
        assert_eq!(thin.n_levels(), 4);
        assert_eq!(thin.level(2), full.level(20));
        assert_eq!(thin.final_level(), full.final_level());
    }

    #[test]
    fn bound_never_claims_stable_when_radius_exceeds_one() {
        for (s, m, nt) in [((0.5, 0.2, 0.1), 40, 40), ((0.3, 0.1, 0.05), 50, 20), ((0.8, 0.3, 0.1), 30, 100)] {
            let p = problem(s, 3, 20.0, 0.02);
            let g = GridSpec::new(m, nt);
            let b = stability_bound(&p, &g);
            let rho = empirical_spectral_radius(&p, &g).unwrap();
            if b.stable {
                assert!(rho.stable(), "{b:?} {rho:?}");
            }
        }
    }

    #[test]
    fn dense_and_power_radius_agree_on_small_grid() {
        let p = problem((0.5, 0.2, 0.1), 1, 20.0, 0.0);
        let g = GridSpec::new(12, 3);
        let power = empirical_spectral_radius(&p, &g).unwrap();
        assert_eq!(power.method, RadiusMethod::PowerIteration);
        let nonsym = TransformedProblem {
            coupling: crate::sgsystem::CouplingMatrix::from_matrix(
                p.coupling.sol_set().clone(),
                {
                    let mut m = p.coupling.matrix().clone();
                    m[(0, 1)] += 1e-9;
                    m
                },
            )
            .unwrap(),
            option: p.option,
            report: p.report.clone(),
        };
        let dense = empirical_spectral_radius(&nonsym, &g).unwrap();
        assert_eq!(dense.method, RadiusMethod::Dense);
        assert!((dense.rho - power.rho).abs() < 1e-4 * dense.rho, "{dense:?} {power:?}");
    }

    #[test]
    fn coefficient_dump_round_trip() {
        let p = problem((0.5, 0.2, 0.1), 2, 20.0, 0.0);
        let f = solve(&p, &GridSpec::new(20, 40).with_store_every(7), SolveOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_coefficients(&f, &path).unwrap();
        let back = read_coefficients(&path).unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!(back.steps, f.steps);
        assert_eq!(back.grid, f.grid);
    }

    #[test]
    fn surface_csv_has_header_and_rows() {
        let p = problem((0.5, 0.2, 0.1), 1, 20.0, 0.0);
        let f = solve(&p, &GridSpec::new(10, 20).with_store_every(10), SolveOptions::default()).unwrap();
        let ms = f.moments();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        ms.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t_days,S,mean,variance"));
        assert_eq!(lines.count(), 3 * 10);
        assert_eq!(ms.t_days, vec![20.0, 10.0, 0.0]);
        assert!(ms.smoothing_area().is_some());
    }

    #[test]
    fn f32_solver_tracks_f64() {
        let t32 = galerkin_tensor::<f32>(&NU, 1, 2).unwrap();
        let m32 = VolatilityModel::<f32>::normal_uniform(0.5, 0.2, 0.1);
        let p32 = build_problem(&t32, &m32, OptionSpec::call(100.0, 20.0, 0.0), false).unwrap();
        let p64 = problem((0.5, 0.2, 0.1), 2, 20.0, 0.0);
        let g = GridSpec::new(40, 80);
        let a = solve(&p32, &g, SolveOptions::default()).unwrap().moments();
        let b = solve(&p64, &g, SolveOptions::default()).unwrap().moments();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-3, "{x} {y}");
        }
    }
}
