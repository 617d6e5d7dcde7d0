//! Market data ingestion, Black-Scholes pricing, implied volatilities and
//! moment-constrained maximum likelihood fits of a degree-one chaos
//! volatility model `S00 + S10 p_10 + S01 p_01`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::multiindex::{build_index_set, IndexSet, MultiIndex};
use crate::orthopoly::{DistributionFamily, PolynomialBasis};
use crate::scalar::Real;
use crate::TRADING_DAYS_PER_YEAR;

/// Truncated chaos expansion `sum_{|a| <= K} s_a p_a(Theta)` of the volatility.
#[derive(Clone, Debug, PartialEq)]
pub struct VolatilityModel<T> {
    families: Vec<DistributionFamily>,
    set: IndexSet,
    coefficients: Vec<T>,
}

impl<T: Real> VolatilityModel<T> {
    /// `coefficients` are given in position order of the `(L, K)` index set.
    pub fn new(families: Vec<DistributionFamily>, degree: u32, coefficients: Vec<T>) -> Result<Self> {
        for f in &families {
            f.validate()?;
        }
        let set = build_index_set(families.len(), degree)?;
        if coefficients.len() != set.len() {
            return Err(Error::config(format!(
                "volatility model with L={}, K={degree} needs {} coefficients, got {}",
                families.len(),
                set.len(),
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite_val()) {
            return Err(Error::config("volatility coefficients must be finite"));
        }
        Ok(VolatilityModel {
            families,
            set,
            coefficients,
        })
    }

    /// `s00 + s10 Theta + s01 sqrt(12) Delta` with `Theta ~ N(0,1)` and
    /// `Delta ~ U[-0.5, 0.5]`; coefficients refer to the orthonormal basis.
    pub fn normal_uniform(s00: T, s10: T, s01: T) -> Self {
        Self::new(
            vec![DistributionFamily::StandardNormal, DistributionFamily::UNIFORM_HALF],
            1,
            vec![s00, s10, s01],
        )
        .expect("degree-one normal/uniform model is well formed")
    }

    /// Model with `s00 = sigma` and all other coefficients zero.
    pub fn deterministic(families: Vec<DistributionFamily>, degree: u32, sigma: T) -> Result<Self> {
        let n = build_index_set(families.len(), degree)?.len();
        let mut c = vec![T::zero(); n];
        c[0] = sigma;
        Self::new(families, degree, c)
    }

    /// Degree-one model from the coefficients on the raw inputs `Theta_i`
    /// (`[S0, S_1, .., S_L]`), converted to the orthonormal basis.
    pub fn from_raw_linear(families: Vec<DistributionFamily>, raw: &[T]) -> Result<Self> {
        if raw.len() != families.len() + 1 {
            return Err(Error::config(format!(
                "raw degree-one model needs {} coefficients, got {}",
                families.len() + 1,
                raw.len()
            )));
        }
        let mut c = vec![raw[0]];
        for (fam, &r) in families.iter().zip(&raw[1..]) {
            c.push(r / T::lit(linear_scale(fam)));
        }
        Self::new(families, 1, c)
    }

    pub fn families(&self) -> &[DistributionFamily] {
        &self.families
    }

    pub fn index_set(&self) -> &IndexSet {
        &self.set
    }

    pub fn degree(&self) -> u32 {
        self.set.max_degree()
    }

    pub fn coefficients(&self) -> &[T] {
        &self.coefficients
    }

    pub fn coefficient(&self, alpha: &MultiIndex) -> Result<T> {
        Ok(self.coefficients[self.set.position_of(alpha)?])
    }

    pub fn mean(&self) -> T {
        self.coefficients[0]
    }

    pub fn variance(&self) -> T {
        self.coefficients[1..]
            .iter()
            .fold(T::zero(), |acc, &c| acc + c * c)
    }

    /// `Sigma(theta)` at one realization of the inputs.
    pub fn eval(&self, theta: &[T]) -> T {
        let basis = PolynomialBasis::new(self.families.clone(), self.degree()).expect("validated");
        basis
            .eval_all(theta)
            .iter()
            .zip(&self.coefficients)
            .fold(T::zero(), |acc, (&p, &c)| acc + p * c)
    }

    /// Coefficients multiplying the raw inputs `Theta_i` instead of the
    /// normalized `p_1(Theta_i)`. Only meaningful for degree-one models.
    pub fn raw_linear_coefficients(&self) -> Vec<T> {
        let mut out = vec![self.coefficients[0]];
        for (i, fam) in self.families.iter().enumerate() {
            let mut e = vec![0u32; self.families.len()];
            e[i] = 1;
            let c = self.coefficient(&MultiIndex::new(e)).unwrap_or(T::zero());
            out.push(c * T::lit(linear_scale(fam)));
        }
        out
    }

    /// Same model with every degree-one coefficient made nonnegative. The
    /// inputs are symmetric, so the distribution does not change.
    pub fn canonical(&self) -> Self {
        let mut c = self.coefficients.clone();
        if self.degree() == 1 {
            for v in c.iter_mut().skip(1) {
                *v = v.abs();
            }
        }
        VolatilityModel {
            families: self.families.clone(),
            set: self.set.clone(),
            coefficients: c,
        }
    }
}

/// Factor `c` with `p_1(x) = c x` for the family.
fn linear_scale(fam: &DistributionFamily) -> f64 {
    match *fam {
        DistributionFamily::StandardNormal => 1.0,
        DistributionFamily::UniformSymmetric { half_width } => 3f64.sqrt() / half_width,
    }
}

// ---------------------------------------------------------------------------
// Black-Scholes

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// European call price. `t` is the time to maturity in years.
pub fn bs_closed_form(spot: f64, t: f64, strike: f64, rate: f64, sigma: f64) -> f64 {
    let discounted = strike * (-rate * t).exp();
    if spot <= 0.0 {
        return 0.0;
    }
    let sd = sigma * t.sqrt();
    if t <= 0.0 || sd <= 0.0 {
        return (spot - discounted).max(0.0);
    }
    let d1 = ((spot / strike).ln() + (rate + 0.5 * sigma * sigma) * t) / sd;
    let d2 = d1 - sd;
    spot * norm_cdf(d1) - discounted * norm_cdf(d2)
}

fn bs_vega(spot: f64, t: f64, strike: f64, rate: f64, sigma: f64) -> f64 {
    let sd = sigma * t.sqrt();
    if spot <= 0.0 || sd <= 0.0 {
        return 0.0;
    }
    let d1 = ((spot / strike).ln() + (rate + 0.5 * sigma * sigma) * t) / sd;
    spot * norm_pdf(d1) * t.sqrt()
}

pub const IMPLIED_VOL_BRACKET: (f64, f64) = (1e-6, 5.0);

/// Volatility reproducing `price` through [`bs_closed_form`].
///
/// Bisection on `[1e-6, 5]` followed by Newton polishing. Prices below the
/// value at `1e-6` but still above intrinsic continue the bisection on
/// `[0, 1e-6]`.
pub fn implied_vol(price: f64, spot: f64, t: f64, strike: f64, rate: f64) -> Result<f64> {
    if !(spot > 0.0 && strike > 0.0 && t > 0.0) || !price.is_finite() {
        return Err(Error::NoSolution(format!(
            "need spot, strike, maturity > 0 and a finite price (spot={spot}, strike={strike}, t={t}, price={price})"
        )));
    }
    let lower = (spot - strike * (-rate * t).exp()).max(0.0);
    if price >= spot {
        return Err(Error::NoSolution(format!(
            "price {price} is not below the spot {spot}"
        )));
    }
    if price <= lower {
        return Err(Error::NoSolution(format!(
            "price {price} is not above the intrinsic value {lower}"
        )));
    }
    let f = |s: f64| bs_closed_form(spot, t, strike, rate, s) - price;
    let (mut lo, mut hi) = IMPLIED_VOL_BRACKET;
    if f(hi) < 0.0 {
        return Err(Error::NoSolution(format!(
            "price {price} needs a volatility above {hi}"
        )));
    }
    if f(lo) > 0.0 {
        lo = 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1e-3) {
            break;
        }
    }
    let mut sigma = 0.5 * (lo + hi);
    let mut err = f(sigma).abs();
    for _ in 0..8 {
        let vega = bs_vega(spot, t, strike, rate, sigma);
        if vega <= 0.0 {
            break;
        }
        let cand = sigma - f(sigma) / vega;
        if !(cand > 0.0 && cand.is_finite()) {
            break;
        }
        let cerr = f(cand).abs();
        if cerr >= err {
            break;
        }
        sigma = cand;
        err = cerr;
    }
    if err > 1e-10 {
        return Err(Error::Numerical(format!(
            "implied volatility did not converge: residual {err:e}"
        )));
    }
    Ok(sigma)
}

// ---------------------------------------------------------------------------
// Density of the degree-one normal/uniform model

/// Coefficient on the normal input and width of the uniform component.
fn mixture_parts(model: &VolatilityModel<f64>) -> Result<(f64, f64, f64)> {
    if model.degree() != 1 || model.families().len() != 2 {
        return Err(Error::config(
            "closed-form density needs L = 2 and K = 1",
        ));
    }
    let fams = model.families();
    let (ni, ui) = match (fams[0], fams[1]) {
        (DistributionFamily::StandardNormal, DistributionFamily::UniformSymmetric { .. }) => (1, 2),
        (DistributionFamily::UniformSymmetric { .. }, DistributionFamily::StandardNormal) => (2, 1),
        _ => {
            return Err(Error::config(
                "closed-form density needs one normal and one uniform input",
            ))
        }
    };
    let c = model.coefficients();
    // p_1 of a symmetric uniform input is uniform on [-sqrt 3, sqrt 3].
    let width = c[ui].abs() * 2.0 * 3f64.sqrt();
    Ok((c[0], c[ni].abs(), width))
}

/// `P(a < Z < b)` for a standard normal `Z`, `a <= b`, without cancellation
/// in either tail.
fn normal_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (erfc(a * FRAC_1_SQRT_2) - erfc(b * FRAC_1_SQRT_2))
    } else if b <= 0.0 {
        0.5 * (erfc(-b * FRAC_1_SQRT_2) - erfc(-a * FRAC_1_SQRT_2))
    } else {
        1.0 - 0.5 * erfc(-a * FRAC_1_SQRT_2) - 0.5 * erfc(b * FRAC_1_SQRT_2)
    }
}

/// Density of `S00 + S10 Theta + S01 sqrt(12) Delta` at `x`.
pub fn model_density(model: &VolatilityModel<f64>, x: f64) -> Result<f64> {
    let (mu, sn, w) = mixture_parts(model)?;
    density_parts(mu, sn, w, x)
}

fn density_parts(mu: f64, sn: f64, w: f64, x: f64) -> Result<f64> {
    if sn == 0.0 && w == 0.0 {
        return Err(Error::data("volatility model is a point mass; no density"));
    }
    let z = x - mu;
    if w == 0.0 {
        return Ok(norm_pdf(z / sn) / sn);
    }
    if sn == 0.0 {
        return Ok(if z.abs() <= 0.5 * w { 1.0 / w } else { 0.0 });
    }
    Ok(normal_interval((z - 0.5 * w) / sn, (z + 0.5 * w) / sn) / w)
}

// ---------------------------------------------------------------------------
// Fitting

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Mean and variance fixed to the sample moments; one angle is searched.
    MeanVariance,
    /// Only the mean is fixed; both remaining coefficients are searched.
    MeanOnly,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: VolatilityModel<f64>,
    pub log_likelihood: f64,
    pub sample_mean: f64,
    /// Unbiased sample variance.
    pub sample_variance: f64,
    /// Angle with `(S10, S01) = scale (cos phi, sin phi)`.
    pub phi: f64,
    pub samples: usize,
}

/// Number of equally spaced angle probes before the golden-section refine.
pub const PHI_PROBES: usize = 64;
const PHI_TOL: f64 = 1e-7;

pub fn sample_moments(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 3 {
        return Err(Error::data(format!(
            "need at least 3 volatility samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("volatility samples must be finite"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::data("volatility samples have zero variance"));
    }
    Ok((mean, var))
}

/// Log-likelihood of the samples under `mu + sn Theta + su sqrt(12) Delta`.
pub fn log_likelihood(samples: &[f64], mu: f64, sn: f64, su: f64) -> f64 {
    let w = su.abs() * 2.0 * 3f64.sqrt();
    samples
        .iter()
        .map(|&y| match density_parts(mu, sn.abs(), w, y) {
            Ok(d) => d.ln(),
            Err(_) => f64::NEG_INFINITY,
        })
        .sum()
}

/// Moment-constrained maximum likelihood fit of the normal/uniform model.
///
/// `families` must hold one `StandardNormal` and one `UniformSymmetric`
/// input; coefficients follow that order.
pub fn fit_constrained_mle(
    samples: &[f64],
    families: &[DistributionFamily],
    mode: FitMode,
) -> Result<FitResult> {
    let (mean, var) = sample_moments(samples)?;
    let sd = var.sqrt();
    let normal_first = match families {
        [DistributionFamily::StandardNormal, DistributionFamily::UniformSymmetric { .. }] => true,
        [DistributionFamily::UniformSymmetric { .. }, DistributionFamily::StandardNormal] => false,
        _ => {
            return Err(Error::config(
                "fitting supports exactly one normal and one uniform input",
            ))
        }
    };

    let (phi, scale, ll) = match mode {
        FitMode::MeanVariance => {
            let obj = |phi: f64| log_likelihood(samples, mean, sd * phi.cos(), sd * phi.sin());
            let (phi, ll) = maximize_on_interval(obj, 0.0, 0.5 * PI, PHI_PROBES, PHI_TOL);
            (phi, sd, ll)
        }
        FitMode::MeanOnly => {
            let best_scale = |phi: f64| -> (f64, f64) {
                let (ls, ll) = maximize_on_interval(
                    |ls: f64| {
                        let s = sd * ls.exp();
                        log_likelihood(samples, mean, s * phi.cos(), s * phi.sin())
                    },
                    -3.0,
                    3.0,
                    24,
                    1e-8,
                );
                (sd * ls.exp(), ll)
            };
            let (phi, ll) = maximize_on_interval(|phi| best_scale(phi).1, 0.0, 0.5 * PI, PHI_PROBES, PHI_TOL);
            (phi, best_scale(phi).0, ll)
        }
    };
    if !ll.is_finite() {
        return Err(Error::Numerical(
            "log-likelihood is not finite at the optimum".into(),
        ));
    }
    let sn = scale * phi.cos();
    let su = scale * phi.sin();
    let coeffs = if normal_first {
        vec![mean, sn, su]
    } else {
        vec![mean, su, sn]
    };
    let model = VolatilityModel::new(families.to_vec(), 1, coeffs)?.canonical();
    Ok(FitResult {
        model,
        log_likelihood: ll,
        sample_mean: mean,
        sample_variance: var,
        phi,
        samples: samples.len(),
    })
}

/// Grid of `probes + 1` points followed by golden-section refinement in the
/// bracket around the best probe. Non-finite values count as `-inf`.
/// Ties go to the lowest probe.
fn maximize_on_interval(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    probes: usize,
    tol: f64,
) -> (f64, f64) {
    let eval = |x: f64| {
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let h = (b - a) / probes as f64;
    let mut best = (a, eval(a));
    let mut best_i = 0;
    for i in 1..=probes {
        let x = a + h * i as f64;
        let v = eval(x);
        if v > best.1 {
            best = (x, v);
            best_i = i;
        }
    }
    let mut lo = a + h * best_i.saturating_sub(1) as f64;
    let mut hi = (a + h * (best_i + 1) as f64).min(b);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = eval(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = eval(x2);
        }
    }
    for (x, v) in [(x1, f1), (x2, f2)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

/// Histogram density estimate next to the fitted density, one row per bin:
/// `(bin center, histogram density, model density)`.
pub fn density_table(samples: &[f64], model: &VolatilityModel<f64>, bins: usize) -> Result<Vec<(f64, f64, f64)>> {
    if samples.is_empty() || bins == 0 {
        return Ok(Vec::new());
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &y in samples {
        let k = (((y - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let x = lo + (k as f64 + 0.5) * width;
            Ok((x, c as f64 / (n * width), model_density(model, x)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Market data

/// One observation. `implied_vol` is always set; the option fields are
/// present when the row carried prices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Observation {
    pub date: String,
    pub spot: Option<f64>,
    pub price: Option<f64>,
    pub strike: Option<f64>,
    /// Years, from `maturity_days / 251`.
    pub maturity: Option<f64>,
    pub rate: Option<f64>,
    pub implied_vol: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ImpliedVolSeries {
    pub observations: Vec<Observation>,
}

impl ImpliedVolSeries {
    pub fn vols(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.implied_vol).collect()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

const PRICE_HEADER: [&str; 6] = ["date", "spot", "price", "strike", "maturity_days", "rate"];
const VOL_HEADER: [&str; 2] = ["date", "implied_vol"];

/// Reads `date,spot,price,strike,maturity_days,rate` (volatilities are
/// implied) or `date,implied_vol` (taken as is).
pub fn read_market_csv(path: &Path) -> Result<ImpliedVolSeries> {
    let file = std::fs::File::open(path)?;
    read_market(file)
}

pub fn read_market<R: std::io::Read>(input: R) -> Result<ImpliedVolSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Line { line: 1, msg: e.to_string() })?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let with_prices = if headers == PRICE_HEADER {
        true
    } else if headers == VOL_HEADER {
        false
    } else {
        return Err(Error::Line {
            line: 1,
            msg: format!(
                "unexpected header {headers:?}; expected {} or {}",
                PRICE_HEADER.join(","),
                VOL_HEADER.join(",")
            ),
        });
    };

    let mut series = ImpliedVolSeries::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Line {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Line {
                    line,
                    msg: format!("column {:?}: {s:?} is not a finite number", headers[i]),
                })
        };
        let date = rec.get(0).unwrap_or("").to_string();
        let obs = if with_prices {
            let (spot, price, strike, days, rate) = (num(1)?, num(2)?, num(3)?, num(4)?, num(5)?);
            let t = days / TRADING_DAYS_PER_YEAR;
            let iv = implied_vol(price, spot, t, strike, rate)
                .map_err(|e| Error::Line { line, msg: e.to_string() })?;
            Observation {
                date,
                spot: Some(spot),
                price: Some(price),
                strike: Some(strike),
                maturity: Some(t),
                rate: Some(rate),
                implied_vol: iv,
            }
        } else {
            let iv = num(1)?;
            if iv <= 0.0 {
                return Err(Error::Line {
                    line,
                    msg: format!("implied volatility {iv} must be positive"),
                });
            }
            Observation {
                date,
                spot: None,
                price: None,
                strike: None,
                maturity: None,
                rate: None,
                implied_vol: iv,
            }
        };
        series.observations.push(obs);
    }
    Ok(series)
}
