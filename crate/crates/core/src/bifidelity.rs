//! Bi-fidelity reconstruction of the stochastic Galerkin solution.
//!
//! Offline, a coarse solver is swept over a grid of admissible volatility
//! models, a small set of important points is picked by pivoted Cholesky on
//! the coarse snapshots, and the fine solver is run at those points only.
//! Online, one coarse solve gives the projection coefficients onto the
//! coarse snapshots, which are then applied to the stored fine snapshots.

use std::borrow::Cow;
use std::cell::Cell;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdsolver::{solve, stability_bound, GridSpec, MomentSurfaces, SolutionField, SolveOptions};
use crate::io;
use crate::orthopoly::{galerkin_tensor, DistributionFamily, GalerkinTensor};
use crate::sgsystem::{build_problem, OptionSpec, TransformedProblem};
use crate::volfit::VolatilityModel;

// ---------------------------------------------------------------------------
// Sample grid

/// Grid of degree-one models `(S00, S10, S01)` on a step `h`, bounded by
/// `S00 <= max_mean`, `S10 <= sqrt(S00 / 2)` and, for the coefficient on
/// the raw uniform input, `S01_raw <= sqrt(12 (S00/2 - S10^2))`. Returned
/// triples use the orthonormal convention `S01 = S01_raw / sqrt(12)`.
pub fn sample_grid(step: f64, max_mean: f64) -> Result<Vec<[f64; 3]>> {
    if !(step > 0.0 && max_mean >= step) {
        return Err(Error::config(format!(
            "sample grid needs 0 < step <= max_mean, got step {step}, max_mean {max_mean}"
        )));
    }
    let eps = 1e-12;
    let sqrt12 = 12f64.sqrt();
    let mut out = Vec::new();
    let mut k = 1;
    while step * k as f64 <= max_mean + eps {
        let s00 = step * k as f64;
        let mut j = 0;
        while step * j as f64 <= (s00 / 2.0).sqrt() + eps {
            let s10 = step * j as f64;
            let room = (12.0 * (s00 / 2.0 - s10 * s10)).max(0.0).sqrt();
            let mut i = 0;
            while step * i as f64 <= room + eps {
                out.push([s00, s10, step * i as f64 / sqrt12]);
                i += 1;
            }
            j += 1;
        }
        k += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BifidConfig {
    pub families: Vec<DistributionFamily>,
    pub vol_degree: u32,
    pub sol_degree: u32,
    pub option: OptionSpec,
    pub low: GridSpec,
    pub high: GridSpec,
    /// Number of high-fidelity solves `A`.
    pub rank: usize,
    /// Sample grid step and upper bound on the mean volatility.
    pub grid_step: f64,
    pub grid_max_mean: f64,
    /// Also drop grid points the high-fidelity grid cannot integrate stably.
    pub reject_high_unstable: bool,
    /// Bytes of low-fidelity snapshots kept in memory during selection; the
    /// rest are recomputed on every pass.
    pub memory_budget: usize,
}

impl BifidConfig {
    pub fn validate(&self) -> Result<()> {
        self.option.validate()?;
        self.low.validate()?;
        self.high.validate()?;
        if self.rank == 0 {
            return Err(Error::config("bifidelity rank A must be at least 1"));
        }
        if self.low.store_every != 1 {
            return Err(Error::config("low-fidelity snapshots keep every time level (store_every = 1)"));
        }
        Ok(())
    }

    /// Field-by-field differences to another configuration, one per line.
    pub fn differences(&self, other: &BifidConfig) -> Vec<String> {
        let mut d = Vec::new();
        macro_rules! cmp {
            ($f:ident) => {
                if self.$f != other.$f {
                    d.push(format!("{}: store has {:?}, requested {:?}", stringify!($f), self.$f, other.$f));
                }
            };
        }
        cmp!(families);
        cmp!(vol_degree);
        cmp!(sol_degree);
        cmp!(option);
        cmp!(low);
        cmp!(high);
        cmp!(rank);
        cmp!(grid_step);
        cmp!(grid_max_mean);
        cmp!(reject_high_unstable);
        d
    }
}

// ---------------------------------------------------------------------------
// Problem template

/// Shared tensor and option; builds the transformed problem for any set of
/// volatility coefficients.
#[derive(Clone, Debug)]
pub struct ProblemTemplate {
    tensor: GalerkinTensor<f64>,
    option: OptionSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NonParabolic,
    LowUnstable,
    HighUnstable,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RejectReason::NonParabolic => "non_parabolic",
            RejectReason::LowUnstable => "low_unstable",
            RejectReason::HighUnstable => "high_unstable",
        })
    }
}

impl ProblemTemplate {
    pub fn new(families: &[DistributionFamily], vol_degree: u32, sol_degree: u32, option: OptionSpec) -> Result<Self> {
        option.validate()?;
        Ok(ProblemTemplate {
            tensor: galerkin_tensor(families, vol_degree, sol_degree)?,
            option,
        })
    }

    pub fn from_tensor(tensor: GalerkinTensor<f64>, option: OptionSpec) -> Result<Self> {
        option.validate()?;
        Ok(ProblemTemplate { tensor, option })
    }

    pub fn tensor(&self) -> &GalerkinTensor<f64> {
        &self.tensor
    }

    pub fn option(&self) -> &OptionSpec {
        &self.option
    }

    pub fn model(&self, z: &[f64]) -> Result<VolatilityModel<f64>> {
        VolatilityModel::new(self.tensor.families().to_vec(), self.tensor.vol_degree(), z.to_vec())
    }

    pub fn problem(&self, z: &[f64]) -> Result<TransformedProblem<f64>> {
        build_problem(&self.tensor, &self.model(z)?, self.option, true)
    }

    /// Admissibility of `z` for the given grids. `high` is checked only
    /// when given.
    pub fn classify(&self, z: &[f64], low: &GridSpec, high: Option<&GridSpec>) -> Result<std::result::Result<TransformedProblem<f64>, RejectReason>> {
        let p = self.problem(z)?;
        if !p.report.parabolic {
            return Ok(Err(RejectReason::NonParabolic));
        }
        if !stability_bound(&p, low).stable {
            return Ok(Err(RejectReason::LowUnstable));
        }
        if let Some(h) = high {
            if !stability_bound(&p, h).stable {
                return Ok(Err(RejectReason::HighUnstable));
            }
        }
        Ok(Ok(p))
    }

    pub fn solve(&self, z: &[f64], grid: &GridSpec) -> Result<SolutionField<f64>> {
        let p = self.problem(z)?;
        if !p.report.parabolic {
            return Err(Error::NonParabolic { min_eig: p.report.min_eig });
        }
        solve(&p, grid, SolveOptions::default())
    }
}

// ---------------------------------------------------------------------------
// Snapshots

/// Indexed collection of flattened solution fields.
pub trait SnapshotSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn snapshot(&self, i: usize) -> Result<Cow<'_, [f64]>>;
}

pub struct InMemorySnapshots(pub Vec<Vec<f64>>);

impl SnapshotSource for InMemorySnapshots {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn snapshot(&self, i: usize) -> Result<Cow<'_, [f64]>> {
        Ok(Cow::Borrowed(&self.0[i]))
    }
}

/// Snapshots produced by the solver. The first ones that fit in the memory
/// budget are kept; the others are recomputed whenever requested.
pub struct SolverSnapshots<'a> {
    template: &'a ProblemTemplate,
    grid: GridSpec,
    points: Vec<Vec<f64>>,
    cache: Vec<Vec<f64>>,
    recomputed: Cell<usize>,
}

impl<'a> SolverSnapshots<'a> {
    pub fn new(template: &'a ProblemTemplate, grid: GridSpec, points: Vec<Vec<f64>>, memory_budget: usize) -> Result<Self> {
        let per = grid.stored_steps().len() * (grid.m_zeta + 1) * template.tensor.sol_set().len() * 8;
        let n_cache = (memory_budget / per.max(1)).min(points.len());
        let mut cache = Vec::with_capacity(n_cache);
        for z in &points[..n_cache] {
            cache.push(template.solve(z, &grid)?.values);
        }
        Ok(SolverSnapshots {
            template,
            grid,
            points,
            cache,
            recomputed: Cell::new(0),
        })
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    /// Number of solves repeated because the snapshot was not cached.
    pub fn recomputed(&self) -> usize {
        self.recomputed.get()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

impl SnapshotSource for SolverSnapshots<'_> {
    fn len(&self) -> usize {
        self.points.len()
    }

    fn snapshot(&self, i: usize) -> Result<Cow<'_, [f64]>> {
        if let Some(v) = self.cache.get(i) {
            return Ok(Cow::Borrowed(v));
        }
        self.recomputed.set(self.recomputed.get() + 1);
        Ok(Cow::Owned(self.template.solve(&self.points[i], &self.grid)?.values))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Greedy selection

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    /// Indices into the snapshot source, in selection order.
    pub indices: Vec<usize>,
    /// Distance of each selected snapshot to the span of the earlier ones.
    pub distances: Vec<f64>,
}

/// Relative residual below which the greedy search stops early.
pub const SELECTION_RTOL: f64 = 1e-12;

/// Pivoted Cholesky on the Gram matrix of the snapshots, without forming
/// it: one pass over the source per pivot. Ties go to the lowest index.
pub fn select_points(source: &dyn SnapshotSource, rank: usize) -> Result<Selection> {
    let n = source.len();
    if n == 0 {
        return Err(Error::config("no admissible sample points to select from"));
    }
    let mut d: Vec<f64> = (0..n)
        .map(|i| source.snapshot(i).map(|v| dot(&v, &v)))
        .collect::<Result<_>>()?;
    let d0 = d.iter().copied().fold(0.0, f64::max);
    if d0 == 0.0 {
        return Err(Error::Numerical("all snapshots are zero".into()));
    }
    let mut l: Vec<Vec<f64>> = Vec::new();
    let mut indices = Vec::new();
    let mut distances = Vec::new();
    let mut chosen = vec![false; n];
    for _ in 0..rank.min(n) {
        let mut p = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, &di) in d.iter().enumerate() {
            if !chosen[i] && di > best {
                best = di;
                p = i;
            }
        }
        if p == usize::MAX || best < SELECTION_RTOL * d0 {
            break;
        }
        let vp = source.snapshot(p)?.into_owned();
        let mut col = vec![0.0; n];
        for (i, c) in col.iter_mut().enumerate() {
            *c = if i == p { dot(&vp, &vp) } else { dot(&source.snapshot(i)?, &vp) };
        }
        let piv = best.sqrt();
        for i in 0..n {
            let mut g = col[i];
            for lk in &l {
                g -= lk[i] * lk[p];
            }
            col[i] = g / piv;
        }
        for i in 0..n {
            d[i] = (d[i] - col[i] * col[i]).max(0.0);
        }
        d[p] = 0.0;
        chosen[p] = true;
        l.push(col);
        indices.push(p);
        distances.push(piv);
    }
    Ok(Selection { indices, distances })
}

// ---------------------------------------------------------------------------
// Reconstruction

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    /// Normal equations with the Cholesky factor of the Gram matrix.
    Gram,
    /// Least squares through a QR factorization of the low snapshots.
    Qr,
}

/// Low-fidelity basis with its Gram matrix and factors.
#[derive(Clone, Debug)]
pub struct Projector {
    low: DMatrix<f64>,
    gram: DMatrix<f64>,
    chol: DMatrix<f64>,
    qr: Option<(DMatrix<f64>, DMatrix<f64>)>,
    method: ProjectionMethod,
    jitter: f64,
}

/// Largest deviation of the projection coefficients from the unit vector
/// at stored points tolerated before switching to QR.
pub const GRAM_EXACTNESS_TOL: f64 = 1e-10;

impl Projector {
    /// `low` holds one snapshot per column.
    pub fn new(low: DMatrix<f64>) -> Result<Self> {
        let a = low.ncols();
        let gram = low.tr_mul(&low);
        let (chol, jitter) = cholesky_with_jitter(&gram)?;
        let mut p = Projector {
            low,
            gram,
            chol,
            qr: None,
            method: ProjectionMethod::Gram,
            jitter,
        };
        let mut worst: f64 = 0.0;
        for j in 0..a {
            let c = p.gram_solve(&p.gram.column(j).into_owned());
            for (i, ci) in c.iter().enumerate() {
                worst = worst.max((ci - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        if jitter > 0.0 || worst > GRAM_EXACTNESS_TOL {
            p.enable_qr();
        }
        Ok(p)
    }

    fn enable_qr(&mut self) {
        let qr = self.low.clone().qr();
        self.qr = Some((qr.q(), qr.r()));
        self.method = ProjectionMethod::Qr;
    }

    pub fn method(&self) -> ProjectionMethod {
        self.method
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn rank(&self) -> usize {
        self.low.ncols()
    }

    fn gram_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        self.chol
            .transpose()
            .solve_upper_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Coefficients of the best approximation of `v` in the span of the
    /// low snapshots.
    pub fn coefficients(&self, v: &[f64]) -> Result<DVector<f64>> {
        Ok(self.project(v)?.0)
    }

    /// Coefficients together with the relative residual, the latter from
    /// `||v||^2 - ||P v||^2` so the span is not rebuilt.
    pub fn project(&self, v: &[f64]) -> Result<(DVector<f64>, f64)> {
        if v.len() != self.low.nrows() {
            return Err(Error::StoreMismatch(format!(
                "low-fidelity field has {} values, store expects {}",
                v.len(),
                self.low.nrows()
            )));
        }
        let v = DVector::from_column_slice(v);
        let vv = v.norm_squared();
        let (c, captured) = match &self.qr {
            Some((q, r)) => {
                let y = q.tr_mul(&v);
                let c = r
                    .solve_upper_triangular(&y)
                    .ok_or_else(|| Error::Numerical("singular R factor".into()))?;
                (c, y.norm_squared())
            }
            None => {
                let b = self.low.tr_mul(&v);
                let c = self.gram_solve(&b);
                let captured = b.dot(&c);
                (c, captured)
            }
        };
        let residual = ((vv - captured).max(0.0) / vv.max(f64::MIN_POSITIVE)).sqrt();
        Ok((c, residual))
    }

    /// `||v - sum c_k v_k|| / ||v||`.
    pub fn residual(&self, v: &[f64], c: &DVector<f64>) -> f64 {
        let approx = &self.low * c;
        let num: f64 = v.iter().zip(approx.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = v.iter().map(|a| a * a).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

fn cholesky_with_jitter(g: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = g.clone().cholesky() {
        return Ok((c.l(), 0.0));
    }
    let jitter = 1e-12 * g.trace() / g.nrows() as f64;
    let shifted = g + DMatrix::<f64>::identity(g.nrows(), g.ncols()) * jitter;
    shifted
        .cholesky()
        .map(|c| (c.l(), jitter))
        .ok_or_else(|| Error::Numerical("Gram matrix is not positive definite even after jitter".into()))
}

// ---------------------------------------------------------------------------
// Store

pub const STORE_FORMAT: &str = "sgbs-bifid-store";
pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub point: Vec<f64>,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub version: u32,
    pub config: BifidConfig,
    /// Selected models in selection order.
    pub points: Vec<Vec<f64>>,
    /// Their positions in the full sample grid.
    pub grid_indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub method: ProjectionMethod,
    pub jitter: f64,
    pub grid_points: usize,
    pub admissible_points: usize,
    pub rejected: usize,
    pub low_len: usize,
    pub high_len: usize,
    pub seconds_sweep: f64,
    pub seconds_select: f64,
    pub seconds_high: f64,
}

#[derive(Clone, Debug)]
pub struct BifidStore {
    pub manifest: StoreManifest,
    pub template: ProblemTemplate,
    pub projector: Projector,
    /// One high-fidelity snapshot per column.
    pub high: DMatrix<f64>,
    pub high_steps: Vec<usize>,
    pub rejections: Vec<Rejection>,
}

#[derive(Serialize, Deserialize)]
struct MatrixManifest {
    format: String,
    rows: usize,
    cols: usize,
    steps: Vec<usize>,
}

fn write_matrix(path: &Path, m: &DMatrix<f64>, steps: &[usize]) -> Result<()> {
    io::write_array(
        path,
        &MatrixManifest {
            format: "column-major".into(),
            rows: m.nrows(),
            cols: m.ncols(),
            steps: steps.to_vec(),
        },
        m.as_slice(),
    )
}

fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let (mm, data): (MatrixManifest, Vec<f64>) = io::read_array(path)?;
    if mm.format != "column-major" || data.len() != mm.rows * mm.cols {
        return Err(Error::data(format!("{}: malformed matrix file", path.display())));
    }
    Ok((DMatrix::from_vec(mm.rows, mm.cols, data), mm.steps))
}

impl BifidStore {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_toml(&dir.join("manifest.toml"), &self.manifest)?;
        write_matrix(&dir.join("low.bin"), &self.projector.low, &[])?;
        write_matrix(&dir.join("high.bin"), &self.high, &self.high_steps)?;
        write_matrix(&dir.join("gram.bin"), &self.projector.gram, &[])?;
        write_matrix(&dir.join("gram_cholesky.bin"), &self.projector.chol, &[])?;
        let mut w = csv::Writer::from_path(dir.join("rejections.csv"))
            .map_err(|e| Error::data(e.to_string()))?;
        w.write_record(["index", "point", "reason"]).map_err(|e| Error::data(e.to_string()))?;
        for r in &self.rejections {
            let pt: Vec<String> = r.point.iter().map(|v| v.to_string()).collect();
            w.write_record([r.index.to_string(), pt.join(" "), r.reason.to_string()])
                .map_err(|e| Error::data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: StoreManifest = io::read_toml(&dir.join("manifest.toml"))?;
        if manifest.format != STORE_FORMAT || manifest.version != STORE_FORMAT_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported store {} v{}",
                dir.display(),
                manifest.format,
                manifest.version
            )));
        }
        let c = &manifest.config;
        let template = ProblemTemplate::new(&c.families, c.vol_degree, c.sol_degree, c.option)?;
        let (low, _) = read_matrix(&dir.join("low.bin"))?;
        let (high, high_steps) = read_matrix(&dir.join("high.bin"))?;
        let (gram, _) = read_matrix(&dir.join("gram.bin"))?;
        let (chol, _) = read_matrix(&dir.join("gram_cholesky.bin"))?;
        if low.ncols() != high.ncols() || gram.nrows() != low.ncols() || chol.nrows() != low.ncols() {
            return Err(Error::data(format!("{}: store arrays disagree on the rank", dir.display())));
        }
        let mut projector = Projector {
            low,
            gram,
            chol,
            qr: None,
            method: ProjectionMethod::Gram,
            jitter: manifest.jitter,
        };
        if manifest.method == ProjectionMethod::Qr {
            projector.enable_qr();
        }
        Ok(BifidStore {
            manifest,
            template,
            projector,
            high,
            high_steps,
            rejections: Vec::new(),
        })
    }

    /// `StoreMismatch` listing every differing field.
    pub fn check_config(&self, requested: &BifidConfig) -> Result<()> {
        let d = self.manifest.config.differences(requested);
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::StoreMismatch(d.join("\n")))
        }
    }
}

/// Progress hook for the offline phase: `(stage, done, total)`.
pub type Progress<'a> = &'a dyn Fn(&str, usize, usize);

pub fn offline(config: &BifidConfig, progress: Option<Progress<'_>>) -> Result<BifidStore> {
    config.validate()?;
    let template = ProblemTemplate::new(&config.families, config.vol_degree, config.sol_degree, config.option)?;
    let grid = sample_grid(config.grid_step, config.grid_max_mean)?;
    offline_with_points(config, template, grid, progress)
}

/// Offline phase over an explicit list of candidate models.
pub fn offline_with_points(
    config: &BifidConfig,
    template: ProblemTemplate,
    candidates: Vec<[f64; 3]>,
    progress: Option<Progress<'_>>,
) -> Result<BifidStore> {
    config.validate()?;
    let report = |s: &str, a: usize, b: usize| {
        if let Some(p) = progress {
            p(s, a, b)
        }
    };
    let t0 = Instant::now();
    let high_check = config.reject_high_unstable.then_some(&config.high);
    let mut rejections = Vec::new();
    let mut admissible: Vec<Vec<f64>> = Vec::new();
    let mut grid_index: Vec<usize> = Vec::new();
    for (i, z) in candidates.iter().enumerate() {
        match template.classify(z, &config.low, high_check)? {
            Ok(_) => {
                admissible.push(z.to_vec());
                grid_index.push(i);
            }
            Err(reason) => rejections.push(Rejection {
                index: i,
                point: z.to_vec(),
                reason,
            }),
        }
    }
    report("sweep", admissible.len(), candidates.len());
    let source = SolverSnapshots::new(&template, config.low, admissible, config.memory_budget)?;
    let seconds_sweep = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let sel = select_points(&source, config.rank)?;
    report("select", sel.indices.len(), config.rank);
    if sel.indices.len() < config.rank {
        return Err(Error::Numerical(format!(
            "only {} linearly independent snapshots found; rank {} requested",
            sel.indices.len(),
            config.rank
        )));
    }
    let low_len = source.snapshot(0)?.len();
    let mut low = DMatrix::<f64>::zeros(low_len, sel.indices.len());
    for (c, &i) in sel.indices.iter().enumerate() {
        low.set_column(c, &DVector::from_column_slice(&source.snapshot(i)?));
    }
    let seconds_select = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let points: Vec<Vec<f64>> = sel.indices.iter().map(|&i| source.points()[i].clone()).collect();
    let mut high_cols = Vec::with_capacity(points.len());
    let mut high_steps = Vec::new();
    for (k, z) in points.iter().enumerate() {
        let f = template.solve(z, &config.high)?;
        high_steps = f.steps.clone();
        high_cols.push(f.values);
        report("high", k + 1, points.len());
    }
    let high_len = high_cols[0].len();
    let high = DMatrix::from_fn(high_len, high_cols.len(), |r, c| high_cols[c][r]);
    let seconds_high = t2.elapsed().as_secs_f64();

    let projector = Projector::new(low)?;
    let manifest = StoreManifest {
        format: STORE_FORMAT.into(),
        version: STORE_FORMAT_VERSION,
        config: config.clone(),
        grid_indices: sel.indices.iter().map(|&i| grid_index[i]).collect(),
        points,
        distances: sel.distances,
        method: projector.method(),
        jitter: projector.jitter(),
        grid_points: candidates.len(),
        admissible_points: source.len(),
        rejected: rejections.len(),
        low_len,
        high_len,
        seconds_sweep,
        seconds_select,
        seconds_high,
    };
    Ok(BifidStore {
        manifest,
        template,
        projector,
        high,
        high_steps,
        rejections,
    })
}

/// Result of one online reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub field: SolutionField<f64>,
    pub coefficients: Vec<f64>,
    /// Relative distance of the low-fidelity field to the snapshot span.
    pub residual: f64,
    pub seconds: f64,
}

impl Reconstruction {
    pub fn moments(&self) -> MomentSurfaces {
        self.field.moments()
    }
}

pub fn online(store: &BifidStore, z: &[f64]) -> Result<Reconstruction> {
    let start = Instant::now();
    let cfg = &store.manifest.config;
    let (p, reason) = match store.template.classify(z, &cfg.low, None)? {
        Ok(p) => (p, None),
        Err(r) => (store.template.problem(z)?, Some(r)),
    };
    match reason {
        Some(RejectReason::NonParabolic) => return Err(Error::NonParabolic { min_eig: p.report.min_eig }),
        Some(_) => {
            let b = stability_bound(&p, &cfg.low);
            return Err(Error::Unstable {
                dtau: b.dtau,
                dtau_max: b.dtau_max,
                n_tau_min: b.n_tau_min,
            });
        }
        None => {}
    }
    let low = solve(&p, &cfg.low, SolveOptions::default())?;
    let (c, residual) = store.projector.project(&low.values)?;
    let values = (&store.high * &c).as_slice().to_vec();
    let field = SolutionField {
        grid: cfg.high,
        option: cfg.option,
        n_coef: low.n_coef,
        steps: store.high_steps.clone(),
        values,
        seconds: 0.0,
    };
    Ok(Reconstruction {
        field,
        coefficients: c.iter().copied().collect(),
        residual,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Benchmark

/// Random degree-one model inside the sample-grid domain.
pub fn sample_model(rng: &mut impl Rng, max_mean: f64) -> [f64; 3] {
    let s00 = rng.random_range(0.05..=max_mean);
    let s10 = rng.random_range(0.0..=(s00 / 2.0).sqrt());
    let raw = rng.random_range(0.0..=(12.0 * (s00 / 2.0 - s10 * s10)).max(0.0).sqrt());
    [s00, s10, raw / 12f64.sqrt()]
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    pub model: Vec<f64>,
    pub seconds_high: f64,
    pub seconds_online: f64,
    pub speedup: f64,
    pub residual: f64,
    pub mean_max_abs_err: f64,
    pub mean_mean_abs_err: f64,
    pub mean_near_strike_mae: f64,
    pub var_max_abs_err: f64,
    pub var_near_strike_mae: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchSummary {
    pub seed: u64,
    pub skipped: usize,
    pub records: Vec<BenchRecord>,
    pub mean_speedup: f64,
    pub mean_near_strike_mae: f64,
    pub var_near_strike_mae: f64,
}

/// `S` window counted as near the strike.
pub const NEAR_STRIKE: (f64, f64) = (0.8, 1.2);

fn surface_errors(a: &MomentSurfaces, b: &MomentSurfaces) -> (f64, f64, f64, f64, f64) {
    let lo = NEAR_STRIKE.0 * a.strike;
    let hi = NEAR_STRIKE.1 * a.strike;
    let (mut mmax, mut msum, mut vmax) = (0.0f64, 0.0, 0.0f64);
    let (mut near_m, mut near_v, mut near_n) = (0.0, 0.0, 0usize);
    let n = a.n_nodes();
    for k in 0..a.mean.len() {
        let em = (a.mean[k] - b.mean[k]).abs();
        let ev = (a.variance[k] - b.variance[k]).abs();
        mmax = mmax.max(em);
        vmax = vmax.max(ev);
        msum += em;
        let s = a.s[k % n];
        if s >= lo && s <= hi {
            near_m += em;
            near_v += ev;
            near_n += 1;
        }
    }
    let near_n = near_n.max(1) as f64;
    (mmax, msum / a.mean.len() as f64, near_m / near_n, vmax, near_v / near_n)
}

pub fn bench(store: &BifidStore, models: usize, seed: u64) -> Result<BenchSummary> {
    let cfg = &store.manifest.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut skipped = 0;
    let mut records = Vec::with_capacity(models);
    while records.len() < models {
        let z = sample_model(&mut rng, cfg.grid_max_mean);
        match store.template.classify(&z, &cfg.low, Some(&cfg.high))? {
            Ok(_) => {}
            Err(_) => {
                skipped += 1;
                if skipped > 100 * models.max(1) {
                    return Err(Error::Numerical("too many inadmissible random models".into()));
                }
                continue;
            }
        }
        let t = Instant::now();
        let direct = store.template.solve(&z, &cfg.high)?;
        let seconds_high = t.elapsed().as_secs_f64();
        let rec = online(store, &z)?;
        let a = direct.moments();
        let b = rec.moments();
        let (mmax, mmean, mnear, vmax, vnear) = surface_errors(&a, &b);
        records.push(BenchRecord {
            model: z.to_vec(),
            seconds_high,
            seconds_online: rec.seconds,
            speedup: seconds_high / rec.seconds.max(1e-12),
            residual: rec.residual,
            mean_max_abs_err: mmax,
            mean_mean_abs_err: mmean,
            mean_near_strike_mae: mnear,
            var_max_abs_err: vmax,
            var_near_strike_mae: vnear,
        });
    }
    let r = records.len().max(1) as f64;
    Ok(BenchSummary {
        seed,
        skipped,
        mean_speedup: records.iter().map(|x| x.speedup).sum::<f64>() / r,
        mean_near_strike_mae: records.iter().map(|x| x.mean_near_strike_mae).sum::<f64>() / r,
        var_near_strike_mae: records.iter().map(|x| x.var_near_strike_mae).sum::<f64>() / r,
        records,
    })
}
