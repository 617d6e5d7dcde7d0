//! Run configuration: a TOML file whose keys can each be overridden on the
//! command line with `--set section.key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sgbs::bifidelity::BifidConfig;
use sgbs::{DistributionFamily, Error, GridSpec, OptionSpec, Result, VolatilityModel};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub option: OptionSection,
    pub solver: SolverSection,
    pub bifid: BifidSection,
    pub fit: FitSection,
    pub bench: BenchSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Coefficients multiply the orthonormal polynomials.
    Orthonormal,
    /// Degree-one coefficients multiply the raw inputs.
    Raw,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub families: Vec<String>,
    pub vol_degree: u32,
    pub coefficients: Vec<f64>,
    pub convention: Convention,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            families: vec!["normal".into(), "uniform".into()],
            vol_degree: 1,
            coefficients: vec![0.5, 0.2, 0.1],
            convention: Convention::Orthonormal,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptionSection {
    pub strike: f64,
    pub maturity_days: f64,
    pub rate: f64,
}

impl Default for OptionSection {
    fn default() -> Self {
        OptionSection {
            strike: 100.0,
            maturity_days: 20.0,
            rate: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub sol_degree: u32,
    pub m_zeta: usize,
    pub n_tau: usize,
    pub store_every: usize,
    pub allow_unstable: bool,
    pub allow_nonparabolic: bool,
    pub precision: Precision,
    /// Also write the raw chaos coefficients next to the surfaces.
    pub raw_dump: bool,
    /// Optional tensor cache to load instead of rebuilding.
    pub tensor_cache: Option<String>,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            sol_degree: 5,
            m_zeta: 200,
            n_tau: 319,
            store_every: 1,
            allow_unstable: false,
            allow_nonparabolic: false,
            precision: Precision::F64,
            raw_dump: false,
            tensor_cache: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BifidSection {
    pub low_m_zeta: usize,
    pub low_n_tau: usize,
    pub high_m_zeta: usize,
    pub high_n_tau: usize,
    pub high_store_every: usize,
    pub rank: usize,
    pub grid_step: f64,
    pub grid_max_mean: f64,
    pub reject_high_unstable: bool,
    pub memory_budget_mib: usize,
}

impl Default for BifidSection {
    fn default() -> Self {
        BifidSection {
            low_m_zeta: 50,
            low_n_tau: 150,
            high_m_zeta: 175,
            high_n_tau: 1600,
            high_store_every: 10,
            rank: 20,
            grid_step: 0.05,
            grid_max_mean: 0.8,
            reject_high_unstable: true,
            memory_budget_mib: 1024,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub mode: sgbs::FitMode,
    pub bins: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            mode: sgbs::FitMode::MeanVariance,
            bins: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub models: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { models: 20, seed: 1 }
    }
}

/// Reads the file (if any), applies `key=value` overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    toml::Value::Table(value)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn apply_override(root: &mut toml::Table, text: &str) -> Result<()> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} must look like section.key")));
    }
    let raw = raw.trim();
    // Values are TOML literals; anything that does not parse is a string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let section = root
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match section {
        toml::Value::Table(t) => {
            t.insert(parts[1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("{} is not a section", parts[0]))),
    }
}

impl RunConfig {
    pub fn families(&self) -> Result<Vec<DistributionFamily>> {
        self.model.families.iter().map(|s| s.parse()).collect()
    }

    pub fn option(&self) -> Result<OptionSpec> {
        let o = OptionSpec::call(self.option.strike, self.option.maturity_days, self.option.rate);
        o.validate()?;
        Ok(o)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.solver.m_zeta, self.solver.n_tau).with_store_every(self.solver.store_every)
    }

    pub fn model_from(&self, coefficients: &[f64]) -> Result<VolatilityModel<f64>> {
        let fams = self.families()?;
        match self.model.convention {
            Convention::Orthonormal => VolatilityModel::new(fams, self.model.vol_degree, coefficients.to_vec()),
            Convention::Raw => {
                if self.model.vol_degree != 1 {
                    return Err(Error::Config("raw convention is only defined for vol_degree = 1".into()));
                }
                VolatilityModel::from_raw_linear(fams, coefficients)
            }
        }
    }

    pub fn model(&self) -> Result<VolatilityModel<f64>> {
        self.model_from(&self.model.coefficients)
    }

    pub fn bifid(&self) -> Result<BifidConfig> {
        let b = &self.bifid;
        let cfg = BifidConfig {
            families: self.families()?,
            vol_degree: self.model.vol_degree,
            sol_degree: self.solver.sol_degree,
            option: self.option()?,
            low: GridSpec::new(b.low_m_zeta, b.low_n_tau),
            high: GridSpec::new(b.high_m_zeta, b.high_n_tau).with_store_every(b.high_store_every),
            rank: b.rank,
            grid_step: b.grid_step,
            grid_max_mean: b.grid_max_mean,
            reject_high_unstable: b.reject_high_unstable,
            memory_budget: b.memory_budget_mib.saturating_mul(1 << 20),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
