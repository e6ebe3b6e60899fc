//! Experiment configuration files.
//!
//! ```toml
//! experiment = "check:ondiag_upper"
//! seed = 7
//! workers = 1
//!
//! [model]
//! d = 1
//! alpha = 1.0
//! kappa1 = 1.0
//! kappa2 = 1.0
//! symbol = { name = "constant" }
//!
//! [parameters]
//! rho = 8
//! t_grid = [1.0, 2.0, 4.0, 8.0]
//! ```
//!
//! Unknown keys are rejected at every level. Missing parameters take their
//! defaults; the resolved configuration (all parameters explicit) is what the
//! runner echoes into the output directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::bound_checks::{
    ConstrainedParams, ExitTimeParams, HitParams, HolderParams, LevyParams, NearDiagParams, OndiagParams,
    SpacetimeParams, TruncatedParams,
};
use crate::convergence_lab::ConvergeParams;
use crate::error::{Error, Result};
use crate::kernel_model::ModelSpec;
use crate::lattice_generator::{BoundaryMode, RateConvention};

/// Names accepted after `check:`.
pub const CHECK_NAMES: [&str; 9] = [
    "ondiag_upper",
    "near_diag_lower",
    "truncated_offdiag",
    "exit_time",
    "hit_bound",
    "constrained_lower",
    "levy_system",
    "spacetime_exit",
    "holder",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Experiment {
    Simulate,
    Density,
    Check(String),
    Converge,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Experiment::Simulate => write!(f, "simulate"),
            Experiment::Density => write!(f, "density"),
            Experiment::Check(name) => write!(f, "check:{name}"),
            Experiment::Converge => write!(f, "converge"),
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulate" => Ok(Experiment::Simulate),
            "density" => Ok(Experiment::Density),
            "converge" => Ok(Experiment::Converge),
            _ => match s.strip_prefix("check:") {
                Some(name) if CHECK_NAMES.contains(&name) => Ok(Experiment::Check(name.to_string())),
                Some(name) => Err(Error::Config(format!(
                    "unknown check `{name}`; expected one of {}",
                    CHECK_NAMES.join(", ")
                ))),
                None => Err(Error::Config(format!(
                    "unknown experiment `{s}`; expected simulate, density, converge or check:<name>"
                ))),
            },
        }
    }
}

impl Serialize for Experiment {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Experiment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which chain `simulate` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    /// `Y` on `ℤ^d`.
    Unit,
    /// `V = ρ⁻¹ Y_{ρ^α t}`, truncated when `lambda` is set.
    Rescaled,
    /// Form-normalized chain on `S_n`.
    Form,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateParams {
    pub chain: ChainKind,
    pub scale: u32,
    pub lambda: Option<f64>,
    pub horizon: f64,
    pub paths: usize,
    /// Start point in real coordinates; `None` means the origin.
    pub start: Option<Vec<f64>>,
}

impl Default for SimulateParams {
    fn default() -> Self {
        SimulateParams {
            chain: ChainKind::Rescaled,
            scale: 4,
            lambda: None,
            horizon: 1.0,
            paths: 16,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityParams {
    pub scale: u32,
    pub radius: f64,
    pub mode: BoundaryMode,
    pub convention: RateConvention,
    pub lambda: Option<f64>,
    pub times: Vec<f64>,
    pub source: Option<Vec<f64>>,
}

impl Default for DensityParams {
    fn default() -> Self {
        DensityParams {
            scale: 4,
            radius: 8.0,
            mode: BoundaryMode::Killed,
            convention: RateConvention::UnitRate,
            lambda: None,
            times: vec![1.0],
            source: None,
        }
    }
}

/// Parameters after defaults are filled in, one variant per experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Parameters {
    Simulate(SimulateParams),
    Density(DensityParams),
    Ondiag(OndiagParams),
    NearDiag(NearDiagParams),
    Truncated(TruncatedParams),
    ExitTime(ExitTimeParams),
    Hit(HitParams),
    Constrained(ConstrainedParams),
    Levy(LevyParams),
    Spacetime(SpacetimeParams),
    Holder(HolderParams),
    Converge(ConvergeParams),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Experiment,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_workers")]
    workers: usize,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    model: ModelSpec,
    #[serde(default)]
    parameters: Option<toml::Table>,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub parameters: Parameters,
}

fn typed<T: DeserializeOwned>(table: Option<toml::Table>) -> Result<T> {
    toml::Value::Table(table.unwrap_or_default())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[parameters]: {}", e.message())))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let p = raw.parameters;
        let parameters = match &raw.experiment {
            Experiment::Simulate => Parameters::Simulate(typed(p)?),
            Experiment::Density => Parameters::Density(typed(p)?),
            Experiment::Converge => Parameters::Converge(typed(p)?),
            Experiment::Check(name) => match name.as_str() {
                "ondiag_upper" => Parameters::Ondiag(typed(p)?),
                "near_diag_lower" => Parameters::NearDiag(typed(p)?),
                "truncated_offdiag" => Parameters::Truncated(typed(p)?),
                "exit_time" => Parameters::ExitTime(typed(p)?),
                "hit_bound" => Parameters::Hit(typed(p)?),
                "constrained_lower" => Parameters::Constrained(typed(p)?),
                "levy_system" => Parameters::Levy(typed(p)?),
                "spacetime_exit" => Parameters::Spacetime(typed(p)?),
                "holder" => Parameters::Holder(typed(p)?),
                other => return Err(Error::Config(format!("unknown check `{other}`"))),
            },
        };
        Ok(ExperimentConfig {
            experiment: raw.experiment,
            seed: raw.seed,
            workers: raw.workers,
            output_dir: raw.output_dir,
            model: raw.model,
            parameters,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}
