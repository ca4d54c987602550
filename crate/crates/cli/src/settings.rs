//! Effective settings of each command: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use hrl_core::acpi::AcpiConfig;
use hrl_core::admm::AdmmConfig;
use hrl_core::data::{FileFormat, Schema};
use hrl_core::grouping::EvaluateConfig;
use hrl_core::sim::{CoverageConfig, PolicyValueConfig, SimSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cli::{CoverageArgs, DataArgs, EvaluateArgs, IterateArgs, ModelArgs, PolicyValueArgs, SimulateArgs};
use crate::error::CliError;

pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigIo {
        path: path.to_path_buf(),
        source,
    })?;
    // JSON is accepted so the `config` block of any result can be replayed
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn parse<T: std::str::FromStr<Err = hrl_core::Error>>(s: &str) -> Result<T, CliError> {
    Ok(s.parse()?)
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Config(format!("missing required {flag} (or its key in the config file)")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub basis: String,
    pub penalty: String,
    /// Filled with the command's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouping: Option<String>,
    pub theta_mode: String,
    pub rho: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub ridge: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let admm = AdmmConfig::default();
        Self {
            basis: "identity".into(),
            penalty: "mcp:lambda=0.1:eta=1.5".into(),
            grouping: None,
            theta_mode: "refit".into(),
            rho: admm.rho,
            eps: admm.eps,
            max_iters: admm.max_iters,
            ridge: admm.ridge,
        }
    }
}

impl ModelSettings {
    fn apply(&mut self, a: &ModelArgs, default_grouping: &str) {
        set(&mut self.basis, a.basis.clone());
        set(&mut self.penalty, a.penalty.clone());
        set_opt(&mut self.grouping, a.grouping.clone());
        set(&mut self.theta_mode, a.theta_mode.clone());
        set(&mut self.rho, a.rho);
        set(&mut self.eps, a.eps);
        set(&mut self.max_iters, a.max_iters);
        set(&mut self.ridge, a.ridge);
        if self.grouping.is_none() {
            self.grouping = Some(default_grouping.into());
        }
    }

    pub fn evaluate_config(&self, level: f64) -> Result<EvaluateConfig, CliError> {
        let admm = AdmmConfig {
            rho: self.rho,
            eps: self.eps,
            max_iters: self.max_iters,
            ridge: self.ridge,
            ..AdmmConfig::default()
        };
        admm.validate()?;
        if !(level > 0.0 && level < 1.0) {
            return Err(CliError::Config(format!("level must lie in (0, 1), got {level}")));
        }
        let grouping = self.grouping.as_deref().unwrap_or("fused");
        Ok(EvaluateConfig {
            basis: parse(&self.basis)?,
            penalty: parse(&self.penalty)?,
            admm,
            grouping: parse(grouping)?,
            theta_mode: parse(&self.theta_mode)?,
            level,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<FileFormat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    pub schema: Schema,
}

impl DataSettings {
    fn apply(&mut self, a: &DataArgs) {
        set_opt(&mut self.path, a.data.clone());
        set_opt(&mut self.format, a.data_format.map(Into::into));
        set_opt(&mut self.gamma, a.gamma);
        set_opt(&mut self.reference, a.reference.clone());
        set(&mut self.schema.action_base, a.action_base);
        set_opt(&mut self.schema.n_actions, a.n_actions);
        if self.format.is_none() {
            self.format = self.path.as_deref().map(format_for);
        }
    }
}

/// JSONL for `.jsonl`/`.ndjson` files, CSV otherwise.
pub fn format_for(path: &Path) -> FileFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("ndjson") => FileFormat::Jsonl,
        _ => FileFormat::Csv,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    pub level: f64,
    pub data: DataSettings,
    pub model: ModelSettings,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            policy: None,
            level: 0.95,
            data: DataSettings::default(),
            model: ModelSettings::default(),
        }
    }
}

impl EvaluateSettings {
    pub fn resolve(mut self, a: &EvaluateArgs) -> Self {
        self.data.apply(&a.data);
        set_opt(&mut self.policy, a.policy.clone());
        set(&mut self.level, a.level);
        self.model.apply(&a.model, "fused");
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterateSettings {
    pub max_outer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_k: Option<usize>,
    pub tol_v: f64,
    pub intercept: bool,
    pub optimizer: hrl_core::acpi::OptimizerConfig,
    pub data: DataSettings,
    pub model: ModelSettings,
}

impl Default for IterateSettings {
    fn default() -> Self {
        let acpi = AcpiConfig::default();
        Self {
            max_outer: acpi.max_outer_iters,
            force_k: acpi.force_k,
            tol_v: acpi.tol_v,
            intercept: acpi.intercept,
            optimizer: acpi.optimizer,
            data: DataSettings::default(),
            model: ModelSettings::default(),
        }
    }
}

impl IterateSettings {
    pub fn resolve(mut self, a: &IterateArgs) -> Self {
        self.data.apply(&a.data);
        set(&mut self.max_outer, a.max_outer);
        set_opt(&mut self.force_k, a.force_k);
        set(&mut self.tol_v, a.tol_v);
        if a.no_intercept {
            self.intercept = false;
        }
        self.model.apply(&a.model, "fused");
        self
    }

    pub fn acpi_config(&self) -> Result<AcpiConfig, CliError> {
        let cfg = AcpiConfig {
            max_outer_iters: self.max_outer,
            tol_v: self.tol_v,
            optimizer: self.optimizer,
            eval: self.model.evaluate_config(0.95)?,
            force_k: self.force_k,
            intercept: self.intercept,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub sim: SimSpec,
}

impl SimulateSettings {
    pub fn resolve(mut self, a: &SimulateArgs) -> Self {
        set(&mut self.sim.n_per_group, a.n_per_group);
        set(&mut self.sim.horizon, a.horizon);
        set(&mut self.sim.seed, a.seed);
        set(&mut self.sim.gamma, a.gamma);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageSettings {
    /// Trajectories per group, one grid axis.
    pub n: Vec<usize>,
    /// Trajectory lengths, the other axis.
    pub t: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub truth_rollouts: usize,
    pub reference_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    pub model: ModelSettings,
    pub sim: SimSpec,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        let cov = CoverageConfig::default();
        Self {
            n: vec![20, 50, 100],
            t: vec![10, 30, 40],
            reps: cov.reps,
            seed: cov.seed,
            level: cov.level,
            truth_rollouts: cov.truth_rollouts,
            reference_size: cov.reference_size,
            policy: None,
            model: ModelSettings::default(),
            sim: cov.sim,
        }
    }
}

/// Parse `n=20,50,100 t=10,30,40` tokens into the two axes.
pub fn parse_grid(tokens: &[String]) -> Result<(Option<Vec<usize>>, Option<Vec<usize>>), CliError> {
    let mut n = None;
    let mut t = None;
    for tok in tokens {
        let (key, values) = tok
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--grid entry {tok:?} is not axis=values")))?;
        let parsed = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&x| x > 0)
                    .ok_or_else(|| CliError::Config(format!("--grid value {v:?} is not a positive integer")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        match key {
            "n" => n = Some(parsed),
            "t" => t = Some(parsed),
            other => return Err(CliError::Config(format!("--grid axis {other:?} is neither n nor t"))),
        }
    }
    Ok((n, t))
}

impl CoverageSettings {
    pub fn resolve(mut self, a: &CoverageArgs) -> Result<Self, CliError> {
        if let Some(tokens) = &a.grid {
            let (n, t) = parse_grid(tokens)?;
            set(&mut self.n, n);
            set(&mut self.t, t);
        }
        set(&mut self.reps, a.reps);
        set(&mut self.seed, a.seed);
        set(&mut self.level, a.level);
        set(&mut self.truth_rollouts, a.truth_rollouts);
        set(&mut self.reference_size, a.reference_size);
        set_opt(&mut self.policy, a.policy.clone());
        self.model.apply(&a.model, "kmeans:k=2");
        Ok(self)
    }

    pub fn coverage_config(&self, policy: hrl_core::data::Policy) -> Result<CoverageConfig, CliError> {
        if self.n.is_empty() || self.t.is_empty() {
            return Err(CliError::Config("coverage grid has an empty axis".into()));
        }
        Ok(CoverageConfig {
            grid: self.n.iter().flat_map(|&n| self.t.iter().map(move |&t| (n, t))).collect(),
            reps: self.reps,
            level: self.level,
            eval: self.model.evaluate_config(self.level)?,
            policy,
            seed: self.seed,
            reference_size: self.reference_size,
            truth_rollouts: self.truth_rollouts,
            sim: self.sim.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyValueSettings {
    pub rollouts: usize,
    pub horizon: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub max_outer: usize,
    pub tol_v: f64,
    pub model: ModelSettings,
    /// Training data; its seed is replaced by the run seed.
    pub sim: SimSpec,
}

impl Default for PolicyValueSettings {
    fn default() -> Self {
        let values = PolicyValueConfig::default();
        let acpi = AcpiConfig::default();
        Self {
            rollouts: 500,
            horizon: values.horizon,
            repetitions: values.repetitions,
            seed: values.seed,
            max_outer: acpi.max_outer_iters,
            tol_v: acpi.tol_v,
            model: ModelSettings::default(),
            sim: SimSpec::default(),
        }
    }
}

impl PolicyValueSettings {
    pub fn resolve(mut self, a: &PolicyValueArgs) -> Self {
        set(&mut self.rollouts, a.rollouts);
        set(&mut self.horizon, a.horizon);
        set(&mut self.repetitions, a.repetitions);
        set(&mut self.seed, a.seed);
        set(&mut self.max_outer, a.max_outer);
        set(&mut self.sim.n_per_group, a.n_per_group);
        set(&mut self.sim.horizon, a.data_t);
        self.sim.seed = self.seed;
        self.model.apply(&a.model, "kmeans:k=2");
        self
    }

    pub fn configs(&self) -> Result<(AcpiConfig, PolicyValueConfig), CliError> {
        let acpi = AcpiConfig {
            max_outer_iters: self.max_outer,
            tol_v: self.tol_v,
            eval: self.model.evaluate_config(0.95)?,
            ..AcpiConfig::default()
        };
        acpi.validate()?;
        let values = PolicyValueConfig {
            rollouts_per_group: self.rollouts,
            horizon: self.horizon,
            repetitions: self.repetitions,
            seed: self.seed,
        };
        Ok((acpi, values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_tokens_parse_both_axes() {
        let toks = vec!["n=20,50".to_string(), "t=10".to_string()];
        let (n, t) = parse_grid(&toks).unwrap();
        assert_eq!(n, Some(vec![20, 50]));
        assert_eq!(t, Some(vec![10]));
    }

    #[test]
    fn grid_rejects_unknown_axis_and_zero() {
        assert!(parse_grid(&["k=2".to_string()]).is_err());
        assert!(parse_grid(&["n=0".to_string()]).is_err());
        assert!(parse_grid(&["n".to_string()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<EvaluateSettings>("levle = 0.9").unwrap_err();
        assert!(err.to_string().contains("levle"));
        assert!(toml::from_str::<EvaluateSettings>("[model]\nlambda = 1.0").is_err());
    }

    #[test]
    fn settings_round_trip_through_toml() {
        let mut s = EvaluateSettings::default();
        s.data.path = Some("a.csv".into());
        s.data.gamma = Some(0.6);
        s.model.grouping = Some("kmeans:k=2".into());
        let text = toml::to_string(&s).unwrap();
        let back: EvaluateSettings = toml::from_str(&text).unwrap();
        assert_eq!(back, s);

        let cov = CoverageSettings::default();
        let back: CoverageSettings = toml::from_str(&toml::to_string(&cov).unwrap()).unwrap();
        assert_eq!(back, cov);
    }

    #[test]
    fn defaults_parse_into_core_configs() {
        let mut m = ModelSettings::default();
        m.grouping = Some("fused".into());
        let cfg = m.evaluate_config(0.95).unwrap();
        assert_eq!(cfg, EvaluateConfig::default());
        assert!(m.evaluate_config(1.5).is_err());
    }

    #[test]
    fn extension_picks_the_data_format() {
        assert_eq!(format_for(Path::new("x.jsonl")), FileFormat::Jsonl);
        assert_eq!(format_for(Path::new("x.csv")), FileFormat::Csv);
        assert_eq!(format_for(Path::new("x")), FileFormat::Csv);
    }
}
