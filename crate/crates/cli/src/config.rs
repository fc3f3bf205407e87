//! Experiment configuration (TOML).
//!
//! Unknown keys are rejected, and every invariant of the nested training,
//! budget and data settings is checked before any work starts. Errors name
//! the offending field by its dotted path.

use std::path::{Path, PathBuf};

use cyclic_dp_core::accountant::{OrderGrid, PrivacyBudget};
use cyclic_dp_core::federation::{BudgetCheck, Mode};
use cyclic_dp_core::{Activation, ArchitectureSpec, DpSgdConfig, SamplingMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const PRESETS: &[(&str, &str)] = &[
    ("eicu_like", include_str!("../presets/eicu_like.toml")),
    ("tcga_like", include_str!("../presets/tcga_like.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_arms")]
    pub arms: Vec<String>,
    /// Numbers of training sites to run; defaults to `1..=n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_counts: Option<Vec<usize>>,
    /// Independent repetitions with seeds `seed, seed+1, …`; results are averaged.
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    pub training: TrainingConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    pub data: DataConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_arms() -> Vec<String> {
    Mode::ALL.iter().map(|m| m.name().to_string()).collect()
}

fn default_repeats() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Poisson,
    WithReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetCheckMode {
    PreStep,
    PostStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise_multiplier: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Use `C = σ / b` instead of `clip_norm`.
    #[serde(default)]
    pub clip_from_paper: bool,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    #[serde(default = "default_budget_check")]
    pub budget_check: BudgetCheckMode,
    #[serde(default = "default_true")]
    pub early_stop: bool,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: ActivationName,
    /// Rényi orders; defaults to `2..=64, 128, 256`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orders: Option<Vec<u32>>,
}

fn default_clip() -> f64 {
    1.0
}
fn default_sampling() -> Sampling {
    Sampling::Poisson
}
fn default_budget_check() -> BudgetCheckMode {
    BudgetCheckMode::PreStep
}
fn default_true() -> bool {
    true
}
fn default_tol() -> f64 {
    1e-4
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_activation() -> ActivationName {
    ActivationName::Relu
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            epsilon: 10.0,
            delta: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticConfig),
    Csv(CsvConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    /// Explicit ground-truth weights; otherwise a random direction scaled to
    /// `weight_norm` is drawn from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_top_k: Option<usize>,
    /// Within-site test split; mutually exclusive with `test_sites`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    pub train_sites: Vec<SiteConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_sites: Vec<SiteConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shift {
    Uniform(f64),
    PerFeature(Vec<f64>),
}

impl Default for Shift {
    fn default() -> Self {
        Shift::Uniform(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub id: String,
    pub n: usize,
    #[serde(default)]
    pub shift: Shift,
    #[serde(default)]
    pub label_bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    /// Relative paths resolve against the config file's directory.
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_top_k: Option<usize>,
}

/// Scalar overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub clip_from_paper: bool,
    pub fidelity_postcheck: bool,
}

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    /// Reads a config file, or a bundled preset when `source` names one and
    /// no such file exists. Returns the config and the directory relative
    /// paths resolve against.
    pub fn load(source: &str) -> Result<(Self, PathBuf)> {
        let path = Path::new(source);
        if !path.exists() {
            if let Some(text) = preset(source) {
                return Ok((Self::from_toml(text)?, PathBuf::from(".")));
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok((Self::from_toml(&text)?, base))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if o.clip_from_paper {
            self.training.clip_from_paper = true;
        }
        if o.fidelity_postcheck {
            self.training.budget_check = BudgetCheckMode::PostStep;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn modes(&self) -> Result<Vec<Mode>> {
        if self.arms.is_empty() {
            return Err(bad("arms", "at least one arm is required"));
        }
        let mut out = Vec::new();
        for (i, a) in self.arms.iter().enumerate() {
            let m = Mode::from_name(a).ok_or_else(|| {
                bad(
                    &format!("arms[{i}]"),
                    format!("unknown arm `{a}` (expected central, central_private, distributed or distributed_private)"),
                )
            })?;
            if out.contains(&m) {
                return Err(bad(&format!("arms[{i}]"), format!("`{a}` listed twice")));
            }
            out.push(m);
        }
        Ok(out)
    }

    pub fn n_train_sites(&self) -> Option<usize> {
        match &self.data {
            DataConfig::Synthetic(s) => Some(s.train_sites.len()),
            DataConfig::Csv(_) => None,
        }
    }

    /// Site counts to run, given the number of available training sites.
    pub fn site_counts_for(&self, available: usize) -> Result<Vec<usize>> {
        let counts = self
            .site_counts
            .clone()
            .unwrap_or_else(|| (1..=available).collect());
        if counts.is_empty() {
            return Err(bad("site_counts", "must not be empty"));
        }
        for (i, &k) in counts.iter().enumerate() {
            if k == 0 || k > available {
                return Err(bad(
                    &format!("site_counts[{i}]"),
                    format!("{k} is not in 1..={available}"),
                ));
            }
        }
        if counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("site_counts", "must be strictly increasing"));
        }
        Ok(counts)
    }

    pub fn budget(&self) -> Result<PrivacyBudget> {
        if !(self.budget.epsilon > 0.0) {
            return Err(bad(
                "budget.epsilon",
                format!("{} is not > 0; the budget is already violated", self.budget.epsilon),
            ));
        }
        PrivacyBudget::new(self.budget.epsilon, self.budget.delta)
            .map_err(|e| bad("budget.delta", e))
    }

    pub fn grid(&self) -> Result<OrderGrid> {
        match &self.training.orders {
            None => Ok(OrderGrid::default()),
            Some(o) => OrderGrid::new(o.clone()).map_err(|e| bad("training.orders", e)),
        }
    }

    pub fn dp_config(&self) -> Result<DpSgdConfig> {
        let t = &self.training;
        let cfg = DpSgdConfig {
            noise_multiplier: t.noise_multiplier,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            clip_norm: t.clip_norm,
            sampling_mode: match t.sampling {
                Sampling::Poisson => SamplingMode::Poisson,
                Sampling::WithReplacement => SamplingMode::WithReplacement,
            },
        };
        let cfg = if t.clip_from_paper {
            cfg.with_clip_from_noise()
        } else {
            cfg
        };
        cfg.validate().map_err(|e| match e {
            cyclic_dp_core::Error::InvalidParameter { name, reason } => {
                bad(&format!("training.{name}"), reason)
            }
            other => bad("training", other),
        })?;
        Ok(cfg)
    }

    pub fn arch(&self, input_dim: usize) -> Result<ArchitectureSpec> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.training.hidden_layers);
        sizes.push(1);
        let act = match self.training.activation {
            ActivationName::Relu => Activation::Relu,
            ActivationName::Tanh => Activation::Tanh,
        };
        ArchitectureSpec::new(sizes, act).map_err(|e| bad("training.hidden_layers", e))
    }

    pub fn budget_check(&self) -> BudgetCheck {
        match self.training.budget_check {
            BudgetCheckMode::PreStep => BudgetCheck::PreStep,
            BudgetCheckMode::PostStep => BudgetCheck::PostStep,
        }
    }

    pub fn convergence_tol(&self) -> Option<f64> {
        self.training.early_stop.then_some(self.training.convergence_tol)
    }

    /// Checks every invariant that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        self.modes()?;
        if self.repeats == 0 {
            return Err(bad("repeats", "must be at least 1"));
        }
        if self.training.epochs == 0 {
            return Err(bad("training.epochs", "must be at least 1"));
        }
        if self.training.clip_from_paper && self.training.noise_multiplier == 0.0 {
            return Err(bad(
                "training.clip_from_paper",
                "C = σ / b is zero when noise_multiplier is 0",
            ));
        }
        self.dp_config()?;
        self.budget()?;
        self.grid()?;
        if !(self.training.convergence_tol >= 0.0) {
            return Err(bad("training.convergence_tol", "must be >= 0"));
        }
        if let Some(i) = self.training.hidden_layers.iter().position(|&h| h == 0) {
            return Err(bad(&format!("training.hidden_layers[{i}]"), "must be at least 1"));
        }
        match &self.data {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::Csv(c) => c.validate()?,
        }
        if let Some(n) = self.n_train_sites() {
            self.site_counts_for(n)?;
        }
        Ok(())
    }
}

fn check_fraction(field: &str, f: Option<f64>) -> Result<()> {
    if let Some(f) = f {
        if !(f > 0.0 && f < 1.0) {
            return Err(bad(field, format!("{f} is outside (0, 1)")));
        }
    }
    Ok(())
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let p = "data.synthetic";
        if self.dim == 0 {
            return Err(bad(&format!("{p}.dim"), "must be at least 1"));
        }
        match (&self.weights, self.weight_norm) {
            (Some(_), Some(_)) => {
                return Err(bad(p, "set either `weights` or `weight_norm`, not both"))
            }
            (None, None) => return Err(bad(p, "one of `weights` or `weight_norm` is required")),
            (Some(w), None) => {
                if w.len() != self.dim {
                    return Err(bad(
                        &format!("{p}.weights"),
                        format!("has {} entries, dim is {}", w.len(), self.dim),
                    ));
                }
                if !w.iter().all(|v| v.is_finite()) {
                    return Err(bad(&format!("{p}.weights"), "must be finite"));
                }
            }
            (None, Some(n)) => {
                if !(n >= 0.0 && n.is_finite()) {
                    return Err(bad(&format!("{p}.weight_norm"), "must be finite and >= 0"));
                }
            }
        }
        if let Some(k) = self.select_top_k {
            if k == 0 || k > self.dim {
                return Err(bad(
                    &format!("{p}.select_top_k"),
                    format!("{k} is not in 1..={}", self.dim),
                ));
            }
        }
        check_fraction(&format!("{p}.test_fraction"), self.test_fraction)?;
        match (self.test_fraction.is_some(), self.test_sites.is_empty()) {
            (true, false) => {
                return Err(bad(p, "set either `test_fraction` or `test_sites`, not both"))
            }
            (false, true) => {
                return Err(bad(p, "one of `test_fraction` or `test_sites` is required"))
            }
            _ => {}
        }
        if self.train_sites.is_empty() {
            return Err(bad(&format!("{p}.train_sites"), "at least one site is required"));
        }
        for (group, sites) in [("train_sites", &self.train_sites), ("test_sites", &self.test_sites)] {
            for (i, s) in sites.iter().enumerate() {
                let f = format!("{p}.{group}[{i}]");
                if s.id.is_empty() {
                    return Err(bad(&format!("{f}.id"), "must not be empty"));
                }
                if s.n == 0 {
                    return Err(bad(&format!("{f}.n"), "must be at least 1"));
                }
                match &s.shift {
                    Shift::Uniform(v) if !v.is_finite() => {
                        return Err(bad(&format!("{f}.shift"), "must be finite"))
                    }
                    Shift::PerFeature(v) if v.len() != self.dim => {
                        return Err(bad(
                            &format!("{f}.shift"),
                            format!("has {} entries, dim is {}", v.len(), self.dim),
                        ))
                    }
                    Shift::PerFeature(v) if !v.iter().all(|x| x.is_finite()) => {
                        return Err(bad(&format!("{f}.shift"), "must be finite"))
                    }
                    _ => {}
                }
                if !s.label_bias.is_finite() {
                    return Err(bad(&format!("{f}.label_bias"), "must be finite"));
                }
                check_fraction(&format!("{f}.positive_fraction"), s.positive_fraction)?;
            }
        }
        let all: Vec<&str> = self
            .train_sites
            .iter()
            .chain(&self.test_sites)
            .map(|s| s.id.as_str())
            .collect();
        for (i, id) in all.iter().enumerate() {
            if all[..i].contains(id) {
                return Err(bad(p, format!("site id `{id}` is used twice")));
            }
        }
        Ok(())
    }
}

impl CsvConfig {
    fn validate(&self) -> Result<()> {
        check_fraction("data.csv.test_fraction", self.test_fraction)?;
        match (self.test.is_some(), self.test_fraction.is_some()) {
            (true, true) => Err(bad("data.csv", "set either `test` or `test_fraction`, not both")),
            (false, false) => Err(bad("data.csv", "one of `test` or `test_fraction` is required")),
            _ => {
                if self.label_column.is_empty() {
                    return Err(bad("data.csv.label_column", "must not be empty"));
                }
                if self.select_top_k == Some(0) {
                    return Err(bad("data.csv.select_top_k", "must be at least 1"));
                }
                Ok(())
            }
        }
    }
}
