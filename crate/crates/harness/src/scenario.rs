//! Scenario files: which package, which devices, which faults.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use choreo_core::engine::EngineConfig;
use choreo_core::model::{ChoreographyPackage, Diagnostic};
use choreo_core::parser::{load_package, PackageError};
use choreo_core::projection::project;

use crate::fault::{FaultSpec, Latency};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario syntax: {0}")]
    Syntax(String),
    #[error("package: {0}")]
    Package(String),
    #[error("scenario invalid: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("BUDGET_EXCEEDED: projection for {role} is {size} bytes, budget {budget}")]
    BudgetExceeded { role: String, size: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSettings {
    pub default_timeout_ms: u64,
    pub quarantine_ms: u64,
    pub retry_count: u32,
    pub tick_ms: u64,
    pub time_scale: f64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings { default_timeout_ms: 35_000, quarantine_ms: 60_000, retry_count: 0, tick_ms: 500, time_scale: 1.0 }
    }
}

impl EngineSettings {
    pub fn to_config(&self) -> EngineConfig {
        EngineConfig {
            default_timeout: Duration::from_millis(self.default_timeout_ms),
            quarantine: Duration::from_millis(self.quarantine_ms),
            retry_count: self.retry_count,
            tick: Duration::from_millis(self.tick_ms.max(1)),
            time_scale: self.time_scale,
            ..EngineConfig::default()
        }
    }

    /// The default interaction timeout after scaling.
    pub fn scaled_timeout(&self) -> Duration {
        Duration::from_millis(self.default_timeout_ms).mul_f64(self.time_scale.max(0.0))
    }
}

/// Transaction timing. Unset values derive from the scaled default timeout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TxSettings {
    pub prepare_timeout_ms: Option<u64>,
    /// A participant that has not been asked to prepare by then aborts.
    pub decision_timeout_ms: Option<u64>,
    /// How often an in-doubt participant asks for the outcome.
    pub pull_interval_ms: Option<u64>,
    pub finish_retries: Option<u32>,
    pub retry_delay_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxTiming {
    pub prepare_timeout: Duration,
    pub decision_timeout: Duration,
    pub pull_interval: Duration,
    pub finish_timeout: Duration,
    pub finish_retries: u32,
    pub retry_delay: Duration,
}

impl TxSettings {
    pub fn timing(&self, engine: &EngineSettings) -> TxTiming {
        let t = engine.scaled_timeout().max(Duration::from_millis(1));
        let ms = |v: Option<u64>, d: Duration| v.map(Duration::from_millis).unwrap_or(d);
        TxTiming {
            prepare_timeout: ms(self.prepare_timeout_ms, t * 4),
            decision_timeout: ms(self.decision_timeout_ms, t * 8),
            pull_interval: ms(self.pull_interval_ms, (t / 2).max(Duration::from_millis(5))),
            finish_timeout: t,
            finish_retries: self.finish_retries.unwrap_or(3),
            retry_delay: ms(self.retry_delay_ms, (t / 4).max(Duration::from_millis(5))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub role: String,
    /// `host:port`; port 0 picks a free one.
    #[serde(default = "any_local")]
    pub endpoint: String,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub latency: Option<Latency>,
    #[serde(default)]
    pub resource_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneDeviceSpec {
    /// Name of a `cloneType` in the package.
    pub name: String,
    #[serde(default = "any_local")]
    pub endpoint: String,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub latency: Option<Latency>,
}

fn any_local() -> String {
    "127.0.0.1:0".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Relative paths resolve against the scenario file.
    pub package: PathBuf,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transactional: bool,
    /// Wall-clock cap per run.
    #[serde(default = "default_deadline")]
    pub deadline_ms: u64,
    /// Variables bound at the initiator before each run.
    #[serde(default)]
    pub initial: BTreeMap<String, String>,
    #[serde(default)]
    pub engine: EngineSettings,
    #[serde(default)]
    pub transactions: TxSettings,
    /// Applies to devices without their own `latency`.
    #[serde(default)]
    pub latency: Latency,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub clones: Vec<CloneDeviceSpec>,
}

fn one() -> usize {
    1
}

fn default_deadline() -> u64 {
    120_000
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Syntax(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        let mut s = Scenario::from_toml(&text)?;
        if s.package.is_relative() {
            if let Some(dir) = path.parent() {
                s.package = dir.join(&s.package);
            }
        }
        Ok(s)
    }

    pub fn load_package(&self) -> Result<ChoreographyPackage, ScenarioError> {
        let text = std::fs::read_to_string(&self.package)
            .map_err(|source| ScenarioError::Io { path: self.package.clone(), source })?;
        load_package(&text).map_err(|e| match e {
            PackageError::Parse(p) => ScenarioError::Package(p.to_string()),
            PackageError::Invalid(d) => ScenarioError::Invalid(d.iter().map(Diagnostic::to_string).collect()),
        })
    }

    pub fn deadline(&self) -> Duration {
        Duration::from_millis(self.deadline_ms)
    }

    /// Checks the scenario against its package: every role has exactly one
    /// device, clones exist, endpoints are distinct, budgets hold.
    pub fn check(&self, pkg: &ChoreographyPackage) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        if self.runs == 0 {
            problems.push("runs must be at least 1".to_string());
        }
        if self.engine.time_scale < 0.0 || !self.engine.time_scale.is_finite() {
            problems.push("engine.time_scale must be a finite non-negative number".to_string());
        }
        let mut seen = BTreeSet::new();
        for d in &self.devices {
            if pkg.role(&d.role).is_none() {
                problems.push(format!("device role `{}` is not declared in the package", d.role));
            }
            if !seen.insert(d.role.as_str()) {
                problems.push(format!("role `{}` has more than one device", d.role));
            }
        }
        for r in &pkg.role_types {
            if !seen.contains(r.name.as_str()) {
                problems.push(format!("role `{}` has no device", r.name));
            }
        }
        for c in &self.clones {
            if !pkg.clone_types.iter().any(|t| t.name == c.name) {
                problems.push(format!("clone `{}` is not declared in the package", c.name));
            }
        }
        let mut endpoints = BTreeSet::new();
        let fixed = self
            .devices
            .iter()
            .map(|d| &d.endpoint)
            .chain(self.clones.iter().map(|c| &c.endpoint))
            .filter(|e| !e.ends_with(":0"));
        for e in fixed {
            if !endpoints.insert(e) {
                problems.push(format!("endpoint {e} is used twice"));
            }
        }
        for f in self.devices.iter().flat_map(|d| &d.faults).chain(self.clones.iter().flat_map(|c| &c.faults)) {
            if let Err(msg) = f.check() {
                problems.push(msg);
            }
        }
        if !problems.is_empty() {
            return Err(ScenarioError::Invalid(problems));
        }
        for d in &self.devices {
            if let Some(budget) = d.resource_budget {
                let size = project(pkg, &d.role).map(|p| p.to_document().len()).unwrap_or(0);
                if size > budget {
                    return Err(ScenarioError::BudgetExceeded { role: d.role.clone(), size, budget });
                }
            }
        }
        Ok(())
    }
}
