//! Deploys a scenario and drives repeated executions of it.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use choreo_core::model::ChoreographyPackage;
use choreo_core::projection::project;
use choreo_core::transactions::TxPhase;
use choreo_core::transport::{Limits, Server};

use crate::device::{
    default_behavior, trace_endpoint, Arm, Device, DeviceSetup, DeviceStatus, RemoteControl, ServeConfig,
};
use crate::fault::{FaultSpec, Latency};
use crate::invariants::{sweep_transaction, Atomicity};
use crate::scenario::{Scenario, ScenarioError};
use crate::trace::{Collector, TraceEvent};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("no interaction is marked as initiating the choreography")]
    NoInitiator,
    #[error("projection for {0}: {1}")]
    Projection(String, String),
    #[error("cannot start device {0}: {1}")]
    Launch(String, String),
    #[error("device {0}: {1}")]
    Control(String, String),
    #[error("no device labelled {0}")]
    UnknownDevice(String),
}

/// Where devices live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    InProcess,
    /// One `serve` child per device; `workdir` holds their projections.
    Processes { exe: PathBuf, workdir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Aborted,
    /// Still unsettled when the per-run deadline passed.
    Deadline,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Completed => "completed",
            RunOutcome::Aborted => "aborted",
            RunOutcome::Deadline => "deadline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: u64,
    pub token: u64,
    /// From the initiator's start to the last execution settling.
    pub duration_ms: f64,
    pub outcome: RunOutcome,
    /// Any error at all: abort, deadline, unreachable participants.
    pub failed: bool,
    pub tx_phase: Option<TxPhase>,
    pub heuristics: Vec<String>,
    pub clone_activations: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub statuses: Vec<DeviceStatus>,
    pub atomicity: Option<Atomicity>,
}

/// Role, label, clone-of, bind address, faults and latency for one device.
type Planned = (String, String, Option<String>, String, Vec<FaultSpec>, Latency);

enum Host {
    Local(Device),
    Remote { control: RemoteControl, child: Child },
}

struct Node {
    label: String,
    role: String,
    endpoint: String,
    host: Host,
}

impl Node {
    fn arm(&self, arm: &Arm, now: Instant) -> Result<(), SimError> {
        match &self.host {
            Host::Local(d) => {
                d.arm(arm, now);
                Ok(())
            }
            Host::Remote { control, .. } => control.arm(arm).map_err(|e| SimError::Control(self.label.clone(), e)),
        }
    }

    fn start(&self, token: u64, initial: &BTreeMap<String, String>) -> Result<(), SimError> {
        let r = match &self.host {
            Host::Local(d) => d.start_execution(token, initial),
            Host::Remote { control, .. } => control.start_execution(token, initial),
        };
        r.map_err(|e| SimError::Control(self.label.clone(), e))
    }

    fn status(&self) -> Result<DeviceStatus, SimError> {
        match &self.host {
            Host::Local(d) => Ok(d.status()),
            Host::Remote { control, .. } => control.status().map_err(|e| SimError::Control(self.label.clone(), e)),
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        if let Host::Remote { control, child } = &mut self.host {
            if control.shutdown().is_err() {
                let _ = child.kill();
            }
            let _ = child.wait();
        }
    }
}

/// A deployed scenario.
pub struct Simulation {
    scenario: Scenario,
    package: ChoreographyPackage,
    nodes: Vec<Node>,
    collector: Arc<Collector>,
    _trace_server: Option<Server>,
    initiator: String,
    primaries: BTreeMap<String, String>,
    clones: HashMap<String, String>,
    rng: ChaCha8Rng,
    next_run: u64,
}

/// The role that sends the initiating interaction.
pub fn initiator_of(pkg: &ChoreographyPackage) -> Option<String> {
    pkg.interactions().into_iter().find(|(_, i)| i.initiate).map(|(_, i)| i.from_role.clone())
}

impl Simulation {
    pub fn new(scenario: Scenario, mode: Mode) -> Result<Simulation, SimError> {
        let package = scenario.load_package()?;
        scenario.check(&package)?;
        let initiator = initiator_of(&package).ok_or(SimError::NoInitiator)?;
        let collector = Arc::new(Collector::new());

        let trace_server = match &mode {
            Mode::InProcess => None,
            Mode::Processes { .. } => Some(
                Server::bind("127.0.0.1:0", Limits::default(), trace_endpoint(collector.clone()))
                    .map_err(|e| SimError::Launch("trace collector".into(), e.to_string()))?,
            ),
        };

        let mut plan: Vec<Planned> = Vec::new();
        for d in &scenario.devices {
            let latency = d.latency.unwrap_or(scenario.latency);
            plan.push((d.role.clone(), d.role.clone(), None, d.endpoint.clone(), d.faults.clone(), latency));
        }
        for c in &scenario.clones {
            let role = package
                .clone_types
                .iter()
                .find(|t| t.name == c.name)
                .and_then(|t| t.role_refs.first())
                .cloned()
                .ok_or_else(|| SimError::Projection(c.name.clone(), "clone has no role".into()))?;
            let latency = c.latency.unwrap_or(scenario.latency);
            plan.push((c.name.clone(), role, Some(c.name.clone()), c.endpoint.clone(), c.faults.clone(), latency));
        }

        let mut nodes = Vec::new();
        for (label, role, clone_name, bind, faults, latency) in plan {
            let projection =
                Arc::new(project(&package, &role).map_err(|e| SimError::Projection(role.clone(), e.to_string()))?);
            let node = match &mode {
                Mode::InProcess => {
                    let setup = DeviceSetup {
                        role: role.clone(),
                        clone_name,
                        projection,
                        bind,
                        engine: scenario.engine.to_config(),
                        tx: scenario.transactions.timing(&scenario.engine),
                        transactional: scenario.transactional,
                        faults,
                        latency,
                        behavior: default_behavior(),
                    };
                    let device =
                        Device::launch(setup, collector.clone()).map_err(|e| SimError::Launch(label.clone(), e.to_string()))?;
                    Node { label, role, endpoint: device.endpoint().to_string(), host: Host::Local(device) }
                }
                Mode::Processes { exe, workdir } => {
                    let cfg = ServeConfig {
                        role: Some(role.clone()),
                        clone_name,
                        engine: scenario.engine.clone(),
                        transactions: scenario.transactions.clone(),
                        transactional: scenario.transactional,
                        faults,
                        latency,
                        trace: trace_server.as_ref().map(Server::endpoint),
                        ..ServeConfig::default()
                    };
                    spawn_node(exe, workdir, &label, &role, &projection.to_document(), &cfg, &bind)?
                }
            };
            nodes.push(node);
        }

        let mut primaries = BTreeMap::new();
        let mut clones = HashMap::new();
        for n in &nodes {
            if n.label == n.role {
                primaries.insert(n.role.clone(), n.endpoint.clone());
            } else {
                clones.insert(n.label.clone(), n.endpoint.clone());
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        Ok(Simulation {
            scenario,
            package,
            nodes,
            collector,
            _trace_server: trace_server,
            initiator,
            primaries,
            clones,
            rng,
            next_run: 0,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn package(&self) -> &ChoreographyPackage {
        &self.package
    }

    pub fn collector(&self) -> &Arc<Collector> {
        &self.collector
    }

    pub fn initiator(&self) -> &str {
        &self.initiator
    }

    /// Device endpoint by label (role name, or clone name).
    pub fn endpoint(&self, label: &str) -> Option<&str> {
        self.nodes.iter().find(|n| n.label == label).map(|n| n.endpoint.as_str())
    }

    pub fn labels(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.label.clone()).collect()
    }

    /// In-process device by label.
    pub fn device(&self, label: &str) -> Option<&Device> {
        self.nodes.iter().find(|n| n.label == label).and_then(|n| match &n.host {
            Host::Local(d) => Some(d),
            Host::Remote { .. } => None,
        })
    }

    /// Changes a device's fault plan for the following runs.
    pub fn set_faults(&self, label: &str, faults: Vec<FaultSpec>) -> Result<(), SimError> {
        match self.device(label) {
            Some(d) => {
                d.set_faults(faults);
                Ok(())
            }
            None => Err(SimError::UnknownDevice(label.to_string())),
        }
    }

    pub fn statuses(&self) -> Result<Vec<DeviceStatus>, SimError> {
        self.nodes.iter().map(Node::status).collect()
    }

    /// One execution with a fresh token, until everything settles or the
    /// deadline passes.
    pub fn run_once(&mut self) -> Result<RunReport, SimError> {
        let run = self.next_run;
        self.next_run += 1;
        let token = self.rng.random::<u64>() >> 12;
        let arm = Arm {
            run,
            seed: self.scenario.seed,
            primaries: self.primaries.clone(),
            clones: self.clones.clone(),
        };
        let armed = Instant::now();
        for n in &self.nodes {
            n.arm(&arm, armed)?;
        }
        let initiator = self.nodes.iter().find(|n| n.label == self.initiator).ok_or(SimError::NoInitiator)?;
        let started = Instant::now();
        initiator.start(token, &self.scenario.initial)?;
        let start_us = started.duration_since(armed).as_micros() as u64;

        let deadline = started + self.scenario.deadline();
        let (statuses, settled) = loop {
            let statuses = self.statuses()?;
            let initiator_done = statuses
                .iter()
                .find(|s| s.role == self.initiator)
                .and_then(|s| s.execution(token))
                .is_some_and(|e| e.is_settled());
            let settled = initiator_done && statuses.iter().all(DeviceStatus::settled);
            if settled || Instant::now() >= deadline {
                break (statuses, settled);
            }
            thread::sleep(Duration::from_millis(2));
        };

        let root = statuses.iter().find(|s| s.role == self.initiator).and_then(|s| s.execution(token)).cloned();
        let finished_us = statuses
            .iter()
            .filter_map(|s| s.execution(token))
            .filter_map(|e| e.finished_us)
            .max()
            .unwrap_or(start_us);
        let duration_ms = if settled {
            finished_us.saturating_sub(start_us) as f64 / 1000.0
        } else {
            started.elapsed().as_secs_f64() * 1000.0
        };
        let tx_phase = root.as_ref().and_then(|e| e.tx.as_ref()).map(|t| t.phase);
        let heuristics = root.as_ref().and_then(|e| e.tx.as_ref()).map(|t| t.heuristics.clone()).unwrap_or_default();
        let outcome = match &root {
            _ if !settled => RunOutcome::Deadline,
            Some(e) if e.status == "completed" && tx_phase.is_none_or(|p| p == TxPhase::Committed) => {
                RunOutcome::Completed
            }
            _ => RunOutcome::Aborted,
        };
        // Only observable for devices in this process.
        let clone_activations = self
            .nodes
            .iter()
            .filter_map(|n| match &n.host {
                Host::Local(d) => Some(d.directory().activation_count()),
                Host::Remote { .. } => None,
            })
            .sum();
        let atomicity = tx_phase.map(|_| sweep_transaction(token, &self.initiator, &statuses));
        let metrics = RunMetrics {
            run,
            token,
            duration_ms,
            outcome,
            failed: outcome != RunOutcome::Completed || !heuristics.is_empty(),
            tx_phase,
            heuristics,
            clone_activations,
        };
        log::debug!("run {run} token {token}: {:?} in {:.1} ms", metrics.outcome, metrics.duration_ms);
        Ok(RunReport { metrics, statuses, atomicity })
    }

    /// Runs the scenario's repetition count.
    pub fn run_all(&mut self) -> Result<Vec<RunReport>, SimError> {
        (0..self.scenario.runs).map(|_| self.run_once()).collect()
    }

    pub fn events_for(&self, token: u64) -> Vec<TraceEvent> {
        self.collector.events_for(token)
    }
}

fn spawn_node(
    exe: &Path,
    workdir: &Path,
    label: &str,
    role: &str,
    document: &str,
    cfg: &ServeConfig,
    bind: &str,
) -> Result<Node, SimError> {
    let fail = |e: String| SimError::Launch(label.to_string(), e);
    std::fs::create_dir_all(workdir).map_err(|e| fail(e.to_string()))?;
    let projection = workdir.join(format!("{label}.cdl"));
    let config = workdir.join(format!("{label}.toml"));
    std::fs::write(&projection, document).map_err(|e| fail(e.to_string()))?;
    std::fs::write(&config, toml::to_string(cfg).map_err(|e| fail(e.to_string()))?).map_err(|e| fail(e.to_string()))?;
    let mut child = Command::new(exe)
        .arg("serve")
        .arg(&projection)
        .arg("--endpoint")
        .arg(bind)
        .arg("--config")
        .arg(&config)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| fail(e.to_string()))?;
    let stdout = child.stdout.take().ok_or_else(|| fail("no stdout".into()))?;
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).map_err(|e| fail(e.to_string()))?;
    let Some(endpoint) = line.trim().strip_prefix("listening on ").map(str::to_string) else {
        let _ = child.kill();
        return Err(fail(format!("unexpected first line {line:?}")));
    };
    let control = RemoteControl { endpoint: endpoint.clone(), rewrite_base: cfg.engine.to_config().rewrite_base };
    Ok(Node { label: label.to_string(), role: role.to_string(), endpoint, host: Host::Remote { control, child } })
}
