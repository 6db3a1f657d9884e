//! Replacement devices for roles that disappear mid-execution.
//!
//! Bindings are scoped to one execution token: a permanent clone activated
//! while running token `t` serves the role for the rest of `t` only.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::model::{ChoreographyPackage, CloneType, CloneUsage};
use crate::transport::{Messenger, RestRequest, RestResponse, SendError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CloneError {
    #[error("no endpoint configured for role `{0}`")]
    UnknownRole(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Dormant,
    Activated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailoverDecision {
    RetryAt { endpoint: String, usage: CloneUsage, clone: String },
    Escalate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloneEntry {
    pub clone: CloneType,
    pub endpoint: String,
}

#[derive(Debug, Clone, Default)]
pub struct CloneRegistry {
    entries: BTreeMap<String, Vec<CloneEntry>>,
    sticky: HashMap<(String, u64), String>,
    activated: HashSet<(String, u64)>,
    activations: usize,
}

impl CloneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every clone of the package that has an endpoint, either
    /// from `endpoints` (clone name to address) or from the document.
    pub fn from_package(pkg: &ChoreographyPackage, endpoints: &HashMap<String, String>) -> Self {
        let mut reg = CloneRegistry::new();
        for clone in &pkg.clone_types {
            let endpoint = endpoints.get(&clone.name).or(clone.endpoint.as_ref());
            if let Some(ep) = endpoint {
                reg.register(clone.clone(), ep.clone());
            }
        }
        reg
    }

    pub fn register(&mut self, clone: CloneType, endpoint: String) {
        for role in &clone.role_refs {
            self.entries.entry(role.clone()).or_default().push(CloneEntry {
                clone: clone.clone(),
                endpoint: endpoint.clone(),
            });
        }
    }

    pub fn clones_for(&self, role: &str) -> &[CloneEntry] {
        self.entries.get(role).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn activation(&self, role: &str, token: u64) -> Activation {
        if self.activated.contains(&(role.to_string(), token)) {
            Activation::Activated
        } else {
            Activation::Dormant
        }
    }

    /// Total number of dormant-to-activated flips so far.
    pub fn activation_count(&self) -> usize {
        self.activations
    }

    pub fn resolve_endpoint(
        &self,
        role: &str,
        token: u64,
        primaries: &BTreeMap<String, String>,
    ) -> Result<String, CloneError> {
        if let Some(ep) = self.sticky.get(&(role.to_string(), token)) {
            return Ok(ep.clone());
        }
        primaries
            .get(role)
            .cloned()
            .ok_or_else(|| CloneError::UnknownRole(role.to_string()))
    }

    /// Picks the next clone to try after a failed send. `tried` lists the
    /// endpoints already attempted for this interaction.
    pub fn on_send_failure(&mut self, role: &str, token: u64, tried: &[String]) -> FailoverDecision {
        let Some(entry) = self
            .clones_for(role)
            .iter()
            .find(|e| !tried.contains(&e.endpoint))
            .cloned()
        else {
            return FailoverDecision::Escalate;
        };
        if entry.clone.usage == CloneUsage::Permanent {
            let key = (role.to_string(), token);
            self.sticky.insert(key.clone(), entry.endpoint.clone());
            if self.activated.insert(key) {
                self.activations += 1;
            }
        }
        FailoverDecision::RetryAt {
            endpoint: entry.endpoint,
            usage: entry.clone.usage,
            clone: entry.clone.name,
        }
    }

    /// Drops the bindings of a finished execution.
    pub fn release(&mut self, token: u64) {
        self.sticky.retain(|(_, t), _| *t != token);
    }
}

/// Primary endpoints plus the clone registry, shared by a device's threads.
#[derive(Debug, Default)]
pub struct Directory {
    pub primaries: BTreeMap<String, String>,
    registry: Mutex<CloneRegistry>,
}

impl Directory {
    pub fn new(primaries: BTreeMap<String, String>, registry: CloneRegistry) -> Self {
        Directory { primaries, registry: Mutex::new(registry) }
    }

    fn registry(&self) -> std::sync::MutexGuard<'_, CloneRegistry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn resolve(&self, role: &str, token: u64) -> Result<String, CloneError> {
        self.registry().resolve_endpoint(role, token, &self.primaries)
    }

    pub fn primary(&self, role: &str) -> Option<&str> {
        self.primaries.get(role).map(String::as_str)
    }

    pub fn on_send_failure(&self, role: &str, token: u64, tried: &[String]) -> FailoverDecision {
        self.registry().on_send_failure(role, token, tried)
    }

    pub fn activation(&self, role: &str, token: u64) -> Activation {
        self.registry().activation(role, token)
    }

    pub fn release(&self, token: u64) {
        self.registry().release(token)
    }

    pub fn activation_count(&self) -> usize {
        self.registry().activation_count()
    }

    /// Clone endpoints keyed by clone name, for roles that have one.
    pub fn clone_endpoints(&self) -> Vec<(String, String, String)> {
        let reg = self.registry();
        reg.entries
            .iter()
            .flat_map(|(role, es)| es.iter().map(move |e| (e.clone.name.clone(), role.clone(), e.endpoint.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub endpoint: String,
    pub outcome: Result<u16, SendError>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub result: Result<RestResponse, SendError>,
    /// Endpoint that produced `result`.
    pub endpoint: String,
    pub attempts: Vec<Attempt>,
}

impl Delivery {
    pub fn failed_over(&self) -> bool {
        self.attempts.len() > 1 && self.attempts.first().map(|a| &a.endpoint) != Some(&self.endpoint)
    }
}

/// Sends `req` to whichever endpoint currently serves `role`, retrying
/// transport errors `retry_count` times and then moving to clones.
pub fn deliver_with_failover(
    directory: &Directory,
    messenger: &dyn Messenger,
    role: &str,
    token: u64,
    req: &RestRequest,
    timeout: Duration,
    retry_count: u32,
) -> Result<Delivery, CloneError> {
    let mut endpoint = directory.resolve(role, token)?;
    let mut tried = Vec::new();
    let mut attempts = Vec::new();
    loop {
        let mut result = messenger.send(&endpoint, req, timeout);
        let mut retries = 0;
        while matches!(result, Err(SendError::Transport(_))) && retries < retry_count {
            retries += 1;
            attempts.push(Attempt { endpoint: endpoint.clone(), outcome: result.clone().map(|r| r.status.code()) });
            result = messenger.send(&endpoint, req, timeout);
        }
        attempts.push(Attempt { endpoint: endpoint.clone(), outcome: result.as_ref().map(|r| r.status.code()).map_err(Clone::clone) });
        let failed = !matches!(&result, Ok(r) if r.is_ok());
        if !failed {
            return Ok(Delivery { result, endpoint, attempts });
        }
        tried.push(endpoint.clone());
        match directory.on_send_failure(role, token, &tried) {
            FailoverDecision::RetryAt { endpoint: next, .. } => endpoint = next,
            FailoverDecision::Escalate => return Ok(Delivery { result, endpoint, attempts }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Verb;
    use proptest::prelude::*;

    fn clone(usage: CloneUsage) -> CloneType {
        CloneType {
            name: "VehiculoTransitoClone".into(),
            interface: None,
            usage,
            role_refs: vec!["VehiculoTransitoRole".into()],
            endpoint: None,
        }
    }

    fn primaries() -> BTreeMap<String, String> {
        [("VehiculoTransitoRole".to_string(), "primary:1".to_string())].into()
    }

    const VT: &str = "VehiculoTransitoRole";

    #[test]
    fn permanent_clone_is_sticky() {
        let mut reg = CloneRegistry::new();
        reg.register(clone(CloneUsage::Permanent), "clone:2".into());
        assert_eq!(reg.resolve_endpoint(VT, 7, &primaries()).unwrap(), "primary:1");
        assert_eq!(reg.activation(VT, 7), Activation::Dormant);
        let d = reg.on_send_failure(VT, 7, &["primary:1".into()]);
        assert!(matches!(d, FailoverDecision::RetryAt { ref endpoint, .. } if endpoint == "clone:2"));
        assert_eq!(reg.activation(VT, 7), Activation::Activated);
        for _ in 0..3 {
            assert_eq!(reg.resolve_endpoint(VT, 7, &primaries()).unwrap(), "clone:2");
        }
        // Scoped to the token.
        assert_eq!(reg.resolve_endpoint(VT, 8, &primaries()).unwrap(), "primary:1");
        reg.release(7);
        assert_eq!(reg.resolve_endpoint(VT, 7, &primaries()).unwrap(), "primary:1");
    }

    #[test]
    fn on_demand_clone_serves_one_attempt() {
        let mut reg = CloneRegistry::new();
        reg.register(clone(CloneUsage::OnDemand), "clone:2".into());
        let d = reg.on_send_failure(VT, 7, &["primary:1".into()]);
        assert!(matches!(d, FailoverDecision::RetryAt { usage: CloneUsage::OnDemand, .. }));
        assert_eq!(reg.resolve_endpoint(VT, 7, &primaries()).unwrap(), "primary:1");
        assert_eq!(reg.activation(VT, 7), Activation::Dormant);
    }

    #[test]
    fn escalation() {
        let mut reg = CloneRegistry::new();
        assert_eq!(reg.on_send_failure(VT, 7, &["primary:1".into()]), FailoverDecision::Escalate);
        reg.register(clone(CloneUsage::Permanent), "clone:2".into());
        assert_eq!(
            reg.on_send_failure(VT, 7, &["primary:1".into(), "clone:2".into()]),
            FailoverDecision::Escalate
        );
        assert_eq!(
            reg.resolve_endpoint("GhostRole", 7, &primaries()),
            Err(CloneError::UnknownRole("GhostRole".into()))
        );
    }

    struct Scripted(Mutex<Vec<(String, Result<RestResponse, SendError>)>>);

    impl Messenger for Scripted {
        fn send(&self, endpoint: &str, _: &RestRequest, _: Duration) -> Result<RestResponse, SendError> {
            let mut script = self.0.lock().unwrap();
            let (ep, r) = script.remove(0);
            assert_eq!(ep, endpoint);
            r
        }
    }

    #[test]
    fn delivery_fails_over_to_clone() {
        let mut reg = CloneRegistry::new();
        reg.register(clone(CloneUsage::Permanent), "clone:2".into());
        let dir = Directory::new(primaries(), reg);
        let m = Scripted(Mutex::new(vec![
            ("primary:1".into(), Err(SendError::TimeoutExpired)),
            ("clone:2".into(), Ok(RestResponse::ok("ok", 7))),
        ]));
        let req = RestRequest::new(Verb::Post, "api", &["vehiculotransito", "alertaIncidente"]);
        let d = deliver_with_failover(&dir, &m, VT, 7, &req, Duration::from_secs(1), 0).unwrap();
        assert_eq!(d.endpoint, "clone:2");
        assert!(d.failed_over());
        assert_eq!(dir.resolve(VT, 7).unwrap(), "clone:2");
    }

    #[test]
    fn transport_errors_are_retried_first() {
        let dir = Directory::new(primaries(), CloneRegistry::new());
        let m = Scripted(Mutex::new(vec![
            ("primary:1".into(), Err(SendError::Transport("reset".into()))),
            ("primary:1".into(), Ok(RestResponse::ok("ok", 7))),
        ]));
        let req = RestRequest::new(Verb::Post, "api", &["vehiculotransito", "alertaIncidente"]);
        let d = deliver_with_failover(&dir, &m, VT, 7, &req, Duration::from_secs(1), 1).unwrap();
        assert!(d.result.unwrap().is_ok());
        assert_eq!(d.attempts.len(), 2);
    }

    proptest! {
        /// Stickiness, single activation and escalation soundness over random
        /// failure sequences.
        #[test]
        fn registry_invariants(
            clones in proptest::collection::vec(any::<bool>(), 0..4),
            failures in proptest::collection::vec(0u64..3, 1..20),
        ) {
            let mut reg = CloneRegistry::new();
            for (i, permanent) in clones.iter().enumerate() {
                let mut c = clone(if *permanent { CloneUsage::Permanent } else { CloneUsage::OnDemand });
                c.name = format!("c{i}");
                reg.register(c, format!("clone:{i}"));
            }
            let mut bound: HashMap<u64, String> = HashMap::new();
            for token in failures {
                let current = reg.resolve_endpoint(VT, token, &primaries()).unwrap();
                if let Some(b) = bound.get(&token) {
                    prop_assert_eq!(&current, b);
                }
                let mut tried = vec![current];
                loop {
                    let before = reg.activation_count();
                    match reg.on_send_failure(VT, token, &tried) {
                        FailoverDecision::RetryAt { endpoint, usage, .. } => {
                            prop_assert!(!tried.contains(&endpoint));
                            if usage == CloneUsage::Permanent {
                                prop_assert!(reg.activation_count() <= before + 1);
                                bound.insert(token, endpoint.clone());
                            }
                            tried.push(endpoint);
                        }
                        FailoverDecision::Escalate => {
                            let untried = reg.clones_for(VT).iter().any(|e| !tried.contains(&e.endpoint));
                            prop_assert!(!untried);
                            break;
                        }
                    }
                }
            }
            prop_assert!(reg.activation_count() <= 3);
        }
    }
}
