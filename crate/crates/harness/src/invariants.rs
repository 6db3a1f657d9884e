//! Checks over traces and final device states.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::Serialize;

use choreo_core::model::{Activity, ChoreographyPackage, CdlExpression, Interaction};
use choreo_core::transactions::TxPhase;

use crate::device::DeviceStatus;
use crate::trace::{EventKind, TraceEvent};

/// Every request has exactly one response or timeout, recorded after it.
/// Late arrivals after a timeout are reported separately by the collector
/// and do not count here.
pub fn check_pairing(events: &[TraceEvent]) -> Vec<String> {
    let mut terminals: HashMap<u64, Vec<&TraceEvent>> = HashMap::new();
    for e in events.iter().filter(|e| matches!(e.kind, EventKind::Response | EventKind::Timeout)) {
        terminals.entry(e.rid).or_default().push(e);
    }
    let mut problems = Vec::new();
    for req in events.iter().filter(|e| e.kind == EventKind::Request) {
        match terminals.get(&req.rid).map(Vec::as_slice) {
            Some([t]) if t.seq > req.seq => {}
            Some([t]) => problems.push(format!("{} (rid {}) answered before it was sent (seq {})", req.operation, req.rid, t.seq)),
            Some(ts) => problems.push(format!("{} (rid {}) has {} answers", req.operation, req.rid, ts.len())),
            None => problems.push(format!("{} (rid {}) has no answer", req.operation, req.rid)),
        }
    }
    problems
}

/// One message kind as it appears in traces.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Hop {
    pub operation: String,
    pub from_role: String,
    pub to_role: String,
}

impl Hop {
    fn of(i: &Interaction) -> Hop {
        Hop { operation: i.operation.clone(), from_role: i.from_role.clone(), to_role: i.to_role.clone() }
    }

    fn matches(&self, e: &TraceEvent) -> bool {
        e.operation == self.operation && e.from_role == self.from_role && e.to_role == self.to_role
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum OrderRule {
    /// `later` is not requested before `earlier` was.
    RequestBefore { earlier: Hop, later: Hop },
    /// `later` is not requested before `earlier` got a 200.
    OkBefore { earlier: Hop, later: Hop },
}

/// Ordering constraints implied by the package: consecutive steps of a
/// sequence whose later sender took part in the earlier step, and guards
/// waiting on a variable that some interaction delivers.
pub fn order_rules(pkg: &ChoreographyPackage) -> Vec<OrderRule> {
    let mut rules = BTreeSet::new();
    for c in &pkg.choreographies {
        collect_rules(pkg, &c.body, &mut rules, 0);
    }
    rules.into_iter().collect()
}

const MAX_DEPTH: usize = 16;

fn collect_rules(pkg: &ChoreographyPackage, a: &Activity, rules: &mut BTreeSet<OrderRule>, depth: usize) {
    if depth > MAX_DEPTH {
        return;
    }
    match a {
        Activity::Sequence(items) => {
            for pair in items.windows(2) {
                for earlier in boundary(pkg, &pair[0], false, 0) {
                    for later in boundary(pkg, &pair[1], true, 0) {
                        if later.from_role == earlier.from_role || later.from_role == earlier.to_role {
                            rules.insert(OrderRule::RequestBefore { earlier: Hop::of(earlier), later: Hop::of(later) });
                        }
                    }
                }
            }
            items.iter().for_each(|i| collect_rules(pkg, i, rules, depth + 1));
        }
        Activity::Parallel(items) => items.iter().for_each(|i| collect_rules(pkg, i, rules, depth + 1)),
        Activity::WorkUnit(w) => {
            if let Some(CdlExpression::IsVariableAvailable { variable, role }) = &w.guard {
                for (_, writer) in pkg.interactions() {
                    let delivers = writer.exchanges.iter().any(|x| {
                        matches!(&x.receive, CdlExpression::GetVariable { variable: v, role: r } if v == variable && r == role)
                    });
                    if delivers {
                        for later in boundary(pkg, &w.body, true, 0) {
                            rules.insert(OrderRule::OkBefore { earlier: Hop::of(writer), later: Hop::of(later) });
                        }
                    }
                }
            }
            collect_rules(pkg, &w.body, rules, depth + 1);
        }
        Activity::Interaction(_) | Activity::Perform(_) => {}
    }
}

/// First (or last) interactions an activity can perform.
fn boundary<'a>(pkg: &'a ChoreographyPackage, a: &'a Activity, first: bool, depth: usize) -> Vec<&'a Interaction> {
    if depth > MAX_DEPTH {
        return Vec::new();
    }
    match a {
        Activity::Interaction(i) => vec![i],
        Activity::Sequence(items) => {
            let mut it: Box<dyn Iterator<Item = &Activity>> =
                if first { Box::new(items.iter()) } else { Box::new(items.iter().rev()) };
            it.find_map(|x| Some(boundary(pkg, x, first, depth + 1)).filter(|v| !v.is_empty())).unwrap_or_default()
        }
        Activity::Parallel(items) => items.iter().flat_map(|x| boundary(pkg, x, first, depth + 1)).collect(),
        Activity::WorkUnit(w) => boundary(pkg, &w.body, first, depth + 1),
        Activity::Perform(p) => {
            pkg.choreography(&p.choreography).map(|c| boundary(pkg, &c.body, first, depth + 1)).unwrap_or_default()
        }
    }
}

/// Checks the rules against one execution's events.
pub fn check_order(events: &[TraceEvent], rules: &[OrderRule]) -> Vec<String> {
    let first_request = |h: &Hop| events.iter().find(|e| e.kind == EventKind::Request && h.matches(e)).map(|e| e.seq);
    let first_ok = |h: &Hop| {
        events.iter().find(|e| e.kind == EventKind::Response && e.status == Some(200) && h.matches(e)).map(|e| e.seq)
    };
    let mut problems = Vec::new();
    for rule in rules {
        let (earlier, later, at) = match rule {
            OrderRule::RequestBefore { earlier, later } => (earlier, later, first_request(earlier)),
            OrderRule::OkBefore { earlier, later } => (earlier, later, first_ok(earlier)),
        };
        let Some(later_at) = first_request(later) else { continue };
        if at.is_none_or(|a| a > later_at) {
            problems.push(format!("{} was requested before {} {}", later.operation, earlier.operation, match rule {
                OrderRule::RequestBefore { .. } => "was requested",
                OrderRule::OkBefore { .. } => "succeeded",
            }));
        }
    }
    problems
}

/// Final transaction phases of one execution across all devices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Atomicity {
    pub tx_token: Option<u64>,
    pub phase: Option<TxPhase>,
    /// Endpoint to phase, for every participant reachable from the root.
    pub participants: BTreeMap<String, TxPhase>,
    pub violations: Vec<String>,
}

impl Atomicity {
    pub fn mixed(&self) -> bool {
        !self.violations.is_empty()
    }
}

/// Walks the transaction tree from the initiator's record. Every
/// participant in the tree must end in the root's phase, which must be
/// final; records outside the tree must never be committed.
pub fn sweep_transaction(token: u64, initiator: &str, statuses: &[DeviceStatus]) -> Atomicity {
    let by_endpoint: HashMap<&str, &DeviceStatus> = statuses.iter().map(|s| (s.endpoint.as_str(), s)).collect();
    let root = statuses.iter().find(|s| s.role == initiator).and_then(|s| {
        let tx = s.execution(token)?.tx.as_ref()?;
        Some((s, tx))
    });
    let Some((root_status, root_tx)) = root else {
        return Atomicity {
            tx_token: None,
            phase: None,
            participants: BTreeMap::new(),
            violations: vec!["initiator has no transaction record".into()],
        };
    };
    let mut violations = Vec::new();
    let phase = root_tx.phase;
    if !phase.is_terminal() {
        violations.push(format!("root transaction is still {phase}"));
    }
    let mut participants = BTreeMap::new();
    let mut visited = BTreeSet::from([root_status.endpoint.clone()]);
    let mut queue: VecDeque<String> = root_tx.children.iter().cloned().collect();
    while let Some(ep) = queue.pop_front() {
        if !visited.insert(ep.clone()) {
            continue;
        }
        let Some(tx) = by_endpoint
            .get(ep.as_str())
            .and_then(|s| s.execution(token))
            .and_then(|e| e.tx.as_ref())
            .filter(|t| t.tx_token == root_tx.tx_token)
        else {
            continue;
        };
        if tx.phase != phase {
            violations.push(format!("{ep} ended {} while the root ended {phase}", tx.phase));
        }
        participants.insert(ep.clone(), tx.phase);
        queue.extend(tx.children.iter().cloned());
    }
    for s in statuses.iter().filter(|s| !visited.contains(&s.endpoint)) {
        let orphan = s.execution(token).and_then(|e| e.tx.as_ref()).filter(|t| t.tx_token == root_tx.tx_token);
        if let Some(t) = orphan {
            if t.phase == TxPhase::Committed {
                violations.push(format!("{} committed outside the transaction tree", s.endpoint));
            }
        }
    }
    Atomicity { tx_token: Some(root_tx.tx_token), phase: Some(phase), participants, violations }
}
