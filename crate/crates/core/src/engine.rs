//! Per-device transition loop.
//!
//! An [`EngineState`] is one execution of a role's projection. The projected
//! activity tree is expanded into a runtime tree (performs inlined as frames)
//! whose frontier is the set of enabled transitions. Inbound messages go
//! through [`EngineState::handle_message`]; sends go through
//! [`EngineState::fire`], or the split `begin_send` / `complete_send` pair
//! when the caller must not hold a lock while the message is in flight.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::clones::{deliver_with_failover, CloneError, Delivery, Directory};
use crate::model::{has_errors, validate_package, Activity, CdlExpression, Interaction};
use crate::projection::{Direction, RoleProjection};
use crate::transport::{Messenger, RestRequest, RestResponse, SendError, Service, Verb};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Used when an interaction has no `timeout` element.
    pub default_timeout: Duration,
    /// How long an aborted execution rejects its token.
    pub quarantine: Duration,
    /// Extra attempts on a transport error before failing over or aborting.
    pub retry_count: u32,
    /// Period of guard re-evaluation in the device loop.
    pub tick: Duration,
    /// Multiplies every interaction timeout. Lets tests run `PT35S` in 2 s.
    pub time_scale: f64,
    /// Fire perform entry/exit and completion as soon as they are enabled.
    pub auto_advance: bool,
    pub rewrite_base: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            default_timeout: Duration::from_secs(35),
            quarantine: Duration::from_secs(60),
            retry_count: 0,
            tick: Duration::from_millis(500),
            time_scale: 1.0,
            auto_advance: true,
            rewrite_base: "api".into(),
        }
    }
}

impl EngineConfig {
    pub fn timeout_for(&self, interaction: &Interaction) -> Duration {
        let base = interaction.timeout.map(|d| d.as_std()).unwrap_or(self.default_timeout);
        base.mul_f64(self.time_scale.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("invalid projection: {0}")]
    InvalidProjection(String),
    #[error("variable `{0}` is not bound")]
    UnboundVariable(String),
    #[error("transition is not enabled")]
    NotEnabled,
    #[error("receive transitions fire on an inbound message")]
    AwaitsMessage,
    #[error(transparent)]
    Clone(#[from] CloneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecStatus {
    Idle,
    Active,
    Completed,
    Aborted { unusable_until: Instant },
}

impl ExecStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, ExecStatus::Completed | ExecStatus::Aborted { .. })
    }

    pub fn name(self) -> &'static str {
        match self {
            ExecStatus::Idle => "idle",
            ExecStatus::Active => "active",
            ExecStatus::Completed => "completed",
            ExecStatus::Aborted { .. } => "aborted",
        }
    }
}

/// Index path from the root of the runtime tree.
pub type Position = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TransitionKind {
    Send { choreography: String, interaction: String, operation: String },
    Receive { choreography: String, interaction: String, operation: String },
    GuardWait { workunit: String },
    PerformEnter { choreography: String },
    PerformExit { choreography: String },
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transition {
    pub kind: TransitionKind,
    pub position: Position,
}

impl Transition {
    pub fn is_local(&self) -> bool {
        matches!(
            self.kind,
            TransitionKind::PerformEnter { .. } | TransitionKind::PerformExit { .. } | TransitionKind::Complete
        )
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            TransitionKind::Send { interaction, .. } => write!(f, "send {interaction}"),
            TransitionKind::Receive { interaction, .. } => write!(f, "receive {interaction}"),
            TransitionKind::GuardWait { workunit } => write!(f, "guard_wait {workunit}"),
            TransitionKind::PerformEnter { choreography } => write!(f, "perform_enter {choreography}"),
            TransitionKind::PerformExit { choreography } => write!(f, "perform_exit {choreography}"),
            TransitionKind::Complete => f.write_str("complete"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepState {
    Pending,
    InFlight,
    Done,
}

#[derive(Debug, Clone)]
enum Node {
    Seq(Vec<Node>),
    Par(Vec<Node>),
    Guarded { name: String, guard: CdlExpression, open: bool, body: Box<Node> },
    Step { choreography: String, interaction: Box<Interaction>, direction: Direction, state: StepState },
    Perform { target: String, entered: bool, exited: bool, body: Box<Node> },
}

impl Node {
    fn done(&self) -> bool {
        match self {
            Node::Seq(items) | Node::Par(items) => items.iter().all(Node::done),
            Node::Guarded { open, body, .. } => *open && body.done(),
            Node::Step { state, .. } => *state == StepState::Done,
            Node::Perform { exited, .. } => *exited,
        }
    }

    fn at(&self, pos: &[usize]) -> Option<&Node> {
        let Some((first, rest)) = pos.split_first() else { return Some(self) };
        match self {
            Node::Seq(items) | Node::Par(items) => items.get(*first)?.at(rest),
            Node::Guarded { body, .. } | Node::Perform { body, .. } if *first == 0 => body.at(rest),
            _ => None,
        }
    }

    fn at_mut(&mut self, pos: &[usize]) -> Option<&mut Node> {
        let Some((first, rest)) = pos.split_first() else { return Some(self) };
        match self {
            Node::Seq(items) | Node::Par(items) => items.get_mut(*first)?.at_mut(rest),
            Node::Guarded { body, .. } | Node::Perform { body, .. } if *first == 0 => body.at_mut(rest),
            _ => None,
        }
    }

    fn operations<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Node::Seq(items) | Node::Par(items) => items.iter().for_each(|n| n.operations(out)),
            Node::Guarded { body, .. } | Node::Perform { body, .. } => body.operations(out),
            Node::Step { interaction, .. } => {
                out.insert(&interaction.operation);
            }
        }
    }
}

fn build(projection: &RoleProjection, choreography: &str, activity: &Activity, depth: usize) -> Node {
    match activity {
        Activity::Sequence(items) => {
            Node::Seq(items.iter().map(|a| build(projection, choreography, a, depth)).collect())
        }
        Activity::Parallel(items) => {
            Node::Par(items.iter().map(|a| build(projection, choreography, a, depth)).collect())
        }
        Activity::WorkUnit(w) => {
            let body = Box::new(build(projection, choreography, &w.body, depth));
            match &w.guard {
                Some(guard) => Node::Guarded { name: w.name.clone(), guard: guard.clone(), open: false, body },
                None => *body,
            }
        }
        Activity::Interaction(i) => Node::Step {
            choreography: choreography.to_string(),
            direction: if i.from_role == projection.role { Direction::Send } else { Direction::Receive },
            interaction: Box::new(i.clone()),
            state: StepState::Pending,
        },
        Activity::Perform(p) => {
            // Validation rejects perform cycles; the depth cap only guards
            // against documents that skipped it.
            let body = match projection.package.choreography(&p.choreography) {
                Some(c) if depth < 64 => build(projection, &c.name, &c.body, depth + 1),
                _ => Node::Seq(Vec::new()),
            };
            Node::Perform { target: p.choreography.clone(), entered: false, exited: false, body: Box::new(body) }
        }
    }
}

fn build_root(projection: &RoleProjection) -> Node {
    let Some(root) = projection.package.root() else { return Node::Seq(Vec::new()) };
    let main = build(projection, &root.name, &root.body, 0);
    let detached = projection.package.detached_choreographies();
    if detached.is_empty() {
        return main;
    }
    let mut branches = vec![main];
    branches.extend(detached.iter().map(|c| build(projection, &c.name, &c.body, 0)));
    Node::Par(branches)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardValue {
    Bool(bool),
    Value(String),
}

impl GuardValue {
    pub fn truthy(&self) -> bool {
        match self {
            GuardValue::Bool(b) => *b,
            GuardValue::Value(v) => !v.is_empty() && v != "false",
        }
    }
}

/// Role-specific code run when an inbound interaction is accepted.
pub trait RoleBehavior: Send {
    /// `false` makes the engine answer 503.
    fn init(&mut self) -> bool {
        true
    }

    /// Processes `operation` after its payload has been stored. May write
    /// further variables. The returned string is the `result` of the 200
    /// body unless the interaction has a `respond` exchange.
    fn execute(&mut self, service: &str, operation: &str, payload: &Value, store: &mut BTreeMap<String, String>)
        -> String;
}

/// Acknowledges every operation with `"{service}:{operation}"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Acknowledge;

impl RoleBehavior for Acknowledge {
    fn execute(&mut self, service: &str, operation: &str, _: &Value, _: &mut BTreeMap<String, String>) -> String {
        format!("{service}:{operation}")
    }
}

/// URL segment a role is served under: `BalizaRole` becomes `baliza`.
pub fn service_name(role: &str) -> String {
    role.strip_suffix("Role").filter(|s| !s.is_empty()).unwrap_or(role).to_ascii_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageOutcome {
    Accepted,
    Replayed,
    Rejected,
    /// The operation exists but is not enabled yet. The caller may hold the
    /// message and try again.
    NotEnabled,
}

/// Everything needed to put one send on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct OutboundSend {
    pub position: Position,
    pub choreography: String,
    pub interaction: String,
    pub operation: String,
    pub from_role: String,
    pub to_role: String,
    pub token: u64,
    pub value: Option<String>,
    pub timeout: Duration,
}

impl OutboundSend {
    /// `POST /{base}/{service}/{operation}` with body
    /// `{"token","value","from"}` plus `extra`.
    pub fn request(&self, base: &str, extra: &Map<String, Value>) -> RestRequest {
        let service = service_name(&self.to_role);
        let mut body = json!({ "token": self.token, "value": self.value, "from": self.from_role });
        if let Value::Object(m) = &mut body {
            m.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        RestRequest::new(Verb::Post, base, &[&service, &self.operation]).with_json(&body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    Delivered(RestResponse),
    Failed(SendError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendResult {
    Delivered,
    /// The execution was aborted. `notify` lists the roles already contacted.
    Aborted { notify: Vec<String> },
    /// The execution ended some other way while the message was in flight.
    Stale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalEntry {
    pub transition: Transition,
    pub at: Instant,
}

/// One execution of one role.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub role: String,
    pub projection: Arc<RoleProjection>,
    pub config: EngineConfig,
    pub token: Option<u64>,
    pub store: BTreeMap<String, String>,
    pub status: ExecStatus,
    pub tx: Option<u64>,
    pub journal: Vec<JournalEntry>,
    tree: Node,
    immutable: BTreeSet<String>,
    written: BTreeSet<String>,
    replay: HashMap<String, RestResponse>,
    contacted: BTreeSet<String>,
    operations: BTreeSet<String>,
    seeded: BTreeMap<String, String>,
}

impl EngineState {
    pub fn start(projection: Arc<RoleProjection>, config: EngineConfig) -> Result<EngineState, EngineError> {
        let diagnostics = validate_package(&projection.package);
        if has_errors(&diagnostics) {
            let first = diagnostics.iter().find(|d| d.is_error()).map(ToString::to_string).unwrap_or_default();
            return Err(EngineError::InvalidProjection(first));
        }
        if projection.package.role(&projection.role).is_none() {
            return Err(EngineError::InvalidProjection(format!("role `{}` is not declared", projection.role)));
        }
        let tree = build_root(&projection);
        let mut operations = BTreeSet::new();
        tree.operations(&mut operations);
        let operations = operations.into_iter().map(str::to_string).collect();
        let immutable = projection
            .variables()
            .iter()
            .filter(|v| !v.mutable)
            .map(|v| v.name.clone())
            .collect();
        let mut state = EngineState {
            role: projection.role.clone(),
            projection,
            config,
            token: None,
            store: BTreeMap::new(),
            status: ExecStatus::Idle,
            tx: None,
            journal: Vec::new(),
            tree,
            immutable,
            written: BTreeSet::new(),
            replay: HashMap::new(),
            contacted: BTreeSet::new(),
            operations,
            seeded: BTreeMap::new(),
        };
        state.advance(Instant::now());
        Ok(state)
    }

    /// A copy of this execution as it was before anything happened, keeping
    /// seeded variables.
    pub fn fresh(&self) -> EngineState {
        let mut s = EngineState::start(self.projection.clone(), self.config.clone())
            .expect("projection was valid at start");
        for (k, v) in &self.seeded {
            s.seed(k, v);
        }
        s
    }

    /// Binds a variable before the execution starts (initial data of an
    /// initiator). Seeded values survive rollback.
    pub fn seed(&mut self, variable: &str, value: &str) {
        self.store.insert(variable.to_string(), value.to_string());
        self.seeded.insert(variable.to_string(), value.to_string());
        self.advance(Instant::now());
    }

    pub fn service(&self) -> String {
        service_name(&self.role)
    }

    pub fn has_operation(&self, op: &str) -> bool {
        self.operations.contains(op)
    }

    /// Roles this execution has sent to or received from.
    pub fn contacted(&self) -> Vec<String> {
        self.contacted.iter().cloned().collect()
    }

    /// Positions of the activities the execution is waiting on.
    pub fn cursors(&self) -> Vec<Position> {
        if self.status.is_terminal() {
            return Vec::new();
        }
        let mut out = Vec::new();
        self.walk(&self.tree, &mut Vec::new(), &mut |n, pos| {
            let waiting = match n {
                Node::Guarded { guard, .. } => !self.guard_holds(guard),
                _ => true,
            };
            if waiting {
                out.push(pos.to_vec());
            }
        });
        out
    }

    pub fn evaluate_guard(&self, expr: &CdlExpression) -> Result<GuardValue, EngineError> {
        match expr {
            CdlExpression::IsVariableAvailable { variable, .. } => {
                Ok(GuardValue::Bool(self.store.contains_key(variable)))
            }
            CdlExpression::GetVariable { variable, .. } => self
                .store
                .get(variable)
                .map(|v| GuardValue::Value(v.clone()))
                .ok_or_else(|| EngineError::UnboundVariable(variable.clone())),
        }
    }

    fn guard_holds(&self, guard: &CdlExpression) -> bool {
        self.evaluate_guard(guard).map(|v| v.truthy()).unwrap_or(false)
    }

    /// Calls `visit` on every frontier node: pending or in-flight steps,
    /// closed guards, performs waiting to enter or exit.
    fn walk<'a>(&self, node: &'a Node, pos: &mut Position, visit: &mut dyn FnMut(&'a Node, &[usize])) {
        match node {
            Node::Seq(items) => {
                if let Some(i) = items.iter().position(|n| !n.done()) {
                    pos.push(i);
                    self.walk(&items[i], pos, visit);
                    pos.pop();
                }
            }
            Node::Par(items) => {
                for (i, n) in items.iter().enumerate() {
                    if !n.done() {
                        pos.push(i);
                        self.walk(n, pos, visit);
                        pos.pop();
                    }
                }
            }
            Node::Guarded { open, guard, body, .. } => {
                if !*open {
                    // Visited even when the guard holds so `advance` can latch it.
                    visit(node, pos);
                }
                if *open || self.guard_holds(guard) {
                    pos.push(0);
                    self.walk(body, pos, visit);
                    pos.pop();
                }
            }
            Node::Step { state, .. } => {
                if *state != StepState::Done {
                    visit(node, pos);
                }
            }
            Node::Perform { entered, exited, body, .. } => {
                if !*entered || (body.done() && !*exited) {
                    visit(node, pos);
                } else if !*exited {
                    pos.push(0);
                    self.walk(body, pos, visit);
                    pos.pop();
                }
            }
        }
    }

    fn send_ready(&self, interaction: &Interaction) -> bool {
        let vars_present = interaction
            .request()
            .is_none_or(|ex| self.store.contains_key(ex.send.variable()));
        vars_present && (self.token.is_some() || interaction.initiate)
    }

    /// All enabled transitions, in tree order.
    pub fn next_transitions(&self) -> Vec<Transition> {
        if self.status.is_terminal() {
            return Vec::new();
        }
        if self.tree.done() {
            return vec![Transition { kind: TransitionKind::Complete, position: Vec::new() }];
        }
        let mut out = Vec::new();
        self.walk(&self.tree, &mut Vec::new(), &mut |node, pos| {
            let kind = match node {
                Node::Guarded { name, guard, .. } if !self.guard_holds(guard) => {
                    Some(TransitionKind::GuardWait { workunit: name.clone() })
                }
                Node::Guarded { .. } => None,
                Node::Step { choreography, interaction, direction, state: StepState::Pending } => {
                    let (choreography, name, operation) =
                        (choreography.clone(), interaction.name.clone(), interaction.operation.clone());
                    match direction {
                        Direction::Send if self.send_ready(interaction) => Some(TransitionKind::Send {
                            choreography,
                            interaction: name,
                            operation,
                        }),
                        Direction::Send => None,
                        Direction::Receive => Some(TransitionKind::Receive {
                            choreography,
                            interaction: name,
                            operation,
                        }),
                    }
                }
                Node::Perform { target, entered: false, .. } => {
                    Some(TransitionKind::PerformEnter { choreography: target.clone() })
                }
                Node::Perform { target, .. } => Some(TransitionKind::PerformExit { choreography: target.clone() }),
                Node::Step { .. } | Node::Seq(_) | Node::Par(_) => None,
            };
            if let Some(kind) = kind {
                out.push(Transition { kind, position: pos.to_vec() });
            }
        });
        out
    }

    fn record(&mut self, transition: Transition, now: Instant) {
        self.journal.push(JournalEntry { transition, at: now });
    }

    /// Latches guards that hold and, with `auto_advance`, fires local
    /// transitions until none is left.
    pub fn advance(&mut self, now: Instant) {
        loop {
            if self.status.is_terminal() {
                return;
            }
            let mut opened = Vec::new();
            self.walk(&self.tree, &mut Vec::new(), &mut |n, pos| {
                if matches!(n, Node::Guarded { .. }) {
                    opened.push(pos.to_vec());
                }
            });
            let mut changed = false;
            for pos in opened {
                if let Some(Node::Guarded { guard, .. }) = self.tree.at(&pos) {
                    if self.guard_holds(guard) {
                        if let Some(Node::Guarded { open, .. }) = self.tree.at_mut(&pos) {
                            *open = true;
                            changed = true;
                        }
                    }
                }
            }
            if self.config.auto_advance {
                if let Some(t) = self.next_transitions().into_iter().find(Transition::is_local) {
                    self.apply_local(&t, now);
                    changed = true;
                }
            }
            if !changed {
                return;
            }
        }
    }

    fn apply_local(&mut self, t: &Transition, now: Instant) {
        match &t.kind {
            TransitionKind::PerformEnter { .. } => {
                if let Some(Node::Perform { entered, .. }) = self.tree.at_mut(&t.position) {
                    *entered = true;
                }
            }
            TransitionKind::PerformExit { .. } => {
                if let Some(Node::Perform { exited, .. }) = self.tree.at_mut(&t.position) {
                    *exited = true;
                }
            }
            TransitionKind::Complete => self.status = ExecStatus::Completed,
            _ => return,
        }
        self.record(t.clone(), now);
    }

    /// Fires a transition. Sends go through clone failover and block until
    /// answered or timed out.
    pub fn fire(
        &mut self,
        t: &Transition,
        directory: &Directory,
        messenger: &dyn Messenger,
    ) -> Result<SendResult, EngineError> {
        if !self.next_transitions().contains(t) {
            return Err(EngineError::NotEnabled);
        }
        match &t.kind {
            TransitionKind::Send { .. } => {
                let out = self.begin_send(&t.position, Instant::now())?;
                let req = out.request(&self.config.rewrite_base, &Map::new());
                let delivery =
                    deliver_with_failover(directory, messenger, &out.to_role, out.token, &req, out.timeout, self.config.retry_count);
                let outcome = match delivery {
                    Ok(Delivery { result: Ok(resp), .. }) => SendOutcome::Delivered(resp),
                    Ok(Delivery { result: Err(e), .. }) => SendOutcome::Failed(e),
                    Err(e) => SendOutcome::Failed(SendError::Transport(e.to_string())),
                };
                Ok(self.complete_send(&t.position, outcome, Instant::now()))
            }
            TransitionKind::Receive { .. } => Err(EngineError::AwaitsMessage),
            TransitionKind::GuardWait { .. } => {
                self.advance(Instant::now());
                Ok(SendResult::Delivered)
            }
            _ => {
                self.apply_local(t, Instant::now());
                self.advance(Instant::now());
                Ok(SendResult::Delivered)
            }
        }
    }

    /// Marks the send at `position` in flight and returns what to transmit.
    /// The initiator draws the execution token here.
    pub fn begin_send(&mut self, position: &[usize], now: Instant) -> Result<OutboundSend, EngineError> {
        let enabled = self
            .next_transitions()
            .into_iter()
            .any(|t| t.position == position && matches!(t.kind, TransitionKind::Send { .. }));
        if !enabled {
            return Err(EngineError::NotEnabled);
        }
        let token = *self.token.get_or_insert_with(rand::random);
        let Some(Node::Step { choreography, interaction, state, .. }) = self.tree.at_mut(position) else {
            return Err(EngineError::NotEnabled);
        };
        *state = StepState::InFlight;
        let interaction = interaction.clone();
        let choreography = choreography.clone();
        let value = interaction.request().and_then(|ex| self.store.get(ex.send.variable()).cloned());
        self.status = ExecStatus::Active;
        self.contacted.insert(interaction.to_role.clone());
        self.record(
            Transition {
                kind: TransitionKind::Send {
                    choreography: choreography.clone(),
                    interaction: interaction.name.clone(),
                    operation: interaction.operation.clone(),
                },
                position: position.to_vec(),
            },
            now,
        );
        Ok(OutboundSend {
            position: position.to_vec(),
            choreography,
            timeout: self.config.timeout_for(&interaction),
            interaction: interaction.name,
            operation: interaction.operation,
            from_role: self.role.clone(),
            to_role: interaction.to_role,
            token,
            value,
        })
    }

    /// Applies the result of a send started with `begin_send`.
    pub fn complete_send(&mut self, position: &[usize], outcome: SendOutcome, now: Instant) -> SendResult {
        if self.status.is_terminal() {
            return SendResult::Stale;
        }
        let Some(Node::Step { interaction, state: StepState::InFlight, .. }) = self.tree.at(position) else {
            return SendResult::Stale;
        };
        let respond = interaction.respond().map(|ex| ex.receive.variable().to_string());
        match outcome {
            SendOutcome::Delivered(resp) if resp.is_ok() => {
                if let (Some(var), Some((result, _))) = (respond, resp.result()) {
                    self.write(&var, result);
                }
                if let Some(Node::Step { state, .. }) = self.tree.at_mut(position) {
                    *state = StepState::Done;
                }
                self.advance(now);
                SendResult::Delivered
            }
            _ => SendResult::Aborted { notify: self.on_timeout(now) },
        }
    }

    /// Marks the execution unusable for the quarantine window. Returns the
    /// roles that should hear about it.
    pub fn on_timeout(&mut self, now: Instant) -> Vec<String> {
        self.abort(now);
        self.contacted()
    }

    pub fn abort(&mut self, now: Instant) {
        if !matches!(self.status, ExecStatus::Aborted { .. }) {
            self.status = ExecStatus::Aborted { unusable_until: now + self.config.quarantine };
        }
    }

    /// Undoes every variable the execution wrote and aborts it.
    pub fn rollback(&mut self, now: Instant) {
        for var in std::mem::take(&mut self.written) {
            match self.seeded.get(&var) {
                Some(v) => self.store.insert(var, v.clone()),
                None => self.store.remove(&var),
            };
        }
        self.abort(now);
    }

    fn write(&mut self, var: &str, value: String) {
        self.store.insert(var.to_string(), value);
        self.written.insert(var.to_string());
    }

    /// Inbound side of the loop. Check order: quarantine, operation, verb,
    /// terminal state, token, replay, enabledness, role init, immutability.
    pub fn handle_message(
        &mut self,
        req: &RestRequest,
        behavior: &mut dyn RoleBehavior,
        now: Instant,
    ) -> (RestResponse, MessageOutcome) {
        let reject = (RestResponse::unavailable(), MessageOutcome::Rejected);
        if let ExecStatus::Aborted { unusable_until } = self.status {
            if now < unusable_until {
                return reject;
            }
            *self = self.fresh();
        }
        let Some(op) = req.method().map(str::to_string) else { return reject };
        if !self.has_operation(&op) {
            return reject;
        }
        if req.verb != Verb::Post {
            return (RestResponse::method_not_allowed(), MessageOutcome::Rejected);
        }
        let Some(token) = req.token else { return reject };
        if self.token.is_some_and(|t| t != token) {
            return reject;
        }
        if let Some(cached) = self.replay.get(&op) {
            return (cached.clone(), MessageOutcome::Replayed);
        }
        if self.status.is_terminal() {
            return reject;
        }
        let Some(t) = self.next_transitions().into_iter().find(|t| {
            matches!(&t.kind, TransitionKind::Receive { operation, .. } if *operation == op)
        }) else {
            return (RestResponse::unavailable(), MessageOutcome::NotEnabled);
        };
        if !behavior.init() {
            return reject;
        }
        let Some(Node::Step { interaction, .. }) = self.tree.at(&t.position) else { return reject };
        let interaction = interaction.clone();
        let payload = req.json();
        let value = payload.get("value").and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Null => None,
            other => Some(other.to_string()),
        });
        if let (Some(ex), Some(v)) = (interaction.request(), &value) {
            let var = ex.receive.variable();
            if self.immutable.contains(var) && self.store.get(var).is_some_and(|old| old != v) {
                return reject;
            }
        }

        self.token = Some(token);
        self.status = ExecStatus::Active;
        self.contacted.insert(interaction.from_role.clone());
        if let (Some(ex), Some(v)) = (interaction.request(), value) {
            self.write(ex.receive.variable(), v);
        }
        let before = self.store.clone();
        let service = self.service();
        let mut result = behavior.execute(&service, &op, &payload, &mut self.store);
        for (k, v) in &self.store {
            if before.get(k) != Some(v) {
                self.written.insert(k.clone());
            }
        }
        if let Some(ex) = interaction.respond() {
            if let Some(v) = self.store.get(ex.send.variable()) {
                result = v.clone();
            }
        }
        if let Some(Node::Step { state, .. }) = self.tree.at_mut(&t.position) {
            *state = StepState::Done;
        }
        self.record(t, now);
        self.advance(now);
        let resp = RestResponse::ok(&result, token);
        self.replay.insert(op, resp.clone());
        (resp, MessageOutcome::Accepted)
    }
}

/// Serves one execution as a transport [`Service`].
pub struct RoleService {
    pub engine: EngineState,
    pub behavior: Box<dyn RoleBehavior>,
}

impl Service for RoleService {
    fn init(&mut self) -> bool {
        self.behavior.init()
    }

    fn handle(&mut self, req: &RestRequest) -> RestResponse {
        self.engine.handle_message(req, self.behavior.as_mut(), Instant::now()).0
    }
}
