//! One simulated device: an HTTP endpoint serving a role, its executions
//! (one engine per token), the transaction state attached to them and a
//! driver thread that fires sends and transaction timers.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use choreo_core::clones::{deliver_with_failover, CloneRegistry, Directory};
use choreo_core::engine::{
    service_name, Acknowledge, EngineConfig, EngineState, ExecStatus, MessageOutcome, OutboundSend, RoleBehavior,
    SendOutcome, SendResult, TransitionKind,
};
use choreo_core::projection::RoleProjection;
use choreo_core::transactions::{
    finish_participants, prepare_participants, status_request, tx_request, Participant, TransactionContext, TxAction,
    TxConfig, TxPhase,
};
use choreo_core::transport::{
    HttpMessenger, Limits, Messenger, Reply, RestRequest, RestResponse, SendError, Server, Verb,
};

use crate::fault::{FaultSpec, FaultState, Inbound, Latency};
use crate::scenario::{EngineSettings, TxSettings, TxTiming};
use crate::trace::{EventDraft, EventKind, LogSink, TraceSink};

/// Static description of a device.
pub struct DeviceSetup {
    pub role: String,
    /// Set when the device stands in for a role as one of its clones.
    pub clone_name: Option<String>,
    pub projection: Arc<RoleProjection>,
    /// Address to bind; port 0 picks a free one.
    pub bind: String,
    pub engine: EngineConfig,
    pub tx: TxTiming,
    pub transactional: bool,
    pub faults: Vec<FaultSpec>,
    pub latency: Latency,
    pub behavior: Box<dyn RoleBehavior>,
}

/// Per-run wiring: where everybody is.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub run: u64,
    pub seed: u64,
    pub primaries: BTreeMap<String, String>,
    /// Clone name to endpoint.
    pub clones: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxSummary {
    pub tx_token: u64,
    pub phase: TxPhase,
    pub coordinator: bool,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub heuristics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecSummary {
    pub token: u64,
    pub status: String,
    pub tx: Option<TxSummary>,
    /// Microseconds from arming to the moment the execution (and its
    /// transaction, if any) reached a final state.
    pub finished_us: Option<u64>,
}

impl ExecSummary {
    pub fn is_settled(&self) -> bool {
        let exec_done = self.status == "completed" || self.status == "aborted";
        exec_done && self.tx.as_ref().is_none_or(|t| t.phase.is_terminal())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStatus {
    pub role: String,
    pub endpoint: String,
    pub executions: Vec<ExecSummary>,
    pub busy: usize,
}

impl DeviceStatus {
    pub fn settled(&self) -> bool {
        self.busy == 0 && self.executions.iter().all(ExecSummary::is_settled)
    }

    pub fn execution(&self, token: u64) -> Option<&ExecSummary> {
        self.executions.iter().find(|e| e.token == token)
    }
}

struct LocalTx {
    ctx: TransactionContext,
    coordinator: bool,
    parent: Option<String>,
    coordinator_endpoint: String,
    joined: Instant,
    /// A decision or prepare is being worked on by some thread.
    working: bool,
    force_rollback: bool,
    last_pull: Option<Instant>,
}

impl LocalTx {
    fn summary(&self) -> TxSummary {
        TxSummary {
            tx_token: self.ctx.tx_token,
            phase: self.ctx.phase,
            coordinator: self.coordinator,
            parent: self.parent.clone(),
            children: self.ctx.participants.iter().map(|p| p.endpoint.clone()).collect(),
            heuristics: self.ctx.heuristics.clone(),
        }
    }
}

struct Execution {
    engine: EngineState,
    tx: Option<LocalTx>,
    finished: Option<Instant>,
}

impl Execution {
    fn settled(&self) -> bool {
        self.engine.status.is_terminal() && self.tx.as_ref().is_none_or(|t| t.ctx.is_terminal())
    }

    fn touch(&mut self, now: Instant) {
        if self.settled() {
            self.finished.get_or_insert(now);
        } else {
            self.finished = None;
        }
    }
}

struct DeviceState {
    executions: HashMap<u64, Execution>,
    tx_index: HashMap<u64, u64>,
    directory: Arc<Directory>,
    behavior: Box<dyn RoleBehavior>,
    rng: ChaCha8Rng,
    armed_at: Instant,
    shutdown: bool,
}

struct Shared {
    role: String,
    label: String,
    service: String,
    projection: Arc<RoleProjection>,
    engine: EngineConfig,
    tx: TxTiming,
    transactional: bool,
    latency: Latency,
    endpoint: String,
    sink: Arc<dyn TraceSink>,
    state: Mutex<DeviceState>,
    cv: Condvar,
    faults: Mutex<FaultState>,
    busy: AtomicUsize,
}

/// Counts work in progress so the runner knows when a run is quiet.
struct Busy(Arc<Shared>);

impl Busy {
    fn new(shared: &Arc<Shared>) -> Busy {
        shared.busy.fetch_add(1, Ordering::SeqCst);
        Busy(shared.clone())
    }
}

impl Drop for Busy {
    fn drop(&mut self) {
        self.0.busy.fetch_sub(1, Ordering::SeqCst);
        self.0.cv.notify_all();
    }
}

/// Outbound link of a device: fails while the device has disappeared.
struct Link<'a>(&'a Shared);

impl Messenger for Link<'_> {
    fn send(&self, endpoint: &str, req: &RestRequest, timeout: Duration) -> Result<RestResponse, SendError> {
        if self.0.faults.lock().unwrap().is_gone(Instant::now()) {
            return Err(SendError::Transport("device disconnected".into()));
        }
        HttpMessenger.send(endpoint, req, timeout)
    }
}

/// Link that records each attempt of a choreography send in the trace.
struct Traced<'a> {
    shared: &'a Shared,
    token: u64,
    to_role: String,
    operation: String,
}

impl Messenger for Traced<'_> {
    fn send(&self, endpoint: &str, req: &RestRequest, timeout: Duration) -> Result<RestResponse, SendError> {
        let rid: u64 = rand::random::<u64>() >> 12;
        let mut body = req.json();
        body["rid"] = json!(rid);
        let req = req.clone().with_json(&body);
        let draft = |kind, detail: String| EventDraft {
            rid,
            token: self.token,
            from_role: self.shared.role.clone(),
            to_role: self.to_role.clone(),
            operation: self.operation.clone(),
            verb: req.verb.as_str().to_string(),
            kind,
            status: None,
            endpoint: endpoint.to_string(),
            detail,
        };
        self.shared.sink.record(draft(EventKind::Request, String::new()));
        let result = Link(self.shared).send(endpoint, &req, timeout);
        if let Err(e) = &result {
            self.shared.sink.record(draft(EventKind::Timeout, e.to_string()));
        }
        result
    }
}

pub struct Device {
    shared: Arc<Shared>,
    server: Mutex<Option<Server>>,
    driver: Mutex<Option<JoinHandle<()>>>,
}

impl Device {
    pub fn launch(setup: DeviceSetup, sink: Arc<dyn TraceSink>) -> io::Result<Device> {
        let listener = std::net::TcpListener::bind(&setup.bind)?;
        let endpoint = listener.local_addr()?.to_string();
        let label = setup.clone_name.clone().unwrap_or_else(|| setup.role.clone());
        let shared = Arc::new(Shared {
            service: service_name(&setup.role),
            role: setup.role,
            label,
            projection: setup.projection,
            tx: setup.tx,
            transactional: setup.transactional,
            latency: setup.latency,
            endpoint,
            sink,
            state: Mutex::new(DeviceState {
                executions: HashMap::new(),
                tx_index: HashMap::new(),
                directory: Arc::new(Directory::default()),
                behavior: setup.behavior,
                rng: ChaCha8Rng::seed_from_u64(0),
                armed_at: Instant::now(),
                shutdown: false,
            }),
            cv: Condvar::new(),
            faults: Mutex::new(FaultState::new(setup.faults)),
            busy: AtomicUsize::new(0),
            engine: setup.engine,
        });
        let limits = Limits { rewrite_base: shared.engine.rewrite_base.clone(), ..Limits::default() };
        let handler_shared = shared.clone();
        let server = Server::serve(listener, limits, Arc::new(move |req| handle(&handler_shared, req)))?;
        let driver_shared = shared.clone();
        let driver = thread::Builder::new()
            .name(format!("driver-{}", shared.label))
            .spawn(move || drive(driver_shared))?;
        Ok(Device { shared, server: Mutex::new(Some(server)), driver: Mutex::new(Some(driver)) })
    }

    pub fn endpoint(&self) -> &str {
        &self.shared.endpoint
    }

    pub fn role(&self) -> &str {
        &self.shared.role
    }

    /// Replaces the fault plan; takes effect at the next `arm`.
    pub fn set_faults(&self, faults: Vec<FaultSpec>) {
        *self.shared.faults.lock().unwrap() = FaultState::new(faults);
    }

    pub fn label(&self) -> &str {
        &self.shared.label
    }

    /// Clears every execution, re-arms faults and installs the peer map.
    pub fn arm(&self, arm: &Arm, now: Instant) {
        arm_device(&self.shared, arm, now);
    }

    /// Begins an execution here with a given token and initial variables.
    pub fn start_execution(&self, token: u64, initial: &BTreeMap<String, String>) -> Result<(), String> {
        start_execution(&self.shared, token, initial)
    }

    pub fn status(&self) -> DeviceStatus {
        status(&self.shared)
    }

    pub fn directory(&self) -> Arc<Directory> {
        self.shared.state.lock().unwrap().directory.clone()
    }

    pub fn shutdown(&self) {
        self.shared.state.lock().unwrap().shutdown = true;
        self.shared.cv.notify_all();
        if let Some(mut s) = self.server.lock().unwrap().take() {
            s.shutdown();
        }
        if let Some(h) = self.driver.lock().unwrap().take() {
            let _ = h.join();
        }
    }

    /// Blocks until the control service asks this device to stop.
    pub fn wait_for_shutdown(&self) {
        let mut st = self.shared.state.lock().unwrap();
        while !st.shutdown {
            st = self.shared.cv.wait(st).unwrap();
        }
    }
}

impl Drop for Device {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn arm_device(shared: &Shared, arm: &Arm, now: Instant) {
    let registry = CloneRegistry::from_package(&shared.projection.package, &arm.clones);
    let mut st = shared.state.lock().unwrap();
    st.executions.clear();
    st.tx_index.clear();
    st.directory = Arc::new(Directory::new(arm.primaries.clone(), registry));
    let label_hash = shared.label.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
    st.rng = ChaCha8Rng::seed_from_u64(arm.seed ^ arm.run.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ label_hash);
    st.armed_at = now;
    shared.faults.lock().unwrap().arm(now);
    shared.cv.notify_all();
}

fn new_engine(shared: &Shared) -> EngineState {
    EngineState::start(shared.projection.clone(), shared.engine.clone()).expect("projection checked at launch")
}

fn start_execution(shared: &Shared, token: u64, initial: &BTreeMap<String, String>) -> Result<(), String> {
    let mut st = shared.state.lock().unwrap();
    if st.executions.contains_key(&token) {
        return Err(format!("execution {token} already exists"));
    }
    let mut engine = new_engine(shared);
    for (k, v) in initial {
        engine.seed(k, v);
    }
    engine.token = Some(token);
    st.executions.insert(token, Execution { engine, tx: None, finished: None });
    shared.cv.notify_all();
    Ok(())
}

fn status(shared: &Shared) -> DeviceStatus {
    let st = shared.state.lock().unwrap();
    let mut executions: Vec<ExecSummary> = st
        .executions
        .iter()
        .map(|(token, ex)| ExecSummary {
            token: *token,
            status: ex.engine.status.name().to_string(),
            tx: ex.tx.as_ref().map(LocalTx::summary),
            finished_us: ex.finished.map(|f| f.saturating_duration_since(st.armed_at).as_micros() as u64),
        })
        .collect();
    executions.sort_by_key(|e| e.token);
    DeviceStatus {
        role: shared.label.clone(),
        endpoint: shared.endpoint.clone(),
        executions,
        busy: shared.busy.load(Ordering::SeqCst),
    }
}

fn tx_config(shared: &Shared) -> TxConfig {
    TxConfig {
        rewrite_base: shared.engine.rewrite_base.clone(),
        prepare_timeout: shared.tx.prepare_timeout,
        finish_timeout: shared.tx.finish_timeout,
        retry_count: shared.tx.finish_retries,
        retry_delay: shared.tx.retry_delay,
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

#[allow(clippy::large_enum_variant)] // short-lived, one per queued step
enum Job {
    Send { token: u64, out: OutboundSend, endpoint: String, tx: Option<Value>, enlisted: bool },
    Decide { token: u64 },
    Cascade { tx: u64, children: Vec<Participant>, commit: bool },
    Pull { token: u64, tx: u64, targets: Vec<String> },
}

fn drive(shared: Arc<Shared>) {
    let mut st = shared.state.lock().unwrap();
    loop {
        if st.shutdown {
            return;
        }
        let now = Instant::now();
        let jobs = collect_jobs(&shared, &mut st, now);
        for job in jobs {
            spawn_job(&shared, job);
        }
        st = shared.cv.wait_timeout(st, shared.engine.tick).unwrap().0;
    }
}

/// One pass of the loop: transactions first, then engine transitions.
fn collect_jobs(shared: &Shared, st: &mut DeviceState, now: Instant) -> Vec<Job> {
    let mut jobs = Vec::new();
    let tokens: Vec<u64> = st.executions.keys().copied().collect();
    for token in tokens {
        let ex = st.executions.get_mut(&token).expect("listed above");
        if let Some(tx) = ex.tx.as_mut() {
            if tx.coordinator {
                if tx.ctx.phase == TxPhase::Active && !tx.working && ex.engine.status.is_terminal() {
                    tx.working = true;
                    jobs.push(Job::Decide { token });
                }
            } else if tx.ctx.phase == TxPhase::Active
                && !tx.working
                && now.duration_since(tx.joined) >= shared.tx.decision_timeout
            {
                log::debug!("{}: presumed abort of tx {}", shared.label, tx.ctx.tx_token);
                if let Some(job) = abort_locally(ex, now) {
                    jobs.push(job);
                }
            } else if tx.ctx.phase == TxPhase::Prepared
                && !tx.working
                && tx.last_pull.is_none_or(|t| now.duration_since(t) >= shared.tx.pull_interval)
            {
                let first = tx.last_pull.is_none();
                tx.last_pull = Some(now);
                if !first {
                    let mut targets: Vec<String> = tx.parent.iter().cloned().collect();
                    if !targets.contains(&tx.coordinator_endpoint) {
                        targets.push(tx.coordinator_endpoint.clone());
                    }
                    tx.working = true;
                    jobs.push(Job::Pull { token, tx: tx.ctx.tx_token, targets });
                }
            }
        }

        let sends: Vec<_> = {
            let ex = st.executions.get_mut(&token).expect("listed above");
            ex.engine.advance(now);
            ex.engine
                .next_transitions()
                .into_iter()
                .filter(|t| matches!(t.kind, TransitionKind::Send { .. }))
                .filter_map(|t| ex.engine.begin_send(&t.position, now).ok())
                .collect()
        };
        for out in sends {
            let endpoint = st.directory.resolve(&out.to_role, out.token).unwrap_or_default();
            let needs_tx = shared.transactional && st.executions[&token].tx.is_none();
            if needs_tx {
                let tx = st.rng.random::<u64>() >> 12;
                st.tx_index.insert(tx, token);
                st.executions.get_mut(&token).expect("listed above").tx = Some(LocalTx {
                    ctx: TransactionContext::new(tx, token, shared.role.as_str()),
                    coordinator: true,
                    parent: None,
                    coordinator_endpoint: shared.endpoint.clone(),
                    joined: now,
                    working: false,
                    force_rollback: false,
                    last_pull: None,
                });
            }
            let ex = st.executions.get_mut(&token).expect("listed above");
            let (tx_body, enlisted) = match ex.tx.as_mut() {
                Some(tx) => {
                    let enlisted = tx.ctx.enlist(&out.to_role, &endpoint).is_ok();
                    let body = json!({
                        "token": tx.ctx.tx_token,
                        "parent": shared.endpoint,
                        "coordinator": tx.coordinator_endpoint,
                    });
                    (Some(body), enlisted)
                }
                None => (None, true),
            };
            jobs.push(Job::Send { token, out, endpoint, tx: tx_body, enlisted });
        }
        st.executions.get_mut(&token).expect("listed above").touch(now);
    }
    jobs
}

/// Rolls back local effects of a participant before it voted. Returns the
/// cascade to its children.
fn abort_locally(ex: &mut Execution, now: Instant) -> Option<Job> {
    ex.engine.rollback(now);
    let tx = ex.tx.as_mut()?;
    if tx.ctx.is_terminal() {
        return None;
    }
    tx.ctx.phase = TxPhase::RolledBack;
    ex.touch(now);
    let tx = ex.tx.as_ref()?;
    Some(Job::Cascade { tx: tx.ctx.tx_token, children: tx.ctx.participants.clone(), commit: false })
}

fn spawn_job(shared: &Arc<Shared>, job: Job) {
    let busy = Busy::new(shared);
    let shared = shared.clone();
    let spawned = thread::Builder::new().name(format!("job-{}", shared.label)).spawn(move || {
        let _busy = busy;
        match job {
            Job::Send { token, out, endpoint, tx, enlisted } => run_send(&shared, token, out, endpoint, tx, enlisted),
            Job::Decide { token } => run_decide(&shared, token),
            Job::Cascade { tx, children, commit } => {
                if !children.is_empty() {
                    finish_participants(&children, tx, commit, &Link(&shared), &tx_config(&shared));
                }
            }
            Job::Pull { token, tx, targets } => run_pull(&shared, token, tx, &targets),
        }
    });
    if let Err(e) = spawned {
        log::error!("cannot spawn worker: {e}");
    }
}

fn run_send(shared: &Arc<Shared>, token: u64, out: OutboundSend, first: String, tx: Option<Value>, enlisted: bool) {
    let mut extra = Map::new();
    if let Some(tx) = &tx {
        extra.insert("tx".into(), tx.clone());
    }
    let req = out.request(&shared.engine.rewrite_base, &extra);
    let directory = shared.state.lock().unwrap().directory.clone();
    let traced = Traced { shared, token, to_role: out.to_role.clone(), operation: out.operation.clone() };
    let delivery =
        deliver_with_failover(&directory, &traced, &out.to_role, token, &req, out.timeout, shared.engine.retry_count);
    let (outcome, answered_by, tried) = match delivery {
        Ok(d) => {
            let tried: Vec<String> = d.attempts.iter().map(|a| a.endpoint.clone()).collect();
            match d.result {
                Ok(resp) => (SendOutcome::Delivered(resp), Some(d.endpoint), tried),
                Err(e) => (SendOutcome::Failed(e), None, tried),
            }
        }
        Err(e) => (SendOutcome::Failed(SendError::Transport(e.to_string())), None, Vec::new()),
    };
    let delivered = matches!(&outcome, SendOutcome::Delivered(r) if r.is_ok());

    let now = Instant::now();
    let mut rollback_at = Vec::new();
    let mut notify = Vec::new();
    let mut cascade = None;
    let mut tx_token = None;
    {
        let mut st = shared.state.lock().unwrap();
        let Some(ex) = st.executions.get_mut(&token) else { return };
        if let Some(local) = ex.tx.as_mut() {
            tx_token = Some(local.ctx.tx_token);
            let ok_at = answered_by.as_deref().filter(|_| delivered);
            // Anyone tried but not kept may hold effects of this message.
            for ep in tried.iter().chain(std::iter::once(&first)) {
                if Some(ep.as_str()) != ok_at && !rollback_at.contains(ep) {
                    local.ctx.delist(ep);
                    rollback_at.push(ep.clone());
                }
            }
            if let Some(ep) = ok_at {
                let joined = enlisted && local.ctx.enlist(&out.to_role, ep).is_ok();
                if !joined {
                    rollback_at.push(ep.to_string());
                }
            }
        }
        match ex.engine.complete_send(&out.position, outcome, now) {
            SendResult::Aborted { notify: roles } => {
                notify = roles;
                if ex.tx.as_ref().is_some_and(|t| !t.coordinator) {
                    cascade = abort_locally(ex, now);
                }
            }
            SendResult::Delivered | SendResult::Stale => {}
        }
        ex.touch(now);
        shared.cv.notify_all();
    }
    if let Some(job) = cascade {
        spawn_job(shared, job);
    }
    if let Some(tx) = tx_token {
        for ep in rollback_at {
            let req = tx_request(&shared.engine.rewrite_base, tx, TxAction::Rollback, None);
            best_effort(shared, ep, req);
        }
    }
    send_abort_notices(shared, token, &notify, None);
}

/// Tells peers an execution is over. Nobody waits for these.
fn send_abort_notices(shared: &Arc<Shared>, token: u64, roles: &[String], skip: Option<&str>) {
    let directory = shared.state.lock().unwrap().directory.clone();
    for role in roles {
        if *role == shared.role || Some(role.as_str()) == skip {
            continue;
        }
        let Ok(endpoint) = directory.resolve(role, token) else { continue };
        let req = RestRequest::new(Verb::Post, &shared.engine.rewrite_base, &["exec", "abort"])
            .with_json(&json!({ "token": token, "from": shared.role }));
        best_effort(shared, endpoint, req);
    }
}

/// Fire-and-forget message. Not counted as device work: receivers ignore
/// stale tokens, so a late arrival cannot affect a later run.
fn best_effort(shared: &Arc<Shared>, endpoint: String, req: RestRequest) {
    let shared = shared.clone();
    let _ = thread::Builder::new().name("notice".into()).spawn(move || {
        let _ = Link(&shared).send(&endpoint, &req, shared.tx.finish_timeout);
    });
}

fn run_decide(shared: &Arc<Shared>, token: u64) {
    let cfg = tx_config(shared);
    let (tx, participants, try_commit) = {
        let mut st = shared.state.lock().unwrap();
        let Some(ex) = st.executions.get_mut(&token) else { return };
        let completed = ex.engine.status == ExecStatus::Completed;
        let Some(local) = ex.tx.as_mut() else { return };
        let try_commit = completed && !local.force_rollback;
        if try_commit {
            local.ctx.phase = TxPhase::Preparing;
        }
        (local.ctx.tx_token, local.ctx.participants.clone(), try_commit)
    };
    let votes = if try_commit {
        prepare_participants(&participants, tx, cfg.prepare_timeout, &Link(shared), &cfg)
    } else {
        Vec::new()
    };
    let commit = try_commit && votes.iter().all(|v| *v);
    {
        let mut st = shared.state.lock().unwrap();
        let now = Instant::now();
        let Some(ex) = st.executions.get_mut(&token) else { return };
        if !commit {
            ex.engine.rollback(now);
        }
        if let Some(local) = ex.tx.as_mut() {
            local.ctx.phase = if commit { TxPhase::Committed } else { TxPhase::RolledBack };
        }
        log::debug!("{}: tx {tx} decided {}", shared.label, if commit { "commit" } else { "rollback" });
    }
    let unreachable = finish_participants(&participants, tx, commit, &Link(shared), &cfg);
    let mut st = shared.state.lock().unwrap();
    if let Some(ex) = st.executions.get_mut(&token) {
        if let Some(local) = ex.tx.as_mut() {
            local.ctx.heuristics = unreachable;
            local.working = false;
        }
        ex.touch(Instant::now());
    }
    shared.cv.notify_all();
}

fn run_pull(shared: &Arc<Shared>, token: u64, tx: u64, targets: &[String]) {
    let req = status_request(&shared.engine.rewrite_base, tx);
    let mut outcome = None;
    for ep in targets {
        if let Ok(resp) = Link(shared).send(ep, &req, shared.tx.finish_timeout) {
            if let Some(p @ (TxPhase::Committed | TxPhase::RolledBack)) =
                resp.result().and_then(|(r, _)| TxPhase::parse(&r))
            {
                outcome = Some(p);
                break;
            }
        }
    }
    let job = {
        let mut st = shared.state.lock().unwrap();
        let Some(ex) = st.executions.get_mut(&token) else { return };
        let Some(local) = ex.tx.as_mut() else { return };
        local.working = false;
        let job = match outcome {
            Some(phase) if local.ctx.phase == TxPhase::Prepared => {
                let now = Instant::now();
                local.ctx.phase = phase;
                let children = local.ctx.participants.clone();
                if phase == TxPhase::RolledBack {
                    ex.engine.rollback(now);
                }
                ex.touch(now);
                Some(Job::Cascade { tx, children, commit: phase == TxPhase::Committed })
            }
            _ => None,
        };
        shared.cv.notify_all();
        job
    };
    if let Some(job) = job {
        spawn_job(shared, job);
    }
}

// ---------------------------------------------------------------------------
// Inbound
// ---------------------------------------------------------------------------

fn handle(shared: &Arc<Shared>, req: RestRequest) -> Reply {
    let service = req.service().unwrap_or_default().to_string();
    if service == "ctl" {
        return Reply::Respond(control(shared, &req));
    }
    let now = Instant::now();
    let operation = (service == shared.service).then(|| req.method().unwrap_or_default());
    let decision = shared.faults.lock().unwrap().on_inbound(operation, now);
    match decision {
        Inbound::Close => return Reply::Close,
        Inbound::Silent => return Reply::Silent,
        Inbound::Process | Inbound::ProcessThenVanish => {}
    }
    let _busy = Busy::new(shared);
    let delay = {
        let mut st = shared.state.lock().unwrap();
        shared.latency.sample(&mut st.rng)
    };
    if !delay.is_zero() {
        thread::sleep(delay);
    }
    let vanish = decision == Inbound::ProcessThenVanish;
    let resp = match service.as_str() {
        s if s == shared.service => role_inbound(shared, &req, vanish),
        "tx" => tx_inbound(shared, &req),
        "exec" => exec_inbound(shared, &req),
        _ => RestResponse::unavailable(),
    };
    if vanish {
        Reply::Close
    } else {
        Reply::Respond(resp)
    }
}

fn role_inbound(shared: &Arc<Shared>, req: &RestRequest, vanish: bool) -> RestResponse {
    let body = req.json();
    let rid = body.get("rid").and_then(Value::as_u64).unwrap_or(0);
    let from = body.get("from").and_then(Value::as_str).unwrap_or("?").to_string();
    if req.verb != Verb::Post {
        return RestResponse::method_not_allowed();
    }
    let Some(token) = req.token else { return RestResponse::unavailable() };
    // A message that arrives before its receive is enabled waits for it.
    let wait_until = Instant::now() + shared.engine.default_timeout.mul_f64(shared.engine.time_scale.max(0.0));
    let mut st = shared.state.lock().unwrap();
    let resp = loop {
        let now = Instant::now();
        let DeviceState { executions, behavior, .. } = &mut *st;
        let created = !executions.contains_key(&token);
        let ex = executions
            .entry(token)
            .or_insert_with(|| Execution { engine: new_engine(shared), tx: None, finished: None });
        let (resp, outcome) = ex.engine.handle_message(req, behavior.as_mut(), now);
        if outcome == MessageOutcome::Accepted && shared.transactional && ex.tx.is_none() {
            if let Some(tx) = body.get("tx").filter(|v| v.is_object()) {
                let tx_token = tx.get("token").and_then(Value::as_u64).unwrap_or(0);
                let parent = tx.get("parent").and_then(Value::as_str).map(str::to_string);
                let coordinator = tx.get("coordinator").and_then(Value::as_str).unwrap_or_default().to_string();
                ex.tx = Some(LocalTx {
                    ctx: TransactionContext::new(tx_token, token, ""),
                    coordinator: false,
                    parent,
                    coordinator_endpoint: coordinator,
                    joined: now,
                    working: false,
                    force_rollback: false,
                    last_pull: None,
                });
                st.tx_index.insert(tx_token, token);
            }
        }
        let Some(ex) = st.executions.get_mut(&token) else { break resp };
        if created && ex.engine.status == ExecStatus::Idle && ex.engine.token.is_none() && outcome != MessageOutcome::NotEnabled {
            st.executions.remove(&token);
            break resp;
        }
        ex.touch(now);
        if outcome == MessageOutcome::NotEnabled && now < wait_until && !st.shutdown {
            st = shared.cv.wait_timeout(st, shared.engine.tick.min(Duration::from_millis(20))).unwrap().0;
            continue;
        }
        if outcome == MessageOutcome::NotEnabled && created {
            if let Some(ex) = st.executions.get(&token) {
                if ex.engine.token.is_none() && ex.engine.status == ExecStatus::Idle {
                    st.executions.remove(&token);
                }
            }
        }
        break resp;
    };
    if !vanish {
        shared.sink.record(EventDraft {
            rid,
            token,
            from_role: from,
            to_role: shared.role.clone(),
            operation: req.method().unwrap_or_default().to_string(),
            verb: req.verb.as_str().to_string(),
            kind: EventKind::Response,
            status: Some(resp.status.code()),
            endpoint: shared.endpoint.clone(),
            detail: String::new(),
        });
    }
    shared.cv.notify_all();
    drop(st);
    resp
}

fn exec_for_tx<'a>(st: &'a mut MutexGuard<'_, DeviceState>, tx: u64) -> Option<(u64, &'a mut Execution)> {
    let token = *st.tx_index.get(&tx)?;
    st.executions.get_mut(&token).map(|e| (token, e))
}

fn tx_inbound(shared: &Arc<Shared>, req: &RestRequest) -> RestResponse {
    let (Some(tx_text), Some(action)) = (req.segments.get(1), req.segments.get(2)) else {
        return RestResponse::unavailable();
    };
    let Ok(tx) = tx_text.parse::<u64>() else { return RestResponse::unavailable() };
    let expected = if action == "status" { Verb::Get } else { Verb::Put };
    if req.verb != expected {
        return RestResponse::method_not_allowed();
    }
    match action.as_str() {
        "status" => {
            let mut st = shared.state.lock().unwrap();
            match exec_for_tx(&mut st, tx).and_then(|(_, ex)| ex.tx.as_ref()) {
                Some(local) => RestResponse::ok(local.ctx.phase.as_str(), tx),
                None => RestResponse::unavailable(),
            }
        }
        "prepare" => {
            let budget = req
                .json()
                .get("budget_ms")
                .and_then(Value::as_u64)
                .map(Duration::from_millis)
                .unwrap_or(shared.tx.prepare_timeout);
            prepare(shared, tx, budget)
        }
        "commit" => finish(shared, tx, true),
        "rollback" => finish(shared, tx, false),
        _ => RestResponse::unavailable(),
    }
}

fn prepare(shared: &Arc<Shared>, tx: u64, budget: Duration) -> RestResponse {
    let started = Instant::now();
    let mut st = shared.state.lock().unwrap();
    // Wait for the local execution to finish, and for any concurrent
    // prepare of the same transaction.
    loop {
        let Some((_, ex)) = exec_for_tx(&mut st, tx) else { return RestResponse::unavailable() };
        let Some(local) = ex.tx.as_ref() else { return RestResponse::unavailable() };
        match local.ctx.phase {
            TxPhase::Prepared | TxPhase::Committed => return RestResponse::ok("prepared", tx),
            TxPhase::RolledBack => return RestResponse::ok("abort", tx),
            TxPhase::Active if ex.engine.status.is_terminal() && !local.working => break,
            _ => {}
        }
        if started.elapsed() >= budget / 2 || st.shutdown {
            break;
        }
        st = shared.cv.wait_timeout(st, Duration::from_millis(10)).unwrap().0;
    }
    let now = Instant::now();
    let Some((_, ex)) = exec_for_tx(&mut st, tx) else { return RestResponse::unavailable() };
    if ex.engine.status != ExecStatus::Completed || ex.tx.as_ref().is_some_and(|t| t.ctx.phase != TxPhase::Active) {
        let job = abort_locally(ex, now);
        drop(st);
        if let Some(job) = job {
            spawn_job(shared, job);
        }
        shared.cv.notify_all();
        return RestResponse::ok("abort", tx);
    }
    let local = ex.tx.as_mut().expect("checked above");
    local.ctx.phase = TxPhase::Preparing;
    local.working = true;
    let children = local.ctx.participants.clone();
    drop(st);

    let remaining = budget.saturating_sub(started.elapsed()).mul_f64(0.8);
    let votes = if children.is_empty() {
        Vec::new()
    } else {
        prepare_participants(&children, tx, remaining, &Link(shared), &tx_config(shared))
    };
    let all_yes = votes.iter().all(|v| *v);

    let mut st = shared.state.lock().unwrap();
    let now = Instant::now();
    let Some((_, ex)) = exec_for_tx(&mut st, tx) else { return RestResponse::unavailable() };
    let local = ex.tx.as_mut().expect("checked above");
    local.working = false;
    if all_yes && local.ctx.phase == TxPhase::Preparing {
        local.ctx.phase = TxPhase::Prepared;
        local.last_pull = None;
        shared.cv.notify_all();
        return RestResponse::ok("prepared", tx);
    }
    // Vetoed, or rolled back by the parent while children were voting.
    let mut job = None;
    if local.ctx.phase != TxPhase::RolledBack {
        job = abort_locally(ex, now);
    } else {
        ex.engine.rollback(now);
        job = job.or(Some(Job::Cascade { tx, children, commit: false }));
    }
    ex.touch(now);
    drop(st);
    if let Some(job) = job {
        spawn_job(shared, job);
    }
    shared.cv.notify_all();
    RestResponse::ok("abort", tx)
}

fn finish(shared: &Arc<Shared>, tx: u64, commit: bool) -> RestResponse {
    let mut st = shared.state.lock().unwrap();
    let now = Instant::now();
    let Some((_, ex)) = exec_for_tx(&mut st, tx) else { return RestResponse::unavailable() };
    let Some(local) = ex.tx.as_mut() else { return RestResponse::unavailable() };
    let phase = local.ctx.phase;
    let children = local.ctx.participants.clone();
    let (resp, job) = match (commit, phase) {
        (true, TxPhase::Committed) => (RestResponse::ok("committed", tx), None),
        (true, TxPhase::Prepared) => {
            local.ctx.phase = TxPhase::Committed;
            (RestResponse::ok("committed", tx), Some(Job::Cascade { tx, children, commit: true }))
        }
        (true, _) => (RestResponse::unavailable(), None),
        (false, TxPhase::Committed) => (RestResponse::unavailable(), None),
        (false, TxPhase::RolledBack) => (RestResponse::ok("rolled_back", tx), None),
        (false, _) => {
            local.ctx.phase = TxPhase::RolledBack;
            ex.engine.rollback(now);
            // A prepare in progress cascades on its own when it sees the
            // new phase.
            let job = (phase != TxPhase::Preparing).then_some(Job::Cascade { tx, children, commit: false });
            (RestResponse::ok("rolled_back", tx), job)
        }
    };
    ex.touch(now);
    drop(st);
    shared.cv.notify_all();
    if let Some(job) = job {
        spawn_job(shared, job);
    }
    resp
}

/// `POST exec/abort {"token","from"}`: a peer gave up on an execution.
fn exec_inbound(shared: &Arc<Shared>, req: &RestRequest) -> RestResponse {
    if req.method() != Some("abort") {
        return RestResponse::unavailable();
    }
    if req.verb != Verb::Post {
        return RestResponse::method_not_allowed();
    }
    let Some(token) = req.token else { return RestResponse::unavailable() };
    let from = req.json().get("from").and_then(Value::as_str).unwrap_or_default().to_string();
    let now = Instant::now();
    let mut forward = Vec::new();
    let mut job = None;
    {
        let mut st = shared.state.lock().unwrap();
        let Some(ex) = st.executions.get_mut(&token) else { return RestResponse::ok("ignored", token) };
        match ex.tx.as_mut() {
            None => {
                if !ex.engine.status.is_terminal() {
                    ex.engine.abort(now);
                    forward = ex.engine.contacted();
                }
            }
            Some(local) if local.ctx.phase == TxPhase::Active => {
                if local.coordinator {
                    local.force_rollback = true;
                    if !ex.engine.status.is_terminal() {
                        ex.engine.abort(now);
                    }
                } else {
                    job = abort_locally(ex, now);
                }
                forward = ex.engine.contacted();
            }
            Some(_) => {}
        }
        ex.touch(now);
        shared.cv.notify_all();
    }
    if let Some(job) = job {
        spawn_job(shared, job);
    }
    send_abort_notices(shared, token, &forward, Some(&from));
    RestResponse::ok("aborted", token)
}

/// `ctl/arm`, `ctl/start`, `ctl/status`, `ctl/shutdown`. Exempt from faults.
fn control(shared: &Arc<Shared>, req: &RestRequest) -> RestResponse {
    let body = req.json();
    match (req.verb, req.method()) {
        (Verb::Post, Some("arm")) => match serde_json::from_value::<Arm>(body) {
            Ok(arm) => {
                arm_device(shared, &arm, Instant::now());
                RestResponse::ok("armed", arm.run)
            }
            Err(_) => RestResponse::unavailable(),
        },
        (Verb::Post, Some("start")) => {
            let Some(token) = req.token else { return RestResponse::unavailable() };
            let initial: BTreeMap<String, String> =
                body.get("initial").cloned().and_then(|v| serde_json::from_value(v).ok()).unwrap_or_default();
            match start_execution(shared, token, &initial) {
                Ok(()) => RestResponse::ok("started", token),
                Err(_) => RestResponse::unavailable(),
            }
        }
        (Verb::Get, Some("status")) => {
            let s = status(shared);
            RestResponse::ok(&serde_json::to_string(&s).unwrap_or_default(), 0)
        }
        (Verb::Post, Some("shutdown")) => {
            shared.state.lock().unwrap().shutdown = true;
            shared.cv.notify_all();
            RestResponse::ok("bye", 0)
        }
        _ => RestResponse::unavailable(),
    }
}

/// Sink that forwards events to a collector in another process.
pub struct HttpSink {
    pub endpoint: String,
    pub rewrite_base: String,
}

impl TraceSink for HttpSink {
    fn record(&self, draft: EventDraft) {
        let Ok(body) = serde_json::to_value(&draft) else { return };
        let mut body = body;
        body["token"] = json!(draft.token);
        let req = RestRequest::new(Verb::Post, &self.rewrite_base, &["trace", "event"]).with_json(&body);
        if let Err(e) = HttpMessenger.send(&self.endpoint, &req, Duration::from_secs(5)) {
            log::warn!("trace sink unreachable: {e}");
        }
    }
}

/// Control client for a device in another process.
pub struct RemoteControl {
    pub endpoint: String,
    pub rewrite_base: String,
}

impl RemoteControl {
    fn call(&self, verb: Verb, method: &str, body: Option<Value>) -> Result<RestResponse, String> {
        let mut req = RestRequest::new(verb, &self.rewrite_base, &["ctl", method]);
        if let Some(b) = body {
            req = req.with_json(&b);
        }
        let resp = HttpMessenger.send(&self.endpoint, &req, Duration::from_secs(10)).map_err(|e| e.to_string())?;
        if resp.is_ok() {
            Ok(resp)
        } else {
            Err(format!("{} answered {}", self.endpoint, resp.status.line()))
        }
    }

    pub fn arm(&self, arm: &Arm) -> Result<(), String> {
        self.call(Verb::Post, "arm", Some(serde_json::to_value(arm).map_err(|e| e.to_string())?)).map(|_| ())
    }

    pub fn start_execution(&self, token: u64, initial: &BTreeMap<String, String>) -> Result<(), String> {
        self.call(Verb::Post, "start", Some(json!({ "token": token, "initial": initial }))).map(|_| ())
    }

    pub fn status(&self) -> Result<DeviceStatus, String> {
        let resp = self.call(Verb::Get, "status", None)?;
        let (text, _) = resp.result().ok_or("malformed status")?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    pub fn shutdown(&self) -> Result<(), String> {
        self.call(Verb::Post, "shutdown", None).map(|_| ())
    }
}

/// Handles `trace/event` posts by recording them in `sink`.
pub fn trace_endpoint(sink: Arc<dyn TraceSink>) -> choreo_core::transport::Handler {
    Arc::new(move |req: RestRequest| {
        if req.service() != Some("trace") || req.method() != Some("event") {
            return Reply::Respond(RestResponse::unavailable());
        }
        match serde_json::from_value::<EventDraft>(req.json()) {
            Ok(d) => {
                sink.record(d);
                Reply::Respond(RestResponse::ok("recorded", req.token.unwrap_or(0)))
            }
            Err(_) => Reply::Respond(RestResponse::unavailable()),
        }
    })
}

/// Settings of a device started on its own (`choreo serve`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// Inferred from the projection when absent.
    pub role: Option<String>,
    pub clone_name: Option<String>,
    pub engine: EngineSettings,
    pub transactions: TxSettings,
    pub transactional: bool,
    pub faults: Vec<FaultSpec>,
    pub latency: Latency,
    /// Collector endpoint; events are logged when absent.
    pub trace: Option<String>,
    /// Role to endpoint. When present the device arms itself at start.
    pub peers: BTreeMap<String, String>,
    pub clones: HashMap<String, String>,
}

impl ServeConfig {
    pub fn setup(&self, role: &str, projection: Arc<RoleProjection>, bind: &str) -> DeviceSetup {
        DeviceSetup {
            role: role.to_string(),
            clone_name: self.clone_name.clone(),
            projection,
            bind: bind.to_string(),
            engine: self.engine.to_config(),
            tx: self.transactions.timing(&self.engine),
            transactional: self.transactional,
            faults: self.faults.clone(),
            latency: self.latency,
            behavior: default_behavior(),
        }
    }

    pub fn sink(&self) -> Arc<dyn TraceSink> {
        match &self.trace {
            Some(ep) => Arc::new(HttpSink { endpoint: ep.clone(), rewrite_base: self.engine.to_config().rewrite_base }),
            None => Arc::new(LogSink),
        }
    }
}

/// Default role code for simulated devices.
pub fn default_behavior() -> Box<dyn RoleBehavior> {
    Box::new(Acknowledge)
}
