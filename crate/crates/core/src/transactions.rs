//! Two-phase commit over REST.
//!
//! Wire format: `PUT /{base}/tx/{tx}/prepare|commit|rollback` with body
//! `{"token":<tx>}` and the usual 200 body whose `result` is `prepared`,
//! `abort`, `committed` or `rolled_back`. `GET /{base}/tx/{tx}/status` reports
//! the current phase. A prepare timeout or any non-200 answer counts as an
//! abort vote.

use std::collections::HashMap;
use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::transport::{Messenger, RestRequest, RestResponse, Verb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxPhase {
    Active,
    Preparing,
    Prepared,
    Committed,
    RolledBack,
}

impl TxPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TxPhase::Active => "active",
            TxPhase::Preparing => "preparing",
            TxPhase::Prepared => "prepared",
            TxPhase::Committed => "committed",
            TxPhase::RolledBack => "rolled_back",
        }
    }

    pub fn parse(s: &str) -> Option<TxPhase> {
        [
            TxPhase::Active,
            TxPhase::Preparing,
            TxPhase::Prepared,
            TxPhase::Committed,
            TxPhase::RolledBack,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TxPhase::Committed | TxPhase::RolledBack)
    }
}

impl fmt::Display for TxPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub role: String,
    pub endpoint: String,
    pub phase: TxPhase,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxError {
    #[error("a transaction is already open for execution {0}")]
    AlreadyOpen(u64),
    #[error("transaction is {0}, participants can only join while active")]
    WrongPhase(TxPhase),
    #[error("phase {0} is terminal")]
    Terminal(TxPhase),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionContext {
    pub tx_token: u64,
    pub exec_token: u64,
    pub coordinator_role: String,
    pub participants: Vec<Participant>,
    pub phase: TxPhase,
    /// Participants that could not be reached during phase two.
    pub heuristics: Vec<String>,
}

impl TransactionContext {
    pub fn new(tx_token: u64, exec_token: u64, coordinator_role: impl Into<String>) -> Self {
        TransactionContext {
            tx_token,
            exec_token,
            coordinator_role: coordinator_role.into(),
            participants: Vec::new(),
            phase: TxPhase::Active,
            heuristics: Vec::new(),
        }
    }

    /// Adds a participant. Enlisting the same `(role, endpoint)` twice is a
    /// no-op.
    pub fn enlist(&mut self, role: &str, endpoint: &str) -> Result<(), TxError> {
        if self.phase != TxPhase::Active {
            return Err(TxError::WrongPhase(self.phase));
        }
        if !self.participants.iter().any(|p| p.role == role && p.endpoint == endpoint) {
            self.participants.push(Participant {
                role: role.to_string(),
                endpoint: endpoint.to_string(),
                phase: TxPhase::Active,
            });
        }
        Ok(())
    }

    /// Removes a participant that was replaced (for example by a clone).
    pub fn delist(&mut self, endpoint: &str) -> bool {
        let before = self.participants.len();
        self.participants.retain(|p| p.endpoint != endpoint);
        before != self.participants.len()
    }

    /// Moves to a new phase; terminal phases never change.
    pub fn set_phase(&mut self, phase: TxPhase) -> Result<(), TxError> {
        if self.phase.is_terminal() && phase != self.phase {
            return Err(TxError::Terminal(self.phase));
        }
        self.phase = phase;
        Ok(())
    }

    pub fn is_terminal(&self) -> bool {
        self.phase.is_terminal()
    }
}

/// One context per execution token.
#[derive(Debug, Default)]
pub struct TransactionTable {
    by_exec: HashMap<u64, TransactionContext>,
    by_tx: HashMap<u64, u64>,
}

impl TransactionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a context with a fresh random transaction token.
    pub fn begin(&mut self, exec_token: u64, coordinator: &str) -> Result<&mut TransactionContext, TxError> {
        let mut tx = rand::random::<u64>();
        while tx == exec_token || self.by_tx.contains_key(&tx) {
            tx = rand::random();
        }
        self.begin_with(exec_token, tx, coordinator)
    }

    pub fn begin_with(
        &mut self,
        exec_token: u64,
        tx_token: u64,
        coordinator: &str,
    ) -> Result<&mut TransactionContext, TxError> {
        if self.by_exec.contains_key(&exec_token) {
            return Err(TxError::AlreadyOpen(exec_token));
        }
        self.by_tx.insert(tx_token, exec_token);
        Ok(self
            .by_exec
            .entry(exec_token)
            .or_insert_with(|| TransactionContext::new(tx_token, exec_token, coordinator)))
    }

    pub fn for_execution(&self, exec_token: u64) -> Option<&TransactionContext> {
        self.by_exec.get(&exec_token)
    }

    pub fn for_execution_mut(&mut self, exec_token: u64) -> Option<&mut TransactionContext> {
        self.by_exec.get_mut(&exec_token)
    }

    pub fn by_tx(&self, tx_token: u64) -> Option<&TransactionContext> {
        self.by_tx.get(&tx_token).and_then(|e| self.by_exec.get(e))
    }

    pub fn by_tx_mut(&mut self, tx_token: u64) -> Option<&mut TransactionContext> {
        let exec = *self.by_tx.get(&tx_token)?;
        self.by_exec.get_mut(&exec)
    }

    pub fn len(&self) -> usize {
        self.by_exec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_exec.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecideHint {
    TryCommit,
    ForceRollback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxConfig {
    pub rewrite_base: String,
    /// How long a participant may take to vote.
    pub prepare_timeout: Duration,
    /// Timeout of each commit or rollback message.
    pub finish_timeout: Duration,
    /// Extra attempts for an unreachable participant in phase two.
    pub retry_count: u32,
    pub retry_delay: Duration,
}

impl Default for TxConfig {
    fn default() -> Self {
        TxConfig {
            rewrite_base: "api".into(),
            prepare_timeout: Duration::from_secs(140),
            finish_timeout: Duration::from_secs(35),
            retry_count: 0,
            retry_delay: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxAction {
    Prepare,
    Commit,
    Rollback,
}

impl TxAction {
    pub fn as_str(self) -> &'static str {
        match self {
            TxAction::Prepare => "prepare",
            TxAction::Commit => "commit",
            TxAction::Rollback => "rollback",
        }
    }
}

/// Builds `PUT /{base}/tx/{tx}/{action}`. `budget` tells the participant how
/// long it may take to vote, which it uses to bound its own cascade.
pub fn tx_request(base: &str, tx: u64, action: TxAction, budget: Option<Duration>) -> RestRequest {
    let tx_text = tx.to_string();
    let mut body = json!({ "token": tx });
    if let Some(b) = budget {
        body["budget_ms"] = json!(b.as_millis() as u64);
    }
    RestRequest::new(Verb::Put, base, &["tx", &tx_text, action.as_str()]).with_json(&body)
}

pub fn status_request(base: &str, tx: u64) -> RestRequest {
    let tx_text = tx.to_string();
    RestRequest::new(Verb::Get, base, &["tx", &tx_text, "status"])
}

fn vote_of(resp: &RestResponse) -> bool {
    resp.is_ok() && resp.result().is_some_and(|(r, _)| r == "prepared")
}

/// Phase one: asks every participant to prepare, concurrently. Returns one
/// vote per participant, in order.
pub fn prepare_participants(
    participants: &[Participant],
    tx: u64,
    budget: Duration,
    messenger: &dyn Messenger,
    cfg: &TxConfig,
) -> Vec<bool> {
    // The participant gets slightly less than we wait so its answer makes it
    // back in time.
    let inner = budget.mul_f64(0.9);
    thread::scope(|s| {
        let handles: Vec<_> = participants
            .iter()
            .map(|p| {
                s.spawn(move || {
                    let req = tx_request(&cfg.rewrite_base, tx, TxAction::Prepare, Some(inner));
                    matches!(messenger.send(&p.endpoint, &req, budget), Ok(r) if vote_of(&r))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or(false)).collect()
    })
}

/// Phase two: sends commit or rollback to every participant, retrying each
/// up to `retry_count` times. Returns the endpoints that never answered.
pub fn finish_participants(
    participants: &[Participant],
    tx: u64,
    commit: bool,
    messenger: &dyn Messenger,
    cfg: &TxConfig,
) -> Vec<String> {
    let action = if commit { TxAction::Commit } else { TxAction::Rollback };
    thread::scope(|s| {
        let handles: Vec<_> = participants
            .iter()
            .map(|p| {
                s.spawn(move || {
                    let req = tx_request(&cfg.rewrite_base, tx, action, None);
                    for attempt in 0..=cfg.retry_count {
                        if attempt > 0 {
                            thread::sleep(cfg.retry_delay);
                        }
                        if matches!(messenger.send(&p.endpoint, &req, cfg.finish_timeout), Ok(r) if r.is_ok()) {
                            return None;
                        }
                    }
                    log::warn!("participant {} at {} unreachable for {}", p.role, p.endpoint, action.as_str());
                    Some(p.endpoint.clone())
                })
            })
            .collect();
        handles.into_iter().filter_map(|h| h.join().unwrap_or(None)).collect()
    })
}

/// Runs the whole protocol from the coordinator's side.
pub fn decide(ctx: &mut TransactionContext, hint: DecideHint, messenger: &dyn Messenger, cfg: &TxConfig) -> TxPhase {
    if ctx.is_terminal() {
        return ctx.phase;
    }
    let commit = match hint {
        DecideHint::ForceRollback => false,
        DecideHint::TryCommit => {
            ctx.phase = TxPhase::Preparing;
            let votes = prepare_participants(&ctx.participants, ctx.tx_token, cfg.prepare_timeout, messenger, cfg);
            for (p, yes) in ctx.participants.iter_mut().zip(&votes) {
                p.phase = if *yes { TxPhase::Prepared } else { TxPhase::RolledBack };
            }
            votes.iter().all(|v| *v)
        }
    };
    let final_phase = if commit { TxPhase::Committed } else { TxPhase::RolledBack };
    ctx.phase = final_phase;
    let unreachable = finish_participants(&ctx.participants, ctx.tx_token, commit, messenger, cfg);
    for p in &mut ctx.participants {
        if !unreachable.contains(&p.endpoint) {
            p.phase = final_phase;
        }
    }
    ctx.heuristics = unreachable;
    final_phase
}

/// Local effects a participant exposes to the protocol.
pub trait TxResource {
    fn phase(&self, tx: u64) -> Option<TxPhase>;
    /// Freezes local effects; `false` means the participant votes abort.
    fn prepare(&mut self, tx: u64) -> bool;
    fn commit(&mut self, tx: u64);
    /// Undoes local effects. Must be idempotent.
    fn rollback(&mut self, tx: u64);
}

/// Participant side of `tx/{tx}/{action}` for a single resource.
pub fn participant_handle(req: &RestRequest, resource: &mut dyn TxResource) -> RestResponse {
    let (Some("tx"), Some(tx_text), Some(action)) = (
        req.segments.first().map(String::as_str),
        req.segments.get(1),
        req.segments.get(2).map(String::as_str),
    ) else {
        return RestResponse::unavailable();
    };
    let Ok(tx) = tx_text.parse::<u64>() else {
        return RestResponse::unavailable();
    };
    let Some(phase) = resource.phase(tx) else {
        return RestResponse::unavailable();
    };
    let expected = if action == "status" { Verb::Get } else { Verb::Put };
    if req.verb != expected {
        return RestResponse::method_not_allowed();
    }
    let result = match action {
        "status" => phase.as_str(),
        "prepare" => match phase {
            TxPhase::RolledBack => "abort",
            TxPhase::Prepared | TxPhase::Committed => "prepared",
            _ => {
                if resource.prepare(tx) {
                    "prepared"
                } else {
                    resource.rollback(tx);
                    "abort"
                }
            }
        },
        "commit" => match phase {
            TxPhase::Prepared | TxPhase::Committed => {
                resource.commit(tx);
                "committed"
            }
            _ => return RestResponse::unavailable(),
        },
        "rollback" => match phase {
            TxPhase::Committed => return RestResponse::unavailable(),
            _ => {
                resource.rollback(tx);
                "rolled_back"
            }
        },
        _ => return RestResponse::unavailable(),
    };
    RestResponse::ok(result, tx)
}
