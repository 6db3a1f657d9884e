//! Message trace shared by every simulated device.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Request,
    Response,
    /// The sender gave up: timeout or transport error.
    Timeout,
    /// A response recorded after the sender had already given up.
    LateResponse,
    /// A failure marker recorded after the response was already in.
    LateTimeout,
}

impl EventKind {
    fn is_terminal(self) -> bool {
        matches!(self, EventKind::Response | EventKind::Timeout)
    }
}

/// What a device reports. The collector adds `seq` and `at_us`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDraft {
    pub rid: u64,
    pub token: u64,
    pub from_role: String,
    pub to_role: String,
    pub operation: String,
    pub verb: String,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    /// Request events: where the message went. Response events: who answered.
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    /// Microseconds since the collector was created.
    pub at_us: u64,
    pub rid: u64,
    pub token: u64,
    pub from_role: String,
    pub to_role: String,
    pub operation: String,
    pub verb: String,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Receives events from devices.
pub trait TraceSink: Send + Sync {
    fn record(&self, draft: EventDraft);
}

#[derive(Debug)]
struct Inner {
    events: Vec<TraceEvent>,
    /// Request ids that already have a terminal event.
    closed: HashMap<u64, EventKind>,
    next_rid: u64,
}

/// Single point that orders every event.
#[derive(Debug)]
pub struct Collector {
    origin: Instant,
    inner: Mutex<Inner>,
}

impl Default for Collector {
    fn default() -> Self {
        Collector {
            origin: Instant::now(),
            inner: Mutex::new(Inner { events: Vec::new(), closed: HashMap::new(), next_rid: 1 }),
        }
    }
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    pub fn next_rid(&self) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        let rid = inner.next_rid;
        inner.next_rid += 1;
        rid
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.inner.lock().unwrap().events.clone()
    }

    pub fn events_for(&self, token: u64) -> Vec<TraceEvent> {
        self.inner.lock().unwrap().events.iter().filter(|e| e.token == token).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TraceSink for Collector {
    fn record(&self, mut draft: EventDraft) {
        let at_us = self.origin.elapsed().as_micros() as u64;
        let mut inner = self.inner.lock().unwrap();
        if draft.kind.is_terminal() {
            match inner.closed.entry(draft.rid) {
                Entry::Occupied(_) => {
                    draft.kind = match draft.kind {
                        EventKind::Response => EventKind::LateResponse,
                        _ => EventKind::LateTimeout,
                    };
                }
                Entry::Vacant(v) => {
                    v.insert(draft.kind);
                }
            }
        }
        let seq = inner.events.len() as u64;
        inner.events.push(TraceEvent {
            seq,
            at_us,
            rid: draft.rid,
            token: draft.token,
            from_role: draft.from_role,
            to_role: draft.to_role,
            operation: draft.operation,
            verb: draft.verb,
            kind: draft.kind,
            status: draft.status,
            endpoint: draft.endpoint,
            detail: draft.detail,
        });
    }
}

/// Sink for a device running on its own: events go to the log.
#[derive(Debug, Default, Clone, Copy)]
pub struct LogSink;

impl TraceSink for LogSink {
    fn record(&self, d: EventDraft) {
        log::info!(
            "{:?} token={} {} -> {} {} {}{}",
            d.kind,
            d.token,
            d.from_role,
            d.to_role,
            d.operation,
            d.status.map(|s| s.to_string()).unwrap_or_default(),
            if d.detail.is_empty() { String::new() } else { format!(" ({})", d.detail) }
        );
    }
}

pub fn write_ndjson(events: &[TraceEvent], mut out: impl Write) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson(input: impl BufRead) -> io::Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|err| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {err}", n + 1)))?;
        events.push(e);
    }
    Ok(events)
}
