//! Text artifacts: Mermaid sequence diagrams and execution-time histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::trace::{EventKind, TraceEvent};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("the trace has no events")]
    EmptyTrace,
    #[error("no completed run to build a histogram from")]
    NoData,
    #[error("bin count must be at least 1")]
    NoBins,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Mermaid `sequenceDiagram`: one lifeline per role in order of first
/// appearance, a solid arrow per request, a dashed arrow per response and
/// an abort note for every timeout. Executions are separated by a note
/// carrying their token.
pub fn sequence_diagram(events: &[TraceEvent]) -> Result<String, RenderError> {
    if events.is_empty() {
        return Err(RenderError::EmptyTrace);
    }
    let mut events: Vec<&TraceEvent> = events.iter().collect();
    events.sort_by_key(|e| e.seq);

    let mut roles: Vec<&str> = Vec::new();
    for e in &events {
        for r in [e.from_role.as_str(), e.to_role.as_str()] {
            if !roles.contains(&r) {
                roles.push(r);
            }
        }
    }
    let tokens: Vec<u64> = {
        let mut t: Vec<u64> = events.iter().map(|e| e.token).collect();
        t.dedup();
        t
    };

    let mut out = String::from("sequenceDiagram\n");
    for r in &roles {
        let _ = writeln!(out, "    participant {r}");
    }
    let span = match (roles.first(), roles.last()) {
        (Some(a), Some(b)) if a != b => format!("{a},{b}"),
        (Some(a), _) => a.to_string(),
        _ => unreachable!("non-empty trace has roles"),
    };
    let mut current = None;
    for e in events {
        if tokens.len() > 1 && current != Some(e.token) {
            current = Some(e.token);
            let _ = writeln!(out, "    Note over {span}: token {}", e.token);
        }
        let (from, to, op) = (&e.from_role, &e.to_role, &e.operation);
        match e.kind {
            EventKind::Request => {
                let _ = writeln!(out, "    {from}->>{to}: {op}");
            }
            EventKind::Response | EventKind::LateResponse => {
                let late = if e.kind == EventKind::LateResponse { " (late)" } else { "" };
                let _ = writeln!(out, "    {to}-->>{from}: {}{late}", status_label(e.status));
            }
            EventKind::Timeout | EventKind::LateTimeout => {
                let _ = writeln!(out, "    {to}--x{from}: no answer");
                let _ = writeln!(out, "    Note over {}: abort, {op} timed out", pair(from, to));
            }
        }
    }
    Ok(out)
}

fn pair(a: &str, b: &str) -> String {
    if a == b {
        a.to_string()
    } else {
        format!("{a},{b}")
    }
}

fn status_label(status: Option<u16>) -> String {
    match status {
        Some(200) => "200 OK".into(),
        Some(405) => "405 Method not allowed".into(),
        Some(503) => "503 Service Unavailable".into(),
        Some(other) => other.to_string(),
        None => "?".into(),
    }
}

/// Duration of one execution and whether it went wrong.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub run: u64,
    pub token: u64,
    pub duration_ms: f64,
    pub outcome: String,
    pub failed: bool,
}

/// Rebuilds per-execution samples from a trace: the time between the
/// first and last event of each token. An execution failed if any request
/// timed out or was answered with anything but 200.
pub fn samples_from_trace(events: &[TraceEvent]) -> Vec<Sample> {
    let mut order: Vec<u64> = Vec::new();
    let mut spans: BTreeMap<u64, (u64, u64, bool)> = BTreeMap::new();
    for e in events {
        let bad = matches!(e.kind, EventKind::Timeout | EventKind::LateTimeout)
            || (matches!(e.kind, EventKind::Response) && e.status != Some(200));
        let entry = spans.entry(e.token).or_insert_with(|| {
            order.push(e.token);
            (e.at_us, e.at_us, false)
        });
        entry.0 = entry.0.min(e.at_us);
        entry.1 = entry.1.max(e.at_us);
        entry.2 |= bad;
    }
    order
        .into_iter()
        .enumerate()
        .map(|(run, token)| {
            let (lo, hi, failed) = spans[&token];
            Sample {
                run: run as u64,
                token,
                duration_ms: (hi - lo) as f64 / 1000.0,
                outcome: if failed { "failed" } else { "completed" }.into(),
                failed,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub lower_ms: f64,
    pub upper_ms: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<Bin>,
    pub counted: usize,
    pub discarded: usize,
    pub min_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    /// Bin of each sample, `None` for discarded ones.
    pub placement: Vec<Option<usize>>,
}

/// Equal-width bins over [min, max] of the durations of runs that did not
/// fail. Failed runs are discarded. When every kept run has the same
/// duration there is a single bin.
pub fn latency_histogram(samples: &[Sample], bins: usize) -> Result<Histogram, RenderError> {
    if bins == 0 {
        return Err(RenderError::NoBins);
    }
    let kept: Vec<f64> = samples.iter().filter(|s| !s.failed).map(|s| s.duration_ms).collect();
    if kept.is_empty() {
        return Err(RenderError::NoData);
    }
    let min = kept.iter().copied().fold(f64::INFINITY, f64::min);
    let max = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = if max > min { bins } else { 1 };
    let width = (max - min) / n as f64;
    let mut out: Vec<Bin> = (0..n)
        .map(|i| Bin {
            lower_ms: min + width * i as f64,
            upper_ms: if i + 1 == n { max } else { min + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    let placement: Vec<Option<usize>> = samples
        .iter()
        .map(|s| {
            if s.failed {
                return None;
            }
            let i = if width > 0.0 { (((s.duration_ms - min) / width) as usize).min(n - 1) } else { 0 };
            out[i].count += 1;
            Some(i)
        })
        .collect();
    Ok(Histogram {
        bins: out,
        counted: kept.len(),
        discarded: samples.len() - kept.len(),
        min_ms: min,
        max_ms: max,
        mean_ms: kept.iter().sum::<f64>() / kept.len() as f64,
        placement,
    })
}

#[derive(Serialize)]
struct RunRow<'a> {
    run: u64,
    token: u64,
    duration_ms: String,
    outcome: &'a str,
    discarded: bool,
    bin: Option<usize>,
}

#[derive(Serialize)]
struct BinRow {
    bin: usize,
    lower_ms: String,
    upper_ms: String,
    count: usize,
}

impl Histogram {
    /// One row per run: duration, outcome and the bin it landed in.
    pub fn runs_csv(&self, samples: &[Sample], out: impl io::Write) -> Result<(), RenderError> {
        let mut w = csv::Writer::from_writer(out);
        for (s, bin) in samples.iter().zip(&self.placement) {
            w.serialize(RunRow {
                run: s.run,
                token: s.token,
                duration_ms: format!("{:.3}", s.duration_ms),
                outcome: &s.outcome,
                discarded: bin.is_none(),
                bin: *bin,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// The bin table.
    pub fn bins_csv(&self, out: impl io::Write) -> Result<(), RenderError> {
        let mut w = csv::Writer::from_writer(out);
        for (i, b) in self.bins.iter().enumerate() {
            w.serialize(BinRow {
                bin: i,
                lower_ms: format!("{:.3}", b.lower_ms),
                upper_ms: format!("{:.3}", b.upper_ms),
                count: b.count,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Horizontal bar chart scaled to `width` characters.
    pub fn text_chart(&self, width: usize) -> String {
        let peak = self.bins.iter().map(|b| b.count).max().unwrap_or(0).max(1);
        let mut s = format!(
            "runs counted: {}  discarded: {}  min: {:.1} ms  mean: {:.1} ms  max: {:.1} ms\n",
            self.counted, self.discarded, self.min_ms, self.mean_ms, self.max_ms
        );
        for b in &self.bins {
            let bar = "#".repeat((b.count * width).div_ceil(peak).min(width));
            let _ = writeln!(s, "{:>10.1} - {:>10.1} ms | {:<width$} {}", b.lower_ms, b.upper_ms, bar, b.count);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(seq: u64, token: u64, from: &str, to: &str, op: &str, kind: EventKind, status: Option<u16>) -> TraceEvent {
        TraceEvent {
            seq,
            at_us: seq * 1000,
            rid: seq,
            token,
            from_role: from.into(),
            to_role: to.into(),
            operation: op.into(),
            verb: "POST".into(),
            kind,
            status,
            endpoint: "127.0.0.1:1".into(),
            detail: String::new(),
        }
    }

    fn sample(d: f64, failed: bool) -> Sample {
        Sample { run: 0, token: 0, duration_ms: d, outcome: String::new(), failed }
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(sequence_diagram(&[]), Err(RenderError::EmptyTrace)));
    }

    #[test]
    fn single_request_draws_one_arrow() {
        let d = sequence_diagram(&[ev(0, 1, "A", "B", "op", EventKind::Request, None)]).unwrap();
        assert_eq!(d, "sequenceDiagram\n    participant A\n    participant B\n    A->>B: op\n");
    }

    #[test]
    fn timeouts_are_annotated() {
        let d = sequence_diagram(&[
            ev(0, 1, "A", "B", "op", EventKind::Request, None),
            ev(1, 1, "A", "B", "op", EventKind::Timeout, None),
        ])
        .unwrap();
        assert!(d.contains("Note over A,B: abort, op timed out"));
        assert!(d.contains("B--xA"));
    }

    #[test]
    fn rendering_is_deterministic_and_ordered_by_seq() {
        let mut t = vec![
            ev(1, 1, "A", "B", "op", EventKind::Response, Some(200)),
            ev(0, 1, "A", "B", "op", EventKind::Request, None),
        ];
        let one = sequence_diagram(&t).unwrap();
        t.reverse();
        assert_eq!(one, sequence_diagram(&t).unwrap());
        assert!(one.find("A->>B").unwrap() < one.find("B-->>A: 200 OK").unwrap());
    }

    #[test]
    fn identical_durations_fill_one_bin() {
        let h = latency_histogram(&[sample(5.0, false), sample(5.0, false), sample(5.0, false)], 10).unwrap();
        assert_eq!(h.bins.len(), 1);
        assert_eq!(h.bins[0].count, 3);
    }

    #[test]
    fn failed_runs_are_discarded() {
        let mut s: Vec<Sample> = (0..20).map(|i| sample(i as f64, false)).collect();
        s.extend((0..5).map(|_| sample(1e6, true)));
        let h = latency_histogram(&s, 4).unwrap();
        assert_eq!((h.counted, h.discarded), (20, 5));
        assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), 20);
        assert_eq!(h.max_ms, 19.0);
    }

    #[test]
    fn no_completed_runs_is_an_error() {
        assert!(matches!(latency_histogram(&[sample(1.0, true)], 3), Err(RenderError::NoData)));
        assert!(matches!(latency_histogram(&[], 3), Err(RenderError::NoData)));
    }

    #[test]
    fn maximum_lands_in_the_last_bin() {
        let h = latency_histogram(&[sample(0.0, false), sample(10.0, false)], 5).unwrap();
        assert_eq!(h.bins[0].count, 1);
        assert_eq!(h.bins[4].count, 1);
        assert_eq!(h.bins[4].upper_ms, 10.0);
    }

    #[test]
    fn csv_has_a_row_per_run() {
        let s = vec![sample(1.0, false), sample(2.0, true), sample(3.0, false)];
        let h = latency_histogram(&s, 2).unwrap();
        let mut buf = Vec::new();
        h.runs_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("run,token,duration_ms,outcome,discarded,bin\n"));
    }

    #[test]
    fn samples_follow_tokens() {
        let t = vec![
            ev(0, 9, "A", "B", "x", EventKind::Request, None),
            ev(3, 9, "A", "B", "x", EventKind::Response, Some(200)),
            ev(4, 4, "A", "B", "x", EventKind::Request, None),
            ev(5, 4, "A", "B", "x", EventKind::Timeout, None),
        ];
        let s = samples_from_trace(&t);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].token, s[0].duration_ms, s[0].failed), (9, 3.0, false));
        assert!(s[1].failed);
    }
}
