//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line for each; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use choreo_core::clones::Activation;
use choreo_core::model::CdlDuration;
use choreo_core::parser::{parse_duration, parse_package, serialize_package};
use choreo_core::projection::{coverage_check, project, Direction};
use choreo_core::transactions::TxPhase;
use choreo_core::transport::{
    parse_request, HttpMessenger, Limits, Messenger, Reply, RestRequest, RestResponse, Server, Verb,
};
use choreo_harness::fault::{DisappearFrom, FaultSpec};
use choreo_harness::invariants::{check_order, check_pairing, order_rules, Hop, OrderRule};
use choreo_harness::render::{latency_histogram, Sample};
use choreo_harness::runner::{Mode, RunOutcome, Simulation};
use choreo_harness::scenario::{Scenario, ScenarioError};
use choreo_harness::trace::EventKind;

type Verdict = Result<String, String>;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn corpus() -> String {
    std::fs::read_to_string(root().join("corpus/annex_accident.cdl")).expect("corpus file")
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(&root().join("scenarios").join(name)).expect("scenario file")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn corpus_fidelity() -> Verdict {
    let started = Instant::now();
    let parsed = parse_package(&corpus()).map_err(|e| e.to_string())?;
    ensure(!parsed.has_errors(), || format!("diagnostics: {:?}", parsed.diagnostics))?;
    let pkg = parsed.package;
    let again = parse_package(&serialize_package(&pkg)).map_err(|e| e.to_string())?.package;
    ensure(again == pkg, || "serialize/parse round trip changed the package".into())?;
    let counts = (pkg.choreographies.len(), pkg.role_types.len(), pkg.interactions().len());
    ensure(counts == (3, 5, 4), || format!("choreographies/roles/interactions = {counts:?}"))?;
    within(started, Duration::from_secs(1))?;
    Ok(format!("3 choreographies, 5 roles, 4 interactions, round trip equal, {:?}", started.elapsed()))
}

fn projection_correctness() -> Verdict {
    let started = Instant::now();
    let pkg = parse_package(&corpus()).map_err(|e| e.to_string())?.package;
    ensure(pkg.role_types.len() == 5, || "expected 5 roles".into())?;
    for r in &pkg.role_types {
        project(&pkg, &r.name).map_err(|e| e.to_string())?;
    }
    ensure(coverage_check(&pkg), || "coverage check failed".into())?;
    let baliza = project(&pkg, "BalizaRole").map_err(|e| e.to_string())?;
    let steps: BTreeSet<(String, &str)> = baliza
        .steps()
        .iter()
        .map(|s| {
            let dir = match s.direction {
                Direction::Send => "send",
                Direction::Receive => "receive",
            };
            (s.interaction.name.clone(), dir)
        })
        .collect();
    let expected: BTreeSet<(String, &str)> = [
        ("reportarAccidente".to_string(), "receive"),
        ("publicarAccidente".to_string(), "send"),
        ("alertaAccidente".to_string(), "send"),
    ]
    .into();
    ensure(steps == expected, || format!("BalizaRole steps {steps:?}"))?;
    let (small, full) = (baliza.to_document().len(), serialize_package(&pkg).len());
    ensure(small < full, || format!("projection {small} bytes, package {full} bytes"))?;
    within(started, Duration::from_secs(1))?;
    Ok(format!("coverage holds for 5 roles; BalizaRole steps exact; {small} < {full} bytes"))
}

fn accident_rules(sim: &Simulation) -> Result<Vec<OrderRule>, String> {
    let rules = order_rules(sim.package());
    let hop = |op: &str, from: &str, to: &str| Hop { operation: op.into(), from_role: from.into(), to_role: to.into() };
    let report = hop("informarIncidente", "VehiculoAccidentadoRole", "BalizaRole");
    let publish = hop("publicarIncidente", "BalizaRole", "CentralBalizasRole");
    let alert = hop("alertaIncidente", "BalizaRole", "VehiculoTransitoRole");
    let help = hop("solicitarAyudaIncidente", "CentralBalizasRole", "CentralEmergenciasRole");
    let expected = [
        OrderRule::RequestBefore { earlier: report.clone(), later: publish.clone() },
        OrderRule::RequestBefore { earlier: report, later: alert },
        OrderRule::OkBefore { earlier: publish, later: help },
    ];
    for e in &expected {
        ensure(rules.contains(e), || format!("derived rules lack {e:?}"))?;
    }
    Ok(rules)
}

fn end_to_end_ordering() -> Verdict {
    let started = Instant::now();
    let mut sc = scenario("accident.toml");
    sc.runs = 100;
    sc.seed = 2024;
    let mut sim = Simulation::new(sc, Mode::InProcess).map_err(|e| e.to_string())?;
    let rules = accident_rules(&sim)?;
    let reports = sim.run_all().map_err(|e| e.to_string())?;
    for r in &reports {
        let t = r.metrics.token;
        ensure(r.metrics.outcome == RunOutcome::Completed, || format!("run {} ended {:?}", r.metrics.run, r.metrics.outcome))?;
        let events = sim.events_for(t);
        let requests: BTreeSet<&str> =
            events.iter().filter(|e| e.kind == EventKind::Request).map(|e| e.operation.as_str()).collect();
        ensure(requests.len() == 4, || format!("run {}: requests {requests:?}", r.metrics.run))?;
        let problems = check_order(&events, &rules);
        ensure(problems.is_empty(), || format!("run {}: {problems:?}", r.metrics.run))?;
        let pairing = check_pairing(&events);
        ensure(pairing.is_empty(), || format!("run {}: {pairing:?}", r.metrics.run))?;
    }
    within(started, Duration::from_secs(60))?;
    Ok(format!("100/100 runs completed in causal order in {:.1?}", started.elapsed()))
}

fn post(endpoint: &str, op: &str, token: u64) -> Result<RestResponse, String> {
    let req = RestRequest::new(Verb::Post, "api", &["baliza", op])
        .with_json(&json!({ "token": token, "value": "probe", "from": "VehiculoAccidentadoRole" }));
    HttpMessenger.send(endpoint, &req, Duration::from_secs(5)).map_err(|e| e.to_string())
}

fn timeout_and_quarantine() -> Verdict {
    let base = scenario("accident_unresponsive.toml");
    let scaled = base.engine.scaled_timeout();
    let quarantine = Duration::from_millis(base.engine.quarantine_ms);
    ensure((scaled.as_secs_f64() - 2.0).abs() < 0.01, || format!("scaled timeout is {scaled:?}"))?;
    let (lo, hi) = (scaled.mul_f64(0.8), scaled.mul_f64(1.2));
    let mut waits = Vec::new();
    for seed in 0..20u64 {
        let mut sc = base.clone();
        sc.seed = seed;
        sc.runs = 1;
        let mut sim = Simulation::new(sc, Mode::InProcess).map_err(|e| e.to_string())?;
        let report = sim.run_once().map_err(|e| e.to_string())?;
        let probe_start = Instant::now();
        let token = report.metrics.token;
        ensure(report.metrics.outcome == RunOutcome::Aborted, || format!("seed {seed}: {:?}", report.metrics.outcome))?;
        let atom = report.atomicity.as_ref().ok_or("no transaction record")?;
        ensure(!atom.mixed() && atom.phase == Some(TxPhase::RolledBack), || format!("seed {seed}: {atom:?}"))?;

        let events = sim.events_for(token);
        let sent = events.iter().find(|e| e.kind == EventKind::Request && e.operation == "publicarIncidente");
        let gave_up = events.iter().find(|e| e.kind == EventKind::Timeout && e.operation == "publicarIncidente");
        let (Some(sent), Some(gave_up)) = (sent, gave_up) else {
            return Err(format!("seed {seed}: no timed-out publicarIncidente in the trace"));
        };
        let waited = Duration::from_micros(gave_up.at_us - sent.at_us);
        ensure(waited >= lo && waited <= hi, || format!("seed {seed}: aborted after {waited:?}"))?;
        waits.push(waited);

        let baliza = sim.endpoint("BalizaRole").ok_or("no beacon device")?.to_string();
        for at in [Duration::ZERO, quarantine.mul_f64(0.5)] {
            thread::sleep(at.saturating_sub(probe_start.elapsed()));
            let r = post(&baliza, "informarIncidente", token)?;
            ensure(r.status.code() == 503, || format!("seed {seed}: {} inside the window", r.status.code()))?;
        }
        thread::sleep((quarantine + Duration::from_millis(150)).saturating_sub(probe_start.elapsed()));
        let r = post(&baliza, "informarIncidente", token)?;
        ensure(r.status.code() == 200, || format!("seed {seed}: {} after the window", r.status.code()))?;
    }
    let min = waits.iter().min().copied().unwrap_or_default();
    let max = waits.iter().max().copied().unwrap_or_default();
    Ok(format!("20 seeds aborted after {min:.2?}..{max:.2?} (target {scaled:.2?} ±20%), 503 inside and 200 after a {quarantine:?} window"))
}

fn clone_failover() -> Verdict {
    let mut sc = scenario("accident_clone.toml");
    sc.runs = 20;
    let mut sim = Simulation::new(sc, Mode::InProcess).map_err(|e| e.to_string())?;
    let clone = sim.endpoint("VehiculoTransitoClone").ok_or("no clone device")?.to_string();
    let primary = sim.endpoint("VehiculoTransitoRole").ok_or("no primary device")?.to_string();
    for _ in 0..20 {
        let r = sim.run_once().map_err(|e| e.to_string())?;
        let t = r.metrics.token;
        ensure(r.metrics.outcome == RunOutcome::Completed, || format!("run {}: {:?}", r.metrics.run, r.metrics.outcome))?;
        let answered: Vec<String> = sim
            .events_for(t)
            .into_iter()
            .filter(|e| e.kind == EventKind::Response && e.operation == "alertaIncidente" && e.status == Some(200))
            .map(|e| e.endpoint)
            .collect();
        ensure(answered == vec![clone.clone()], || format!("run {}: alert answered by {answered:?}", r.metrics.run))?;
        let dir = sim.device("BalizaRole").ok_or("no beacon device")?.directory();
        ensure(dir.resolve("VehiculoTransitoRole", t).ok().as_deref() == Some(clone.as_str()), || {
            format!("run {}: binding not sticky", r.metrics.run)
        })?;
        ensure(dir.activation("VehiculoTransitoRole", t) == Activation::Activated, || "clone not activated".into())?;
        ensure(dir.primary("VehiculoTransitoRole") == Some(primary.as_str()), || "primary binding lost".into())?;
    }
    Ok(format!("20/20 runs completed; alertaIncidente answered by the clone at {clone}, binding sticky per token"))
}

fn transaction_atomicity() -> Verdict {
    let started = Instant::now();
    let mut sc = scenario("accident.toml");
    sc.seed = 99;
    sc.engine.time_scale = 100.0 / 35_000.0;
    sc.engine.tick_ms = 10;
    sc.engine.quarantine_ms = 50;
    sc.deadline_ms = 5_000;
    let t_ms = 100u64;
    let mut sim = Simulation::new(sc, Mode::InProcess).map_err(|e| e.to_string())?;
    let pkg = sim.package().clone();
    let roles: Vec<String> = pkg.role_types.iter().map(|r| r.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let (mut committed, mut rolled_back) = (0, 0);
    for run in 0..200 {
        let victim = roles[rng.random_range(0..roles.len())].clone();
        let inbound: Vec<String> =
            pkg.interactions().iter().filter(|(_, i)| i.to_role == victim).map(|(_, i)| i.operation.clone()).collect();
        let from = match (rng.random_range(0..3), inbound.first()) {
            (1, Some(op)) => DisappearFrom::BeforeReceive { operation: op.clone() },
            (2, Some(op)) => DisappearFrom::AfterReceive { operation: op.clone() },
            _ => DisappearFrom::AfterMs { ms: rng.random_range(0..=2 * t_ms) },
        };
        let fault = FaultSpec::Disappear { from, duration_ms: Some(rng.random_range(0..=4 * t_ms)) };
        for r in &roles {
            let plan = if *r == victim { vec![fault.clone()] } else { Vec::new() };
            sim.set_faults(r, plan).map_err(|e| e.to_string())?;
        }
        let report = sim.run_once().map_err(|e| e.to_string())?;
        let atom = report.atomicity.ok_or_else(|| format!("run {run}: no transaction at the initiator"))?;
        ensure(!atom.mixed(), || format!("run {run} ({victim}, {fault:?}): {:?}", atom.violations))?;
        match atom.phase {
            Some(TxPhase::Committed) => committed += 1,
            Some(TxPhase::RolledBack) => rolled_back += 1,
            other => return Err(format!("run {run}: root phase {other:?}")),
        }
    }
    within(started, Duration::from_secs(300))?;
    Ok(format!(
        "200 runs, 0 mixed outcomes ({committed} committed, {rolled_back} rolled back) in {:.1?}",
        started.elapsed()
    ))
}

fn wire_exactness() -> Verdict {
    let golden: [(RestResponse, &[u8]); 3] = [
        (
            RestResponse::ok("baliza:informarIncidente", 42),
            b"HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: 48\r\nConnection: close\r\n\r\n{\"result\":\"baliza:informarIncidente\",\"token\":42}",
        ),
        (
            RestResponse::method_not_allowed(),
            b"HTTP/1.1 405 Method not allowed\r\nContent-Type: application/json\r\nContent-Length: 0\r\nConnection: close\r\n\r\n",
        ),
        (
            RestResponse::unavailable(),
            b"HTTP/1.1 503 Service Unavailable\r\nContent-Type: application/json\r\nContent-Length: 0\r\nConnection: close\r\n\r\n",
        ),
    ];
    for (resp, bytes) in &golden {
        ensure(resp.to_bytes() == *bytes, || format!("{:?} serialized as {:?}", resp.status, String::from_utf8_lossy(&resp.to_bytes())))?;
    }

    // The same bytes on a real socket.
    let server = Server::bind(
        "127.0.0.1:0",
        Limits::default(),
        Arc::new(|req: RestRequest| match req.verb {
            Verb::Post => Reply::Respond(RestResponse::ok("baliza:informarIncidente", req.token.unwrap_or(0))),
            Verb::Get => Reply::Respond(RestResponse::method_not_allowed()),
            _ => Reply::Respond(RestResponse::unavailable()),
        }),
    )
    .map_err(|e| e.to_string())?;
    let raw = |text: &str| -> Result<Vec<u8>, String> {
        let mut s = TcpStream::connect(server.local_addr()).map_err(|e| e.to_string())?;
        s.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        s.read_to_end(&mut out).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let body = "{\"token\":42}";
    let post = format!("POST /api/baliza/informarIncidente HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\n\r\n{body}", body.len());
    ensure(raw(&post)? == golden[0].1, || "200 differs on the wire".into())?;
    ensure(raw("GET /api/baliza/informarIncidente HTTP/1.1\r\nHost: x\r\n\r\n")? == golden[1].1, || "405 differs on the wire".into())?;
    ensure(raw("PUT /api/baliza/informarIncidente HTTP/1.1\r\nHost: x\r\n\r\n")? == golden[2].1, || "503 differs on the wire".into())?;
    drop(server);

    let mut runner = TestRunner::new(Config { cases: 1000, ..Config::default() });
    runner
        .run(&any::<char>(), |c| {
            if let Some(v) = Verb::from_code(c) {
                prop_assert_eq!(v.code(), c);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let codes: String = Verb::ALL.iter().map(|v| v.code()).collect();
    ensure(codes == "GPOD", || format!("codes are {codes}"))?;
    ensure(Verb::ALL.iter().all(|v| Verb::from_code(v.code()) == Some(*v)), || "verb codes not a bijection".into())?;

    let limits = Limits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seeds: [&[u8]; 3] = [b"POST /api/", b"GET /api/x/y HTTP/1.1\r\n", b"PUT /api/tx/1/commit HTTP/1.1\r\nContent-Length: 9\r\n\r\n"];
    let prev = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut crashes = 0;
    for i in 0..100_000u32 {
        let len = rng.random_range(0..600);
        let mut input = if i % 2 == 0 { seeds[(i as usize / 2) % 3].to_vec() } else { Vec::new() };
        let start = input.len();
        input.resize(start + len, 0);
        rng.fill_bytes(&mut input[start..]);
        if panic::catch_unwind(AssertUnwindSafe(|| parse_request(&input, &limits))).is_err() {
            crashes += 1;
        }
    }
    panic::set_hook(prev);
    ensure(crashes == 0, || format!("{crashes} crashes in 100000 inputs"))?;
    Ok("golden status lines and body bytes match, on the wire too; G/P/O/D bijection; 100000 fuzz inputs, 0 crashes".into())
}

fn histogram_and_budget() -> Verdict {
    let mut sc = scenario("accident.toml");
    sc.runs = 400;
    sc.seed = 400;
    let mut sim = Simulation::new(sc.clone(), Mode::InProcess).map_err(|e| e.to_string())?;
    let reports = sim.run_all().map_err(|e| e.to_string())?;
    let samples: Vec<Sample> = reports
        .iter()
        .map(|r| Sample {
            run: r.metrics.run,
            token: r.metrics.token,
            duration_ms: r.metrics.duration_ms,
            outcome: r.metrics.outcome.as_str().into(),
            failed: r.metrics.failed,
        })
        .collect();
    let h = latency_histogram(&samples, 20).map_err(|e| e.to_string())?;
    ensure((h.counted, h.discarded) == (400, 0), || format!("counted {} discarded {}", h.counted, h.discarded))?;
    let mut csv = Vec::new();
    h.runs_csv(&samples, &mut csv).map_err(|e| e.to_string())?;
    let rows = String::from_utf8_lossy(&csv).lines().count() - 1;
    ensure(rows == 400, || format!("{rows} CSV rows"))?;

    let pkg = sim.package().clone();
    let size = project(&pkg, "BalizaRole").map_err(|e| e.to_string())?.to_document().len();
    ensure(size <= 8192, || format!("BalizaRole projection is {size} bytes"))?;
    let budgeted = sc.devices.iter().find(|d| d.role == "BalizaRole").and_then(|d| d.resource_budget);
    ensure(budgeted == Some(8192), || "scenario does not budget the beacon".into())?;
    let mut tight = sc;
    for d in &mut tight.devices {
        d.resource_budget = Some(64);
    }
    ensure(matches!(tight.check(&pkg), Err(ScenarioError::BudgetExceeded { .. })), || "tight budget accepted".into())?;
    Ok(format!(
        "400 counted, 0 discarded, 400 CSV rows, mean {:.2} ms; BalizaRole projection {size} <= 8192 bytes",
        h.mean_ms
    ))
}

fn duration_parser() -> Verdict {
    for (text, secs) in [("PT35S", 35), ("PT0S", 0), ("PT1M30S", 90)] {
        let got = parse_duration(text).map_err(|e| e.to_string())?;
        ensure(got == CdlDuration::from_secs(secs), || format!("{text} parsed as {got:?}"))?;
    }
    let mut runner = TestRunner::new(Config { cases: 1000, ..Config::default() });
    runner
        .run(&(0u64..10_000_000), |s| {
            let d = CdlDuration::from_secs(s);
            let text = d.to_string();
            prop_assert_eq!(parse_duration(&text).ok(), Some(d), "{}", text);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("PT35S=35, PT0S=0, PT1M30S=90; 1000 round trips".into())
}

type Criterion = fn() -> Verdict;

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("corpus fidelity", corpus_fidelity),
        ("projection correctness", projection_correctness),
        ("end-to-end ordering", end_to_end_ordering),
        ("timeout and unusable window", timeout_and_quarantine),
        ("clone failover", clone_failover),
        ("transaction atomicity", transaction_atomicity),
        ("wire exactness", wire_exactness),
        ("histogram pipeline and resource budget", histogram_and_budget),
        ("duration parser", duration_parser),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let verdict = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({why})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
