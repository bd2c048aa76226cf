//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.
//!
//! Oracles are independent of the crate: golden frames were produced with
//! Python's `binascii.crc_hqx`, the regulation trajectory with
//! `tests/oracle/regulation.py`, hop counts by hand.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::{json, Value};

use iotarch::broker::{Broker, Delivery, Outgoing, Topic};
use iotarch::device::frame::{from_hex, to_hex};
use iotarch::device::{decode_frame, encode_frame, DeviceFrame, FrameType, Payload};
use iotarch::edge::analytics::{detect_anomaly, ewma_of, stats_of, AnomalyCheck, SeriesWindow};
use iotarch::kernel::{Context, Handler, Kernel, Payload as EventPayload, ScheduledEvent};
use iotarch::orchestration::Mode;
use iotarch::run::{checks, replay, run_scenario, Overrides, RunSummary};

type Outcome = Result<String, String>;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

// ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut bytes = Vec::new();
    let mut slowest = 0.0f64;
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        run_scenario(
            common::load("smart-home"),
            Overrides { ticks: Some(500), seed: Some(42), mode: None },
            Some(dir.path()),
        )
        .map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        bytes.push(std::fs::read(dir.path().join("run.jsonl")).unwrap());
    }
    let detail = format!("{} bytes, slowest run {slowest:.2}s", bytes[0].len());
    if bytes[0] != bytes[1] {
        return Err(format!("run.jsonl differs between runs; {detail}"));
    }
    if slowest >= 5.0 {
        return Err(format!("identical logs but too slow; {detail}"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn golden() -> Vec<(&'static str, DeviceFrame)> {
    let f = |frame_type, device_id, resource_id, timestamp, payload| DeviceFrame { frame_type, device_id, resource_id, timestamp, payload };
    vec![
        ("telemetry_zero", f(FrameType::Telemetry, 1, 1, 0, Payload::Float(0.0))),
        ("command_bool_on", f(FrameType::Command, 42, 7, 0, Payload::Bool(true))),
        ("telemetry_text", f(FrameType::Telemetry, 0xDEADBEEF, 0x1234, 123456789, Payload::Text("héllo".into()))),
        ("telemetry_22_5", f(FrameType::Telemetry, 42, 1, 10, Payload::Float(22.5))),
    ]
}

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/data/frames/{name}.hex", env!("CARGO_MANIFEST_DIR"));
    from_hex(std::fs::read_to_string(path).unwrap().trim()).expect("hex fixture")
}

fn frame_strategy() -> impl Strategy<Value = DeviceFrame> {
    let kind = prop_oneof![
        Just(FrameType::Telemetry),
        Just(FrameType::CommandAck),
        Just(FrameType::Heartbeat),
        Just(FrameType::Command)
    ];
    let payload = prop_oneof![
        any::<f64>().prop_map(Payload::Float),
        any::<bool>().prop_map(Payload::Bool),
        ".{0,40}".prop_map(Payload::Text),
    ];
    (kind, any::<u32>(), any::<u16>(), any::<u64>(), payload).prop_map(|(frame_type, device_id, resource_id, timestamp, payload)| {
        DeviceFrame { frame_type, device_id, resource_id, timestamp, payload }
    })
}

fn codec() -> Outcome {
    runner(1000)
        .run(&frame_strategy(), |frame| {
            let bytes = encode_frame(&frame).unwrap();
            prop_assert_eq!(decode_frame(&bytes).unwrap(), frame);
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;

    for (name, frame) in golden() {
        let expected = fixture(name);
        let got = encode_frame(&frame).unwrap();
        if got != expected {
            return Err(format!("{name}: encoded {} but fixture is {}", to_hex(&got), to_hex(&expected)));
        }
    }

    let base = fixture("telemetry_22_5");
    let mut corrupted = 0;
    for i in 0..base.len() {
        for b in 0..=255u8 {
            if b == base[i] {
                continue;
            }
            let mut bad = base.clone();
            bad[i] = b;
            corrupted += 1;
            if let Ok(f) = decode_frame(&bad) {
                return Err(format!("byte {i} = 0x{b:02X} decoded silently as {f:?}"));
            }
        }
    }
    Ok(format!("1000 round trips, {} golden fixtures, {corrupted} corruptions all rejected", golden().len()))
}

// ---------------------------------------------------------------------------

const PATTERNS: &[&str] = &["a/#", "a/*", "a/b", "*/b", "#", "a/*/c", "b/#", "c"];
const TOPICS: &[&str] = &["a", "a/b", "a/c", "b/b", "a/b/c", "b", "a/x/c", "c"];

#[derive(Debug, Clone)]
enum Op {
    Sub { who: u8, pattern: usize },
    Unsub { pick: usize },
    Pub { topic: usize },
}

#[derive(Debug, Clone)]
enum Ev {
    Op(Op),
    Deliver(Delivery),
}

impl EventPayload for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::Op(_) => "op",
            Ev::Deliver(_) => "deliver",
        }
    }
    fn body(&self) -> Value {
        match self {
            Ev::Op(op) => json!({ "op": format!("{op:?}") }),
            Ev::Deliver(d) => d.log_body(),
        }
    }
}

struct BrokerHost {
    broker: Broker,
    live: Vec<u64>,
}

impl Handler<Ev> for BrokerHost {
    fn handle(&mut self, ctx: &mut Context<'_, Ev>, ev: ScheduledEvent<Ev>) {
        let Ev::Op(op) = ev.payload else { return };
        match op {
            Op::Sub { who, pattern } => {
                let s = self.broker.subscribe(&format!("s{who}"), PATTERNS[pattern], ctx.now()).unwrap();
                ctx.record("test", "sub", json!({ "id": s.id, "pattern": PATTERNS[pattern] }));
                self.live.push(s.id);
            }
            Op::Unsub { pick } => {
                if self.live.is_empty() {
                    return;
                }
                let id = self.live.remove(pick % self.live.len());
                self.broker.unsubscribe(id).unwrap();
                ctx.record("test", "unsub", json!({ "id": id }));
            }
            Op::Pub { topic } => {
                let msg = Outgoing::new(Topic::new(TOPICS[topic]).unwrap(), "notify/1", json!({}));
                self.broker.publish_logged(ctx, "test", msg, Ev::Deliver).unwrap();
            }
        }
    }
}

/// Reference matcher, written separately from the broker's.
fn matches(pattern: &str, topic: &str) -> bool {
    fn go(p: &[&str], t: &[&str]) -> bool {
        match (p.first(), t.first()) {
            (Some(&"#"), _) => true,
            (Some(&"*"), Some(_)) => go(&p[1..], &t[1..]),
            (Some(a), Some(b)) if a == b => go(&p[1..], &t[1..]),
            (None, None) => true,
            _ => false,
        }
    }
    go(&pattern.split('/').collect::<Vec<_>>(), &topic.split('/').collect::<Vec<_>>())
}

/// Checks exactly-once, no ghosts and per-subscription FIFO from the log.
fn verify_broker_log(entries: &[iotarch::kernel::LogEntry]) -> Result<usize, String> {
    let mut live: BTreeMap<u64, String> = BTreeMap::new();
    let mut expected: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut got: BTreeMap<(u64, u64), Vec<u64>> = BTreeMap::new();
    let mut last_per_sub: BTreeMap<u64, u64> = BTreeMap::new();
    for e in entries {
        match e.kind.as_str() {
            "sub" => {
                live.insert(e.body["id"].as_u64().unwrap(), e.body["pattern"].as_str().unwrap().to_string());
            }
            "unsub" => {
                live.remove(&e.body["id"].as_u64().unwrap());
            }
            "pub" => {
                let msg = e.body["msg"].as_u64().unwrap();
                let topic = e.body["topic"].as_str().unwrap();
                for (sub, pattern) in &live {
                    if matches(pattern, topic) {
                        expected.insert((msg, *sub), e.tick);
                    }
                }
            }
            "deliver" => {
                let msg = e.body["msg"].as_u64().unwrap();
                let sub = e.body["sub"].as_u64().unwrap();
                got.entry((msg, sub)).or_default().push(e.tick);
                if let Some(prev) = last_per_sub.insert(sub, msg) {
                    if prev >= msg {
                        return Err(format!("sub {sub}: msg {msg} after {prev}"));
                    }
                }
            }
            _ => {}
        }
    }
    for (key, ticks) in &got {
        let Some(published) = expected.get(key) else {
            return Err(format!("ghost delivery {key:?}"));
        };
        if ticks.len() != 1 {
            return Err(format!("{key:?} delivered {} times", ticks.len()));
        }
        if ticks[0] != published + 1 {
            return Err(format!("{key:?} delivered at {} for publish at {published}", ticks[0]));
        }
    }
    if let Some(missing) = expected.keys().find(|k| !got.contains_key(k)) {
        return Err(format!("lost delivery {missing:?}"));
    }
    Ok(got.len())
}

fn broker() -> Outcome {
    let op = prop_oneof![
        (0u8..3, 0..PATTERNS.len()).prop_map(|(who, pattern)| Op::Sub { who, pattern }),
        any::<usize>().prop_map(|pick| Op::Unsub { pick }),
        (0..TOPICS.len()).prop_map(|topic| Op::Pub { topic }),
        (0..TOPICS.len()).prop_map(|topic| Op::Pub { topic }),
    ];
    let schedule = proptest::collection::vec((0u64..20, op), 1..80);
    let total = std::cell::Cell::new(0usize);
    runner(200)
        .run(&schedule, |ops| {
            let mut kernel = Kernel::new(1);
            for (at, op) in &ops {
                kernel.schedule(*at, "host", Ev::Op(op.clone())).unwrap();
            }
            let mut host = BrokerHost { broker: Broker::new(), live: Vec::new() };
            kernel.run(21, &mut host);
            match verify_broker_log(kernel.log().entries()) {
                Ok(n) => total.set(total.get() + n),
                Err(e) => prop_assert!(false, "{}", e),
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("200 schedules, {} deliveries verified from the log", total.get()))
}

// ---------------------------------------------------------------------------

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12)
}

fn analytics() -> Outcome {
    let windows = (proptest::collection::vec(-1000.0f64..1000.0, 1..64), 0.01f64..=1.0, -1500.0f64..1500.0);
    runner(500)
        .run(&windows, |(xs, alpha, probe)| {
            let s = stats_of(&xs).unwrap();
            // Welford, a different algorithm from the two-pass one under test
            let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
            for x in &xs {
                n += 1.0;
                let d = x - mean;
                mean += d / n;
                m2 += d * (x - mean);
            }
            let sd = (m2 / n).sqrt();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for x in &xs {
                if *x < lo {
                    lo = *x;
                }
                if *x > hi {
                    hi = *x;
                }
            }
            prop_assert!(close(s.mean, mean), "mean {} vs {}", s.mean, mean);
            prop_assert!(close(s.stddev, sd), "stddev {} vs {}", s.stddev, sd);
            prop_assert_eq!((s.min, s.max), (lo, hi));
            // closed form: (1-a)^n x0 + sum a (1-a)^(n-i) xi
            let last = xs.len() - 1;
            let mut brute = (1.0 - alpha).powi(last as i32) * xs[0];
            for (i, x) in xs.iter().enumerate().skip(1) {
                brute += alpha * (1.0 - alpha).powi((last - i) as i32) * x;
            }
            let e = ewma_of(&xs, alpha).unwrap();
            prop_assert!(close(e, brute), "ewma {} vs {}", e, brute);
            let w = SeriesWindow::from_values(&xs);
            match detect_anomaly(&w, 3.0, probe) {
                AnomalyCheck::Normal { z } | AnomalyCheck::Anomalous { z, .. } => {
                    prop_assert!(close(z, (probe - mean).abs() / sd), "z {} vs {}", z, (probe - mean).abs() / sd);
                }
                AnomalyCheck::Insufficient => prop_assert!(xs.len() < 5 || sd == 0.0),
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("500 windows: mean, min, max, stddev, EWMA, z within 1e-9".into())
}

// ---------------------------------------------------------------------------

fn mape_latency() -> Outcome {
    let home = common::run("smart-home", Overrides::default());
    let local = common::command_latencies(home.log.entries());
    if local.is_empty() {
        return Err("smart-home produced no commands".into());
    }
    if let Some(bad) = local.iter().find(|l| l.hops() != 4) {
        return Err(format!("smart-home {bad:?} took {} ticks", bad.hops()));
    }
    let two = common::run("two-region", Overrides { mode: Some(Mode::Centralized), ..Overrides::default() });
    let all = common::command_latencies(two.log.entries());
    let (global, edge): (Vec<_>, Vec<_>) = all.iter().partition(|l| l.via_global);
    if global.is_empty() {
        return Err("two-region produced no cross-region commands".into());
    }
    if let Some(bad) = global.iter().find(|l| l.hops() != 8) {
        return Err(format!("two-region cross-region {bad:?} took {} ticks", bad.hops()));
    }
    if let Some(bad) = edge.iter().find(|l| l.hops() != 4) {
        return Err(format!("two-region local {bad:?} took {} ticks", bad.hops()));
    }
    Ok(format!("{} local symptoms at +4; two-region {} at +8, {} local at +4", local.len(), global.len(), edge.len()))
}

fn master_slave() -> Outcome {
    let out = common::run("two-region", Overrides { mode: Some(Mode::Centralized), ..Overrides::default() });
    let entries = out.log.entries();
    let multi_escalations = entries
        .iter()
        .filter(|e| e.kind == "pub" && e.body["schema"] == "escalation/1" && e.body["topic"] == "plans/escalations")
        .filter(|e| e.body["body"]["report"]["scope"].as_array().map_or(0, Vec::len) > 1)
        .count();
    let offending = checks::local_multi_region_plans(entries);
    let local_plans_any_topic = entries
        .iter()
        .filter(|e| e.kind == "pub" && e.body["schema"] == "plan/1" && e.body["publisher"].as_str().is_some_and(|p| p.starts_with("edge-")))
        .filter(|e| e.body["body"]["scope"].as_array().map_or(0, Vec::len) > 1)
        .count();
    if multi_escalations == 0 {
        return Err("no multi-region situation arose; predicate is vacuous".into());
    }
    if !offending.is_empty() || local_plans_any_topic > 0 {
        return Err(format!("{} local plans with |scope| > 1", offending.len().max(local_plans_any_topic)));
    }
    Ok(format!("{multi_escalations} multi-region reports escalated, 0 local plans with |scope| > 1"))
}

fn decentralized() -> Outcome {
    let scenario = common::load("two-region");
    let topo = common::topology(&scenario);
    let out = run_scenario(scenario, Overrides { mode: Some(Mode::Decentralized), ..Overrides::default() }, None).map_err(|e| e.to_string())?;
    let entries = out.log.entries();
    // a plan published on the final tick has no tick left to be delivered
    let last = entries.last().map_or(0, |e| e.tick);
    let shared: Vec<Value> = common::shared_plans(entries).into_iter().filter(|p| p["createdAt"].as_u64() < Some(last)).collect();
    if shared.is_empty() {
        return Err("no shared plans".into());
    }
    let mut coordinators: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.kind == "coordinate") {
        coordinators.entry(e.body["plan"].as_str().unwrap().into()).or_default().push(e.body["coordinator"].as_str().unwrap().into());
    }
    let executed = checks::executed_actions(entries);
    for p in &shared {
        let id = p["id"].as_str().unwrap();
        let involved: BTreeSet<&String> = p["scope"].as_array().unwrap().iter().map(|r| &topo[r.as_str().unwrap()]).collect();
        let smallest = involved.iter().next().unwrap();
        match coordinators.get(id).map(Vec::as_slice) {
            Some([c]) if c == *smallest => {}
            other => return Err(format!("plan {id}: coordinators {other:?}, expected [{smallest}]")),
        }
        // only plans already settled by the horizon are judged on execution
        let settled = entries.iter().any(|e| e.kind == "completion" && e.body["plan"] == id);
        for a in p["actions"].as_array().unwrap() {
            let aid = a["id"].as_str().unwrap();
            let n = executed.get(aid).copied().unwrap_or(0);
            if n > 1 || (settled && n != 1) {
                return Err(format!("action {aid} executed {n} times"));
            }
        }
    }
    if let Some((a, n)) = executed.iter().find(|(_, n)| **n > 1) {
        return Err(format!("action {a} executed {n} times"));
    }
    Ok(format!("{} shared plans, each with one coordinator (the smallest id), {} actions executed once", shared.len(), executed.len()))
}

// ---------------------------------------------------------------------------

fn oracle() -> Value {
    let path = format!("{}/tests/data/regulation_oracle.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn oracle_toggles(v: &Value) -> Vec<(u64, bool)> {
    v["toggles"].as_array().unwrap().iter().map(|t| (t[0].as_u64().unwrap(), t[1].as_bool().unwrap())).collect()
}

/// Exact match with the oracle, then the band and cycling requirements.
fn check_regulation(name: &str, key: &str) -> Result<(f64, f64, usize), String> {
    let out = common::run(name, Overrides { ticks: Some(200), ..Overrides::default() });
    let oracle = oracle();
    let want = &oracle[key];
    let temps = common::trajectory(out.log.entries(), "room.temp");
    let expected: Vec<f64> = want["temps"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    if let Some(t) = (0..temps.len().max(expected.len())).find(|&t| temps.get(t) != expected.get(t)) {
        return Err(format!("{name}: trajectory leaves the oracle at tick {t}: {:?} vs {:?}", temps.get(t), expected.get(t)));
    }
    let toggles = common::toggles(out.log.entries(), 2);
    if toggles != oracle_toggles(want) {
        return Err(format!("{name}: toggles {toggles:?} differ from oracle"));
    }
    let tail = &temps[40..];
    let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi, toggles.len()))
}

fn regulation() -> Outcome {
    let (lo, hi, n) = check_regulation("smart-home", "periodic")?;
    let detail = format!("matches oracle exactly; ticks >= 40 span [{lo:.2}, {hi:.2}], {n} toggles");
    if lo < 20.5 || hi > 23.5 {
        return Err(format!("{detail}; band [20.5, 23.5] violated"));
    }
    if n < 2 {
        return Err(format!("{detail}; fewer than 2 toggles"));
    }
    Ok(detail)
}

fn telemetry_count(name: &str) -> Result<u64, String> {
    let dir = tempfile::tempdir().unwrap();
    run_scenario(common::load(name), Overrides { ticks: Some(200), ..Overrides::default() }, Some(dir.path())).map_err(|e| e.to_string())?;
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    Ok(summary.messages_by_schema.get("telemetry/1").copied().unwrap_or(0))
}

fn energy() -> Outcome {
    let periodic = telemetry_count("smart-home")?;
    let on_change = telemetry_count("smart-home-onchange")?;
    let oracle = oracle();
    let want = oracle["on_change"]["telemetry"].as_u64().unwrap();
    if on_change != want {
        return Err(format!("on-change telemetry {on_change}, oracle {want}"));
    }
    let reduction = 1.0 - on_change as f64 / periodic as f64;
    let (lo, hi, n) = check_regulation("smart-home-onchange", "on_change")?;
    let detail = format!("telemetry {periodic} -> {on_change} ({:.1}% fewer); ticks >= 40 span [{lo:.2}, {hi:.2}], {n} toggles", reduction * 100.0);
    let mut failures = Vec::new();
    if reduction < 0.5 {
        failures.push("reduction below 50%");
    }
    if lo < 20.5 || hi > 23.5 {
        failures.push("band [20.5, 23.5] violated");
    }
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join(", ")))
    }
}

fn replay_equivalence() -> Outcome {
    let mut checked = Vec::new();
    for name in common::bundled() {
        let scenario = common::load(&name);
        let modes = if scenario.regions.len() > 1 { vec![Mode::Centralized, Mode::Decentralized] } else { vec![scenario.mode] };
        for mode in modes {
            let dir = tempfile::tempdir().unwrap();
            let out = run_scenario(scenario.clone(), Overrides { mode: Some(mode), ..Overrides::default() }, Some(dir.path()))
                .map_err(|e| e.to_string())?;
            let replayed = replay(&dir.path().join("run.jsonl")).map_err(|e| e.to_string())?;
            if replayed != out.snapshot {
                return Err(format!("{name} ({}): replayed snapshot differs", mode.as_str()));
            }
            checked.push(format!("{name}/{}", mode.as_str()));
        }
    }
    Ok(format!("{} runs: {}", checked.len(), checked.join(", ")))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("determinism", determinism),
        ("codec", codec),
        ("broker", broker),
        ("analytics-oracle", analytics),
        ("mape-latency", mape_latency),
        ("master-slave-exclusivity", master_slave),
        ("decentralized-exactly-once", decentralized),
        ("regulation", regulation),
        ("energy-event-driven", energy),
        ("replay-equivalence", replay_equivalence),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
