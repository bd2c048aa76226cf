//! Batch runs, run artifacts, replay and the built-in invariant checkers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::kernel::{entry_to_line, EventLog, LogEntry, LogError, Tick};
use crate::orchestration::Mode;
use crate::readmodel::{ReadModel, Snapshot};
use crate::scenario::Scenario;
use crate::sim::Simulation;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub ticks: Option<u64>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskSummary {
    pub name: String,
    /// Steps executed per business process.
    pub processes: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub mode: String,
    pub ticks: u64,
    pub log_lines: u64,
    pub messages: u64,
    pub messages_by_schema: BTreeMap<String, u64>,
    pub deliveries: u64,
    pub symptoms: u64,
    pub reports: u64,
    pub escalations: u64,
    pub plans: u64,
    pub commands: u64,
    pub acks: u64,
    pub notifications: u64,
    pub actuations: u64,
    pub dispatch_failures: u64,
    pub gateway_errors: u64,
    pub final_values: BTreeMap<String, f64>,
    pub tasks: Vec<TaskSummary>,
    pub violations: Vec<String>,
}

impl RunSummary {
    /// Tallies everything from the log alone.
    pub fn from_log(entries: &[LogEntry]) -> Self {
        let mut s = RunSummary::default();
        let mut steps: BTreeMap<String, u64> = BTreeMap::new();
        for e in entries {
            s.log_lines += 1;
            match e.kind.as_str() {
                "init" => {
                    s.scenario = e.body["scenario"].as_str().unwrap_or_default().into();
                    s.seed = e.body["seed"].as_u64().unwrap_or_default();
                    s.mode = e.body["mode"].as_str().unwrap_or_default().into();
                    for t in e.body["tasks"].as_array().into_iter().flatten() {
                        let processes = t["business_processes"]
                            .as_array()
                            .into_iter()
                            .flatten()
                            .filter_map(|p| p.as_str())
                            .map(|p| (p.to_string(), 0))
                            .collect();
                        s.tasks.push(TaskSummary { name: t["name"].as_str().unwrap_or_default().into(), processes });
                    }
                }
                "clock" => s.ticks += 1,
                "deliver" => s.deliveries += 1,
                "actuator" => s.actuations += 1,
                "dispatch-failure" => s.dispatch_failures += 1,
                "gateway-error" => s.gateway_errors += 1,
                "notification" => s.notifications += 1,
                "process-step" => *steps.entry(e.body["process"].as_str().unwrap_or_default().into()).or_default() += 1,
                "env" => {
                    s.final_values = serde_json::from_value(e.body.clone()).unwrap_or_default();
                }
                "pub" => {
                    s.messages += 1;
                    let schema = e.body["schema"].as_str().unwrap_or_default();
                    *s.messages_by_schema.entry(schema.into()).or_default() += 1;
                    match schema {
                        "symptom/1" => s.symptoms += 1,
                        "report/1" => s.reports += 1,
                        "escalation/1" => s.escalations += 1,
                        "plan/1" => s.plans += 1,
                        "command/1" => s.commands += 1,
                        "ack/1" => s.acks += 1,
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        for t in s.tasks.iter_mut() {
            for (p, n) in t.processes.iter_mut() {
                *n = steps.get(p).copied().unwrap_or(0);
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub log: EventLog,
    pub snapshot: Snapshot,
}

/// Builds every component, runs the kernel for `ticks` (default: the
/// scenario horizon) and, when `out_dir` is given, writes `run.jsonl`,
/// `summary.json` and `cloud-store.jsonl` there.
pub fn run_scenario(scenario: Scenario, overrides: Overrides, out_dir: Option<&Path>) -> Result<RunOutput, RunError> {
    let ticks = overrides.ticks.unwrap_or(scenario.horizon);
    let seed = overrides.seed.unwrap_or(scenario.seed);
    let mode = overrides.mode.unwrap_or(scenario.mode);
    let mut sim = Simulation::new(scenario, seed, mode);
    sim.run_ticks(ticks);
    let snapshot = sim.snapshot();
    let mut summary = RunSummary::from_log(sim.log());
    summary.violations = checks::log_violations(sim.log(), mode);
    summary.violations.extend(checks::conservation_violations(&sim));
    let log = sim.kernel.into_log();
    if let Some(dir) = out_dir {
        write_artifacts(dir, &log, &summary)?;
    }
    Ok(RunOutput { summary, log, snapshot })
}

pub fn write_artifacts(dir: &Path, log: &EventLog, summary: &RunSummary) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.jsonl"), log.to_jsonl())?;
    let mut text = serde_json::to_string_pretty(summary).expect("serializable");
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    let mut store = String::new();
    for e in log.entries().iter().filter(|e| e.kind == "store") {
        let line = json!({ "tick": e.tick, "kind": e.body["kind"], "body": e.body["body"] });
        store.push_str(&line.to_string());
        store.push('\n');
    }
    fs::write(dir.join("cloud-store.jsonl"), store)?;
    Ok(())
}

/// Folds a log into the dashboard snapshot.
pub fn project(entries: &[LogEntry]) -> Snapshot {
    let mut m = ReadModel::default();
    for e in entries {
        m.apply(e);
    }
    m.snapshot()
}

/// Reconstructs the final snapshot from a `run.jsonl` file.
pub fn replay(path: &Path) -> Result<Snapshot, RunError> {
    let text = fs::read_to_string(path)?;
    let log = EventLog::from_jsonl(&text)?;
    Ok(project(log.entries()))
}

/// Log-only invariant checkers. Each returns human-readable violations.
pub mod checks {
    use super::*;

    /// Ticks never decrease and line numbers restart at 0 each tick.
    pub fn ordering(entries: &[LogEntry]) -> Vec<String> {
        let mut out = Vec::new();
        let mut last: Option<(Tick, u64)> = None;
        for (i, e) in entries.iter().enumerate() {
            let ok = match last {
                None => e.seq == 0,
                Some((t, s)) if t == e.tick => e.seq == s + 1,
                Some((t, _)) => e.tick > t && e.seq == 0,
            };
            if !ok {
                out.push(format!("line {}: out of order ({}, {})", i + 1, e.tick, e.seq));
            }
            last = Some((e.tick, e.seq));
        }
        out
    }

    /// Every publication reaches each matched subscription exactly once, one
    /// tick later, and nothing else is delivered. Publications in the final
    /// tick are exempt since their deliveries fall past the horizon.
    pub fn exactly_once(entries: &[LogEntry]) -> Vec<String> {
        let last_tick = entries.iter().map(|e| e.tick).max().unwrap_or(0);
        let mut expected: BTreeMap<u64, (Tick, u64)> = BTreeMap::new();
        let mut seen: BTreeMap<u64, Vec<(Tick, u64)>> = BTreeMap::new();
        for e in entries {
            match e.kind.as_str() {
                "pub" => {
                    let msg = e.body["msg"].as_u64().unwrap_or_default();
                    expected.insert(msg, (e.tick, e.body["matched"].as_u64().unwrap_or_default()));
                }
                "deliver" => {
                    let msg = e.body["msg"].as_u64().unwrap_or_default();
                    seen.entry(msg).or_default().push((e.tick, e.body["sub"].as_u64().unwrap_or_default()));
                }
                _ => {}
            }
        }
        let mut out = Vec::new();
        for (msg, got) in &seen {
            let Some((t, _)) = expected.get(msg) else {
                out.push(format!("msg {msg}: delivered but never published"));
                continue;
            };
            if got.iter().any(|(at, _)| *at != t + 1) {
                out.push(format!("msg {msg}: delivered outside tick {}", t + 1));
            }
            let distinct: BTreeSet<u64> = got.iter().map(|(_, s)| *s).collect();
            if distinct.len() != got.len() {
                out.push(format!("msg {msg}: duplicate delivery"));
            }
        }
        for (msg, (t, n)) in &expected {
            if *t == last_tick {
                continue;
            }
            let got = seen.get(msg).map_or(0, Vec::len) as u64;
            if got != *n {
                out.push(format!("msg {msg}: {got} deliveries, {n} matched"));
            }
        }
        out
    }

    /// Per subscription and topic, deliveries arrive in publication order.
    pub fn fifo(entries: &[LogEntry]) -> Vec<String> {
        let mut last: BTreeMap<(u64, String), u64> = BTreeMap::new();
        let mut out = Vec::new();
        for e in entries.iter().filter(|e| e.kind == "deliver") {
            let key = (e.body["sub"].as_u64().unwrap_or_default(), e.body["topic"].as_str().unwrap_or_default().to_string());
            let msg = e.body["msg"].as_u64().unwrap_or_default();
            if let Some(prev) = last.insert(key.clone(), msg) {
                if prev > msg {
                    out.push(format!("sub {} on {}: msg {msg} after {prev}", key.0, key.1));
                }
            }
        }
        out
    }

    fn is_local(publisher: &str) -> bool {
        publisher != crate::sim::GLOBAL && !publisher.starts_with("process:") && publisher != crate::app::APP
    }

    /// Plans spanning more than one region published by local loops.
    pub fn local_multi_region_plans(entries: &[LogEntry]) -> Vec<Value> {
        entries
            .iter()
            .filter(|e| e.kind == "pub" && e.body["schema"] == "plan/1")
            .filter(|e| is_local(e.body["publisher"].as_str().unwrap_or_default()))
            .filter(|e| e.body["topic"] != "plans/shared")
            .filter(|e| e.body["body"]["scope"].as_array().map_or(0, Vec::len) > 1)
            .map(|e| e.body["body"].clone())
            .collect()
    }

    /// Action ids reported as executed, with multiplicity.
    pub fn executed_actions(entries: &[LogEntry]) -> BTreeMap<String, u64> {
        let mut count = BTreeMap::new();
        for e in entries.iter().filter(|e| e.kind == "execute") {
            for o in e.body["outcomes"].as_array().into_iter().flatten() {
                if let Some(a) = o["action"].as_str() {
                    *count.entry(a.to_string()).or_default() += 1;
                }
            }
        }
        count
    }

    pub fn log_violations(entries: &[LogEntry], mode: Mode) -> Vec<String> {
        let mut out = ordering(entries);
        out.extend(exactly_once(entries));
        out.extend(fifo(entries));
        if mode == Mode::Centralized {
            for p in local_multi_region_plans(entries) {
                out.push(format!("local loop published multi-region plan {}", p["id"]));
            }
        }
        for (a, n) in executed_actions(entries) {
            if n > 1 {
                out.push(format!("action {a} executed {n} times"));
            }
        }
        out
    }

    /// Samples entering each gateway equal samples leaving it (counting
    /// aggregated readings by their sample count) plus those still buffered.
    pub fn conservation_violations(sim: &Simulation) -> Vec<String> {
        let mut out = Vec::new();
        for (id, gw) in &sim.world.gateways {
            for ((dev, prop), (inn, outn)) in gw.conservation() {
                if inn != outn {
                    out.push(format!("gateway {id}: {dev}/{prop} translated {inn}, accounted {outn}"));
                }
            }
        }
        out
    }
}

/// Canonical text of a log, for byte comparisons in tests.
pub fn canonical(entries: &[LogEntry]) -> String {
    entries.iter().map(|e| entry_to_line(e) + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_config_str;

    const ROOM: &str = r#"
name = "room"
[[regions]]
id = "home"
loop = "edge-home"
[[gateways]]
id = "gw"
region = "home"
[[things]]
id = "room"
region = "home"
[[things.properties]]
name = "temp"
unit = "C"
initial = 25.0
drift = 0.1
[[devices]]
id = 1
name = "thermo"
region = "home"
heartbeat = 5
[[devices.sensors]]
id = 1
name = "temp"
thing = "room"
property = "temp"
[[devices]]
id = 2
name = "ac"
region = "home"
[[devices.actuators]]
id = 1
name = "power"
thing = "room"
property = "temp"
rate = -0.5
[[rules]]
text = "WHEN room.temp > 26 THEN SET(ac, power, on)"
"#;

    #[test]
    fn zero_ticks_is_empty() {
        let out = run_scenario(parse_config_str(ROOM).unwrap(), Overrides { ticks: Some(0), ..Overrides::default() }, None).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.summary.ticks, 0);
        assert_eq!(out.summary.messages, 0);
        assert_eq!(out.snapshot, Snapshot::default());
    }

    #[test]
    fn summary_counts_match_log() {
        let out = run_scenario(parse_config_str(ROOM).unwrap(), Overrides { ticks: Some(40), ..Overrides::default() }, None).unwrap();
        let s = &out.summary;
        assert_eq!(s.ticks, 40);
        assert!(s.violations.is_empty(), "{:?}", s.violations);
        let pubs = out.log.entries().iter().filter(|e| e.kind == "pub").count() as u64;
        assert_eq!(s.messages, pubs);
        assert_eq!(s.messages_by_schema.values().sum::<u64>(), pubs);
        assert!(s.commands > 0);
        assert_eq!(out.snapshot.tick, 40);
    }

    #[test]
    fn replay_matches_live() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_scenario(parse_config_str(ROOM).unwrap(), Overrides { ticks: Some(30), ..Overrides::default() }, Some(dir.path())).unwrap();
        assert_eq!(replay(&dir.path().join("run.jsonl")).unwrap(), out.snapshot);
    }

    #[test]
    fn truncated_log_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        run_scenario(parse_config_str(ROOM).unwrap(), Overrides { ticks: Some(5), ..Overrides::default() }, Some(dir.path())).unwrap();
        let path = dir.path().join("run.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let cut = format!("{}\n{}", lines[..3].join("\n"), &lines[3][..10]);
        fs::write(&path, cut).unwrap();
        match replay(&path) {
            Err(RunError::Log(LogError::CorruptLog { line, .. })) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checker_spots_ghost_delivery() {
        let entries = vec![LogEntry { tick: 1, seq: 0, target: "x".into(), kind: "deliver".into(), body: json!({"msg": 9, "topic": "a"}) }];
        assert_eq!(checks::exactly_once(&entries).len(), 1);
    }
}
