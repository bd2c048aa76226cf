#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use iotarch::kernel::{LogEntry, Tick};
use iotarch::run::{run_scenario, Overrides, RunOutput};
use iotarch::scenario::{parse_config, Scenario};

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(name: &str) -> Scenario {
    parse_config(&scenario_dir().join(format!("{name}.toml"))).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn bundled() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(scenario_dir())
        .expect("scenarios dir")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

pub fn run(name: &str, overrides: Overrides) -> RunOutput {
    run_scenario(load(name), overrides, None).expect("run")
}

/// Values of `thing.prop` per tick, from the `env` records.
pub fn trajectory(entries: &[LogEntry], key: &str) -> Vec<f64> {
    entries.iter().filter(|e| e.kind == "env").map(|e| e.body[key].as_f64().expect("float")).collect()
}

/// `(tick, new state)` for every actuator change.
pub fn toggles(entries: &[LogEntry], device: u64) -> Vec<(Tick, bool)> {
    entries
        .iter()
        .filter(|e| e.kind == "actuator" && e.body["device"] == device && e.body["changed"] == true)
        .map(|e| (e.tick, e.body["value"].as_bool().expect("bool")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Latency {
    pub symptom: String,
    pub detected: Tick,
    /// Tick at which the first resulting command reached a gateway.
    pub arrived: Tick,
    pub via_global: bool,
}

impl Latency {
    pub fn hops(&self) -> Tick {
        self.arrived - self.detected
    }
}

/// For each symptom that led to a device command, how long until the first
/// such command reached its gateway.
pub fn command_latencies(entries: &[LogEntry]) -> Vec<Latency> {
    let mut detected: BTreeMap<String, Tick> = BTreeMap::new();
    let mut causes: BTreeMap<String, (Vec<String>, bool)> = BTreeMap::new();
    let mut plan_of_msg: BTreeMap<u64, String> = BTreeMap::new();
    let mut arrivals: BTreeMap<String, Tick> = BTreeMap::new();
    for e in entries {
        match e.kind.as_str() {
            "pub" => {
                let b = &e.body["body"];
                match e.body["schema"].as_str().unwrap_or_default() {
                    "symptom/1" => {
                        detected.insert(b["id"].as_str().unwrap().to_string(), b["detectedAt"].as_u64().unwrap());
                    }
                    "plan/1" => {
                        let cause = b["cause"].as_array().unwrap().iter().map(|c| c.as_str().unwrap().to_string()).collect();
                        causes.entry(b["id"].as_str().unwrap().to_string()).or_insert((cause, b["origin"] == "global"));
                    }
                    "command/1" => {
                        if let Some(p) = b["planId"].as_str() {
                            plan_of_msg.insert(e.body["msg"].as_u64().unwrap(), p.to_string());
                        }
                    }
                    _ => {}
                }
            }
            "deliver" => {
                if let Some(plan) = e.body["msg"].as_u64().and_then(|m| plan_of_msg.get(&m)) {
                    arrivals.entry(plan.clone()).or_insert(e.tick);
                }
            }
            _ => {}
        }
    }
    let mut best: BTreeMap<String, (Tick, bool)> = BTreeMap::new();
    for (plan, at) in &arrivals {
        let Some((cause, global)) = causes.get(plan) else { continue };
        for s in cause {
            let slot = best.entry(s.clone()).or_insert((*at, *global));
            if *at < slot.0 {
                *slot = (*at, *global);
            }
        }
    }
    best.into_iter()
        .filter_map(|(s, (arrived, via_global))| {
            let d = *detected.get(&s)?;
            Some(Latency { symptom: s, detected: d, arrived, via_global })
        })
        .collect()
}

/// Region to loop id, from the scenario.
pub fn topology(s: &Scenario) -> BTreeMap<String, String> {
    s.regions.iter().map(|r| (r.id.clone(), r.loop_id.clone())).collect()
}

pub fn shared_plans(entries: &[LogEntry]) -> Vec<serde_json::Value> {
    let mut seen = BTreeSet::new();
    entries
        .iter()
        .filter(|e| e.kind == "pub" && e.body["topic"] == "plans/shared")
        .map(|e| e.body["body"].clone())
        .filter(|p| seen.insert(p["id"].as_str().unwrap().to_string()))
        .collect()
}
