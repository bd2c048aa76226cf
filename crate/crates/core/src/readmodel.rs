//! Projection of the event log into the dashboard view.
//!
//! The live service and `replay` fold the same log lines through
//! [`ReadModel::apply`], so a replayed snapshot equals the live one by
//! construction. Each device value carries a provenance label: `edge` for
//! telemetry seen by a gateway, `device` for actuator state reported by the
//! device itself, `world` for ground-truth environment values.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::app::{CommandRequest, Notification, Outcome, User, UserSubscription};
use crate::device::Payload;
use crate::edge::{DeviceStatus, ResourceRecord};
use crate::kernel::{LogEntry, Tick};
use crate::orchestration::PhaseCounters;

/// Per-series history kept for `GET /telemetry`.
pub const HISTORY: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Reading {
    pub value: Payload,
    pub unit: String,
    pub ts: Tick,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActuatorView {
    pub id: u16,
    pub name: String,
    pub state: Option<Payload>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceView {
    pub device_id: u32,
    pub name: String,
    pub region: String,
    pub gateway: String,
    pub attached: bool,
    pub status: DeviceStatus,
    pub last_seen: Tick,
    pub resources: Vec<ResourceRecord>,
    /// Latest reading per property, keyed `thing.property`.
    pub values: BTreeMap<String, Reading>,
    pub actuators: Vec<ActuatorView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleView {
    pub id: String,
    pub text: String,
    pub scope: String,
    pub regions: Vec<String>,
    pub enabled: bool,
    pub priority: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LoopState {
    pub id: String,
    pub region: String,
    pub phases: PhaseCounters,
    pub symptoms: u64,
    pub reports: u64,
    pub plans: u64,
    pub escalations: u64,
    pub executed: u64,
    /// Executions whose every action succeeded.
    pub completed: u64,
    pub failed_actions: u64,
    pub coordinated: u64,
    pub partial: u64,
    pub last_plan: Option<Value>,
    pub last_execution: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GlobalStoreView {
    pub stored: u64,
    pub by_kind: BTreeMap<String, u64>,
    pub escalations: u64,
    pub plans: u64,
    /// Latest summary per region.
    pub summaries: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Snapshot {
    pub tick: Tick,
    pub seed: u64,
    pub mode: String,
    pub scenario: String,
    pub domain: String,
    pub devices: Vec<DeviceView>,
    pub rules: Vec<RuleView>,
    pub loop_states: Vec<LoopState>,
    pub plans: Vec<Value>,
    pub users: Vec<User>,
    pub subscriptions: Vec<UserSubscription>,
    pub notifications: Vec<Notification>,
    /// Unread notification count per user id.
    pub unread: BTreeMap<u64, u64>,
    pub commands: Vec<CommandRequest>,
    pub global_store: GlobalStoreView,
    /// Ground-truth environment values, keyed `thing.property`.
    pub environment: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TelemetryPoint {
    pub device_id: u32,
    pub property: String,
    pub value: Payload,
    pub unit: String,
    pub ts: Tick,
    pub aggregated: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ReadModel {
    snap: Snapshot,
    devices: BTreeMap<u32, DeviceView>,
    rules: BTreeMap<String, RuleView>,
    loops: BTreeMap<String, LoopState>,
    users: BTreeMap<u64, User>,
    subscriptions: BTreeMap<u64, UserSubscription>,
    notifications: BTreeMap<u64, Notification>,
    commands: BTreeMap<String, CommandRequest>,
    history: BTreeMap<(u32, String), VecDeque<TelemetryPoint>>,
}

fn from<T: for<'de> Deserialize<'de>>(v: &Value) -> Option<T> {
    serde_json::from_value(v.clone()).ok()
}

impl ReadModel {
    pub fn apply(&mut self, e: &LogEntry) {
        let b = &e.body;
        match e.kind.as_str() {
            "clock" => self.snap.tick = e.tick + 1,
            "phase" => {
                if let Some(l) = self.loops.get_mut(&e.target) {
                    match b["phase"].as_str() {
                        Some("monitor") => l.phases.monitor += 1,
                        Some("analyse") => l.phases.analyse += 1,
                        Some("plan") => l.phases.plan += 1,
                        Some("execute") => l.phases.execute += 1,
                        _ => {}
                    }
                }
            }
            "init" => self.init(b),
            "env" => self.snap.environment = from(b).unwrap_or_default(),
            "pub" => self.publication(e.tick, b),
            "device-status" => {
                if let Some(d) = b["device"].as_u64().and_then(|id| self.devices.get_mut(&(id as u32))) {
                    if let Some(s) = from(&b["to"]) {
                        d.status = s;
                    }
                    if let Some(t) = b["lastSeen"].as_u64() {
                        d.last_seen = t;
                    }
                }
            }
            "actuator" => {
                let (Some(dev), Some(res)) = (b["device"].as_u64(), b["resource"].as_u64()) else { return };
                if let Some(a) = self
                    .devices
                    .get_mut(&(dev as u32))
                    .and_then(|d| d.actuators.iter_mut().find(|a| a.id as u64 == res))
                {
                    a.state = from(&b["value"]);
                }
            }
            "execute" => {
                if let Some(l) = b["loop"].as_str().and_then(|id| self.loops.get_mut(id)) {
                    l.executed += 1;
                    let outcomes = b["outcomes"].as_array().cloned().unwrap_or_default();
                    let failed = outcomes.iter().filter(|o| o["ok"] == Value::Bool(false)).count() as u64;
                    if failed == 0 {
                        l.completed += 1;
                    }
                    l.failed_actions += failed;
                    l.last_execution = Some(b.clone());
                }
            }
            "completion" => {
                if let Some(l) = b["coordinator"].as_str().and_then(|id| self.loops.get_mut(id)) {
                    match b["status"].as_str() {
                        Some("complete") => l.coordinated += 1,
                        _ => l.partial += 1,
                    }
                }
            }
            "store" => {
                let g = &mut self.snap.global_store;
                g.stored += 1;
                let kind = b["kind"].as_str().unwrap_or_default().to_string();
                if kind == "summary" {
                    if let Some(r) = b["body"]["region"].as_str() {
                        g.summaries.insert(r.to_string(), b["body"].clone());
                    }
                }
                *g.by_kind.entry(kind).or_default() += 1;
            }
            "rule-installed" => {
                if let Some(r) = from::<RuleView>(b) {
                    self.rules.insert(r.id.clone(), r);
                }
            }
            "rule-toggled" => {
                if let (Some(id), Some(on)) = (b["rule"].as_str(), b["enabled"].as_bool()) {
                    if let Some(r) = self.rules.get_mut(id) {
                        r.enabled = on;
                    }
                }
            }
            "user-created" => {
                if let Some(u) = from::<User>(b) {
                    self.users.insert(u.id, u);
                }
            }
            "subscription-created" => {
                if let Some(s) = from::<UserSubscription>(b) {
                    self.subscriptions.insert(s.id, s);
                }
            }
            "subscription-removed" => {
                if let Some(id) = b["id"].as_u64() {
                    self.subscriptions.remove(&id);
                }
            }
            "notification" => {
                if let Some(n) = from::<Notification>(b) {
                    self.notifications.insert(n.id, n);
                }
            }
            "notification-read" => {
                if let Some(n) = b["id"].as_u64().and_then(|id| self.notifications.get_mut(&id)) {
                    n.read = true;
                }
            }
            "command-request" => {
                if let Some(c) = from::<CommandRequest>(b) {
                    self.commands.insert(c.id.clone(), c);
                }
            }
            "command-outcome" => {
                if let (Some(c), Some(o)) = (b["id"].as_str().and_then(|id| self.commands.get_mut(id)), from::<Outcome>(&b["outcome"])) {
                    c.outcome = o;
                }
            }
            _ => {}
        }
    }

    fn init(&mut self, b: &Value) {
        self.snap.scenario = b["scenario"].as_str().unwrap_or_default().into();
        self.snap.seed = b["seed"].as_u64().unwrap_or_default();
        self.snap.mode = b["mode"].as_str().unwrap_or_default().into();
        self.snap.domain = b["domain"].as_str().unwrap_or_default().into();
        for d in b["devices"].as_array().into_iter().flatten() {
            let r = &d["record"];
            let Some(id) = r["deviceId"].as_u64() else { continue };
            let view = DeviceView {
                device_id: id as u32,
                name: r["name"].as_str().unwrap_or_default().into(),
                region: r["region"].as_str().unwrap_or_default().into(),
                gateway: d["gateway"].as_str().unwrap_or_default().into(),
                attached: d["attached"].as_bool().unwrap_or(false),
                status: from(&r["status"]).unwrap_or(DeviceStatus::Online),
                last_seen: r["lastSeen"].as_u64().unwrap_or_default(),
                resources: from(&r["resources"]).unwrap_or_default(),
                values: BTreeMap::new(),
                actuators: d["actuators"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|a| ActuatorView {
                        id: a["id"].as_u64().unwrap_or_default() as u16,
                        name: a["name"].as_str().unwrap_or_default().into(),
                        state: from(&a["state"]),
                        provenance: "device".into(),
                    })
                    .collect(),
            };
            self.devices.insert(view.device_id, view);
        }
        for l in b["loops"].as_array().into_iter().flatten() {
            let id = l["id"].as_str().unwrap_or_default().to_string();
            let region = l["region"].as_str().unwrap_or_default().to_string();
            self.loops.insert(id.clone(), LoopState { id, region, ..LoopState::default() });
        }
        for r in b["rules"].as_array().into_iter().flatten() {
            if let Some(r) = from::<RuleView>(r) {
                self.rules.insert(r.id.clone(), r);
            }
        }
    }

    fn publication(&mut self, tick: Tick, p: &Value) {
        let body = &p["body"];
        let topic = p["topic"].as_str().unwrap_or_default();
        let publisher = p["publisher"].as_str().unwrap_or_default();
        match p["schema"].as_str().unwrap_or_default() {
            "telemetry/1" => {
                let Some(t) = from::<crate::gateway::TelemetryBody>(body) else { return };
                let key = format!("{}.{}", t.thing, t.property);
                let point = TelemetryPoint {
                    device_id: t.device_id,
                    property: key.clone(),
                    value: t.value.clone(),
                    unit: t.unit.clone(),
                    ts: t.ts,
                    aggregated: t.aggregated,
                };
                let h = self.history.entry((t.device_id, key.clone())).or_default();
                if h.len() == HISTORY {
                    h.pop_front();
                }
                h.push_back(point);
                if let Some(d) = self.devices.get_mut(&t.device_id) {
                    d.values.insert(key, Reading { value: t.value, unit: t.unit, ts: t.ts, provenance: "edge".into() });
                }
            }
            "heartbeat/1" => {
                if let Some(d) = body["deviceId"].as_u64().and_then(|id| self.devices.get_mut(&(id as u32))) {
                    d.last_seen = d.last_seen.max(body["ts"].as_u64().unwrap_or_default());
                }
            }
            "symptom/1" => {
                if let Some(l) = self.loops.get_mut(publisher) {
                    l.symptoms += 1;
                }
            }
            "report/1" => {
                if let Some(l) = self.loops.get_mut(publisher) {
                    l.reports += 1;
                }
            }
            "escalation/1" => {
                if let Some(l) = self.loops.get_mut(publisher) {
                    l.escalations += 1;
                } else {
                    self.snap.global_store.escalations += 1;
                }
            }
            "plan/1" => {
                if let Some(l) = self.loops.get_mut(publisher) {
                    l.plans += 1;
                    l.last_plan = Some(body.clone());
                } else {
                    self.snap.global_store.plans += 1;
                }
                let mut entry = body.clone();
                if let Some(o) = entry.as_object_mut() {
                    o.insert("topic".into(), Value::from(topic));
                    o.insert("tick".into(), Value::from(tick));
                }
                self.snap.plans.push(entry);
            }
            _ => {}
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut s = self.snap.clone();
        s.devices = self.devices.values().cloned().collect();
        s.rules = self.rules.values().cloned().collect();
        s.loop_states = self.loops.values().cloned().collect();
        s.users = self.users.values().cloned().collect();
        s.subscriptions = self.subscriptions.values().cloned().collect();
        s.notifications = self.notifications.values().cloned().collect();
        s.unread = self.users.keys().map(|u| (*u, 0)).collect();
        for n in s.notifications.iter().filter(|n| !n.read) {
            *s.unread.entry(n.user).or_default() += 1;
        }
        s.commands = self.commands.values().cloned().collect();
        s
    }

    /// Telemetry points for one device, optionally one property (`thing.property`
    /// or bare property name), with `ts >= since`.
    pub fn telemetry(&self, device: u32, property: Option<&str>, since: Tick) -> Vec<TelemetryPoint> {
        self.history
            .iter()
            .filter(|((d, p), _)| {
                *d == device && property.map_or(true, |q| p == q || p.rsplit('.').next() == Some(q))
            })
            .flat_map(|(_, h)| h.iter().filter(|t| t.ts >= since).cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn line(tick: Tick, kind: &str, body: Value) -> LogEntry {
        LogEntry { tick, seq: 0, target: "t".into(), kind: kind.into(), body }
    }

    #[test]
    fn empty_log_gives_default_snapshot() {
        assert_eq!(ReadModel::default().snapshot(), Snapshot::default());
    }

    #[test]
    fn clock_lines_set_tick() {
        let mut m = ReadModel::default();
        m.apply(&line(0, "clock", json!({})));
        m.apply(&line(1, "clock", json!({})));
        assert_eq!(m.snapshot().tick, 2);
    }

    #[test]
    fn unread_counts_follow_reads() {
        let mut m = ReadModel::default();
        m.apply(&line(0, "user-created", json!({"id": 1, "name": "a", "email": "a@x", "createdAt": 0, "preferences": {"channel": "inbox", "units": "metric"}})));
        m.apply(&line(1, "notification", json!({"id": 1, "user": 1, "source": 3, "topic": "notify/a", "message": "m", "tick": 1, "read": false})));
        assert_eq!(m.snapshot().unread[&1], 1);
        m.apply(&line(2, "notification-read", json!({"id": 1, "user": 1})));
        assert_eq!(m.snapshot().unread[&1], 0);
    }
}
