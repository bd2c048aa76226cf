//! The edge processing node: device manager, rule engine, and windowed
//! analytics for one region.

pub mod analytics;
pub mod rules;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{Device, Effect, Payload, Thing, ValueKind};
use crate::kernel::Tick;

use analytics::{span_alpha, stats_of, ewma_of, SeriesWindow};
use rules::{Aggregate, Condition, Operand, PropPath, RuleAction, RuleAst, RuleError};

pub type SeriesKey = (u32, String);
pub type SeriesStore = BTreeMap<SeriesKey, SeriesWindow>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymptomKind {
    RuleViolation,
    Anomaly,
    DeviceOffline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub label: String,
    pub value: f64,
    pub tick: Tick,
}

/// Body of a `symptom/1` envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Symptom {
    pub id: String,
    pub kind: SymptomKind,
    /// Rule id or detector name.
    pub source: String,
    pub scope: BTreeSet<String>,
    pub evidence: Vec<Evidence>,
    pub detected_at: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

// ---------------------------------------------------------------------------
// catalog and linking

#[derive(Debug, Clone, PartialEq)]
struct ActuatorRef {
    id: u16,
    accepts: ValueKind,
    rate: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct DeviceRef {
    id: u32,
    region: String,
    actuators: BTreeMap<String, ActuatorRef>,
}

/// Names a rule may refer to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    things: BTreeMap<String, (String, BTreeMap<String, ValueKind>)>,
    devices: BTreeMap<String, DeviceRef>,
    observers: BTreeMap<PropPath, SeriesKey>,
}

impl Catalog {
    pub fn new(things: &[Thing], devices: &[Device]) -> Self {
        let mut cat = Catalog::default();
        for t in things {
            let props = t.properties.iter().map(|p| (p.name.clone(), p.kind)).collect();
            cat.things.insert(t.id.clone(), (t.region.clone(), props));
        }
        let mut sorted: Vec<&Device> = devices.iter().collect();
        sorted.sort_by_key(|d| d.id);
        for d in sorted {
            let actuators = d
                .actuators
                .iter()
                .map(|a| {
                    (a.name.clone(), ActuatorRef { id: a.id, accepts: a.accepts, rate: matches!(a.effect, Effect::Rate { .. }) })
                })
                .collect();
            cat.devices.insert(d.name.clone(), DeviceRef { id: d.id, region: d.region.clone(), actuators });
            let mut sensors: Vec<_> = d.sensors.iter().collect();
            sensors.sort_by_key(|s| s.id);
            for s in sensors {
                let path = PropPath { thing: s.thing.clone(), property: s.property.clone() };
                cat.observers.entry(path).or_insert((d.id, s.property.clone()));
            }
        }
        cat
    }

    pub fn device_region(&self, device_id: u32) -> Option<&str> {
        self.devices.values().find(|d| d.id == device_id).map(|d| d.region.as_str())
    }

    pub fn thing_region(&self, thing: &str) -> Option<&str> {
        self.things.get(thing).map(|(r, _)| r.as_str())
    }
}

fn unresolved(reference: impl Into<String>, reason: impl Into<String>) -> RuleError {
    RuleError::UnresolvedReference { reference: reference.into(), reason: reason.into() }
}

/// A parsed rule bound to concrete devices and series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Rule {
    pub id: String,
    pub text: String,
    pub ast: RuleAst,
    pub enabled: bool,
    /// Region whose telemetry the condition reads.
    pub home_region: String,
    /// Every region the rule touches: condition plus action targets.
    pub scope: BTreeSet<String>,
    /// Series each property path reads from.
    pub bindings: BTreeMap<String, SeriesKey>,
    /// `(device, resource)` a SET action addresses.
    pub target: Option<(u32, u16)>,
}

impl Rule {
    pub fn priority(&self) -> i64 {
        self.ast.priority
    }

    /// `"global"` for rules spanning regions, the region id otherwise.
    pub fn scope_label(&self) -> String {
        if self.scope.len() > 1 {
            "global".into()
        } else {
            self.home_region.clone()
        }
    }

    pub fn is_multi_region(&self) -> bool {
        self.scope.len() > 1
    }
}

pub fn link_rule(id: &str, text: &str, ast: RuleAst, catalog: &Catalog) -> Result<Rule, RuleError> {
    let mut bindings = BTreeMap::new();
    let mut regions = BTreeSet::new();
    for operand in ast.condition.operands() {
        let path = operand.path();
        let (region, props) = catalog
            .things
            .get(&path.thing)
            .ok_or_else(|| unresolved(path.to_string(), format!("unknown thing {:?}", path.thing)))?;
        let kind = props
            .get(&path.property)
            .ok_or_else(|| unresolved(path.to_string(), format!("thing {:?} has no property {:?}", path.thing, path.property)))?;
        if *kind == ValueKind::Text {
            return Err(unresolved(path.to_string(), "text properties cannot be compared"));
        }
        let key = catalog
            .observers
            .get(path)
            .ok_or_else(|| unresolved(path.to_string(), "no sensor observes this property"))?;
        bindings.insert(path.to_string(), key.clone());
        regions.insert(region.clone());
    }
    if regions.len() != 1 {
        return Err(unresolved(
            regions.iter().cloned().collect::<Vec<_>>().join(","),
            "a condition must read properties of exactly one region",
        ));
    }
    let home_region = regions.iter().next().cloned().expect("one region");
    let mut scope = regions;
    let mut target = None;
    if let RuleAction::Set { device, resource, value } = &ast.action {
        let dev = catalog.devices.get(device).ok_or_else(|| unresolved(device.clone(), "unknown device"))?;
        let act = dev
            .actuators
            .get(resource)
            .ok_or_else(|| unresolved(format!("{device}.{resource}"), "device has no such actuator"))?;
        let ok = if act.rate { matches!(value, Payload::Bool(_) | Payload::Float(_)) } else { act.accepts.admits(value) };
        if !ok {
            return Err(unresolved(
                format!("{device}.{resource}"),
                format!("actuator expects {}, rule sets {}", act.accepts.name(), value.kind_name()),
            ));
        }
        scope.insert(dev.region.clone());
        target = Some((dev.id, act.id));
    }
    if let RuleAction::Notify { topic, .. } = &ast.action {
        crate::broker::Topic::new(format!("notify/{topic}")).map_err(|e| unresolved(topic.clone(), e.to_string()))?;
    }
    Ok(Rule { id: id.to_string(), text: text.to_string(), ast, enabled: true, home_region, scope, bindings, target })
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("operand {operand} has no samples")]
pub struct MissingData {
    pub operand: String,
}

fn operand_value(rule: &Rule, operand: &Operand, series: &SeriesStore) -> Result<(f64, Tick), MissingData> {
    let missing = || MissingData { operand: operand.to_string() };
    let key = rule.bindings.get(&operand.path().to_string()).ok_or_else(missing)?;
    let window = series.get(key).filter(|w| !w.is_empty()).ok_or_else(missing)?;
    let (tick, latest) = window.latest().expect("non-empty");
    let value = match operand {
        Operand::Latest { .. } => latest,
        Operand::Aggregate { agg, n, .. } => {
            let values = window.recent(*n as usize);
            let s = stats_of(&values).map_err(|_| missing())?;
            match agg {
                Aggregate::Mean => s.mean,
                Aggregate::Min => s.min,
                Aggregate::Max => s.max,
                Aggregate::Stddev => s.stddev,
                Aggregate::Ewma => ewma_of(&values, span_alpha(*n)).map_err(|_| missing())?,
            }
        }
    };
    Ok((value, tick))
}

fn eval_condition(rule: &Rule, cond: &Condition, series: &SeriesStore, evidence: &mut Vec<Evidence>) -> Result<bool, MissingData> {
    Ok(match cond {
        Condition::Compare { operand, cmp, value } => {
            let (v, tick) = operand_value(rule, operand, series)?;
            evidence.push(Evidence { label: operand.to_string(), value: v, tick });
            cmp.holds(v, *value)
        }
        Condition::And { left, right } => {
            let l = eval_condition(rule, left, series, evidence)?;
            let r = eval_condition(rule, right, series, evidence)?;
            l && r
        }
        Condition::Or { left, right } => {
            let l = eval_condition(rule, left, series, evidence)?;
            let r = eval_condition(rule, right, series, evidence)?;
            l || r
        }
    })
}

/// Evaluates the condition against current series. Every operand is read (no
/// short-circuit) so that evidence is complete and missing data is reported
/// consistently. Returns the evidence when the condition holds.
pub fn evaluate_rule(rule: &Rule, series: &SeriesStore) -> Result<Option<Vec<Evidence>>, MissingData> {
    let mut evidence = Vec::new();
    let holds = eval_condition(rule, &rule.ast.condition, series, &mut evidence)?;
    Ok(holds.then_some(evidence))
}

/// A rule whose condition (and sustain requirement) is satisfied this tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Firing {
    pub rule: String,
    pub scope: BTreeSet<String>,
    pub evidence: Vec<Evidence>,
}

/// Rules evaluated by one region's processing node.
#[derive(Debug, Clone, Default)]
pub struct RuleEngine {
    rules: BTreeMap<String, Rule>,
    streaks: BTreeMap<String, u32>,
    pub missing_data: u64,
    pub evaluations: u64,
}

impl RuleEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, rule: Rule) {
        self.streaks.remove(&rule.id);
        self.rules.insert(rule.id.clone(), rule);
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) -> bool {
        match self.rules.get_mut(id) {
            Some(r) => {
                r.enabled = enabled;
                if !enabled {
                    self.streaks.remove(id);
                }
                true
            }
            None => false,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.get(id)
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values()
    }

    /// Evaluates every enabled rule once; call at most once per tick. `FOR n
    /// TICKS` fires only after `n` consecutive true evaluations.
    pub fn evaluate(&mut self, series: &SeriesStore) -> Vec<Firing> {
        let mut fired = Vec::new();
        for rule in self.rules.values().filter(|r| r.enabled) {
            self.evaluations += 1;
            let streak = self.streaks.entry(rule.id.clone()).or_insert(0);
            match evaluate_rule(rule, series) {
                Ok(Some(evidence)) => {
                    *streak += 1;
                    if *streak >= rule.ast.for_ticks.unwrap_or(1) {
                        fired.push(Firing { rule: rule.id.clone(), scope: rule.scope.clone(), evidence });
                    }
                }
                Ok(None) => *streak = 0,
                Err(_) => {
                    *streak = 0;
                    self.missing_data += 1;
                }
            }
        }
        fired
    }
}

// ---------------------------------------------------------------------------
// device manager

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum DeviceStatus {
    Online,
    Stale,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResourceRecord {
    pub id: u16,
    pub name: String,
    pub role: String,
    pub property: String,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceRecord {
    pub device_id: u32,
    pub name: String,
    pub region: String,
    pub resources: Vec<ResourceRecord>,
    pub status: DeviceStatus,
    pub last_seen: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatusChange {
    pub device: u32,
    pub from: DeviceStatus,
    pub to: DeviceStatus,
    pub last_seen: Tick,
}

#[derive(Debug, Clone)]
pub struct DeviceManager {
    pub heartbeat_timeout: u64,
    pub offline_timeout: u64,
    records: BTreeMap<u32, DeviceRecord>,
}

impl DeviceManager {
    pub fn new(heartbeat_timeout: u64, offline_timeout: u64, records: impl IntoIterator<Item = DeviceRecord>) -> Self {
        Self { heartbeat_timeout, offline_timeout, records: records.into_iter().map(|r| (r.device_id, r)).collect() }
    }

    pub fn seen(&mut self, device: u32, tick: Tick) {
        if let Some(r) = self.records.get_mut(&device) {
            r.last_seen = r.last_seen.max(tick);
        }
    }

    pub fn classify(&self, last_seen: Tick, now: Tick) -> DeviceStatus {
        let age = now.saturating_sub(last_seen);
        if age <= self.heartbeat_timeout {
            DeviceStatus::Online
        } else if age <= self.offline_timeout {
            DeviceStatus::Stale
        } else {
            DeviceStatus::Offline
        }
    }

    /// Recomputes every status at `now` and returns the transitions.
    pub fn refresh(&mut self, now: Tick) -> Vec<StatusChange> {
        let mut changes = Vec::new();
        let (hb, off) = (self.heartbeat_timeout, self.offline_timeout);
        for r in self.records.values_mut() {
            let age = now.saturating_sub(r.last_seen);
            let status = if age <= hb {
                DeviceStatus::Online
            } else if age <= off {
                DeviceStatus::Stale
            } else {
                DeviceStatus::Offline
            };
            if status != r.status {
                changes.push(StatusChange { device: r.device_id, from: r.status, to: status, last_seen: r.last_seen });
                r.status = status;
            }
        }
        changes
    }

    pub fn device_status(&mut self, now: Tick) -> Vec<DeviceRecord> {
        self.refresh(now);
        self.records.values().cloned().collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.records.values()
    }
}
