//! Scenario files: the domain/task/service/business-process model plus the
//! deployment (regions, gateways, things, devices, rules) in TOML.
//!
//! Validation collects every problem before giving up; see `docs/config.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::Topic;
use crate::device::{
    Actuator, Device, Effect, InterestingProperty, NoiseModel, Payload, SamplingMode, Sensor, Thing, ValueKind,
};
use crate::edge::rules::{parse_rule, RuleError};
use crate::edge::{link_rule, Catalog, Rule};
use crate::gateway::{Aggregation, GatewayConfig};
use crate::kernel::Tick;
use crate::orchestration::{LoopSettings, Mode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {col}: {message}")]
    Parse { line: usize, col: usize, message: String },
    #[error("{} validation error(s):\n  {}", .0.len(), .0.join("\n  "))]
    Validation(Vec<String>),
}

impl ConfigError {
    pub fn diagnostics(&self) -> Vec<String> {
        match self {
            ConfigError::Validation(list) => list.clone(),
            other => vec![other.to_string()],
        }
    }
}

// ---------------------------------------------------------------------------
// file schema

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainFile {
    pub name: String,
    #[serde(default)]
    pub tasks: Vec<TaskFile>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub name: String,
    #[serde(default)]
    pub business_processes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorBinding {
    pub device: String,
    pub resource: String,
    pub value: toml::Value,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticsBinding {
    pub thing: String,
    pub property: String,
    #[serde(default = "default_analytics_window")]
    pub window: usize,
}

fn default_analytics_window() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceFile {
    pub name: String,
    pub actuator: Option<ActuatorBinding>,
    pub rules: Option<Vec<String>>,
    pub analytics: Option<AnalyticsBinding>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StepFile {
    pub service: String,
    pub at: Tick,
    /// For rule-set services: enable (default) or disable.
    pub enable: Option<bool>,
    /// For actuator services: overrides the bound value.
    pub value: Option<toml::Value>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessFile {
    pub name: String,
    #[serde(default)]
    pub steps: Vec<StepFile>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RegionFile {
    pub id: String,
    #[serde(rename = "loop")]
    pub loop_id: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum AggregationFile {
    Named(String),
    Batch { batch: u64 },
    Window { window: u64 },
}

impl Default for AggregationFile {
    fn default() -> Self {
        AggregationFile::Named("none".into())
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayFile {
    pub id: String,
    pub region: String,
    #[serde(default)]
    pub aggregation: AggregationFile,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyFile {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    #[serde(default = "default_kind")]
    pub kind: ValueKind,
    pub initial: Option<toml::Value>,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub disturbance: NoiseModel,
    pub composed_of: Option<Vec<String>>,
}

fn default_kind() -> ValueKind {
    ValueKind::Float
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ThingFile {
    pub id: String,
    #[serde(default)]
    pub kind: String,
    pub region: String,
    #[serde(default)]
    pub properties: Vec<PropertyFile>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SensorFile {
    pub id: u16,
    pub name: String,
    pub thing: String,
    pub property: String,
    #[serde(default = "one")]
    pub period: u64,
    /// Report only when the reading moved by at least this much.
    pub on_change: Option<f64>,
    #[serde(default)]
    pub noise: NoiseModel,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorFile {
    pub id: u16,
    pub name: String,
    pub thing: String,
    pub property: String,
    /// Rate effect per tick at level 1; absent means the actuator sets the
    /// property directly.
    pub rate: Option<f64>,
    pub accepts: Option<ValueKind>,
    pub initial: Option<toml::Value>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceFile {
    pub id: u32,
    pub name: String,
    pub region: String,
    pub gateway: Option<String>,
    pub heartbeat: Option<u64>,
    pub fail_at: Option<Tick>,
    #[serde(default)]
    pub detached: bool,
    #[serde(default)]
    pub sensors: Vec<SensorFile>,
    #[serde(default)]
    pub actuators: Vec<ActuatorFile>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub id: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct UserFile {
    pub name: String,
    pub email: String,
    #[serde(default)]
    pub subscriptions: Vec<String>,
    #[serde(default)]
    pub units: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub summary_every: u64,
    #[serde(default)]
    pub domain: DomainFile,
    #[serde(default)]
    pub services: Vec<ServiceFile>,
    #[serde(default)]
    pub business_processes: Vec<ProcessFile>,
    #[serde(default)]
    pub regions: Vec<RegionFile>,
    #[serde(default)]
    pub gateways: Vec<GatewayFile>,
    #[serde(default)]
    pub things: Vec<ThingFile>,
    #[serde(default)]
    pub devices: Vec<DeviceFile>,
    #[serde(default)]
    pub rules: Vec<RuleFile>,
    #[serde(default)]
    pub users: Vec<UserFile>,
    #[serde(default)]
    pub edge: LoopSettings,
}

fn default_horizon() -> u64 {
    200
}

// ---------------------------------------------------------------------------
// validated model

#[derive(Debug, Clone, PartialEq)]
pub enum ServiceBinding {
    Actuator { device: u32, resource: u16, value: Payload },
    RuleSet(Vec<String>),
    Analytics { device: u32, property: String, window: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Service {
    pub name: String,
    pub binding: ServiceBinding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub service: String,
    pub at: Tick,
    pub enable: bool,
    pub value: Option<Payload>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusinessProcess {
    pub name: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Task {
    pub name: String,
    pub business_processes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    pub loop_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub horizon: u64,
    pub mode: Mode,
    pub summary_every: u64,
    pub domain: String,
    pub tasks: Vec<Task>,
    pub services: BTreeMap<String, Service>,
    pub processes: Vec<BusinessProcess>,
    pub regions: Vec<Region>,
    pub gateways: Vec<GatewayConfig>,
    pub things: Vec<Thing>,
    pub devices: Vec<Device>,
    pub rules: Vec<Rule>,
    pub users: Vec<UserFile>,
    pub settings: LoopSettings,
}

impl Scenario {
    pub fn catalog(&self) -> Catalog {
        Catalog::new(&self.things, &self.devices)
    }

    pub fn loop_for(&self, region: &str) -> Option<&str> {
        self.regions.iter().find(|r| r.id == region).map(|r| r.loop_id.as_str())
    }

    pub fn device_by_name(&self, name: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.name == name)
    }
}

/// Next free `rule-NNN` id.
pub fn next_rule_id<'a>(taken: impl IntoIterator<Item = &'a str>) -> String {
    let taken: BTreeSet<&str> = taken.into_iter().collect();
    (1..).map(|n| format!("rule-{n:03}")).find(|id| !taken.contains(id.as_str())).expect("unbounded")
}

fn payload_of(v: &toml::Value) -> Option<Payload> {
    match v {
        toml::Value::Boolean(b) => Some(Payload::Bool(*b)),
        toml::Value::Float(f) => Some(Payload::Float(*f)),
        toml::Value::Integer(i) => Some(Payload::Float(*i as f64)),
        toml::Value::String(s) => Some(match s.as_str() {
            "on" => Payload::Bool(true),
            "off" => Payload::Bool(false),
            _ => Payload::Text(s.clone()),
        }),
        _ => None,
    }
}

fn topic_safe(s: &str) -> bool {
    !s.is_empty() && Topic::new(format!("x/{s}")).is_ok() && !s.contains('/')
}

pub fn parse_config(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<Scenario, ConfigError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| {
        let (line, col) = e
            .span()
            .map(|s| {
                let before = &text[..s.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
                (line, col)
            })
            .unwrap_or((0, 0));
        ConfigError::Parse { line, col, message: e.message().to_string() }
    })?;
    validate(file)
}

/// Checks every cross reference and builds the runtime model. All problems
/// are reported together.
pub fn validate(file: ScenarioFile) -> Result<Scenario, ConfigError> {
    let mut errs: Vec<String> = Vec::new();

    // regions and loops
    let mut regions = Vec::new();
    let mut region_ids = BTreeSet::new();
    let mut loop_ids = BTreeSet::new();
    if file.regions.is_empty() {
        errs.push("no regions defined".into());
    }
    for r in &file.regions {
        if !topic_safe(&r.id) {
            errs.push(format!("region id {:?} is not a valid topic segment", r.id));
        }
        if !topic_safe(&r.loop_id) || r.loop_id == "global" {
            errs.push(format!("loop id {:?} is not usable", r.loop_id));
        }
        if !region_ids.insert(r.id.clone()) {
            errs.push(format!("duplicate region id {:?}", r.id));
        }
        if !loop_ids.insert(r.loop_id.clone()) {
            errs.push(format!("duplicate loop id {:?}", r.loop_id));
        }
        regions.push(Region { id: r.id.clone(), loop_id: r.loop_id.clone() });
    }

    // gateways
    let mut gateways: Vec<GatewayConfig> = Vec::new();
    for g in &file.gateways {
        if gateways.iter().any(|x| x.id == g.id) {
            errs.push(format!("duplicate gateway id {:?}", g.id));
        }
        if !region_ids.contains(&g.region) {
            errs.push(format!("gateway {:?} references unknown region {:?}", g.id, g.region));
        }
        let aggregation = match &g.aggregation {
            AggregationFile::Named(n) if n == "none" => Aggregation::None,
            AggregationFile::Named(n) => {
                errs.push(format!("gateway {:?}: unknown aggregation {n:?}", g.id));
                Aggregation::None
            }
            AggregationFile::Batch { batch } => {
                if *batch == 0 {
                    errs.push(format!("gateway {:?}: batch size must be at least 1", g.id));
                }
                Aggregation::Batch { n: *batch as usize }
            }
            AggregationFile::Window { window } => {
                if *window == 0 {
                    errs.push(format!("gateway {:?}: window must be at least 1 tick", g.id));
                }
                Aggregation::Window { m: *window }
            }
        };
        gateways.push(GatewayConfig {
            id: g.id.clone(),
            region: g.region.clone(),
            attached_devices: BTreeSet::new(),
            aggregation,
        });
    }

    for g in &gateways {
        if loop_ids.contains(&g.id) || g.id == "global" || g.id == "app" {
            errs.push(format!("gateway id {:?} collides with a loop or service name", g.id));
        }
    }

    // things
    let mut things: Vec<Thing> = Vec::new();
    for t in &file.things {
        if things.iter().any(|x| x.id == t.id) {
            errs.push(format!("duplicate thing id {:?}", t.id));
        }
        if !region_ids.contains(&t.region) {
            errs.push(format!("thing {:?} references unknown region {:?}", t.id, t.region));
        }
        let mut state = BTreeMap::new();
        let mut props = Vec::new();
        for p in &t.properties {
            if props.iter().any(|x: &InterestingProperty| x.name == p.name) {
                errs.push(format!("thing {:?}: duplicate property {:?}", t.id, p.name));
            }
            if !topic_safe(&p.name) {
                errs.push(format!("thing {:?}: property name {:?} is not a valid topic segment", t.id, p.name));
            }
            if let Some(members) = &p.composed_of {
                for m in members {
                    if !t.properties.iter().any(|x| x.name == *m && x.composed_of.is_none()) {
                        errs.push(format!("thing {:?}: composed property {:?} lists unknown member {m:?}", t.id, p.name));
                    }
                }
            } else {
                let initial = match &p.initial {
                    None => p.kind.zero(),
                    Some(v) => match payload_of(v).filter(|x| p.kind.admits(x)) {
                        Some(x) => x,
                        None => {
                            errs.push(format!("thing {:?}: initial value of {:?} is not a {}", t.id, p.name, p.kind.name()));
                            p.kind.zero()
                        }
                    },
                };
                state.insert(p.name.clone(), initial);
            }
            props.push(InterestingProperty {
                name: p.name.clone(),
                unit: p.unit.clone(),
                kind: p.kind,
                composed_of: p.composed_of.clone(),
                drift: p.drift,
                disturbance: p.disturbance,
            });
        }
        things.push(Thing {
            id: t.id.clone(),
            kind: if t.kind.is_empty() { "thing".into() } else { t.kind.clone() },
            region: t.region.clone(),
            properties: props,
            state,
        });
    }
    let prop_of = |thing: &str, prop: &str| -> Option<InterestingProperty> {
        things.iter().find(|t| t.id == thing)?.property(prop).cloned()
    };

    // devices
    let mut devices: Vec<Device> = Vec::new();
    for d in &file.devices {
        let who = format!("device {} ({:?})", d.id, d.name);
        if devices.iter().any(|x| x.id == d.id) {
            errs.push(format!("duplicate device id {}", d.id));
        }
        if devices.iter().any(|x| x.name == d.name) {
            errs.push(format!("duplicate device name {:?}", d.name));
        }
        if !region_ids.contains(&d.region) {
            errs.push(format!("{who} references unknown region {:?}", d.region));
        }
        let gateway = match &d.gateway {
            Some(g) => match gateways.iter().find(|x| x.id == *g) {
                Some(cfg) if cfg.region != d.region => {
                    errs.push(format!("{who}: gateway {g:?} serves region {:?}, not {:?}", cfg.region, d.region));
                    g.clone()
                }
                Some(_) => g.clone(),
                None => {
                    errs.push(format!("{who} references unknown gateway {g:?}"));
                    g.clone()
                }
            },
            None => match gateways.iter().find(|x| x.region == d.region) {
                Some(cfg) => cfg.id.clone(),
                None => {
                    errs.push(format!("{who}: region {:?} has no gateway", d.region));
                    String::new()
                }
            },
        };
        if let Some(cfg) = gateways.iter_mut().find(|x| x.id == gateway) {
            if !d.detached {
                cfg.attached_devices.insert(d.id);
            }
        }
        let mut resource_ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        let mut sensors = Vec::new();
        for s in &d.sensors {
            if !resource_ids.insert(s.id) {
                errs.push(format!("{who}: duplicate resource id {}", s.id));
            }
            if !names.insert(s.name.clone()) {
                errs.push(format!("{who}: duplicate resource name {:?}", s.name));
            }
            match prop_of(&s.thing, &s.property) {
                None => errs.push(format!("{who}: sensor {:?} observes unknown property {}.{}", s.name, s.thing, s.property)),
                Some(p) if p.composed_of.is_some() => {
                    errs.push(format!("{who}: sensor {:?} cannot observe composed property {}.{}", s.name, s.thing, s.property))
                }
                Some(_) => {}
            }
            if let Some(t) = things.iter().find(|t| t.id == s.thing) {
                if t.region != d.region {
                    errs.push(format!("{who}: sensor {:?} observes {:?} in another region", s.name, s.thing));
                }
            }
            if s.period == 0 {
                errs.push(format!("{who}: sensor {:?} period must be at least 1", s.name));
            }
            if matches!(s.on_change, Some(x) if x.is_nan() || x < 0.0) {
                errs.push(format!("{who}: sensor {:?} on_change delta must be non-negative", s.name));
            }
            sensors.push(Sensor {
                id: s.id,
                name: s.name.clone(),
                thing: s.thing.clone(),
                property: s.property.clone(),
                period: s.period.max(1),
                mode: s.on_change.map_or(SamplingMode::Periodic, |delta| SamplingMode::OnChange { delta }),
                noise: s.noise,
                last_reported: None,
            });
        }
        let mut actuators = Vec::new();
        for a in &d.actuators {
            if !resource_ids.insert(a.id) {
                errs.push(format!("{who}: duplicate resource id {}", a.id));
            }
            if !names.insert(a.name.clone()) {
                errs.push(format!("{who}: duplicate resource name {:?}", a.name));
            }
            let prop = prop_of(&a.thing, &a.property);
            if prop.is_none() {
                errs.push(format!("{who}: actuator {:?} acts on unknown property {}.{}", a.name, a.thing, a.property));
            }
            if let Some(t) = things.iter().find(|t| t.id == a.thing) {
                if t.region != d.region {
                    errs.push(format!("{who}: actuator {:?} acts on {:?} in another region", a.name, a.thing));
                }
            }
            let effect = match a.rate {
                Some(rate) => {
                    if prop.as_ref().is_some_and(|p| p.kind != ValueKind::Float) {
                        errs.push(format!("{who}: rate actuator {:?} needs a float property", a.name));
                    }
                    Effect::Rate { rate }
                }
                None => Effect::Set,
            };
            let accepts = a.accepts.unwrap_or(match effect {
                Effect::Rate { .. } => ValueKind::Bool,
                Effect::Set => prop.as_ref().map_or(ValueKind::Float, |p| p.kind),
            });
            let state = match &a.initial {
                None => None,
                Some(v) => {
                    let p = payload_of(v);
                    if p.is_none() {
                        errs.push(format!("{who}: actuator {:?} has an unusable initial value", a.name));
                    }
                    p
                }
            };
            actuators.push(Actuator {
                id: a.id,
                name: a.name.clone(),
                thing: a.thing.clone(),
                property: a.property.clone(),
                effect,
                accepts,
                state,
            });
        }
        devices.push(Device {
            id: d.id,
            name: d.name.clone(),
            region: d.region.clone(),
            gateway,
            heartbeat: d.heartbeat,
            fail_at: d.fail_at,
            sensors,
            actuators,
        });
    }

    // rules
    let catalog = Catalog::new(&things, &devices);
    let mut rules: Vec<Rule> = Vec::new();
    let explicit: Vec<&str> = file.rules.iter().filter_map(|r| r.id.as_deref()).collect();
    for (i, r) in file.rules.iter().enumerate() {
        let id = match &r.id {
            Some(id) => id.clone(),
            None => {
                let taken = explicit.iter().copied().chain(rules.iter().map(|x| x.id.as_str()));
                next_rule_id(taken)
            }
        };
        if rules.iter().any(|x| x.id == id) {
            errs.push(format!("duplicate rule id {id:?}"));
        }
        let linked = parse_rule(&r.text).and_then(|ast| link_rule(&id, &r.text, ast, &catalog));
        match linked {
            Ok(rule) => rules.push(rule),
            Err(e) => {
                let at = match &e {
                    RuleError::SyntaxError(d) => format!(" (line {}, col {})", d.line, d.col),
                    _ => String::new(),
                };
                errs.push(format!("rule #{} {id}: {e}{at}", i + 1));
            }
        }
    }

    // services
    let mut services = BTreeMap::new();
    for s in &file.services {
        let bound = [s.actuator.is_some(), s.rules.is_some(), s.analytics.is_some()].iter().filter(|b| **b).count();
        if bound != 1 {
            errs.push(format!("service {:?} must bind exactly one of actuator, rules, analytics", s.name));
            continue;
        }
        if services.contains_key(&s.name) {
            errs.push(format!("duplicate service {:?}", s.name));
        }
        let binding = if let Some(a) = &s.actuator {
            let dev = devices.iter().find(|d| d.name == a.device);
            let act = dev.and_then(|d| d.actuators.iter().find(|x| x.name == a.resource));
            let value = payload_of(&a.value);
            match (dev, act, value) {
                (Some(d), Some(act), Some(v)) => ServiceBinding::Actuator { device: d.id, resource: act.id, value: v },
                (None, _, _) => {
                    errs.push(format!("service {:?} references unknown device {:?}", s.name, a.device));
                    continue;
                }
                (Some(_), None, _) => {
                    errs.push(format!("service {:?} references unknown actuator {}.{}", s.name, a.device, a.resource));
                    continue;
                }
                (_, _, None) => {
                    errs.push(format!("service {:?} has an unusable value", s.name));
                    continue;
                }
            }
        } else if let Some(ids) = &s.rules {
            for id in ids {
                if !rules.iter().any(|r| r.id == *id) && !file.rules.iter().any(|r| r.id.as_deref() == Some(id)) {
                    errs.push(format!("service {:?} references unknown rule {id:?}", s.name));
                }
            }
            ServiceBinding::RuleSet(ids.clone())
        } else {
            let a = s.analytics.as_ref().expect("one binding");
            let observer = devices
                .iter()
                .find(|d| d.sensors.iter().any(|x| x.thing == a.thing && x.property == a.property))
                .map(|d| d.id);
            match observer {
                Some(device) => ServiceBinding::Analytics { device, property: a.property.clone(), window: a.window.max(1) },
                None => {
                    errs.push(format!("service {:?}: nothing observes {}.{}", s.name, a.thing, a.property));
                    continue;
                }
            }
        };
        services.insert(s.name.clone(), Service { name: s.name.clone(), binding });
    }

    // business processes and tasks
    let mut processes = Vec::new();
    for p in &file.business_processes {
        let mut steps = Vec::new();
        let mut last = 0;
        for s in &p.steps {
            if !file.services.iter().any(|x| x.name == s.service) {
                errs.push(format!("business process {:?} references unknown service {:?}", p.name, s.service));
            }
            if s.at < last {
                errs.push(format!("business process {:?}: steps must be in tick order ({} after {last})", p.name, s.at));
            }
            last = s.at;
            let value = s.value.as_ref().and_then(payload_of);
            if s.value.is_some() && value.is_none() {
                errs.push(format!("business process {:?}: unusable value for {:?}", p.name, s.service));
            }
            steps.push(Step { service: s.service.clone(), at: s.at, enable: s.enable.unwrap_or(true), value });
        }
        if processes.iter().any(|x: &BusinessProcess| x.name == p.name) {
            errs.push(format!("duplicate business process {:?}", p.name));
        }
        processes.push(BusinessProcess { name: p.name.clone(), steps });
    }
    let mut tasks = Vec::new();
    for t in &file.domain.tasks {
        for bp in &t.business_processes {
            if !file.business_processes.iter().any(|p| p.name == *bp) {
                errs.push(format!("task {:?} references unknown business process {bp:?}", t.name));
            }
        }
        tasks.push(Task { name: t.name.clone(), business_processes: t.business_processes.clone() });
    }

    // users
    let mut emails = BTreeSet::new();
    for u in &file.users {
        if !u.email.contains('@') {
            errs.push(format!("user {:?}: invalid email {:?}", u.name, u.email));
        }
        if !emails.insert(u.email.clone()) {
            errs.push(format!("duplicate user email {:?}", u.email));
        }
        for s in &u.subscriptions {
            if let Err(e) = crate::app::check_user_pattern(s) {
                errs.push(format!("user {:?}: {e}", u.name));
            }
        }
    }

    let st = &file.edge;
    if st.window == 0 {
        errs.push("edge.window must be at least 1".into());
    }
    if st.heartbeat_timeout > st.offline_timeout {
        errs.push("edge.heartbeat_timeout must not exceed edge.offline_timeout".into());
    }

    if !errs.is_empty() {
        return Err(ConfigError::Validation(errs));
    }
    Ok(Scenario {
        name: file.name,
        seed: file.seed,
        horizon: file.horizon,
        mode: file.mode,
        summary_every: file.summary_every,
        domain: file.domain.name,
        tasks,
        services,
        processes,
        regions,
        gateways,
        things,
        devices,
        rules,
        users: file.users,
        settings: file.edge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
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
initial = 28.0
[[devices]]
id = 1
name = "thermo"
region = "home"
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
id = 7
name = "power"
thing = "room"
property = "temp"
rate = -0.5
[[rules]]
text = "WHEN room.temp > 23 THEN SET(ac, power, on)"
"#;

    #[test]
    fn base_is_valid() {
        let s = parse_config_str(BASE).unwrap();
        assert_eq!(s.devices.len(), 2);
        assert_eq!(s.rules[0].id, "rule-001");
        assert_eq!(s.gateways[0].attached_devices, BTreeSet::from([1, 2]));
    }

    #[test]
    fn duplicate_device_id() {
        let text = BASE.replace("id = 2\nname = \"ac\"", "id = 1\nname = \"ac\"");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.diagnostics().iter().any(|d| d.contains("duplicate device id 1")), "{err}");
    }

    #[test]
    fn unknown_service_reference() {
        let text = format!("{BASE}\n[[business_processes]]\nname = \"evening\"\nsteps = [{{ service = \"cooling\", at = 5 }}]\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.diagnostics().iter().any(|d| d.contains("\"cooling\"")), "{err}");
    }

    #[test]
    fn reports_every_error() {
        let text = BASE
            .replace("region = \"home\"\n[[devices.sensors]]", "region = \"attic\"\n[[devices.sensors]]")
            .replace("SET(ac, power, on)", "SET(heater, power, on)");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.diagnostics().len() >= 2, "{err}");
    }

    #[test]
    fn parse_error_has_location() {
        let err = parse_config_str("name = \"x\"\nseed = \"nope\"\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rule_ids_skip_explicit() {
        let text = format!("{BASE}\n[[rules]]\nid = \"rule-002\"\ntext = \"WHEN room.temp < 21 THEN SET(ac, power, off)\"\n[[rules]]\ntext = \"WHEN room.temp > 30 THEN ESCALATE(\\\"hot\\\")\"\n");
        let s = parse_config_str(&text).unwrap();
        let ids: Vec<&str> = s.rules.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["rule-001", "rule-002", "rule-003"]);
    }
}
