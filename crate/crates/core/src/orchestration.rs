//! MAPE-K orchestration: per-region loops, their knowledge bases, and the
//! cloud-side global controller.
//!
//! Phases talk to each other only through the broker. A loop's Monitor
//! publishes symptoms on `kb/<loop>/symptoms`, Analyse publishes reports on
//! `kb/<loop>/reports`, Plan publishes on `kb/<loop>/plans`, and Execute turns
//! plans into `commands/<device>` and `notify/<topic>` messages. Each hop costs
//! one tick.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::broker::{Outbox, Topic};
use crate::device::Payload;
use crate::edge::analytics::{detect_anomaly, AnomalyCheck, SeriesWindow};
use crate::edge::rules::RuleAction;
use crate::edge::{DeviceManager, DeviceStatus, Evidence, Rule, RuleEngine, SeriesStore, StatusChange, Symptom, SymptomKind};
use crate::gateway::{command_topic, CommandBody, TelemetryBody};
use crate::kernel::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Centralized,
    Decentralized,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::Decentralized => "decentralized",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centralized" => Ok(Mode::Centralized),
            "decentralized" => Ok(Mode::Decentralized),
            other => Err(format!("unknown mode {other:?} (expected centralized or decentralized)")),
        }
    }
}

fn topic(s: String) -> Topic {
    Topic::new(s).expect("ids are validated at config load")
}

// ---------------------------------------------------------------------------
// knowledge base

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KbEntry {
    pub key: String,
    pub value: Value,
    pub version: u64,
    pub written_at: Tick,
    pub source: String,
}

/// Append-only versioned store. Every write creates a new version; nothing is
/// overwritten.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    pub namespace: String,
    entries: BTreeMap<String, Vec<KbEntry>>,
    writes: u64,
}

impl KnowledgeBase {
    pub fn new(namespace: impl Into<String>) -> Self {
        Self { namespace: namespace.into(), ..Self::default() }
    }

    pub fn write(&mut self, key: impl Into<String>, value: Value, tick: Tick, source: &str) -> u64 {
        let key = key.into();
        let versions = self.entries.entry(key.clone()).or_default();
        let version = versions.last().map_or(1, |e| e.version + 1);
        versions.push(KbEntry { key, value, version, written_at: tick, source: source.to_string() });
        self.writes += 1;
        version
    }

    pub fn latest(&self, key: &str) -> Option<&KbEntry> {
        self.entries.get(key)?.last()
    }

    /// Latest version written at or before `tick`.
    pub fn read_at(&self, key: &str, tick: Tick) -> Option<&KbEntry> {
        self.entries.get(key)?.iter().rev().find(|e| e.written_at <= tick)
    }

    pub fn history(&self, key: &str) -> &[KbEntry] {
        self.entries.get(key).map_or(&[], Vec::as_slice)
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.entries.keys().filter(move |k| k.starts_with(prefix))
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }
}

// ---------------------------------------------------------------------------
// reports, plans, actions

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Critical,
}

/// Body of a `report/1` envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnalysisReport {
    pub id: String,
    #[serde(rename = "loop")]
    pub loop_id: String,
    pub tick: Tick,
    pub symptoms: Vec<Symptom>,
    pub matched_rules: Vec<String>,
    pub severity: Severity,
    pub scope: BTreeSet<String>,
}

impl AnalysisReport {
    pub fn symptom_ids(&self) -> Vec<String> {
        self.symptoms.iter().map(|s| s.id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionKind {
    DeviceCommand { device: u32, resource: u16, value: Payload },
    Notify { topic: String, message: String },
    RuleToggle { rule: String, enabled: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Action {
    /// `<plan id>#<index>`; kept when a plan is split into slices.
    pub id: String,
    pub region: String,
    #[serde(flatten)]
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    #[serde(default)]
    pub priority: i64,
}

/// Body of a `plan/1` envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Plan {
    pub id: String,
    /// Loop id, or `"global"`.
    pub origin: String,
    pub actions: Vec<Action>,
    pub scope: BTreeSet<String>,
    pub cause: Vec<String>,
    pub priority: i64,
    pub created_at: Tick,
    /// Set on slices of a shared plan; the executing loop acks to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinator: Option<String>,
}

/// An action before it is numbered into a plan.
#[derive(Debug, Clone, PartialEq)]
struct Draft {
    region: String,
    kind: ActionKind,
    rule: Option<String>,
    priority: i64,
}

fn number(plan_id: &str, mut drafts: Vec<Draft>) -> Vec<Action> {
    // highest priority first, ties by rule id
    drafts.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.rule.cmp(&b.rule)));
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, d)| Action { id: format!("{plan_id}#{i}"), region: d.region, kind: d.kind, rule: d.rule, priority: d.priority })
        .collect()
}

fn draft_for(rule: &Rule, escalate_topic: bool) -> Draft {
    let kind = match &rule.ast.action {
        RuleAction::Set { value, .. } => {
            let (device, resource) = rule.target.expect("linked SET rules carry a target");
            ActionKind::DeviceCommand { device, resource, value: value.clone() }
        }
        RuleAction::Notify { topic, message } => ActionKind::Notify { topic: topic.clone(), message: message.clone() },
        RuleAction::Escalate { message } => {
            debug_assert!(escalate_topic);
            ActionKind::Notify { topic: "escalations".into(), message: message.clone() }
        }
    };
    let region = match &rule.ast.action {
        RuleAction::Set { .. } => rule.scope.iter().find(|r| **r != rule.home_region).unwrap_or(&rule.home_region).clone(),
        _ => rule.home_region.clone(),
    };
    Draft { region, kind, rule: Some(rule.id.clone()), priority: rule.priority() }
}

fn notify_only(region: &str, report: &AnalysisReport) -> Draft {
    let kinds: BTreeSet<&str> = report
        .symptoms
        .iter()
        .map(|s| match s.kind {
            SymptomKind::RuleViolation => "rule-violation",
            SymptomKind::Anomaly => "anomaly",
            SymptomKind::DeviceOffline => "device-offline",
        })
        .collect();
    let sources: BTreeSet<&str> = report.symptoms.iter().map(|s| s.source.as_str()).collect();
    Draft {
        region: region.to_string(),
        kind: ActionKind::Notify {
            topic: "symptoms".into(),
            message: format!(
                "{} ({}) from {}",
                kinds.into_iter().collect::<Vec<_>>().join(", "),
                format!("{:?}", report.severity).to_lowercase(),
                sources.into_iter().collect::<Vec<_>>().join(", ")
            ),
        },
        rule: None,
        priority: 0,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrchestrationError {
    #[error("report {0} matched no actionable rule")]
    NoApplicableAction(String),
    #[error("device {device} is not attached to any gateway")]
    DispatchFailure { action: String, device: u32 },
    #[error("loop {0} did not ack in time")]
    AckTimeout(String),
}

/// Lexicographically smallest involved loop id.
pub fn elect_coordinator<'a>(involved: impl IntoIterator<Item = &'a String>) -> Option<String> {
    involved.into_iter().min().cloned()
}

// ---------------------------------------------------------------------------
// local loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub monitor: u64,
    pub analyse: u64,
    pub plan: u64,
    pub execute: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSettings {
    pub window: usize,
    pub z_threshold: f64,
    pub ack_timeout: u64,
    pub heartbeat_timeout: u64,
    pub offline_timeout: u64,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self { window: 32, z_threshold: 3.0, ack_timeout: 10, heartbeat_timeout: 15, offline_timeout: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Coordination {
    plan: Plan,
    awaiting: BTreeSet<String>,
    deadline: Tick,
    outcomes: Vec<Value>,
}

/// What happened to one action at execution time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActionOutcome {
    pub action: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MapeLoop {
    pub id: String,
    pub region: String,
    pub mode: Mode,
    pub settings: LoopSettings,
    pub kb: KnowledgeBase,
    pub engine: RuleEngine,
    pub series: SeriesStore,
    pub devices: DeviceManager,
    pub counters: PhaseCounters,
    /// region -> loop id, for every loop in the deployment.
    pub topology: BTreeMap<String, String>,
    next_symptom: u64,
    next_report: u64,
    next_plan: u64,
    executed: BTreeSet<String>,
    coordinations: BTreeMap<String, Coordination>,
    pub insufficient_anomaly_checks: u64,
    pub last_plan: Option<Plan>,
}

impl MapeLoop {
    pub fn new(
        id: impl Into<String>,
        region: impl Into<String>,
        mode: Mode,
        settings: LoopSettings,
        devices: DeviceManager,
        topology: BTreeMap<String, String>,
    ) -> Self {
        let id = id.into();
        Self {
            kb: KnowledgeBase::new(id.clone()),
            id,
            region: region.into(),
            mode,
            settings,
            engine: RuleEngine::new(),
            series: SeriesStore::new(),
            devices,
            counters: PhaseCounters::default(),
            topology,
            next_symptom: 0,
            next_report: 0,
            next_plan: 0,
            executed: BTreeSet::new(),
            coordinations: BTreeMap::new(),
            insufficient_anomaly_checks: 0,
            last_plan: None,
        }
    }

    fn symptom_id(&mut self) -> String {
        self.next_symptom += 1;
        format!("{}:sym-{}", self.id, self.next_symptom)
    }

    fn report_id(&mut self) -> String {
        self.next_report += 1;
        format!("{}:rep-{}", self.id, self.next_report)
    }

    fn plan_id(&mut self) -> String {
        self.next_plan += 1;
        format!("{}:plan-{}", self.id, self.next_plan)
    }

    fn own_scope(&self) -> BTreeSet<String> {
        BTreeSet::from([self.region.clone()])
    }

    fn emit_symptom(&mut self, symptom: Symptom, now: Tick, out: &mut Outbox) {
        let body = serde_json::to_value(&symptom).expect("serializable");
        self.kb.write(format!("symptoms/{}", symptom.id), body.clone(), now, &self.id);
        out.publish(topic(format!("kb/{}/symptoms", self.id)), "symptom/1", body);
    }

    /// Appends this tick's samples to the series, runs the anomaly detector on
    /// each, then evaluates the rule engine once.
    pub fn monitor_step(&mut self, now: Tick, delivered: &[TelemetryBody], out: &mut Outbox) -> Vec<Symptom> {
        if delivered.is_empty() {
            return Vec::new();
        }
        self.counters.monitor += 1;
        let mut symptoms = Vec::new();
        for t in delivered {
            self.devices.seen(t.device_id, t.ts);
            let Some(value) = t.value.as_f64() else { continue };
            let key = (t.device_id, t.property.clone());
            let window = self
                .series
                .entry(key)
                .or_insert_with(|| SeriesWindow::new(t.device_id, t.property.clone(), self.settings.window));
            match detect_anomaly(window, self.settings.z_threshold, value) {
                AnomalyCheck::Anomalous { z, mean, stddev } => {
                    let id = self.symptom_id();
                    symptoms.push(Symptom {
                        id,
                        kind: SymptomKind::Anomaly,
                        source: "zscore".into(),
                        scope: self.own_scope(),
                        evidence: vec![
                            Evidence { label: t.path(), value, tick: t.ts },
                            Evidence { label: "mean".into(), value: mean, tick: now },
                            Evidence { label: "stddev".into(), value: stddev, tick: now },
                        ],
                        detected_at: now,
                        z: Some(z),
                    });
                }
                AnomalyCheck::Insufficient => self.insufficient_anomaly_checks += 1,
                AnomalyCheck::Normal { .. } => {}
            }
            let window = self.series.get_mut(&(t.device_id, t.property.clone())).expect("inserted above");
            window.push(t.ts, value);
            self.kb.write(
                format!("series/{}/{}", t.device_id, t.property),
                json!({ "ts": t.ts, "value": value }),
                now,
                &self.id,
            );
        }
        for firing in self.engine.evaluate(&self.series) {
            let id = self.symptom_id();
            symptoms.push(Symptom {
                id,
                kind: SymptomKind::RuleViolation,
                source: firing.rule,
                scope: firing.scope,
                evidence: firing.evidence,
                detected_at: now,
                z: None,
            });
        }
        for s in &symptoms {
            self.emit_symptom(s.clone(), now, out);
        }
        symptoms
    }

    /// Heartbeat bookkeeping; one device-offline symptom per online->offline
    /// transition.
    pub fn check_devices(&mut self, now: Tick, out: &mut Outbox) -> Vec<StatusChange> {
        let changes = self.devices.refresh(now);
        for c in &changes {
            out.record(
                "device-status",
                json!({ "device": c.device, "from": c.from, "to": c.to, "lastSeen": c.last_seen }),
            );
            if c.to == DeviceStatus::Offline {
                let id = self.symptom_id();
                let symptom = Symptom {
                    id,
                    kind: SymptomKind::DeviceOffline,
                    source: "device-manager".into(),
                    scope: self.own_scope(),
                    evidence: vec![Evidence { label: format!("device/{}/last-seen", c.device), value: c.last_seen as f64, tick: now }],
                    detected_at: now,
                    z: None,
                };
                self.emit_symptom(symptom, now, out);
            }
        }
        changes
    }

    /// Groups the delivered symptoms by scope into reports.
    pub fn analyse_step(&mut self, now: Tick, symptoms: Vec<Symptom>, out: &mut Outbox) -> Vec<AnalysisReport> {
        if symptoms.is_empty() {
            return Vec::new();
        }
        self.counters.analyse += 1;
        let mut groups: BTreeMap<BTreeSet<String>, Vec<Symptom>> = BTreeMap::new();
        for s in symptoms {
            self.kb.write(format!("consumed/{}", s.id), json!(true), now, &self.id);
            groups.entry(s.scope.clone()).or_default().push(s);
        }
        let mut reports = Vec::new();
        for (scope, members) in groups {
            let critical = members.iter().any(|s| match s.kind {
                SymptomKind::DeviceOffline => true,
                SymptomKind::Anomaly => s.z.is_some_and(|z| z > 2.0 * self.settings.z_threshold),
                SymptomKind::RuleViolation => false,
            });
            let matched: BTreeSet<String> =
                members.iter().filter(|s| s.kind == SymptomKind::RuleViolation).map(|s| s.source.clone()).collect();
            let report = AnalysisReport {
                id: self.report_id(),
                loop_id: self.id.clone(),
                tick: now,
                symptoms: members,
                matched_rules: matched.into_iter().collect(),
                severity: if critical { Severity::Critical } else { Severity::Warn },
                scope,
            };
            let body = serde_json::to_value(&report).expect("serializable");
            self.kb.write(format!("reports/{}", report.id), body.clone(), now, &self.id);
            out.publish(topic(format!("kb/{}/reports", self.id)), "report/1", body);
            reports.push(report);
        }
        reports
    }

    fn publish_local_plan(&mut self, plan: Plan, now: Tick, out: &mut Outbox) {
        let body = serde_json::to_value(&plan).expect("serializable");
        self.kb.write(format!("plans/{}", plan.id), body.clone(), now, &self.id);
        out.publish(topic(format!("kb/{}/plans", self.id)), "plan/1", body);
    }

    /// Routes each report: local plan, escalation to the global controller, or
    /// a shared plan for peer coordination.
    pub fn plan_step(&mut self, now: Tick, reports: &[AnalysisReport], out: &mut Outbox) -> Vec<Result<Plan, OrchestrationError>> {
        if reports.is_empty() {
            return Vec::new();
        }
        self.counters.plan += 1;
        let mut results = Vec::new();
        for report in reports {
            let rules: Vec<Rule> = report.matched_rules.iter().filter_map(|id| self.engine.get(id).cloned()).collect();
            let local = report.scope.iter().all(|r| *r == self.region);
            let (escalating, acting): (Vec<&Rule>, Vec<&Rule>) =
                rules.iter().partition(|r| matches!(r.ast.action, RuleAction::Escalate { .. }));
            if local {
                let mut drafts: Vec<Draft> = acting.iter().map(|r| draft_for(r, false)).collect();
                if !escalating.is_empty() {
                    match self.mode {
                        Mode::Centralized => self.escalate(report, &escalating, now, out),
                        Mode::Decentralized => drafts.extend(escalating.iter().map(|r| draft_for(r, true))),
                    }
                }
                let noop = drafts.is_empty();
                if noop && !escalating.is_empty() {
                    continue;
                }
                if noop {
                    drafts.push(notify_only(&self.region, report));
                }
                let id = self.plan_id();
                let priority = drafts.iter().map(|d| d.priority).max().unwrap_or(0);
                let plan = Plan {
                    actions: number(&id, drafts),
                    id,
                    origin: self.id.clone(),
                    scope: report.scope.clone(),
                    cause: report.symptom_ids(),
                    priority,
                    created_at: now,
                    coordinator: None,
                };
                self.publish_local_plan(plan.clone(), now, out);
                results.push(if noop { Err(OrchestrationError::NoApplicableAction(report.id.clone())) } else { Ok(plan) });
                continue;
            }
            match self.mode {
                Mode::Centralized => self.escalate(report, &escalating, now, out),
                Mode::Decentralized => {
                    let mut drafts: Vec<Draft> = rules.iter().map(|r| draft_for(r, true)).collect();
                    if drafts.is_empty() {
                        drafts.push(notify_only(&self.region, report));
                    }
                    let id = self.plan_id();
                    let priority = drafts.iter().map(|d| d.priority).max().unwrap_or(0);
                    let plan = Plan {
                        actions: number(&id, drafts),
                        id,
                        origin: self.id.clone(),
                        scope: report.scope.clone(),
                        cause: report.symptom_ids(),
                        priority,
                        created_at: now,
                        coordinator: None,
                    };
                    let body = serde_json::to_value(&plan).expect("serializable");
                    self.kb.write(format!("plans/{}", plan.id), body.clone(), now, &self.id);
                    out.publish(topic("plans/shared".into()), "plan/1", body);
                    results.push(Ok(plan));
                }
            }
        }
        results
    }

    fn escalate(&mut self, report: &AnalysisReport, escalating: &[&Rule], now: Tick, out: &mut Outbox) {
        let escalated: Vec<Value> = escalating
            .iter()
            .filter_map(|r| match &r.ast.action {
                RuleAction::Escalate { message } => Some(json!({ "rule": r.id, "message": message, "priority": r.priority() })),
                _ => None,
            })
            .collect();
        let body = json!({
            "id": report.id,
            "loop": self.id,
            "region": self.region,
            "report": report,
            "escalated": escalated,
        });
        self.kb.write(format!("escalations/{}", report.id), body.clone(), now, &self.id);
        out.publish(topic("plans/escalations".into()), "escalation/1", body);
    }

    /// Takes over a plan addressed to this region (from the global controller
    /// or a coordinator) and hands it to Execute.
    pub fn adopt(&mut self, now: Tick, plans: &[Plan], out: &mut Outbox) {
        if plans.is_empty() {
            return;
        }
        self.counters.plan += 1;
        for plan in plans {
            self.publish_local_plan(plan.clone(), now, out);
        }
    }

    fn run_actions(&mut self, plan: &Plan, actions: &[&Action], attached: &dyn Fn(u32) -> bool, out: &mut Outbox) -> Vec<ActionOutcome> {
        let mut outcomes = Vec::new();
        for action in actions {
            let outcome = match &action.kind {
                ActionKind::DeviceCommand { device, resource, value } => {
                    if attached(*device) {
                        let cmd = CommandBody {
                            command_id: action.id.clone(),
                            device_id: *device,
                            resource_id: *resource,
                            value: value.clone(),
                            issuer: self.id.clone(),
                            plan_id: Some(plan.id.clone()),
                        };
                        out.publish(command_topic(*device), "command/1", serde_json::to_value(&cmd).expect("serializable"));
                        ActionOutcome { action: action.id.clone(), ok: true, error: None }
                    } else {
                        let err = OrchestrationError::DispatchFailure { action: action.id.clone(), device: *device };
                        out.record("dispatch-failure", json!({ "plan": plan.id, "action": action.id, "device": device }));
                        ActionOutcome { action: action.id.clone(), ok: false, error: Some(err.to_string()) }
                    }
                }
                ActionKind::Notify { topic: t, message } => {
                    out.publish(
                        topic(format!("notify/{t}")),
                        "notify/1",
                        json!({ "message": message, "plan": plan.id, "action": action.id, "rule": action.rule }),
                    );
                    ActionOutcome { action: action.id.clone(), ok: true, error: None }
                }
                ActionKind::RuleToggle { rule, enabled } => {
                    let ok = self.engine.set_enabled(rule, *enabled);
                    if ok {
                        out.record("rule-toggled", json!({ "rule": rule, "enabled": enabled, "by": self.id }));
                    }
                    ActionOutcome { action: action.id.clone(), ok, error: (!ok).then(|| format!("unknown rule {rule}")) }
                }
            };
            outcomes.push(outcome);
        }
        outcomes
    }

    fn record_execution(&mut self, plan: &Plan, outcomes: &[ActionOutcome], now: Tick, out: &mut Outbox) {
        let body = json!({
            "plan": plan.id,
            "loop": self.id,
            "origin": plan.origin,
            "cause": plan.cause,
            "scope": plan.scope,
            "outcomes": outcomes,
        });
        self.kb.write(format!("plans/{}/completion", plan.id), body.clone(), now, &self.id);
        out.record("execute", body);
        self.last_plan = Some(plan.clone());
    }

    /// Executes each plan at most once (by plan id).
    pub fn execute_step(&mut self, now: Tick, plans: &[Plan], attached: &dyn Fn(u32) -> bool, out: &mut Outbox) -> Vec<Vec<ActionOutcome>> {
        if plans.is_empty() {
            return Vec::new();
        }
        self.counters.execute += 1;
        let mut all = Vec::new();
        for plan in plans {
            if !self.executed.insert(plan.id.clone()) {
                out.record("duplicate-plan", json!({ "plan": plan.id, "loop": self.id }));
                continue;
            }
            let actions: Vec<&Action> = plan.actions.iter().collect();
            let outcomes = self.run_actions(plan, &actions, attached, out);
            self.record_execution(plan, &outcomes, now, out);
            if let Some(coordinator) = plan.coordinator.as_ref().filter(|c| **c != self.id) {
                out.publish(
                    topic("plans/acks".into()),
                    "ack/1",
                    json!({ "planId": plan.id, "loop": self.id, "coordinator": coordinator, "outcomes": outcomes }),
                );
            }
            all.push(outcomes);
        }
        all
    }

    /// Handles a shared plan in decentralized mode. Only the elected
    /// coordinator acts: it runs its own slice and sends each other region its
    /// slice, in region order.
    pub fn coordinate(&mut self, now: Tick, plan: &Plan, attached: &dyn Fn(u32) -> bool, out: &mut Outbox) -> Option<String> {
        let involved: BTreeSet<String> = plan.scope.iter().filter_map(|r| self.topology.get(r).cloned()).collect();
        let coordinator = elect_coordinator(&involved)?;
        if coordinator != self.id || !self.executed.insert(plan.id.clone()) {
            return Some(coordinator);
        }
        self.counters.execute += 1;
        out.record("coordinate", json!({ "plan": plan.id, "coordinator": self.id, "involved": involved }));
        let own: Vec<&Action> = plan.actions.iter().filter(|a| a.region == self.region).collect();
        let outcomes = self.run_actions(plan, &own, attached, out);
        let slice_of_self = Plan {
            actions: own.into_iter().cloned().collect(),
            scope: self.own_scope(),
            coordinator: Some(self.id.clone()),
            ..plan.clone()
        };
        self.record_execution(&slice_of_self, &outcomes, now, out);
        let mut awaiting = BTreeSet::new();
        for region in &plan.scope {
            if *region == self.region {
                continue;
            }
            let Some(peer) = self.topology.get(region) else { continue };
            let slice = Plan {
                actions: plan.actions.iter().filter(|a| a.region == *region).cloned().collect(),
                scope: BTreeSet::from([region.clone()]),
                coordinator: Some(self.id.clone()),
                ..plan.clone()
            };
            if slice.actions.is_empty() {
                continue;
            }
            awaiting.insert(peer.clone());
            out.publish(topic(format!("plans/{region}")), "plan/1", serde_json::to_value(&slice).expect("serializable"));
        }
        let outcomes: Vec<Value> = outcomes.iter().map(|o| serde_json::to_value(o).expect("serializable")).collect();
        let coordination = Coordination { plan: plan.clone(), awaiting, deadline: now + self.settings.ack_timeout, outcomes };
        if coordination.awaiting.is_empty() {
            self.complete(coordination, "complete", now, out);
        } else {
            self.coordinations.insert(plan.id.clone(), coordination);
        }
        Some(coordinator)
    }

    fn complete(&mut self, c: Coordination, status: &str, now: Tick, out: &mut Outbox) {
        let body = json!({
            "plan": c.plan.id,
            "coordinator": self.id,
            "status": status,
            "missing": c.awaiting,
            "outcomes": c.outcomes,
        });
        self.kb.write(format!("shared/{}/completion", c.plan.id), body.clone(), now, &self.id);
        out.record("completion", body);
    }

    pub fn on_ack(&mut self, now: Tick, ack: &Value, out: &mut Outbox) {
        let (Some(plan), Some(peer)) = (ack["planId"].as_str(), ack["loop"].as_str()) else { return };
        let Some(c) = self.coordinations.get_mut(plan) else { return };
        if !c.awaiting.remove(peer) {
            return;
        }
        if let Some(list) = ack["outcomes"].as_array() {
            c.outcomes.extend(list.iter().cloned());
        }
        if c.awaiting.is_empty() {
            let c = self.coordinations.remove(plan).expect("present");
            self.complete(c, "complete", now, out);
        }
    }

    /// Marks shared plans whose acks are overdue as partial.
    pub fn check_timeouts(&mut self, now: Tick, out: &mut Outbox) -> Vec<OrchestrationError> {
        let due: Vec<String> = self.coordinations.iter().filter(|(_, c)| now >= c.deadline).map(|(k, _)| k.clone()).collect();
        let mut errors = Vec::new();
        for id in due {
            let c = self.coordinations.remove(&id).expect("present");
            for peer in &c.awaiting {
                errors.push(OrchestrationError::AckTimeout(peer.clone()));
            }
            out.publish(
                topic("notify/coordination".into()),
                "notify/1",
                json!({ "message": format!("plan {id} partial: no ack from {}", c.awaiting.iter().cloned().collect::<Vec<_>>().join(", ")), "plan": id }),
            );
            self.complete(c, "partial", now, out);
        }
        errors
    }

    pub fn pending_coordinations(&self) -> usize {
        self.coordinations.len()
    }

    /// Region summary sent to the global data store.
    pub fn summary(&self, now: Tick) -> Value {
        let latest: BTreeMap<String, f64> = self
            .series
            .iter()
            .filter_map(|((dev, prop), w)| w.latest().map(|(_, v)| (format!("{dev}/{prop}"), v)))
            .collect();
        json!({
            "loop": self.id,
            "region": self.region,
            "tick": now,
            "phases": self.counters,
            "latest": latest,
            "rules": self.engine.rules().filter(|r| r.enabled).count(),
        })
    }
}

// ---------------------------------------------------------------------------
// global controller

/// The cloud-side analysis and planning service with its data storage.
#[derive(Debug, Clone, Default)]
pub struct GlobalController {
    /// Cloud rule engine: rules whose scope spans regions.
    pub rules: BTreeMap<String, Rule>,
    next_report: u64,
    next_plan: u64,
    pub stored: u64,
}

impl GlobalController {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, rule: Rule) {
        self.rules.insert(rule.id.clone(), rule);
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) {
        if let Some(r) = self.rules.get_mut(id) {
            r.enabled = enabled;
        }
    }

    pub fn store(&mut self, kind: &str, body: Value, out: &mut Outbox) {
        self.stored += 1;
        out.record("store", json!({ "kind": kind, "body": body }));
    }

    /// Persists incoming escalations and notifies the global Analyse phase.
    pub fn intake(&mut self, escalations: &[Value], out: &mut Outbox) {
        for e in escalations {
            self.store("escalation", e.clone(), out);
            out.publish(topic("kb/global/escalations".into()), "escalation/1", e.clone());
        }
    }

    /// Merges escalations whose scopes overlap into one report each.
    pub fn analyse(&mut self, now: Tick, escalations: &[Value], out: &mut Outbox) -> Vec<Value> {
        let parsed: Vec<(AnalysisReport, Vec<Value>)> = escalations
            .iter()
            .filter_map(|e| {
                let report: AnalysisReport = serde_json::from_value(e["report"].clone()).ok()?;
                let escalated = e["escalated"].as_array().cloned().unwrap_or_default();
                Some((report, escalated))
            })
            .collect();
        // union-find over scope overlap
        let mut parent: Vec<usize> = (0..parsed.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            if p[i] != i {
                let root = find(p, p[i]);
                p[i] = root;
            }
            p[i]
        }
        for i in 0..parsed.len() {
            for j in i + 1..parsed.len() {
                if !parsed[i].0.scope.is_disjoint(&parsed[j].0.scope) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[b.max(a)] = a.min(b);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..parsed.len() {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
        let mut merged = Vec::new();
        for members in groups.values() {
            self.next_report += 1;
            let mut scope = BTreeSet::new();
            let mut symptoms = Vec::new();
            let mut rules = BTreeSet::new();
            let mut escalated = Vec::new();
            let mut severity = Severity::Info;
            let mut sources = Vec::new();
            for &i in members {
                let (r, esc) = &parsed[i];
                scope.extend(r.scope.iter().cloned());
                symptoms.extend(r.symptoms.iter().cloned());
                rules.extend(r.matched_rules.iter().cloned());
                escalated.extend(esc.iter().map(|e| {
                    let mut e = e.clone();
                    e["region"] = json!(r.symptoms.first().and_then(|s| s.scope.iter().next()).cloned().unwrap_or_default());
                    e["loop"] = json!(r.loop_id);
                    e
                }));
                severity = severity.max(r.severity);
                sources.push(r.id.clone());
            }
            let report = AnalysisReport {
                id: format!("global:rep-{}", self.next_report),
                loop_id: "global".into(),
                tick: now,
                symptoms,
                matched_rules: rules.into_iter().collect(),
                severity,
                scope,
            };
            let body = json!({ "report": report, "escalated": escalated, "sources": sources });
            self.store("report", body.clone(), out);
            out.publish(topic("kb/global/reports".into()), "report/1", body.clone());
            merged.push(body);
        }
        merged
    }

    /// Builds one plan per involved region and sends each to `plans/<region>`.
    pub fn plan(&mut self, now: Tick, merged: &[Value], out: &mut Outbox) -> Vec<Plan> {
        let mut plans = Vec::new();
        for m in merged {
            let Ok(report) = serde_json::from_value::<AnalysisReport>(m["report"].clone()) else { continue };
            let mut drafts: Vec<Draft> = report
                .matched_rules
                .iter()
                .filter_map(|id| self.rules.get(id))
                .filter(|r| r.enabled)
                .map(|r| draft_for(r, true))
                .collect();
            for e in m["escalated"].as_array().into_iter().flatten() {
                drafts.push(Draft {
                    region: e["region"].as_str().unwrap_or_default().to_string(),
                    kind: ActionKind::Notify {
                        topic: "escalations".into(),
                        message: e["message"].as_str().unwrap_or_default().to_string(),
                    },
                    rule: e["rule"].as_str().map(str::to_string),
                    priority: e["priority"].as_i64().unwrap_or(0),
                });
            }
            if drafts.is_empty() {
                drafts.extend(report.scope.iter().map(|r| notify_only(r, &report)));
            }
            let mut by_region: BTreeMap<String, Vec<Draft>> = BTreeMap::new();
            for d in drafts {
                by_region.entry(d.region.clone()).or_default().push(d);
            }
            for (region, drafts) in by_region {
                self.next_plan += 1;
                let id = format!("global:plan-{}", self.next_plan);
                let priority = drafts.iter().map(|d| d.priority).max().unwrap_or(0);
                let plan = Plan {
                    actions: number(&id, drafts),
                    id,
                    origin: "global".into(),
                    scope: BTreeSet::from([region.clone()]),
                    cause: report.symptom_ids(),
                    priority,
                    created_at: now,
                    coordinator: None,
                };
                let body = serde_json::to_value(&plan).expect("serializable");
                self.store("plan", body.clone(), out);
                out.publish(topic(format!("plans/{region}")), "plan/1", body);
                plans.push(plan);
            }
        }
        plans
    }
}
