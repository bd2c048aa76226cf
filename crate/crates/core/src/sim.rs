//! The assembled platform: every component wired to the broker and driven by
//! the kernel.
//!
//! One `Clock` event runs per tick and is always the first event of its tick.
//! It samples sensors (frames reach the gateway next tick), advances the
//! environment, flushes gateway windows, checks heartbeats and ack deadlines,
//! and fires business-process steps. Everything else moves as broker
//! deliveries, one tick per hop. Phase events are scheduled at the current
//! tick when a loop receives its first input of the tick, so a phase sees all
//! of that tick's deliveries.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use crate::app::{AppError, AppService, Preferences, APP};
use crate::broker::{Broker, Delivery, Outbox, Topic};
use crate::device::{encode_frame, decode_frame, Device, Environment, Payload, RandomSource};
use crate::edge::analytics::window_stats;
use crate::edge::rules::parse_rule;
use crate::edge::{link_rule, Catalog, DeviceRecord, DeviceStatus, ResourceRecord, Rule, Symptom};
use crate::gateway::{command_topic, CommandBody, Gateway, TelemetryBody};
use crate::kernel::{Context, Handler, Kernel, LogEntry, Payload as EventPayload, ScheduledEvent, Tick};
use crate::orchestration::{GlobalController, MapeLoop, Mode, Plan};
use crate::readmodel::{ReadModel, Snapshot};
use crate::scenario::{next_rule_id, Scenario, ServiceBinding};

pub const GLOBAL: &str = "global";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Monitor,
    Analyse,
    Plan,
    Execute,
    Intake,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Monitor => "monitor",
            Phase::Analyse => "analyse",
            Phase::Plan => "plan",
            Phase::Execute => "execute",
            Phase::Intake => "intake",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Event {
    Clock,
    Deliver(Delivery),
    /// Encoded frame travelling from a device to its gateway.
    Uplink { gateway: String, frame: Vec<u8> },
    /// Encoded command frame travelling from a gateway to a device.
    Downlink { device: u32, frame: Vec<u8> },
    Phase(Phase),
}

impl EventPayload for Event {
    fn kind(&self) -> &'static str {
        match self {
            Event::Clock => "clock",
            Event::Deliver(_) => "deliver",
            Event::Uplink { .. } => "uplink",
            Event::Downlink { .. } => "downlink",
            Event::Phase(_) => "phase",
        }
    }

    fn body(&self) -> Value {
        match self {
            Event::Clock => json!({}),
            Event::Deliver(d) => d.log_body(),
            Event::Uplink { gateway, frame } => json!({ "gateway": gateway, "frame": crate::device::frame::to_hex(frame) }),
            Event::Downlink { device, frame } => json!({ "device": device, "frame": crate::device::frame::to_hex(frame) }),
            Event::Phase(p) => json!({ "phase": p.name() }),
        }
    }
}

#[derive(Debug, Default)]
struct LoopInbox {
    telemetry: Vec<TelemetryBody>,
    symptoms: Vec<Symptom>,
    reports: Vec<crate::orchestration::AnalysisReport>,
    adopt: Vec<Plan>,
    plans: Vec<Plan>,
    shared: Vec<Plan>,
}

#[derive(Debug, Default)]
struct GlobalInbox {
    escalations: Vec<Value>,
    reviewed: Vec<Value>,
    merged: Vec<Value>,
}

/// Everything that lives inside the simulation.
pub struct World {
    pub scenario: Scenario,
    pub mode: Mode,
    pub seed: u64,
    pub env: Environment,
    pub devices: Vec<Device>,
    pub gateways: BTreeMap<String, Gateway>,
    pub broker: Broker,
    pub loops: BTreeMap<String, MapeLoop>,
    pub global: GlobalController,
    pub app: AppService,
    catalog: Catalog,
    loop_inbox: BTreeMap<String, LoopInbox>,
    global_inbox: GlobalInbox,
    scheduled: BTreeSet<(Tick, String, Phase)>,
}

fn must_topic(s: String) -> Topic {
    Topic::new(s).expect("validated identifiers")
}

impl World {
    pub fn new(scenario: Scenario, seed: u64, mode: Mode) -> Self {
        let mut devices = scenario.devices.clone();
        devices.sort_by_key(|d| d.id);
        let things = scenario.things.clone();
        let unit_of = |thing: &str, prop: &str| {
            let p = things.iter().find(|t| t.id == thing)?.property(prop)?;
            Some((p.unit.clone(), p.kind))
        };
        let gateways = scenario
            .gateways
            .iter()
            .map(|cfg| (cfg.id.clone(), Gateway::new(cfg.clone(), &devices).with_units(unit_of)))
            .collect();
        let topology: BTreeMap<String, String> =
            scenario.regions.iter().map(|r| (r.id.clone(), r.loop_id.clone())).collect();
        let mut loops = BTreeMap::new();
        for r in &scenario.regions {
            let records: Vec<DeviceRecord> = devices
                .iter()
                .filter(|d| d.region == r.id && d.heartbeat.is_some())
                .map(|d| device_record(d, &scenario))
                .collect();
            let dm = crate::edge::DeviceManager::new(scenario.settings.heartbeat_timeout, scenario.settings.offline_timeout, records);
            let l = MapeLoop::new(r.loop_id.clone(), r.id.clone(), mode, scenario.settings.clone(), dm, topology.clone());
            loops.insert(r.loop_id.clone(), l);
        }
        let mut world = World {
            catalog: scenario.catalog(),
            env: Environment::new(scenario.things.clone()),
            devices,
            gateways,
            broker: Broker::new(),
            loops,
            global: GlobalController::new(),
            app: AppService::new(),
            loop_inbox: BTreeMap::new(),
            global_inbox: GlobalInbox::default(),
            scheduled: BTreeSet::new(),
            mode,
            seed,
            scenario,
        };
        for rule in world.scenario.rules.clone() {
            world.install(rule);
        }
        world.subscribe_all();
        world
    }

    fn subscribe_all(&mut self) {
        let b = &mut self.broker;
        for id in self.gateways.keys() {
            b.subscribe(id, "commands/#", 0).expect("static pattern");
        }
        for (id, l) in &self.loops {
            let r = &l.region;
            for p in [
                format!("telemetry/{r}/#"),
                format!("devices/{r}/#"),
                format!("kb/{id}/symptoms"),
                format!("kb/{id}/reports"),
                format!("kb/{id}/plans"),
                format!("plans/{r}"),
            ] {
                b.subscribe(id, &p, 0).expect("validated identifiers");
            }
            if self.mode == Mode::Decentralized {
                b.subscribe(id, "plans/shared", 0).expect("static pattern");
                b.subscribe(id, "plans/acks", 0).expect("static pattern");
            }
        }
        if self.mode == Mode::Centralized {
            for p in ["plans/escalations", "kb/global/escalations", "kb/global/reports"] {
                b.subscribe(GLOBAL, p, 0).expect("static pattern");
            }
        }
        b.subscribe(GLOBAL, "summaries/#", 0).expect("static pattern");
        self.app.attach(b).expect("static pattern");
    }

    /// Edge engines evaluate every rule whose condition reads their region.
    /// Multi-region rules are also held by the cloud engine, which plans
    /// their actions in centralized mode.
    fn install(&mut self, rule: Rule) {
        if rule.is_multi_region() {
            self.global.install(rule.clone());
        }
        if let Some(l) = self.loops.values_mut().find(|l| l.region == rule.home_region) {
            l.engine.install(rule);
        }
    }

    pub fn rules(&self) -> Vec<&Rule> {
        let mut all: Vec<&Rule> = self.loops.values().flat_map(|l| l.engine.rules()).collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    fn set_rule_enabled(&mut self, id: &str, enabled: bool) -> bool {
        let mut found = false;
        for l in self.loops.values_mut() {
            found |= l.engine.set_enabled(id, enabled);
        }
        self.global.set_enabled(id, enabled);
        found
    }

    pub fn attached(&self, device: u32) -> bool {
        self.gateways.values().any(|g| g.is_attached(device))
    }

    fn init_record(&self) -> Value {
        let devices: Vec<Value> = self
            .devices
            .iter()
            .map(|d| {
                json!({
                    "record": device_record(d, &self.scenario),
                    "gateway": d.gateway,
                    "attached": self.attached(d.id),
                    "actuators": d.actuators.iter().map(|a| json!({ "id": a.id, "name": a.name, "state": a.state })).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "scenario": self.scenario.name,
            "seed": self.seed,
            "mode": self.mode.as_str(),
            "domain": self.scenario.domain,
            "tasks": self.scenario.tasks,
            "devices": devices,
            "loops": self.loops.values().map(|l| json!({ "id": l.id, "region": l.region })).collect::<Vec<_>>(),
            "rules": self.rules().iter().map(|r| rule_view(r)).collect::<Vec<_>>(),
        })
    }

    /// Sends every queued message through the broker and copies records into
    /// the log, attributed to `publisher`.
    fn flush(&mut self, ctx: &mut Context<'_, Event>, publisher: &str, out: Outbox) {
        for (kind, body) in out.records {
            ctx.record(publisher, kind, body);
        }
        for msg in out.messages {
            if let Err(e) = self.broker.publish_logged(ctx, publisher, msg, Event::Deliver) {
                ctx.record(publisher, "broker-error", json!({ "error": e.to_string() }));
            }
        }
    }

    fn schedule_phase(&mut self, ctx: &mut Context<'_, Event>, target: &str, phase: Phase) {
        if self.scheduled.insert((ctx.now(), target.to_string(), phase)) {
            ctx.schedule(ctx.now(), target, Event::Phase(phase)).expect("current tick");
        }
    }

    fn on_clock(&mut self, ctx: &mut Context<'_, Event>) {
        let now = ctx.now();
        self.scheduled.retain(|(t, _, _)| *t >= now);
        if now == 0 {
            let init = self.init_record();
            ctx.record("world", "init", init);
            self.create_config_users(ctx);
        }
        // sensing reads the state at the start of the tick
        for d in self.devices.iter_mut() {
            if !d.alive(now) {
                continue;
            }
            let mut frames = Vec::new();
            if let Some(hb) = d.heartbeat_frame(now) {
                frames.push(hb);
            }
            let id = d.id;
            for s in d.sensors.iter_mut() {
                let Some(current) = self.env.value(&s.thing, &s.property).cloned() else { continue };
                let stream = s.noise_stream(id);
                if let Some(f) = s.sample(id, &current, now, ctx.rng(&stream)) {
                    frames.push(f);
                }
            }
            for f in frames {
                let bytes = encode_frame(&f).expect("frames within limits");
                ctx.schedule(now + 1, d.gateway.clone(), Event::Uplink { gateway: d.gateway.clone(), frame: bytes })
                    .expect("future tick");
            }
        }
        let regions: Vec<String> = self.scenario.regions.iter().map(|r| r.id.clone()).collect();
        for r in &regions {
            self.env.step(r, &self.devices, ctx as &mut dyn RandomSource);
        }
        let values: BTreeMap<String, f64> = self
            .env
            .things
            .values()
            .flat_map(|t| t.state.iter().filter_map(move |(p, v)| v.as_f64().map(|x| (format!("{}.{p}", t.id), x))))
            .collect();
        ctx.record("world", "env", json!(values));

        let gw_ids: Vec<String> = self.gateways.keys().cloned().collect();
        for id in gw_ids {
            let mut out = Outbox::new();
            self.gateways.get_mut(&id).expect("present").on_tick(now, &mut out);
            self.flush(ctx, &id, out);
        }
        let loop_ids: Vec<String> = self.loops.keys().cloned().collect();
        for id in &loop_ids {
            let mut out = Outbox::new();
            let l = self.loops.get_mut(id).expect("present");
            l.check_devices(now, &mut out);
            l.check_timeouts(now, &mut out);
            let every = self.scenario.summary_every;
            if every > 0 && now > 0 && now % every == 0 {
                out.publish(must_topic(format!("summaries/{}", l.region)), "summary/1", l.summary(now));
            }
            self.flush(ctx, id, out);
        }
        self.run_process_steps(ctx);
        ctx.schedule(now + 1, "world", Event::Clock).expect("future tick");
    }

    fn create_config_users(&mut self, ctx: &mut Context<'_, Event>) {
        for u in self.scenario.users.clone() {
            let prefs = Preferences { units: u.units.clone().unwrap_or_else(|| "metric".into()), ..Preferences::default() };
            let mut out = Outbox::new();
            if let Ok(user) = self.app.create_user(&u.name, &u.email, prefs, ctx.now(), &mut out) {
                for p in &u.subscriptions {
                    let _ = self.app.subscribe_user(&mut self.broker, user.id, p, ctx.now(), &mut out);
                }
            }
            self.flush(ctx, APP, out);
        }
    }

    fn run_process_steps(&mut self, ctx: &mut Context<'_, Event>) {
        let now = ctx.now();
        let processes = self.scenario.processes.clone();
        for p in &processes {
            for (i, step) in p.steps.iter().enumerate().filter(|(_, s)| s.at == now) {
                let publisher = format!("process:{}", p.name);
                let mut out = Outbox::new();
                out.record("process-step", json!({ "process": p.name, "step": i, "service": step.service }));
                let Some(service) = self.scenario.services.get(&step.service).cloned() else { continue };
                match service.binding {
                    ServiceBinding::Actuator { device, resource, value } => {
                        let cmd = CommandBody {
                            command_id: format!("{}#{i}", p.name),
                            device_id: device,
                            resource_id: resource,
                            value: step.value.clone().unwrap_or(value),
                            issuer: publisher.clone(),
                            plan_id: None,
                        };
                        out.publish(command_topic(device), "command/1", serde_json::to_value(&cmd).expect("serializable"));
                    }
                    ServiceBinding::RuleSet(ids) => {
                        for id in ids {
                            if self.set_rule_enabled(&id, step.enable) {
                                out.record("rule-toggled", json!({ "rule": id, "enabled": step.enable, "by": publisher }));
                            }
                        }
                    }
                    ServiceBinding::Analytics { device, property, window } => {
                        let series = self.loops.values().find_map(|l| l.series.get(&(device, property.clone())));
                        match series.map(|w| window_stats(w, window)) {
                            Some(Ok(stats)) => out.publish(
                                must_topic("notify/analytics".into()),
                                "notify/1",
                                json!({
                                    "message": format!("{}/{property}: mean {:.3} over {} samples", device, stats.mean, stats.count),
                                    "service": service.name,
                                    "stats": stats,
                                }),
                            ),
                            _ => out.record("process-error", json!({ "process": p.name, "step": i, "error": "EmptyWindow" })),
                        }
                    }
                }
                self.flush(ctx, &publisher, out);
            }
        }
    }

    fn on_deliver(&mut self, ctx: &mut Context<'_, Event>, d: Delivery) {
        let now = ctx.now();
        let target = d.subscriber.clone();
        let topic = d.envelope.topic.as_str().to_string();
        let body = d.envelope.body.clone();
        if self.gateways.contains_key(&target) {
            let Ok(cmd) = serde_json::from_value::<CommandBody>(body) else { return };
            let gw = self.gateways.get_mut(&target).expect("present");
            if !gw.hosts(cmd.device_id) {
                return;
            }
            let mut out = Outbox::new();
            if let Ok(frame) = gw.downlink(&cmd, now, &mut out) {
                let bytes = encode_frame(&frame).expect("frames within limits");
                ctx.schedule(now + 1, format!("device/{}", cmd.device_id), Event::Downlink { device: cmd.device_id, frame: bytes })
                    .expect("future tick");
            }
            self.flush(ctx, &target, out);
        } else if target == GLOBAL {
            if topic == "plans/escalations" {
                self.global_inbox.escalations.push(body);
                self.schedule_phase(ctx, GLOBAL, Phase::Intake);
            } else if topic == "kb/global/escalations" {
                self.global_inbox.reviewed.push(body);
                self.schedule_phase(ctx, GLOBAL, Phase::Analyse);
            } else if topic == "kb/global/reports" {
                self.global_inbox.merged.push(body);
                self.schedule_phase(ctx, GLOBAL, Phase::Plan);
            } else if topic.starts_with("summaries/") {
                let mut out = Outbox::new();
                self.global.store("summary", body, &mut out);
                self.flush(ctx, GLOBAL, out);
            }
        } else if target == APP {
            let mut out = Outbox::new();
            self.app.on_delivery(&d, now, &mut out);
            self.flush(ctx, APP, out);
        } else if let Some(l) = self.loops.get_mut(&target) {
            let id = l.id.clone();
            let region = l.region.clone();
            let inbox = self.loop_inbox.entry(id.clone()).or_default();
            let phase = if topic.starts_with("telemetry/") {
                serde_json::from_value(body).ok().map(|t| inbox.telemetry.push(t));
                Some(Phase::Monitor)
            } else if topic.starts_with("devices/") {
                if let (Some(dev), Some(ts)) = (body["deviceId"].as_u64(), body["ts"].as_u64()) {
                    l.devices.seen(dev as u32, ts);
                }
                None
            } else if topic == format!("kb/{id}/symptoms") {
                serde_json::from_value(body).ok().map(|s| inbox.symptoms.push(s));
                Some(Phase::Analyse)
            } else if topic == format!("kb/{id}/reports") {
                serde_json::from_value(body).ok().map(|r| inbox.reports.push(r));
                Some(Phase::Plan)
            } else if topic == format!("plans/{region}") {
                serde_json::from_value(body).ok().map(|p| inbox.adopt.push(p));
                Some(Phase::Plan)
            } else if topic == format!("kb/{id}/plans") {
                serde_json::from_value(body).ok().map(|p| inbox.plans.push(p));
                Some(Phase::Execute)
            } else if topic == "plans/shared" {
                serde_json::from_value(body).ok().map(|p| inbox.shared.push(p));
                Some(Phase::Execute)
            } else if topic == "plans/acks" {
                let mut out = Outbox::new();
                l.on_ack(now, &body, &mut out);
                self.flush(ctx, &id, out);
                None
            } else {
                None
            };
            if let Some(p) = phase {
                self.schedule_phase(ctx, &id, p);
            }
        }
    }

    fn on_phase(&mut self, ctx: &mut Context<'_, Event>, target: &str, phase: Phase) {
        let now = ctx.now();
        let mut out = Outbox::new();
        if target == GLOBAL {
            match phase {
                Phase::Intake => {
                    let batch = std::mem::take(&mut self.global_inbox.escalations);
                    self.global.intake(&batch, &mut out);
                }
                Phase::Analyse => {
                    let batch = std::mem::take(&mut self.global_inbox.reviewed);
                    self.global.analyse(now, &batch, &mut out);
                }
                Phase::Plan => {
                    let batch = std::mem::take(&mut self.global_inbox.merged);
                    self.global.plan(now, &batch, &mut out);
                }
                _ => {}
            }
            self.flush(ctx, GLOBAL, out);
            return;
        }
        let attached: BTreeSet<u32> = self.devices.iter().map(|d| d.id).filter(|d| self.attached(*d)).collect();
        let is_attached = |d: u32| attached.contains(&d);
        let inbox = self.loop_inbox.entry(target.to_string()).or_default();
        let Some(l) = self.loops.get_mut(target) else { return };
        match phase {
            Phase::Monitor => {
                let batch = std::mem::take(&mut inbox.telemetry);
                l.monitor_step(now, &batch, &mut out);
            }
            Phase::Analyse => {
                let batch = std::mem::take(&mut inbox.symptoms);
                l.analyse_step(now, batch, &mut out);
            }
            Phase::Plan => {
                let reports = std::mem::take(&mut inbox.reports);
                let adopt = std::mem::take(&mut inbox.adopt);
                l.plan_step(now, &reports, &mut out);
                l.adopt(now, &adopt, &mut out);
            }
            Phase::Execute => {
                let shared = std::mem::take(&mut inbox.shared);
                let plans = std::mem::take(&mut inbox.plans);
                for p in &shared {
                    l.coordinate(now, p, &is_attached, &mut out);
                }
                l.execute_step(now, &plans, &is_attached, &mut out);
            }
            Phase::Intake => {}
        }
        self.flush(ctx, target, out);
    }

    fn on_uplink(&mut self, ctx: &mut Context<'_, Event>, gateway: &str, frame: &[u8]) {
        let Some(gw) = self.gateways.get_mut(gateway) else { return };
        let mut out = Outbox::new();
        gw.on_frame(frame, &mut out);
        self.flush(ctx, gateway, out);
    }

    fn on_downlink(&mut self, ctx: &mut Context<'_, Event>, device: u32, frame: &[u8]) {
        let now = ctx.now();
        let Some(d) = self.devices.iter_mut().find(|d| d.id == device) else { return };
        if !d.alive(now) {
            return;
        }
        let target = format!("device/{device}");
        let cmd = match decode_frame(frame) {
            Ok(f) => f,
            Err(e) => {
                ctx.record(target, "device-error", json!({ "error": e.to_string() }));
                return;
            }
        };
        match d.apply_command(&cmd, now) {
            Ok(applied) => {
                ctx.record(
                    target,
                    "actuator",
                    json!({ "device": device, "resource": cmd.resource_id, "value": cmd.payload, "changed": applied.changed }),
                );
                let bytes = encode_frame(&applied.ack).expect("frames within limits");
                ctx.schedule(now + 1, d.gateway.clone(), Event::Uplink { gateway: d.gateway.clone(), frame: bytes })
                    .expect("future tick");
            }
            Err(e) => ctx.record(target, "device-error", json!({ "error": e.to_string() })),
        }
    }

    // ----------------------------------------------------------------------
    // requests from the application layer, applied at tick boundaries

    pub fn create_user(&mut self, ctx: &mut Context<'_, Event>, name: &str, email: &str, preferences: Preferences) -> Result<Value, AppError> {
        let mut out = Outbox::new();
        let r = self.app.create_user(name, email, preferences, ctx.now(), &mut out);
        self.flush(ctx, APP, out);
        r.map(|u| serde_json::to_value(u).expect("serializable"))
    }

    pub fn subscribe_user(&mut self, ctx: &mut Context<'_, Event>, user: u64, pattern: &str) -> Result<Value, AppError> {
        let mut out = Outbox::new();
        let r = self.app.subscribe_user(&mut self.broker, user, pattern, ctx.now(), &mut out);
        self.flush(ctx, APP, out);
        r.map(|s| serde_json::to_value(s).expect("serializable"))
    }

    pub fn unsubscribe_user(&mut self, ctx: &mut Context<'_, Event>, id: u64) -> Result<Value, AppError> {
        let mut out = Outbox::new();
        let r = self.app.unsubscribe_user(&mut self.broker, id, &mut out);
        self.flush(ctx, APP, out);
        r.map(|s| serde_json::to_value(s).expect("serializable"))
    }

    pub fn issue_command(&mut self, ctx: &mut Context<'_, Event>, user: u64, device: u32, resource: u16, value: Payload) -> Result<Value, AppError> {
        let mut out = Outbox::new();
        let r = self.app.issue_command(&self.devices, user, device, resource, value, ctx.now(), &mut out);
        self.flush(ctx, APP, out);
        r.map(|c| serde_json::to_value(c).expect("serializable"))
    }

    pub fn mark_read(&mut self, ctx: &mut Context<'_, Event>, id: u64) -> Result<Value, AppError> {
        let mut out = Outbox::new();
        let r = self.app.mark_read(id, &mut out);
        self.flush(ctx, APP, out);
        r.map(|n| serde_json::to_value(n).expect("serializable"))
    }

    /// Parses and links `text`, then installs it on the engine that owns its
    /// scope. It takes part in the next evaluation.
    pub fn submit_rule(&mut self, ctx: &mut Context<'_, Event>, text: &str) -> Result<Value, AppError> {
        let text = text.trim();
        let ast = parse_rule(text)?;
        let taken: Vec<String> = self.rules().iter().map(|r| r.id.clone()).collect();
        let id = next_rule_id(taken.iter().map(String::as_str));
        let rule = link_rule(&id, text, ast, &self.catalog)?;
        let view = rule_view(&rule);
        ctx.record(APP, "rule-installed", view.clone());
        self.install(rule);
        Ok(view)
    }
}

pub fn rule_view(r: &Rule) -> Value {
    json!({
        "id": r.id,
        "text": r.text,
        "scope": r.scope_label(),
        "regions": r.scope,
        "enabled": r.enabled,
        "priority": r.priority(),
    })
}

fn device_record(d: &Device, scenario: &Scenario) -> DeviceRecord {
    let unit = |thing: &str, prop: &str| {
        scenario
            .things
            .iter()
            .find(|t| t.id == thing)
            .and_then(|t| t.property(prop))
            .map(|p| p.unit.clone())
            .unwrap_or_default()
    };
    let mut resources: Vec<ResourceRecord> = d
        .sensors
        .iter()
        .map(|s| ResourceRecord {
            id: s.id,
            name: s.name.clone(),
            role: "sensor".into(),
            property: format!("{}.{}", s.thing, s.property),
            unit: unit(&s.thing, &s.property),
        })
        .chain(d.actuators.iter().map(|a| ResourceRecord {
            id: a.id,
            name: a.name.clone(),
            role: "actuator".into(),
            property: format!("{}.{}", a.thing, a.property),
            unit: unit(&a.thing, &a.property),
        }))
        .collect();
    resources.sort_by_key(|r| r.id);
    DeviceRecord {
        device_id: d.id,
        name: d.name.clone(),
        region: d.region.clone(),
        resources,
        status: DeviceStatus::Online,
        last_seen: 0,
    }
}

impl Handler<Event> for World {
    fn handle(&mut self, ctx: &mut Context<'_, Event>, event: ScheduledEvent<Event>) {
        match event.payload {
            Event::Clock => self.on_clock(ctx),
            Event::Deliver(d) => self.on_deliver(ctx, d),
            Event::Uplink { gateway, frame } => self.on_uplink(ctx, &gateway, &frame),
            Event::Downlink { device, frame } => self.on_downlink(ctx, device, &frame),
            Event::Phase(p) => self.on_phase(ctx, &event.target, p),
        }
    }
}

/// A request from outside the simulation (HTTP handlers, tests).
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    CreateUser { name: String, email: String, preferences: Preferences },
    Subscribe { user: u64, pattern: String },
    Unsubscribe { id: u64 },
    IssueCommand { user: u64, device: u32, resource: u16, value: Payload },
    MarkRead { id: u64 },
    SubmitRule { text: String },
}

/// Kernel, world and the read model projected from the log, advanced one
/// tick at a time.
pub struct Simulation {
    pub kernel: Kernel<Event>,
    pub world: World,
    pub read: ReadModel,
    executed: u64,
    projected: usize,
}

impl Simulation {
    pub fn new(scenario: Scenario, seed: u64, mode: Mode) -> Self {
        let mut kernel = Kernel::new(seed);
        kernel.schedule(0, "world", Event::Clock).expect("tick 0");
        let world = World::new(scenario, seed, mode);
        Self { kernel, world, read: ReadModel::default(), executed: 0, projected: 0 }
    }

    pub fn from_scenario(scenario: Scenario) -> Self {
        let (seed, mode) = (scenario.seed, scenario.mode);
        Self::new(scenario, seed, mode)
    }

    /// Ticks executed so far.
    pub fn ticks(&self) -> u64 {
        self.executed
    }

    fn project(&mut self) {
        let entries = self.kernel.log().entries();
        for e in &entries[self.projected..] {
            self.read.apply(e);
        }
        self.projected = entries.len();
    }

    pub fn step(&mut self) {
        self.kernel.run(self.executed, &mut self.world);
        self.executed += 1;
        self.project();
    }

    pub fn run_ticks(&mut self, n: u64) {
        for _ in 0..n {
            self.step();
        }
    }

    pub fn apply(&mut self, req: Request) -> Result<Value, AppError> {
        let mut ctx = self.kernel.context();
        let w = &mut self.world;
        let r = match req {
            Request::CreateUser { name, email, preferences } => w.create_user(&mut ctx, &name, &email, preferences),
            Request::Subscribe { user, pattern } => w.subscribe_user(&mut ctx, user, &pattern),
            Request::Unsubscribe { id } => w.unsubscribe_user(&mut ctx, id),
            Request::IssueCommand { user, device, resource, value } => w.issue_command(&mut ctx, user, device, resource, value),
            Request::MarkRead { id } => w.mark_read(&mut ctx, id),
            Request::SubmitRule { text } => w.submit_rule(&mut ctx, &text),
        };
        self.project();
        r
    }

    pub fn log(&self) -> &[LogEntry] {
        self.kernel.log().entries()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.read.snapshot()
    }
}
