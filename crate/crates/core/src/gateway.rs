//! Gateway: decodes device frames, translates them into canonical envelopes,
//! optionally aggregates telemetry, and turns `command/1` envelopes back into
//! frames for the device.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::broker::{Outbox, Topic};
use crate::device::{decode_frame, Device, DeviceFrame, FrameType, Payload, ValueKind};
use crate::kernel::Tick;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("device {0} is not attached to this gateway")]
    UnattachedDevice(u32),
    #[error("device {device} has no resource {resource}")]
    UnknownResource { device: u32, resource: u16 },
    #[error("resource {resource} of device {device} expects {expected}, got {got}")]
    ValueKindMismatch { device: u32, resource: u16, expected: &'static str, got: &'static str },
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::UnattachedDevice(_) => "UnattachedDevice",
            GatewayError::UnknownResource { .. } => "UnknownResource",
            GatewayError::ValueKindMismatch { .. } => "ValueKindMismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    None,
    /// Emit the mean once `n` samples are buffered.
    Batch { n: usize },
    /// Emit the mean of whatever arrived, every `m` ticks.
    Window { m: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub id: String,
    pub region: String,
    pub attached_devices: BTreeSet<u32>,
    pub aggregation: Aggregation,
}

/// Body of a `telemetry/1` envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TelemetryBody {
    pub device_id: u32,
    pub resource_id: u16,
    pub thing: String,
    pub property: String,
    pub value: Payload,
    pub unit: String,
    pub ts: Tick,
    pub region_id: String,
    pub gateway_id: String,
    pub aggregated: bool,
    pub count: u32,
}

impl TelemetryBody {
    pub fn path(&self) -> String {
        format!("{}.{}", self.thing, self.property)
    }
}

/// Body of a `command/1` envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandBody {
    pub command_id: String,
    pub device_id: u32,
    pub resource_id: u16,
    pub value: Payload,
    /// `user:<id>`, a loop id, or `process:<name>`.
    pub issuer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
}

/// Body of an `ack/1` envelope produced from a device command-ack frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AckBody {
    pub command_id: Option<String>,
    pub device_id: u32,
    pub resource_id: u16,
    pub value: Payload,
    pub ts: Tick,
}

#[derive(Debug, Clone, PartialEq)]
struct ResourceInfo {
    thing: String,
    property: String,
    unit: String,
    kind: ValueKind,
    actuator: Option<ValueKind>,
}

/// Counters the gateway exposes for inspection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GatewayMetrics {
    pub decode_errors: u64,
    pub unattached: u64,
    pub unknown_resource: u64,
    pub translated: u64,
    pub published: u64,
    pub command_failures: u64,
}

pub fn telemetry_topic(region: &str, device: u32, property: &str) -> Topic {
    Topic::new(format!("telemetry/{region}/{device}/{property}")).expect("validated names")
}

pub fn command_topic(device: u32) -> Topic {
    Topic::new(format!("commands/{device}")).expect("numeric device id")
}

pub fn ack_topic(device: u32) -> Topic {
    Topic::new(format!("acks/{device}")).expect("numeric device id")
}

pub fn heartbeat_topic(region: &str, device: u32) -> Topic {
    Topic::new(format!("devices/{region}/{device}/heartbeat")).expect("validated names")
}

/// Arithmetic mean of float samples, in arrival order.
pub fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Folds buffered samples of one `(device, property)` into a single envelope
/// body, or nothing if the configured trigger has not been reached. A window
/// holding a single sample passes it through unaggregated.
pub fn aggregate(cfg: &GatewayConfig, buffered: &[TelemetryBody]) -> Option<TelemetryBody> {
    let last = buffered.last()?;
    let ready = match cfg.aggregation {
        Aggregation::None => return None,
        Aggregation::Batch { n } => buffered.len() >= n.max(1),
        Aggregation::Window { .. } => true,
    };
    if !ready {
        return None;
    }
    if buffered.len() == 1 {
        return Some(last.clone());
    }
    let values: Vec<f64> = buffered.iter().filter_map(|b| b.value.as_f64()).collect();
    Some(TelemetryBody {
        value: Payload::Float(mean_of(&values)),
        aggregated: true,
        count: buffered.iter().map(|b| b.count).sum(),
        ts: last.ts,
        ..last.clone()
    })
}

#[derive(Debug, Clone)]
pub struct Gateway {
    pub cfg: GatewayConfig,
    registry: BTreeMap<(u32, u16), ResourceInfo>,
    device_regions: BTreeMap<u32, String>,
    buffers: BTreeMap<(u32, String), Vec<TelemetryBody>>,
    pending_commands: BTreeMap<(u32, u16), VecDeque<String>>,
    /// Samples translated per `(device, property)`.
    translated: BTreeMap<(u32, String), u64>,
    /// Sample count carried by emitted envelopes per `(device, property)`.
    emitted: BTreeMap<(u32, String), u64>,
    pub metrics: GatewayMetrics,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig, devices: &[Device]) -> Self {
        let mut registry = BTreeMap::new();
        let mut device_regions = BTreeMap::new();
        for d in devices.iter().filter(|d| d.gateway == cfg.id) {
            device_regions.insert(d.id, d.region.clone());
            for s in &d.sensors {
                registry.insert(
                    (d.id, s.id),
                    ResourceInfo {
                        thing: s.thing.clone(),
                        property: s.property.clone(),
                        unit: String::new(),
                        kind: ValueKind::Float,
                        actuator: None,
                    },
                );
            }
            for a in &d.actuators {
                registry.insert(
                    (d.id, a.id),
                    ResourceInfo {
                        thing: a.thing.clone(),
                        property: a.property.clone(),
                        unit: String::new(),
                        kind: a.accepts,
                        actuator: Some(a.accepts),
                    },
                );
            }
        }
        Self {
            cfg,
            registry,
            device_regions,
            buffers: BTreeMap::new(),
            pending_commands: BTreeMap::new(),
            translated: BTreeMap::new(),
            emitted: BTreeMap::new(),
            metrics: GatewayMetrics::default(),
        }
    }

    /// Fills in unit and value kind of each observed property.
    pub fn with_units(mut self, lookup: impl Fn(&str, &str) -> Option<(String, ValueKind)>) -> Self {
        for info in self.registry.values_mut() {
            if let Some((unit, kind)) = lookup(&info.thing, &info.property) {
                info.unit = unit;
                if info.actuator.is_none() {
                    info.kind = kind;
                }
            }
        }
        self
    }

    pub fn is_attached(&self, device: u32) -> bool {
        self.cfg.attached_devices.contains(&device)
    }

    pub fn hosts(&self, device: u32) -> bool {
        self.device_regions.contains_key(&device)
    }

    pub fn attach(&mut self, device: u32) {
        self.cfg.attached_devices.insert(device);
    }

    pub fn detach(&mut self, device: u32) {
        self.cfg.attached_devices.remove(&device);
    }

    /// Maps a decoded telemetry frame to a `telemetry/1` body.
    pub fn translate(&mut self, frame: &DeviceFrame) -> Result<TelemetryBody, GatewayError> {
        if !self.is_attached(frame.device_id) {
            self.metrics.unattached += 1;
            return Err(GatewayError::UnattachedDevice(frame.device_id));
        }
        let Some(info) = self.registry.get(&(frame.device_id, frame.resource_id)) else {
            self.metrics.unknown_resource += 1;
            return Err(GatewayError::UnknownResource { device: frame.device_id, resource: frame.resource_id });
        };
        let unit = if matches!(frame.payload, Payload::Float(_)) { info.unit.clone() } else { String::new() };
        let body = TelemetryBody {
            device_id: frame.device_id,
            resource_id: frame.resource_id,
            thing: info.thing.clone(),
            property: info.property.clone(),
            value: frame.payload.clone(),
            unit,
            ts: frame.timestamp,
            region_id: self.cfg.region.clone(),
            gateway_id: self.cfg.id.clone(),
            aggregated: false,
            count: 1,
        };
        self.metrics.translated += 1;
        *self.translated.entry((body.device_id, body.property.clone())).or_default() += 1;
        Ok(body)
    }

    fn emit(&mut self, body: TelemetryBody, out: &mut Outbox) {
        *self.emitted.entry((body.device_id, body.property.clone())).or_default() += u64::from(body.count);
        self.metrics.published += 1;
        let topic = telemetry_topic(&body.region_id, body.device_id, &body.property);
        out.publish(topic, "telemetry/1", serde_json::to_value(&body).expect("serializable"));
    }

    /// Handles raw bytes arriving from a device.
    pub fn on_frame(&mut self, bytes: &[u8], out: &mut Outbox) {
        let frame = match decode_frame(bytes) {
            Ok(f) => f,
            Err(e) => {
                self.metrics.decode_errors += 1;
                out.record("gateway-error", json!({ "gateway": self.cfg.id, "error": e.to_string() }));
                return;
            }
        };
        match frame.frame_type {
            FrameType::Telemetry => match self.translate(&frame) {
                Ok(body) => self.route_telemetry(body, out),
                Err(e) => out.record("gateway-error", json!({ "gateway": self.cfg.id, "error": e.code(), "device": frame.device_id })),
            },
            FrameType::Heartbeat => {
                if self.is_attached(frame.device_id) {
                    let region = self.device_regions.get(&frame.device_id).cloned().unwrap_or_default();
                    out.publish(
                        heartbeat_topic(&region, frame.device_id),
                        "heartbeat/1",
                        json!({ "deviceId": frame.device_id, "ts": frame.timestamp, "gatewayId": self.cfg.id }),
                    );
                } else {
                    self.metrics.unattached += 1;
                }
            }
            FrameType::CommandAck => {
                let command_id = self
                    .pending_commands
                    .get_mut(&(frame.device_id, frame.resource_id))
                    .and_then(VecDeque::pop_front);
                let ack = AckBody {
                    command_id,
                    device_id: frame.device_id,
                    resource_id: frame.resource_id,
                    value: frame.payload.clone(),
                    ts: frame.timestamp,
                };
                out.publish(ack_topic(frame.device_id), "ack/1", serde_json::to_value(&ack).expect("serializable"));
            }
            FrameType::Command => {
                self.metrics.decode_errors += 1;
                out.record("gateway-error", json!({ "gateway": self.cfg.id, "error": "UplinkCommand" }));
            }
        }
    }

    fn route_telemetry(&mut self, body: TelemetryBody, out: &mut Outbox) {
        let numeric = matches!(body.value, Payload::Float(_));
        if matches!(self.cfg.aggregation, Aggregation::None) || !numeric {
            self.emit(body, out);
            return;
        }
        let key = (body.device_id, body.property.clone());
        let buf = self.buffers.entry(key.clone()).or_default();
        buf.push(body);
        if let Aggregation::Batch { .. } = self.cfg.aggregation {
            if let Some(agg) = aggregate(&self.cfg, buf) {
                buf.clear();
                self.emit(agg, out);
            }
        }
    }

    /// Window aggregation flush; call once per tick.
    pub fn on_tick(&mut self, tick: Tick, out: &mut Outbox) {
        let Aggregation::Window { m } = self.cfg.aggregation else { return };
        if m == 0 || tick % m != 0 {
            return;
        }
        let ready: Vec<TelemetryBody> = self
            .buffers
            .values_mut()
            .filter(|b| !b.is_empty())
            .filter_map(|b| {
                let agg = aggregate(&self.cfg, b);
                b.clear();
                agg
            })
            .collect();
        for body in ready {
            self.emit(body, out);
        }
    }

    /// Translates a `command/1` body into a command frame for the device. On
    /// failure a `notify/command-failed` message is queued instead.
    pub fn downlink(&mut self, cmd: &CommandBody, tick: Tick, out: &mut Outbox) -> Result<DeviceFrame, GatewayError> {
        match self.check_command(cmd) {
            Ok(()) => {
                self.pending_commands
                    .entry((cmd.device_id, cmd.resource_id))
                    .or_default()
                    .push_back(cmd.command_id.clone());
                Ok(DeviceFrame {
                    frame_type: FrameType::Command,
                    device_id: cmd.device_id,
                    resource_id: cmd.resource_id,
                    timestamp: tick,
                    payload: cmd.value.clone(),
                })
            }
            Err(e) => {
                self.metrics.command_failures += 1;
                out.publish(
                    Topic::new("notify/command-failed").expect("static topic"),
                    "notify/1",
                    json!({
                        "message": format!("command {} failed: {}", cmd.command_id, e.code()),
                        "commandId": cmd.command_id,
                        "deviceId": cmd.device_id,
                        "reason": e.code(),
                    }),
                );
                Err(e)
            }
        }
    }

    fn check_command(&self, cmd: &CommandBody) -> Result<(), GatewayError> {
        if !self.is_attached(cmd.device_id) {
            return Err(GatewayError::UnattachedDevice(cmd.device_id));
        }
        let info = self
            .registry
            .get(&(cmd.device_id, cmd.resource_id))
            .ok_or(GatewayError::UnknownResource { device: cmd.device_id, resource: cmd.resource_id })?;
        let expected = info.actuator.ok_or(GatewayError::UnknownResource {
            device: cmd.device_id,
            resource: cmd.resource_id,
        })?;
        let ok = match expected {
            // rate actuators take on/off or a float level
            ValueKind::Bool => matches!(cmd.value, Payload::Bool(_) | Payload::Float(_)),
            k => k.admits(&cmd.value),
        };
        if ok {
            Ok(())
        } else {
            Err(GatewayError::ValueKindMismatch {
                device: cmd.device_id,
                resource: cmd.resource_id,
                expected: expected.name(),
                got: cmd.value.kind_name(),
            })
        }
    }

    /// `(translated, emitted + still buffered)` per `(device, property)`; the
    /// two sides are equal when no sample was lost or double counted.
    pub fn conservation(&self) -> BTreeMap<(u32, String), (u64, u64)> {
        self.translated
            .iter()
            .map(|(k, &n)| {
                let emitted = self.emitted.get(k).copied().unwrap_or(0);
                let buffered: u64 = self.buffers.get(k).map_or(0, |b| b.iter().map(|x| u64::from(x.count)).sum());
                (k.clone(), (n, emitted + buffered))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{Actuator, Effect, NoiseModel, SamplingMode, Sensor};

    fn devices() -> Vec<Device> {
        vec![Device {
            id: 42,
            name: "thermo".into(),
            region: "r1".into(),
            gateway: "gw".into(),
            heartbeat: None,
            fail_at: None,
            sensors: vec![
                Sensor {
                    id: 1,
                    name: "temp".into(),
                    thing: "room".into(),
                    property: "temp".into(),
                    period: 1,
                    mode: SamplingMode::Periodic,
                    noise: NoiseModel::None,
                    last_reported: None,
                },
                Sensor {
                    id: 2,
                    name: "door".into(),
                    thing: "room".into(),
                    property: "door".into(),
                    period: 1,
                    mode: SamplingMode::Periodic,
                    noise: NoiseModel::None,
                    last_reported: None,
                },
            ],
            actuators: vec![Actuator {
                id: 7,
                name: "power".into(),
                thing: "room".into(),
                property: "temp".into(),
                effect: Effect::Rate { rate: -0.5 },
                accepts: ValueKind::Bool,
                state: None,
            }],
        }]
    }

    fn gateway(aggregation: Aggregation, attached: &[u32]) -> Gateway {
        let cfg = GatewayConfig {
            id: "gw".into(),
            region: "r1".into(),
            attached_devices: attached.iter().copied().collect(),
            aggregation,
        };
        Gateway::new(cfg, &devices()).with_units(|_, p| match p {
            "temp" => Some(("C".into(), ValueKind::Float)),
            "door" => Some(("".into(), ValueKind::Bool)),
            _ => None,
        })
    }

    fn frame(resource: u16, payload: Payload, ts: Tick) -> DeviceFrame {
        DeviceFrame { frame_type: FrameType::Telemetry, device_id: 42, resource_id: resource, timestamp: ts, payload }
    }

    #[test]
    fn translate_maps_fields() {
        let mut g = gateway(Aggregation::None, &[42]);
        let body = g.translate(&frame(1, Payload::Float(21.123456789), 5)).unwrap();
        assert_eq!(telemetry_topic(&body.region_id, body.device_id, &body.property).as_str(), "telemetry/r1/42/temp");
        assert_eq!(body.value, Payload::Float(21.123456789));
        assert_eq!(body.unit, "C");
        assert!(!body.aggregated);
        assert_eq!(body.count, 1);
    }

    #[test]
    fn translate_bool_has_empty_unit() {
        let mut g = gateway(Aggregation::None, &[42]);
        let body = g.translate(&frame(2, Payload::Bool(true), 5)).unwrap();
        assert_eq!(body.value, Payload::Bool(true));
        assert_eq!(body.unit, "");
    }

    #[test]
    fn unattached_device_counted() {
        let mut g = gateway(Aggregation::None, &[]);
        assert_eq!(g.translate(&frame(1, Payload::Float(1.0), 0)), Err(GatewayError::UnattachedDevice(42)));
        assert_eq!(g.metrics.unattached, 1);
    }

    fn body(v: f64, ts: Tick) -> TelemetryBody {
        TelemetryBody {
            device_id: 42,
            resource_id: 1,
            thing: "room".into(),
            property: "temp".into(),
            value: Payload::Float(v),
            unit: "C".into(),
            ts,
            region_id: "r1".into(),
            gateway_id: "gw".into(),
            aggregated: false,
            count: 1,
        }
    }

    #[test]
    fn batch_mean() {
        let g = gateway(Aggregation::Batch { n: 3 }, &[42]);
        let agg = aggregate(&g.cfg, &[body(20.0, 1), body(22.0, 2), body(24.0, 3)]).unwrap();
        assert_eq!(agg.value, Payload::Float(22.0));
        assert_eq!(agg.count, 3);
        assert_eq!(agg.ts, 3);
        assert!(agg.aggregated);
        assert!(aggregate(&g.cfg, &[body(20.0, 1), body(22.0, 2)]).is_none());
    }

    #[test]
    fn window_mean() {
        let g = gateway(Aggregation::Window { m: 5 }, &[42]);
        let samples = [21.0, 21.5];
        let oracle = samples.iter().sum::<f64>() / samples.len() as f64;
        let agg = aggregate(&g.cfg, &[body(samples[0], 1), body(samples[1], 2)]).unwrap();
        assert_eq!(agg.value, Payload::Float(oracle));
        assert_eq!(oracle, 21.25);
        assert_eq!(agg.count, 2);
    }

    #[test]
    fn window_flush_conserves_samples() {
        let mut g = gateway(Aggregation::Window { m: 4 }, &[42]);
        let mut out = Outbox::new();
        for t in 0..10u64 {
            let bytes = frame(1, Payload::Float(t as f64), t).encode().unwrap();
            g.on_frame(&bytes, &mut out);
            g.on_tick(t, &mut out);
        }
        for (_, (translated, accounted)) in g.conservation() {
            assert_eq!(translated, accounted);
        }
        let counts: u32 = out
            .messages
            .iter()
            .map(|m| serde_json::from_value::<TelemetryBody>(m.body.clone()).unwrap().count)
            .sum();
        assert_eq!(counts, 9); // tick 9's sample is still buffered
    }

    fn cmd(device: u32, resource: u16, value: Payload) -> CommandBody {
        CommandBody { command_id: "c1".into(), device_id: device, resource_id: resource, value, issuer: "test".into(), plan_id: None }
    }

    #[test]
    fn downlink_bool_layout() {
        let mut g = gateway(Aggregation::None, &[42]);
        let mut out = Outbox::new();
        let f = g.downlink(&cmd(42, 7, Payload::Bool(true)), 3, &mut out).unwrap();
        let bytes = f.encode().unwrap();
        assert_eq!(bytes[2], 0x81);
        assert_eq!(bytes[17], 0x02);
        assert_eq!(bytes[18], 0x01);
        assert!(out.messages.is_empty());
    }

    #[test]
    fn downlink_detached_notifies() {
        let mut g = gateway(Aggregation::None, &[]);
        let mut out = Outbox::new();
        assert_eq!(g.downlink(&cmd(42, 7, Payload::Bool(true)), 3, &mut out), Err(GatewayError::UnattachedDevice(42)));
        assert_eq!(out.messages.len(), 1);
        assert_eq!(out.messages[0].topic.as_str(), "notify/command-failed");
        assert_eq!(out.messages[0].body["reason"], "UnattachedDevice");
    }

    #[test]
    fn downlink_kind_mismatch() {
        let mut g = gateway(Aggregation::None, &[42]);
        let mut out = Outbox::new();
        assert!(matches!(
            g.downlink(&cmd(42, 7, Payload::Text("x".into())), 3, &mut out),
            Err(GatewayError::ValueKindMismatch { .. })
        ));
    }

    #[test]
    fn ack_carries_pending_command_id() {
        let mut g = gateway(Aggregation::None, &[42]);
        let mut out = Outbox::new();
        g.downlink(&cmd(42, 7, Payload::Float(0.5)), 3, &mut out).unwrap();
        let ack = DeviceFrame { frame_type: FrameType::CommandAck, device_id: 42, resource_id: 7, timestamp: 4, payload: Payload::Float(0.5) };
        g.on_frame(&ack.encode().unwrap(), &mut out);
        let body: AckBody = serde_json::from_value(out.messages[0].body.clone()).unwrap();
        assert_eq!(body.command_id.as_deref(), Some("c1"));
        assert_eq!(body.value, Payload::Float(0.5));
        assert_eq!(out.messages[0].topic, ack_topic(42));
    }
}
