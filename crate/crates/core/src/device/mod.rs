//! Sensing layer: things, devices with their sensors and actuators, and the
//! physical environment the actuators perturb.

pub mod frame;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{Context, RngStream, RngStreams, Tick};

pub use frame::{decode_frame, encode_frame, DeviceFrame, FrameError, FrameType, Payload};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("device {device} has no actuator with resource id {resource}")]
    UnknownResource { device: u32, resource: u16 },
    #[error("actuator {resource} expects a {expected} payload, got {got}")]
    PayloadKindMismatch { resource: u16, expected: &'static str, got: &'static str },
    #[error("frame type {0:?} is not a command")]
    NotACommand(FrameType),
}

/// Anything that hands out named random streams.
pub trait RandomSource {
    fn stream(&mut self, id: &str) -> &mut RngStream;
}

impl RandomSource for RngStreams {
    fn stream(&mut self, id: &str) -> &mut RngStream {
        RngStreams::stream(self, id)
    }
}

impl<E> RandomSource for Context<'_, E> {
    fn stream(&mut self, id: &str) -> &mut RngStream {
        self.rng(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Float,
    Bool,
    Text,
}

impl ValueKind {
    pub fn name(self) -> &'static str {
        match self {
            ValueKind::Float => "float",
            ValueKind::Bool => "bool",
            ValueKind::Text => "text",
        }
    }

    pub fn admits(self, p: &Payload) -> bool {
        matches!(
            (self, p),
            (ValueKind::Float, Payload::Float(_)) | (ValueKind::Bool, Payload::Bool(_)) | (ValueKind::Text, Payload::Text(_))
        )
    }

    pub fn zero(self) -> Payload {
        match self {
            ValueKind::Float => Payload::Float(0.0),
            ValueKind::Bool => Payload::Bool(false),
            ValueKind::Text => Payload::Text(String::new()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    #[default]
    None,
    /// Uniform in `[-amplitude, amplitude)`.
    Uniform { amplitude: f64 },
    Gaussian { sigma: f64 },
}

impl NoiseModel {
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        match *self {
            NoiseModel::None => 0.0,
            NoiseModel::Uniform { amplitude } => (rng.next_f64() * 2.0 - 1.0) * amplitude,
            NoiseModel::Gaussian { sigma } => rng.next_gaussian() * sigma,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, NoiseModel::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterestingProperty {
    pub name: String,
    pub unit: String,
    pub kind: ValueKind,
    /// Members of a composed property; its value is the ordered member values.
    pub composed_of: Option<Vec<String>>,
    /// Per-tick drift (float properties only).
    pub drift: f64,
    pub disturbance: NoiseModel,
}

/// Value of a property as read by a consumer.
#[derive(Debug, Clone, PartialEq)]
pub enum PropertyValue {
    Scalar(Payload),
    Composed(Vec<Payload>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thing {
    pub id: String,
    pub kind: String,
    pub region: String,
    pub properties: Vec<InterestingProperty>,
    pub state: BTreeMap<String, Payload>,
}

impl Thing {
    pub fn property(&self, name: &str) -> Option<&InterestingProperty> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Option<PropertyValue> {
        let prop = self.property(name)?;
        match &prop.composed_of {
            Some(members) => members
                .iter()
                .map(|m| self.state.get(m).cloned())
                .collect::<Option<Vec<_>>>()
                .map(PropertyValue::Composed),
            None => self.state.get(name).cloned().map(PropertyValue::Scalar),
        }
    }

    pub fn scalar(&self, name: &str) -> Option<&Payload> {
        self.state.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplingMode {
    Periodic,
    OnChange { delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub id: u16,
    pub name: String,
    pub thing: String,
    pub property: String,
    pub period: u64,
    pub mode: SamplingMode,
    pub noise: NoiseModel,
    pub last_reported: Option<Payload>,
}

impl Sensor {
    pub fn noise_stream(&self, device_id: u32) -> String {
        format!("noise/{device_id}/{}", self.id)
    }

    /// Reads `current`, adds noise to float readings and decides whether to emit.
    pub fn sample(&mut self, device_id: u32, current: &Payload, tick: Tick, rng: &mut RngStream) -> Option<DeviceFrame> {
        let reading = match current {
            Payload::Float(v) if !self.noise.is_none() => Payload::Float(v + self.noise.draw(rng)),
            other => other.clone(),
        };
        let emit = match self.mode {
            SamplingMode::Periodic => tick % self.period.max(1) == 0,
            SamplingMode::OnChange { delta } => match (&self.last_reported, &reading) {
                (None, _) => true,
                (Some(Payload::Float(last)), Payload::Float(now)) => (now - last).abs() >= delta,
                (Some(last), now) => last != now,
            },
        };
        if !emit {
            return None;
        }
        self.last_reported = Some(reading.clone());
        Some(DeviceFrame {
            frame_type: FrameType::Telemetry,
            device_id,
            resource_id: self.id,
            timestamp: tick,
            payload: reading,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Effect {
    /// Adds `rate * level` to a float property each step; `on` is level 1.
    Rate { rate: f64 },
    /// Writes the commanded value into the property each step.
    Set,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actuator {
    pub id: u16,
    pub name: String,
    pub thing: String,
    pub property: String,
    pub effect: Effect,
    /// Kind of payload the actuator accepts.
    pub accepts: ValueKind,
    pub state: Option<Payload>,
}

impl Actuator {
    /// Multiplier applied to a rate effect.
    pub fn level(&self) -> f64 {
        match &self.state {
            Some(Payload::Bool(true)) => 1.0,
            Some(Payload::Float(v)) => *v,
            _ => 0.0,
        }
    }

    pub fn engaged(&self) -> bool {
        self.level() != 0.0
    }

    fn admits(&self, p: &Payload) -> bool {
        match self.effect {
            Effect::Rate { .. } => matches!(p, Payload::Bool(_) | Payload::Float(_)),
            Effect::Set => self.accepts.admits(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub id: u32,
    pub name: String,
    pub region: String,
    pub gateway: String,
    /// Heartbeat period in ticks, if the device sends heartbeats.
    pub heartbeat: Option<u64>,
    /// Tick from which the device goes silent.
    pub fail_at: Option<Tick>,
    pub sensors: Vec<Sensor>,
    pub actuators: Vec<Actuator>,
}

/// Outcome of a command applied to a device.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub ack: DeviceFrame,
    pub changed: bool,
    pub previous: Option<Payload>,
}

impl Device {
    pub fn alive(&self, tick: Tick) -> bool {
        self.fail_at.map_or(true, |t| tick < t)
    }

    pub fn actuator(&self, resource: u16) -> Option<&Actuator> {
        self.actuators.iter().find(|a| a.id == resource)
    }

    pub fn sensor(&self, resource: u16) -> Option<&Sensor> {
        self.sensors.iter().find(|s| s.id == resource)
    }

    pub fn resource_name(&self, resource: u16) -> Option<&str> {
        self.sensor(resource)
            .map(|s| s.name.as_str())
            .or_else(|| self.actuator(resource).map(|a| a.name.as_str()))
    }

    pub fn heartbeat_frame(&self, tick: Tick) -> Option<DeviceFrame> {
        let period = self.heartbeat?;
        (period > 0 && tick % period == 0).then(|| DeviceFrame {
            frame_type: FrameType::Heartbeat,
            device_id: self.id,
            resource_id: 0,
            timestamp: tick,
            payload: Payload::Bool(true),
        })
    }

    /// Engages, disengages or sets the addressed actuator. Repeating the same
    /// command leaves state unchanged but still produces an ack.
    pub fn apply_command(&mut self, command: &DeviceFrame, tick: Tick) -> Result<Applied, DeviceError> {
        if command.frame_type != FrameType::Command {
            return Err(DeviceError::NotACommand(command.frame_type));
        }
        let device = self.id;
        let act = self
            .actuators
            .iter_mut()
            .find(|a| a.id == command.resource_id)
            .ok_or(DeviceError::UnknownResource { device, resource: command.resource_id })?;
        if !act.admits(&command.payload) {
            return Err(DeviceError::PayloadKindMismatch {
                resource: act.id,
                expected: act.accepts.name(),
                got: command.payload.kind_name(),
            });
        }
        let previous = act.state.replace(command.payload.clone());
        let changed = previous.as_ref() != Some(&command.payload);
        Ok(Applied {
            ack: DeviceFrame {
                frame_type: FrameType::CommandAck,
                device_id: device,
                resource_id: act.id,
                timestamp: tick,
                payload: command.payload.clone(),
            },
            changed,
            previous,
        })
    }
}

/// The physical world: every thing, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Environment {
    pub things: BTreeMap<String, Thing>,
}

impl Environment {
    pub fn new(things: impl IntoIterator<Item = Thing>) -> Self {
        Self { things: things.into_iter().map(|t| (t.id.clone(), t)).collect() }
    }

    pub fn value(&self, thing: &str, property: &str) -> Option<&Payload> {
        self.things.get(thing)?.scalar(property)
    }

    /// Advances every property of the region's things by one tick:
    /// `value += drift + sum(rate * level) + disturbance` for floats, and
    /// absolute sets from commanded set-actuators.
    pub fn step(&mut self, region: &str, devices: &[Device], rng: &mut dyn RandomSource) {
        for thing in self.things.values_mut().filter(|t| t.region == region) {
            for prop in &thing.properties {
                if prop.composed_of.is_some() {
                    continue;
                }
                let acting = devices
                    .iter()
                    .flat_map(|d| d.actuators.iter())
                    .filter(|a| a.thing == thing.id && a.property == prop.name);
                let mut rate_sum = 0.0;
                let mut set_to = None;
                for a in acting {
                    match a.effect {
                        Effect::Rate { rate } => rate_sum += rate * a.level(),
                        Effect::Set => {
                            if let Some(v) = &a.state {
                                set_to = Some(v.clone());
                            }
                        }
                    }
                }
                let slot = thing.state.entry(prop.name.clone()).or_insert_with(|| prop.kind.zero());
                if let Some(v) = set_to {
                    *slot = v;
                    continue;
                }
                if let Payload::Float(v) = slot {
                    let disturbance = if prop.disturbance.is_none() {
                        0.0
                    } else {
                        let stream = format!("env/{}/{}", thing.id, prop.name);
                        prop.disturbance.draw(rng.stream(&stream))
                    };
                    *v += prop.drift + rate_sum + disturbance;
                }
            }
        }
    }
}
