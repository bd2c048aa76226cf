//! Application layer: users, their subscriptions and inboxes, and the device
//! controller that issues commands on a user's behalf.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, Delivery, Outbox, TopicPattern};
use crate::device::{Device, Payload};
use crate::edge::rules::RuleError;
use crate::gateway::{command_topic, AckBody, CommandBody};
use crate::kernel::Tick;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("email {0:?} is already registered")]
    DuplicateEmail(String),
    #[error("email {0:?} must contain '@'")]
    InvalidEmail(String),
    #[error("no user {0}")]
    UnknownUser(u64),
    #[error("no device {0}")]
    UnknownDevice(u32),
    #[error("malformed pattern {pattern:?}: {reason}")]
    MalformedPattern { pattern: String, reason: String },
    #[error("no subscription {0}")]
    UnknownSubscription(u64),
    #[error("no notification {0}")]
    UnknownNotification(u64),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

impl AppError {
    pub fn code(&self) -> &'static str {
        match self {
            AppError::DuplicateEmail(_) => "DuplicateEmail",
            AppError::InvalidEmail(_) => "InvalidEmail",
            AppError::UnknownUser(_) => "UnknownUser",
            AppError::UnknownDevice(_) => "UnknownDevice",
            AppError::MalformedPattern { .. } => "MalformedPattern",
            AppError::UnknownSubscription(_) => "UnknownSubscription",
            AppError::UnknownNotification(_) => "UnknownNotification",
            AppError::Rule(e) => e.code(),
        }
    }

    /// `(line, col)` for rule diagnostics.
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            AppError::Rule(e) => e.position(),
            _ => None,
        }
    }

    /// The `{code, message, position?}` error body used by the HTTP API.
    pub fn body(&self) -> Value {
        let mut b = json!({ "code": self.code(), "message": self.to_string() });
        if let Some((line, col)) = self.position() {
            b["position"] = json!({ "line": line, "col": col });
        }
        if let AppError::Rule(RuleError::SyntaxError(d)) = self {
            b["expected"] = json!(d.expected);
        }
        b
    }
}

/// User subscriptions may only watch notifications and telemetry.
pub fn check_user_pattern(pattern: &str) -> Result<TopicPattern, AppError> {
    let p = TopicPattern::parse(pattern).map_err(|e| AppError::MalformedPattern {
        pattern: pattern.to_string(),
        reason: match e {
            BrokerError::MalformedPattern { reason, .. } => reason,
            other => other.to_string(),
        },
    })?;
    match p.root() {
        Some("notify") | Some("telemetry") => Ok(p),
        _ => Err(AppError::MalformedPattern {
            pattern: pattern.to_string(),
            reason: "must start with notify/ or telemetry/".into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Preferences {
    pub channel: String,
    /// `metric` or `imperial`.
    pub units: String,
}

impl Default for Preferences {
    fn default() -> Self {
        Self { channel: "inbox".into(), units: "metric".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct User {
    pub id: u64,
    pub name: String,
    pub email: String,
    pub created_at: Tick,
    pub preferences: Preferences,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserSubscription {
    pub id: u64,
    pub user: u64,
    pub pattern: String,
    pub created_at: Tick,
    pub broker_subscription: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Notification {
    pub id: u64,
    pub user: u64,
    /// Broker message id of the source envelope.
    pub source: u64,
    pub topic: String,
    pub message: String,
    pub tick: Tick,
    pub read: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum Outcome {
    Pending,
    Acked,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandRequest {
    pub id: String,
    pub user: u64,
    pub device: u32,
    pub resource: u16,
    pub value: Payload,
    pub issued_at: Tick,
    pub outcome: Outcome,
}

/// Celsius readings become Fahrenheit for imperial users; everything else is
/// passed through.
pub fn convert_unit(value: f64, unit: &str, units: &str) -> (f64, String) {
    match (unit, units) {
        ("C", "imperial") => (value * 9.0 / 5.0 + 32.0, "F".into()),
        _ => (value, unit.to_string()),
    }
}

fn message_of(body: &Value, topic: &str) -> String {
    match body.get("message").and_then(Value::as_str) {
        Some(m) => m.to_string(),
        None => match (body.get("value"), body.get("unit")) {
            (Some(v), Some(u)) => format!("{topic} = {v} {}", u.as_str().unwrap_or_default()).trim_end().to_string(),
            _ => topic.to_string(),
        },
    }
}

pub const APP: &str = "app";

#[derive(Debug, Clone, Default)]
pub struct AppService {
    users: BTreeMap<u64, User>,
    subscriptions: BTreeMap<u64, UserSubscription>,
    by_broker: BTreeMap<u64, u64>,
    notified: BTreeSet<(u64, u64)>,
    notifications: BTreeMap<u64, Notification>,
    commands: BTreeMap<String, CommandRequest>,
    next_user: u64,
    next_sub: u64,
    next_note: u64,
    next_cmd: u64,
}

impl AppService {
    pub fn new() -> Self {
        Self::default()
    }

    /// System subscriptions: device acks and gateway command failures.
    pub fn attach(&self, broker: &mut Broker) -> Result<(), BrokerError> {
        broker.subscribe(APP, "acks/#", 0)?;
        broker.subscribe(APP, "notify/command-failed", 0)?;
        Ok(())
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn user(&self, id: u64) -> Option<&User> {
        self.users.get(&id)
    }

    pub fn notifications_for(&self, user: u64) -> impl Iterator<Item = &Notification> {
        self.notifications.values().filter(move |n| n.user == user)
    }

    pub fn command(&self, id: &str) -> Option<&CommandRequest> {
        self.commands.get(id)
    }

    pub fn create_user(&mut self, name: &str, email: &str, preferences: Preferences, now: Tick, out: &mut Outbox) -> Result<User, AppError> {
        if !email.contains('@') {
            return Err(AppError::InvalidEmail(email.to_string()));
        }
        if self.users.values().any(|u| u.email == email) {
            return Err(AppError::DuplicateEmail(email.to_string()));
        }
        self.next_user += 1;
        let user = User { id: self.next_user, name: name.to_string(), email: email.to_string(), created_at: now, preferences };
        out.record("user-created", serde_json::to_value(&user).expect("serializable"));
        self.users.insert(user.id, user.clone());
        Ok(user)
    }

    pub fn subscribe_user(&mut self, broker: &mut Broker, user: u64, pattern: &str, now: Tick, out: &mut Outbox) -> Result<UserSubscription, AppError> {
        if !self.users.contains_key(&user) {
            return Err(AppError::UnknownUser(user));
        }
        check_user_pattern(pattern)?;
        let backing = broker.subscribe(APP, pattern, now).map_err(|e| AppError::MalformedPattern {
            pattern: pattern.to_string(),
            reason: e.to_string(),
        })?;
        self.next_sub += 1;
        let sub = UserSubscription { id: self.next_sub, user, pattern: pattern.to_string(), created_at: now, broker_subscription: backing.id };
        self.by_broker.insert(backing.id, sub.id);
        out.record("subscription-created", serde_json::to_value(&sub).expect("serializable"));
        self.subscriptions.insert(sub.id, sub.clone());
        Ok(sub)
    }

    pub fn unsubscribe_user(&mut self, broker: &mut Broker, id: u64, out: &mut Outbox) -> Result<UserSubscription, AppError> {
        let sub = self.subscriptions.remove(&id).ok_or(AppError::UnknownSubscription(id))?;
        self.by_broker.remove(&sub.broker_subscription);
        broker.unsubscribe(sub.broker_subscription).map_err(|_| AppError::UnknownSubscription(id))?;
        out.record("subscription-removed", json!({ "id": id, "user": sub.user }));
        Ok(sub)
    }

    pub fn mark_read(&mut self, id: u64, out: &mut Outbox) -> Result<Notification, AppError> {
        let n = self.notifications.get_mut(&id).ok_or(AppError::UnknownNotification(id))?;
        if !n.read {
            n.read = true;
            out.record("notification-read", json!({ "id": id, "user": n.user }));
        }
        Ok(n.clone())
    }

    /// Publishes a `command/1` for `device` on behalf of `user`. The outcome
    /// follows from the device ack or the gateway's failure notice.
    pub fn issue_command(
        &mut self,
        devices: &[Device],
        user: u64,
        device: u32,
        resource: u16,
        value: Payload,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<CommandRequest, AppError> {
        if !self.users.contains_key(&user) {
            return Err(AppError::UnknownUser(user));
        }
        if !devices.iter().any(|d| d.id == device) {
            return Err(AppError::UnknownDevice(device));
        }
        self.next_cmd += 1;
        let req = CommandRequest {
            id: format!("cmd-{}", self.next_cmd),
            user,
            device,
            resource,
            value: value.clone(),
            issued_at: now,
            outcome: Outcome::Pending,
        };
        let cmd = CommandBody {
            command_id: req.id.clone(),
            device_id: device,
            resource_id: resource,
            value,
            issuer: format!("user:{user}"),
            plan_id: None,
        };
        out.record("command-request", serde_json::to_value(&req).expect("serializable"));
        out.publish(command_topic(device), "command/1", serde_json::to_value(&cmd).expect("serializable"));
        self.commands.insert(req.id.clone(), req.clone());
        Ok(req)
    }

    fn settle(&mut self, id: &str, outcome: Outcome, now: Tick, out: &mut Outbox) {
        let Some(req) = self.commands.get_mut(id) else { return };
        if req.outcome != Outcome::Pending {
            return;
        }
        req.outcome = outcome.clone();
        out.record("command-outcome", json!({ "id": id, "outcome": outcome, "tick": now }));
    }

    pub fn on_delivery(&mut self, d: &Delivery, now: Tick, out: &mut Outbox) {
        let env = &d.envelope;
        let topic = env.topic.as_str();
        if let Some(sub_id) = self.by_broker.get(&d.subscription).copied() {
            let user = self.subscriptions[&sub_id].user;
            if self.notified.insert((user, env.id)) {
                self.next_note += 1;
                let n = Notification {
                    id: self.next_note,
                    user,
                    source: env.id,
                    topic: topic.to_string(),
                    message: message_of(&env.body, topic),
                    tick: now,
                    read: false,
                };
                out.record("notification", serde_json::to_value(&n).expect("serializable"));
                self.notifications.insert(n.id, n);
            }
            return;
        }
        if topic.starts_with("acks/") {
            if let Ok(ack) = serde_json::from_value::<AckBody>(env.body.clone()) {
                if let Some(id) = ack.command_id {
                    self.settle(&id, Outcome::Acked, now, out);
                }
            }
        } else if topic == "notify/command-failed" {
            if let Some(id) = env.body["commandId"].as_str() {
                let reason = env.body["reason"].as_str().unwrap_or("unknown").to_string();
                self.settle(id, Outcome::Failed { reason }, now, out);
            }
        }
    }
}
