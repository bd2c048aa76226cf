//! Topic-based publish/subscribe fabric.
//!
//! Every hop costs one tick: a message published at tick `t` reaches each
//! matching subscriber at `t + 1`. Subscriptions are matched at publish time,
//! so cancelling a subscription never drops a delivery that is already in
//! flight.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::kernel::{Context, KernelError, Tick};

pub const MAX_SEGMENTS: usize = 8;

/// Schemas the broker accepts. Anything else is rejected at publish time.
pub const KNOWN_SCHEMAS: &[&str] = &[
    "telemetry/1",
    "heartbeat/1",
    "command/1",
    "ack/1",
    "symptom/1",
    "report/1",
    "escalation/1",
    "plan/1",
    "notify/1",
    "summary/1",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("malformed topic {0:?}")]
    MalformedTopic(String),
    #[error("malformed pattern {pattern:?}: {reason}")]
    MalformedPattern { pattern: String, reason: String },
    #[error("unknown schema {0:?}")]
    UnknownSchema(String),
    #[error("unknown subscription {0}")]
    UnknownSubscription(u64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Topic(String);

impl Topic {
    pub fn new(path: impl Into<String>) -> Result<Self, BrokerError> {
        let path = path.into();
        let segments: Vec<&str> = path.split('/').collect();
        if segments.len() > MAX_SEGMENTS || !segments.iter().all(|s| valid_segment(s)) {
            return Err(BrokerError::MalformedTopic(path));
        }
        Ok(Self(path))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }
}

impl TryFrom<String> for Topic {
    type Error = BrokerError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Topic::new(s)
    }
}

impl From<Topic> for String {
    fn from(t: Topic) -> Self {
        t.0
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    /// `*`: exactly one segment
    Single,
    /// trailing `#`: zero or more remaining segments
    Rest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPattern {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicPattern {
    pub fn parse(raw: &str) -> Result<Self, BrokerError> {
        let bad = |reason: &str| BrokerError::MalformedPattern { pattern: raw.to_string(), reason: reason.to_string() };
        let parts: Vec<&str> = raw.split('/').collect();
        if parts.len() > MAX_SEGMENTS {
            return Err(bad("too many segments"));
        }
        let last = parts.len() - 1;
        let mut segments = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let seg = match *part {
                "*" => Segment::Single,
                "#" if i == last => Segment::Rest,
                "#" => return Err(bad("'#' must be the final segment")),
                s if valid_segment(s) => Segment::Literal(s.to_string()),
                _ => return Err(bad("segments must match [a-z0-9_-]+")),
            };
            segments.push(seg);
        }
        Ok(Self { raw: raw.to_string(), segments })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// First segment if it is a literal.
    pub fn root(&self) -> Option<&str> {
        match self.segments.first() {
            Some(Segment::Literal(s)) => Some(s),
            _ => None,
        }
    }

    pub fn matches(&self, topic: &Topic) -> bool {
        let mut levels = topic.segments();
        for seg in &self.segments {
            match seg {
                Segment::Rest => return true,
                Segment::Single => {
                    if levels.next().is_none() {
                        return false;
                    }
                }
                Segment::Literal(lit) => match levels.next() {
                    Some(l) if l == lit => {}
                    _ => return false,
                },
            }
        }
        levels.next().is_none()
    }
}

impl FromStr for TopicPattern {
    type Err = BrokerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// A message as it travels through the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: u64,
    pub schema: String,
    pub topic: Topic,
    pub publisher: String,
    pub tick_published: Tick,
    pub body: Value,
}

/// A message before the broker stamps it.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub topic: Topic,
    pub schema: &'static str,
    pub body: Value,
}

impl Outgoing {
    pub fn new(topic: Topic, schema: &'static str, body: Value) -> Self {
        Self { topic, schema, body }
    }
}

/// Messages and log records produced by a component during one handler call.
#[derive(Debug, Default)]
pub struct Outbox {
    pub messages: Vec<Outgoing>,
    pub records: Vec<(String, Value)>,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, topic: Topic, schema: &'static str, body: Value) {
        self.messages.push(Outgoing::new(topic, schema, body));
    }

    pub fn record(&mut self, kind: impl Into<String>, body: Value) {
        self.records.push((kind.into(), body));
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub id: u64,
    pub subscriber: String,
    pub pattern: String,
    pub created_at: Tick,
}

/// One copy of a message on its way to one subscription.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub subscription: u64,
    pub subscriber: String,
    pub envelope: Arc<Envelope>,
}

impl Delivery {
    pub fn log_body(&self) -> Value {
        json!({
            "sub": self.subscription,
            "subscriber": self.subscriber,
            "msg": self.envelope.id,
            "topic": self.envelope.topic,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Published {
    pub envelope: Arc<Envelope>,
    pub deliveries: Vec<Delivery>,
}

impl Published {
    pub fn delivered_count(&self) -> usize {
        self.deliveries.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Broker {
    subs: BTreeMap<u64, (Subscription, TopicPattern)>,
    next_sub: u64,
    next_msg: u64,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, subscriber: &str, pattern: &str, now: Tick) -> Result<Subscription, BrokerError> {
        let parsed = TopicPattern::parse(pattern)?;
        self.next_sub += 1;
        let sub = Subscription {
            id: self.next_sub,
            subscriber: subscriber.to_string(),
            pattern: pattern.to_string(),
            created_at: now,
        };
        self.subs.insert(sub.id, (sub.clone(), parsed));
        Ok(sub)
    }

    pub fn unsubscribe(&mut self, id: u64) -> Result<Subscription, BrokerError> {
        self.subs.remove(&id).map(|(s, _)| s).ok_or(BrokerError::UnknownSubscription(id))
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subs.values().map(|(s, _)| s)
    }

    /// Stamps the message and resolves its deliveries. Scheduling is left to the
    /// caller; see [`Broker::publish_logged`].
    pub fn publish(&mut self, now: Tick, publisher: &str, msg: Outgoing) -> Result<Published, BrokerError> {
        if !KNOWN_SCHEMAS.contains(&msg.schema) {
            return Err(BrokerError::UnknownSchema(msg.schema.to_string()));
        }
        self.next_msg += 1;
        let envelope = Arc::new(Envelope {
            id: self.next_msg,
            schema: msg.schema.to_string(),
            topic: msg.topic,
            publisher: publisher.to_string(),
            tick_published: now,
            body: msg.body,
        });
        let deliveries = self
            .subs
            .values()
            .filter(|(_, p)| p.matches(&envelope.topic))
            .map(|(s, _)| Delivery {
                subscription: s.id,
                subscriber: s.subscriber.clone(),
                envelope: Arc::clone(&envelope),
            })
            .collect();
        Ok(Published { envelope, deliveries })
    }

    /// Publishes, mirrors the message into the event log as a `pub` record and
    /// schedules one delivery event per matching subscription at `now + 1`.
    pub fn publish_logged<E>(
        &mut self,
        ctx: &mut Context<'_, E>,
        publisher: &str,
        msg: Outgoing,
        wrap: impl Fn(Delivery) -> E,
    ) -> Result<Published, BrokerError> {
        let published = self.publish(ctx.now(), publisher, msg)?;
        let env = &published.envelope;
        ctx.record(
            "broker",
            "pub",
            json!({
                "msg": env.id,
                "topic": env.topic,
                "schema": env.schema,
                "publisher": env.publisher,
                "matched": published.deliveries.len(),
                "body": env.body,
            }),
        );
        for d in &published.deliveries {
            ctx.schedule(ctx.now() + 1, d.subscriber.clone(), wrap(d.clone()))?;
        }
        Ok(published)
    }
}
