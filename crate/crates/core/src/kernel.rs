//! Deterministic discrete-event kernel.
//!
//! Time is a logical tick counter. Events are dispatched in `(at, seq)` order
//! where `seq` is a per-tick insertion counter, so two runs with the same
//! inputs dispatch exactly the same sequence. Every dispatched event and every
//! record a handler emits lands in the [`EventLog`], which serializes to JSON
//! Lines with the fixed key order `tick, seq, target, kind, body`.
//!
//! Randomness comes from named [`RngStream`]s. A stream's state is derived from
//! `(global seed, stream id)`:
//!
//! ```text
//! h     = FNV-1a-64(stream_id bytes)
//! state = splitmix_mix(seed ^ splitmix_mix(h))
//! next  = splitmix_mix(state += 0x9E3779B97F4A7C15)
//! ```
//!
//! where `splitmix_mix` is the SplitMix64 finalizer. All arithmetic is
//! wrapping 64-bit, so the sequence is identical on every platform.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Logical time. Has no wall-clock meaning.
pub type Tick = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("cannot schedule at tick {at}: now is {now}")]
    SchedulingInPast { at: Tick, now: Tick },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

/// Anything that can travel through the kernel queue.
pub trait Payload {
    fn kind(&self) -> &'static str;
    fn body(&self) -> Value;
}

#[derive(Debug, Clone)]
pub struct ScheduledEvent<E> {
    pub at: Tick,
    pub seq: u64,
    pub target: String,
    pub payload: E,
}

struct Queued<E>(ScheduledEvent<E>);

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at, self.0.seq) == (other.0.at, other.0.seq)
    }
}
impl<E> Eq for Queued<E> {}
impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Queued<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.at, other.0.seq).cmp(&(self.0.at, self.0.seq))
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tick: Tick,
    pub seq: u64,
    pub target: String,
    pub kind: String,
    pub body: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    entries: Vec<LogEntry>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<LogEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: LogEntry) {
        self.entries.push(entry);
    }

    /// Canonical serialization: one compact JSON object per line, each line
    /// terminated by `\n`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&entry_to_line(e));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut entries = Vec::new();
        let mut lines = text.split('\n').enumerate().peekable();
        while let Some((idx, line)) = lines.next() {
            let line_no = idx + 1;
            if line.is_empty() {
                // only the trailing terminator may be empty
                if lines.peek().is_none() {
                    break;
                }
                return Err(LogError::CorruptLog { line: line_no, reason: "empty line".into() });
            }
            let is_last = lines.peek().is_none();
            if is_last {
                // every complete line ends with a newline; a missing one means the
                // file was cut inside this record
                return Err(LogError::CorruptLog {
                    line: line_no,
                    reason: "unterminated final line".into(),
                });
            }
            let entry: LogEntry = serde_json::from_str(line).map_err(|e| LogError::CorruptLog {
                line: line_no,
                reason: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }
}

pub fn entry_to_line(e: &LogEntry) -> String {
    serde_json::to_string(e).expect("log entries always serialize")
}

fn splitmix_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A named SplitMix64 stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    stream_id: String,
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: &str) -> Self {
        let state = splitmix_mix(seed ^ splitmix_mix(fnv1a64(stream_id.as_bytes())));
        Self { stream_id: stream_id.to_string(), state }
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        splitmix_mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Lazily created per-stream generators sharing one global seed.
#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    streams: BTreeMap<String, RngStream>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed, streams: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, stream_id: &str) -> &mut RngStream {
        let seed = self.seed;
        self.streams
            .entry(stream_id.to_string())
            .or_insert_with(|| RngStream::new(seed, stream_id))
    }

    pub fn next_u64(&mut self, stream_id: &str) -> u64 {
        self.stream(stream_id).next_u64()
    }
}

/// Handle given to event handlers. Grants scheduling, log records and
/// randomness; nothing else of the kernel is reachable from inside a handler.
pub struct Context<'a, E> {
    now: Tick,
    queue: &'a mut BinaryHeap<Queued<E>>,
    tick_seq: &'a mut BTreeMap<Tick, u64>,
    log: &'a mut EventLog,
    line: &'a mut (Tick, u64),
    rng: &'a mut RngStreams,
}

impl<E> Context<'_, E> {
    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn schedule(&mut self, at: Tick, target: impl Into<String>, payload: E) -> Result<u64, KernelError> {
        push_event(self.now, self.queue, self.tick_seq, at, target.into(), payload)
    }

    /// Appends a non-dispatch record (publish mirrors, state transitions) to the log.
    pub fn record(&mut self, target: impl Into<String>, kind: impl Into<String>, body: Value) {
        append_line(self.log, self.line, self.now, target.into(), kind.into(), body);
    }

    pub fn rng(&mut self, stream_id: &str) -> &mut RngStream {
        self.rng.stream(stream_id)
    }

    pub fn rng_next(&mut self, stream_id: &str) -> u64 {
        self.rng.next_u64(stream_id)
    }
}

fn push_event<E>(
    now: Tick,
    queue: &mut BinaryHeap<Queued<E>>,
    tick_seq: &mut BTreeMap<Tick, u64>,
    at: Tick,
    target: String,
    payload: E,
) -> Result<u64, KernelError> {
    if at < now {
        return Err(KernelError::SchedulingInPast { at, now });
    }
    let counter = tick_seq.entry(at).or_insert(0);
    let seq = *counter;
    *counter += 1;
    queue.push(Queued(ScheduledEvent { at, seq, target, payload }));
    Ok(seq)
}

fn append_line(log: &mut EventLog, line: &mut (Tick, u64), now: Tick, target: String, kind: String, body: Value) {
    if line.0 != now {
        *line = (now, 0);
    }
    log.push(LogEntry { tick: now, seq: line.1, target, kind, body });
    line.1 += 1;
}

pub trait Handler<E> {
    fn handle(&mut self, ctx: &mut Context<'_, E>, event: ScheduledEvent<E>);
}

pub struct Kernel<E> {
    now: Tick,
    queue: BinaryHeap<Queued<E>>,
    tick_seq: BTreeMap<Tick, u64>,
    log: EventLog,
    line: (Tick, u64),
    rng: RngStreams,
}

impl<E: Payload> Kernel<E> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: 0,
            queue: BinaryHeap::new(),
            tick_seq: BTreeMap::new(),
            log: EventLog::new(),
            line: (0, 0),
            rng: RngStreams::new(seed),
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, at: Tick, target: impl Into<String>, payload: E) -> Result<u64, KernelError> {
        push_event(self.now, &mut self.queue, &mut self.tick_seq, at, target.into(), payload)
    }

    pub fn rng_next(&mut self, stream_id: &str) -> u64 {
        self.rng.next_u64(stream_id)
    }

    /// Context for work done at a tick boundary (outside any handler).
    pub fn context(&mut self) -> Context<'_, E> {
        Context {
            now: self.now,
            queue: &mut self.queue,
            tick_seq: &mut self.tick_seq,
            log: &mut self.log,
            line: &mut self.line,
            rng: &mut self.rng,
        }
    }

    /// Dispatches every event with `at <= until` and returns the log lines
    /// appended during this call.
    pub fn run<H: Handler<E>>(&mut self, until: Tick, handler: &mut H) -> &[LogEntry] {
        let start = self.log.len();
        loop {
            let due = matches!(self.queue.peek(), Some(q) if q.0.at <= until);
            if !due {
                break;
            }
            let Queued(event) = self.queue.pop().expect("peeked");
            self.now = event.at;
            self.tick_seq.retain(|t, _| *t >= event.at);
            append_line(
                &mut self.log,
                &mut self.line,
                self.now,
                event.target.clone(),
                event.payload.kind().to_string(),
                event.payload.body(),
            );
            let mut ctx = self.context();
            handler.handle(&mut ctx, event);
        }
        if until > self.now {
            self.now = until;
        }
        &self.log.entries()[start..]
    }
}

/// Thread-safe queue that external callers push into; the owner drains it at
/// tick boundaries.
#[derive(Debug)]
pub struct CommandQueue<T> {
    inner: Arc<Mutex<VecDeque<T>>>,
}

impl<T> Clone for CommandQueue<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T> Default for CommandQueue<T> {
    fn default() -> Self {
        Self { inner: Arc::new(Mutex::new(VecDeque::new())) }
    }
}

impl<T> CommandQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, item: T) {
        self.inner.lock().expect("queue poisoned").push_back(item);
    }

    pub fn drain(&self) -> Vec<T> {
        self.inner.lock().expect("queue poisoned").drain(..).collect()
    }
}
