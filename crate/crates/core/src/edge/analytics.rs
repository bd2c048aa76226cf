//! Windowed statistics over recent samples.
//!
//! Arithmetic contract: sums run in chronological order, the mean is
//! `sum / k`, the standard deviation is the two-pass population form
//! `sqrt(sum((x - mean)^2) / k)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::Tick;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum AnalyticsError {
    #[error("window has no samples")]
    EmptyWindow,
    #[error("alpha {0} outside (0, 1]")]
    BadAlpha(f64),
}

/// Ring of the most recent `(tick, value)` samples for one `(device, property)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub device: u32,
    pub property: String,
    pub capacity: usize,
    entries: VecDeque<(Tick, f64)>,
}

impl SeriesWindow {
    pub fn new(device: u32, property: impl Into<String>, capacity: usize) -> Self {
        Self { device, property: property.into(), capacity: capacity.max(1), entries: VecDeque::new() }
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut w = Self::new(0, "x", values.len().max(1));
        for (i, v) in values.iter().enumerate() {
            w.push(i as Tick, *v);
        }
        w
    }

    /// Inserts keeping entries sorted by tick; evicts the oldest past capacity.
    pub fn push(&mut self, tick: Tick, value: f64) {
        let pos = self.entries.iter().rposition(|(t, _)| *t <= tick).map_or(0, |p| p + 1);
        self.entries.insert(pos, (tick, value));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest(&self) -> Option<(Tick, f64)> {
        self.entries.back().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(Tick, f64)> {
        self.entries.iter()
    }

    /// The most recent `min(n, len)` values, oldest first.
    pub fn recent(&self, n: usize) -> Vec<f64> {
        let skip = self.entries.len().saturating_sub(n);
        self.entries.iter().skip(skip).map(|(_, v)| *v).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
}

pub fn stats_of(values: &[f64]) -> Result<WindowStats, AnalyticsError> {
    if values.is_empty() {
        return Err(AnalyticsError::EmptyWindow);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k;
    Ok(WindowStats {
        count: values.len(),
        mean,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        stddev: var.sqrt(),
    })
}

/// Statistics over the most recent `n` samples.
pub fn window_stats(window: &SeriesWindow, n: usize) -> Result<WindowStats, AnalyticsError> {
    stats_of(&window.recent(n))
}

pub fn ewma_of(values: &[f64], alpha: f64) -> Result<f64, AnalyticsError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AnalyticsError::BadAlpha(alpha));
    }
    let (first, rest) = values.split_first().ok_or(AnalyticsError::EmptyWindow)?;
    Ok(rest.iter().fold(*first, |s, x| alpha * x + (1.0 - alpha) * s))
}

/// Exponentially weighted mean over the whole window: `s0 = x0`,
/// `s_i = alpha * x_i + (1 - alpha) * s_{i-1}`.
pub fn ewma(window: &SeriesWindow, alpha: f64) -> Result<f64, AnalyticsError> {
    ewma_of(&window.recent(window.len()), alpha)
}

/// Smoothing factor used by the rule language's `EWMA(path, n)`.
pub fn span_alpha(n: u32) -> f64 {
    2.0 / (f64::from(n) + 1.0)
}

pub const MIN_ANOMALY_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnomalyCheck {
    /// Fewer than five samples, or zero spread.
    Insufficient,
    Normal { z: f64 },
    Anomalous { z: f64, mean: f64, stddev: f64 },
}

/// z-score test of `new_value` against the window (which must not already
/// contain it). Anomalous iff `|new - mean| / stddev > z_threshold`.
pub fn detect_anomaly(window: &SeriesWindow, z_threshold: f64, new_value: f64) -> AnomalyCheck {
    if window.len() < MIN_ANOMALY_SAMPLES {
        return AnomalyCheck::Insufficient;
    }
    let Ok(s) = window_stats(window, window.len()) else {
        return AnomalyCheck::Insufficient;
    };
    if s.stddev <= 0.0 {
        return AnomalyCheck::Insufficient;
    }
    let z = (new_value - s.mean).abs() / s.stddev;
    if z > z_threshold {
        AnomalyCheck::Anomalous { z, mean: s.mean, stddev: s.stddev }
    } else {
        AnomalyCheck::Normal { z }
    }
}
