//! Model inputs: short-time quality, playback indicator, rebuffering count
//! and time since the last rebuffering.

use super::trace::SessionTrace;
use crate::error::{QoeError, Result};
use crate::nn::Tensor;

pub const FEATURE_COUNT: usize = 4;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = ["stsq", "pi", "nr", "tr"];

const STD_FLOOR: f64 = 1e-6;

/// Incremental rebuffering bookkeeping shared by the batch and streaming paths.
///
/// A rebuffering event starts at the first second of a run of `pi = 1`.
/// Time since the last rebuffering is 0 while stalled, `t - last stalled
/// second` afterwards, and `t + 1` before any stall.
#[derive(Debug, Clone)]
pub struct RebufferTracker {
    next_t: i64,
    events: u32,
    last_stalled: i64,
    prev_pi: bool,
}

impl Default for RebufferTracker {
    fn default() -> Self {
        Self {
            next_t: 0,
            events: 0,
            last_stalled: -1,
            prev_pi: false,
        }
    }
}

impl RebufferTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Consumes one second and returns `(nr, tr)` for it.
    pub fn push(&mut self, pi: bool) -> (f64, f64) {
        let t = self.next_t;
        self.next_t += 1;
        if pi {
            if !self.prev_pi {
                self.events += 1;
            }
            self.last_stalled = t;
        }
        self.prev_pi = pi;
        let tr = if pi { 0 } else { t - self.last_stalled };
        (self.events as f64, tr as f64)
    }

    pub fn samples_seen(&self) -> u64 {
        self.next_t as u64
    }
}

/// `[4, T]` feature rows in the order (stsq, pi, nr, tr), with the
/// statistics used to normalize them when they have been normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Tensor,
    stats: Option<NormStats>,
}

impl FeatureMatrix {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        let (rows, _) = values.dims2()?;
        if rows != FEATURE_COUNT {
            return Err(QoeError::shape(format!(
                "feature matrix needs {FEATURE_COUNT} rows, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values, stats: None })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, feature: usize) -> &[f64] {
        self.values.row(feature)
    }

    pub fn column(&self, t: usize) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|f| self.values.at2(f, t))
    }
}

/// Raw (unnormalized) features for a trace.
pub fn derive_features(trace: &SessionTrace) -> Result<FeatureMatrix> {
    trace.validate()?;
    let steps = trace.len();
    let mut data = vec![0.0; FEATURE_COUNT * steps];
    let mut tracker = RebufferTracker::new();
    for (t, s) in trace.samples.iter().enumerate() {
        let (nr, tr) = tracker.push(s.pi);
        data[t] = s.stsq;
        data[steps + t] = if s.pi { 1.0 } else { 0.0 };
        data[2 * steps + t] = nr;
        data[3 * steps + t] = tr;
    }
    FeatureMatrix::from_tensor(Tensor::from_vec(&[FEATURE_COUNT, steps], data)?)
}

/// Per-feature z-score statistics plus those of the QoE target, fitted on
/// training sessions only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub feature_mean: [f64; FEATURE_COUNT],
    pub feature_std: [f64; FEATURE_COUNT],
    pub qoe_mean: f64,
    pub qoe_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, STD_FLOOR);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt().max(STD_FLOOR))
}

impl NormStats {
    /// Mean 0, std 1 everywhere: normalization becomes the identity.
    pub fn identity() -> Self {
        Self {
            feature_mean: [0.0; FEATURE_COUNT],
            feature_std: [1.0; FEATURE_COUNT],
            qoe_mean: 0.0,
            qoe_std: 1.0,
        }
    }

    /// Population statistics over every timestep of every given session.
    pub fn fit(features: &[&FeatureMatrix], targets: &[&[f64]]) -> Result<Self> {
        if features.is_empty() {
            return Err(QoeError::invalid("cannot fit normalization on zero sessions"));
        }
        let mut feature_mean = [0.0; FEATURE_COUNT];
        let mut feature_std = [0.0; FEATURE_COUNT];
        for f in 0..FEATURE_COUNT {
            let values = features.iter().flat_map(|m| m.row(f).iter().copied());
            (feature_mean[f], feature_std[f]) = mean_std(values);
        }
        let (qoe_mean, qoe_std) = mean_std(targets.iter().flat_map(|q| q.iter().copied()));
        let stats = Self {
            feature_mean,
            feature_std,
            qoe_mean,
            qoe_std,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .feature_mean
            .iter()
            .chain(&self.feature_std)
            .chain([&self.qoe_mean, &self.qoe_std]);
        for v in all {
            if !v.is_finite() {
                return Err(QoeError::NonFinite("normalization statistics".into()));
            }
        }
        if self.feature_std.iter().chain([&self.qoe_std]).any(|&s| s <= 0.0) {
            return Err(QoeError::invalid("normalization std must be positive"));
        }
        Ok(())
    }

    pub fn normalize_column(&self, raw: [f64; FEATURE_COUNT]) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|f| (raw[f] - self.feature_mean[f]) / self.feature_std[f])
    }

    pub fn normalize(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.validate()?;
        let steps = features.steps();
        let mut data = features.values.data().to_vec();
        for f in 0..FEATURE_COUNT {
            for v in &mut data[f * steps..(f + 1) * steps] {
                *v = (*v - self.feature_mean[f]) / self.feature_std[f];
            }
        }
        Ok(FeatureMatrix {
            values: Tensor::from_vec(&[FEATURE_COUNT, steps], data)?,
            stats: Some(*self),
        })
    }

    pub fn normalize_qoe(&self, qoe: f64) -> f64 {
        (qoe - self.qoe_mean) / self.qoe_std
    }

    pub fn denormalize_qoe(&self, value: f64) -> f64 {
        value * self.qoe_std + self.qoe_mean
    }
}
