//! Online inference: one prediction per arriving second, from a ring buffer
//! of the last `window_len` normalized feature vectors.

use std::collections::VecDeque;

use crate::data::features::{RebufferTracker, FEATURE_COUNT};
use crate::error::{QoeError, Result};
use crate::models::QoeModel;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamPrediction {
    pub t: u64,
    pub qoe_pred: f64,
    /// The window still contained zero padding from before the session start.
    pub warmup: bool,
}

/// Per-session streaming state. Independent states can live on different
/// threads; a single state is pushed from one place at a time.
#[derive(Debug, Clone)]
pub struct StreamState {
    ring: VecDeque<[f64; FEATURE_COUNT]>,
    tracker: RebufferTracker,
}

impl StreamState {
    pub fn new(window_len: usize) -> Result<Self> {
        if window_len == 0 {
            return Err(QoeError::invalid("stream window length must be positive"));
        }
        Ok(Self {
            ring: std::iter::repeat_n([0.0; FEATURE_COUNT], window_len).collect(),
            tracker: RebufferTracker::new(),
        })
    }

    pub fn for_model(model: &QoeModel) -> Result<Self> {
        Self::new(model.window_len)
    }

    pub fn window_len(&self) -> usize {
        self.ring.len()
    }

    pub fn samples_seen(&self) -> u64 {
        self.tracker.samples_seen()
    }

    /// Consumes one second of input. A non-finite `stsq` is rejected and
    /// leaves the state untouched.
    pub fn push_sample(&mut self, stsq: f64, pi: bool, model: &QoeModel) -> Result<StreamPrediction> {
        if !stsq.is_finite() {
            return Err(QoeError::NonFinite(format!(
                "stsq sample {} ({stsq})",
                self.samples_seen()
            )));
        }
        if model.window_len != self.window_len() {
            return Err(QoeError::invalid(format!(
                "model window {} does not match stream window {}",
                model.window_len,
                self.window_len()
            )));
        }
        let t = self.samples_seen();
        let (nr, tr) = self.tracker.push(pi);
        let raw = [stsq, if pi { 1.0 } else { 0.0 }, nr, tr];
        self.ring.pop_front();
        self.ring.push_back(model.stats.normalize_column(raw));

        let w = self.window_len();
        let mut data = vec![0.0; FEATURE_COUNT * w];
        for (j, column) in self.ring.iter().enumerate() {
            for (f, &v) in column.iter().enumerate() {
                data[f * w + j] = v;
            }
        }
        let normalized = model.network.predict_last(&Tensor::from_vec(&[FEATURE_COUNT, w], data)?)?;
        Ok(StreamPrediction {
            t,
            qoe_pred: model.stats.denormalize_qoe(normalized),
            warmup: t + 1 < w as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormStats;
    use crate::models::{ArchConfig, LstmConfig, WaveNetConfig};
    use crate::rng::SplitMix64;

    fn model(arch: ArchConfig, window_len: usize) -> QoeModel {
        QoeModel {
            network: arch.build(&mut SplitMix64::new(5)).unwrap(),
            stats: NormStats::identity(),
            window_len,
            metadata: String::new(),
        }
    }

    #[test]
    fn warmup_flag_follows_window() {
        let m = model(ArchConfig::WaveNet(WaveNetConfig::default()), 8);
        let mut s = StreamState::for_model(&m).unwrap();
        let flags: Vec<bool> = (0..10).map(|_| s.push_sample(50.0, false, &m).unwrap().warmup).collect();
        assert_eq!(flags, [true, true, true, true, true, true, true, false, false, false]);
    }

    #[test]
    fn non_finite_sample_leaves_state_alone() {
        let m = model(ArchConfig::Lstm(LstmConfig::default()), 6);
        let mut a = StreamState::for_model(&m).unwrap();
        let mut b = a.clone();
        a.push_sample(40.0, true, &m).unwrap();
        b.push_sample(40.0, true, &m).unwrap();
        assert!(a.push_sample(f64::NAN, false, &m).is_err());
        assert!(a.push_sample(f64::INFINITY, false, &m).is_err());
        assert_eq!(a.samples_seen(), 1);
        let pa = a.push_sample(45.0, false, &m).unwrap();
        let pb = b.push_sample(45.0, false, &m).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn window_mismatch_is_rejected() {
        let m = model(ArchConfig::WaveNet(WaveNetConfig::default()), 8);
        let mut s = StreamState::new(9).unwrap();
        assert!(s.push_sample(1.0, false, &m).is_err());
        assert!(StreamState::new(0).is_err());
    }
}
