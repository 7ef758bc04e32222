//! The WaveNet-style QoE network, the LSTM baseline, receptive-field
//! arithmetic and the on-disk model format.

pub mod lstm;
pub mod serialize;
pub mod wavenet;

use std::fmt;
use std::str::FromStr;

pub use lstm::{Lstm, LstmConfig, LstmGrads};
pub use serialize::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use wavenet::{ResidualBlock, WaveNet, WaveNetConfig};

use crate::data::{derive_features, NormStats, SessionTrace, FEATURE_COUNT};
use crate::error::{QoeError, Result};
use crate::nn::{Parameterized, Tensor};

fn check_rf_args(k: usize, d: usize, layers: usize) -> Result<()> {
    if k == 0 || d == 0 || layers == 0 {
        return Err(QoeError::invalid(format!(
            "filter size, dilation base and layer count must be >= 1 (got k={k}, d={d}, L={layers})"
        )));
    }
    Ok(())
}

fn overflow() -> QoeError {
    QoeError::invalid("receptive field overflows")
}

/// `d^(L-1) * k`, the usual closed form for dilated stacks.
pub fn receptive_field(k: usize, d: usize, layers: usize) -> Result<usize> {
    check_rf_args(k, d, layers)?;
    d.checked_pow((layers - 1) as u32)
        .and_then(|p| p.checked_mul(k))
        .ok_or_else(overflow)
}

/// `1 + (k-1) * sum_{l<L} d^l`, the span an output actually depends on.
pub fn effective_receptive_field(k: usize, d: usize, layers: usize) -> Result<usize> {
    check_rf_args(k, d, layers)?;
    let mut sum = 0usize;
    let mut power = 1usize;
    for l in 0..layers {
        sum = sum.checked_add(power).ok_or_else(overflow)?;
        if l + 1 < layers {
            power = power.checked_mul(d).ok_or_else(overflow)?;
        }
    }
    (k - 1).checked_mul(sum).and_then(|s| s.checked_add(1)).ok_or_else(overflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    WaveNet,
    Lstm,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::WaveNet => "wavenet",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = QoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wavenet" => Ok(ModelKind::WaveNet),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(QoeError::invalid(format!("unknown model '{other}' (expected wavenet or lstm)"))),
        }
    }
}

/// Architecture hyperparameters of either network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchConfig {
    WaveNet(WaveNetConfig),
    Lstm(LstmConfig),
}

impl ArchConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::WaveNet => ArchConfig::WaveNet(WaveNetConfig::default()),
            ModelKind::Lstm => ArchConfig::Lstm(LstmConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ArchConfig::WaveNet(_) => ModelKind::WaveNet,
            ArchConfig::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ArchConfig::WaveNet(c) => c.param_count(),
            ArchConfig::Lstm(c) => c.param_count(),
        }
    }

    /// Freshly initialized network.
    pub fn build(&self, rng: &mut crate::rng::SplitMix64) -> Result<Network> {
        Ok(match self {
            ArchConfig::WaveNet(c) => Network::WaveNet(WaveNet::new(*c, rng)?),
            ArchConfig::Lstm(c) => Network::Lstm(Lstm::new(*c, rng)?),
        })
    }

    pub fn describe(&self) -> String {
        match self {
            ArchConfig::WaveNet(c) => format!(
                "model=wavenet filter_size={} num_filters={} dilation_base={} num_layers={}",
                c.filter_size, c.num_filters, c.dilation_base, c.num_layers
            ),
            ArchConfig::Lstm(c) => format!("model=lstm hidden_size={}", c.hidden_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    WaveNet(WaveNet),
    Lstm(Lstm),
}

impl Network {
    pub fn kind(&self) -> ModelKind {
        match self {
            Network::WaveNet(_) => ModelKind::WaveNet,
            Network::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn as_params(&self) -> &dyn Parameterized {
        match self {
            Network::WaveNet(m) => m,
            Network::Lstm(m) => m,
        }
    }

    pub fn as_params_mut(&mut self) -> &mut dyn Parameterized {
        match self {
            Network::WaveNet(m) => m,
            Network::Lstm(m) => m,
        }
    }

    /// Normalized prediction for the last column of a `[4, w]` window.
    pub fn predict_last(&self, window: &Tensor) -> Result<f64> {
        match self {
            Network::WaveNet(m) => m.predict_last(window),
            Network::Lstm(m) => m.predict_window(window),
        }
    }
}

/// A trained network with the statistics and window length it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct QoeModel {
    pub network: Network,
    pub stats: NormStats,
    pub window_len: usize,
    /// Free-form provenance (resolved config, seed), stored in the model file.
    pub metadata: String,
}

impl QoeModel {
    pub fn kind(&self) -> ModelKind {
        self.network.kind()
    }

    pub fn param_count(&self) -> usize {
        self.network.as_params().param_count()
    }

    /// Normalized `[4, T]` features of a session.
    pub fn session_features(&self, trace: &SessionTrace) -> Result<Tensor> {
        let raw = derive_features(trace)?;
        Ok(self.stats.normalize(&raw)?.into_values())
    }

    /// One QoE prediction per second, in score units, each equal to the
    /// prediction of the zero-padded window ending at that second. WaveNet
    /// gets this from a single causal pass over the features with `w - 1`
    /// zero columns prepended (its receptive field fits in the window); the
    /// LSTM runs one window per second.
    pub fn predict_session(&self, trace: &SessionTrace) -> Result<Vec<f64>> {
        let features = self.session_features(trace)?;
        let normalized = match &self.network {
            Network::WaveNet(m) => {
                let pad = self.window_len.saturating_sub(1);
                let mut out = m.forward(&left_pad(&features, pad)?)?;
                out.drain(..pad);
                out
            }
            Network::Lstm(m) => m.predict_windows(&features, self.window_len)?,
        };
        Ok(normalized.into_iter().map(|v| self.stats.denormalize_qoe(v)).collect())
    }
}

fn left_pad(features: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, steps) = features.dims2()?;
    let mut data = Vec::with_capacity(c * (steps + pad));
    for f in 0..c {
        data.extend(std::iter::repeat_n(0.0, pad));
        data.extend_from_slice(features.row(f));
    }
    Tensor::from_vec(&[c, steps + pad], data)
}

/// `[4, w]` window ending at column `t`, zero-filled before the start.
pub fn window_ending_at(features: &Tensor, t: usize, w: usize) -> Result<Tensor> {
    let (c, steps) = features.dims2()?;
    if c != FEATURE_COUNT || t >= steps || w == 0 {
        return Err(QoeError::shape(format!(
            "window of {w} ending at {t} from features {:?}",
            features.shape()
        )));
    }
    let mut data = vec![0.0; c * w];
    let first = (t + 1).saturating_sub(w);
    let pad = w - (t + 1 - first);
    for f in 0..c {
        data[f * w + pad..(f + 1) * w].copy_from_slice(&features.row(f)[first..=t]);
    }
    Tensor::from_vec(&[c, w], data)
}
