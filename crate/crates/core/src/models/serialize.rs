//! Binary model files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "WQOE" | version u16 | kind u8 | config u32s | window_len u32
//! | normalization f64s | metadata (u32 len, UTF-8)
//! | tensor count u32 | per tensor: rank u8, extents u32, data f64
//! | CRC-32 of everything before it
//! ```
//!
//! WaveNet config is `k, n, d, L, features`; LSTM config is `hidden, features`.

use std::path::Path;

use super::{Lstm, LstmConfig, Network, QoeModel, WaveNet, WaveNetConfig};
use crate::data::{NormStats, FEATURE_COUNT};
use crate::error::{FormatError, QoeError, Result};

pub const MAGIC: &[u8; 4] = b"WQOE";
pub const FORMAT_VERSION: u16 = 1;

const KIND_WAVENET: u8 = 0;
const KIND_LSTM: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| QoeError::invalid(format!("{v} does not fit the model format")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &QoeModel) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    match &model.network {
        Network::WaveNet(m) => {
            let c = m.config();
            w.u8(KIND_WAVENET);
            for v in [c.filter_size, c.num_filters, c.dilation_base, c.num_layers, c.input_features] {
                w.u32(v)?;
            }
        }
        Network::Lstm(m) => {
            let c = m.config();
            w.u8(KIND_LSTM);
            w.u32(c.hidden_size)?;
            w.u32(c.input_features)?;
        }
    }
    w.u32(model.window_len)?;
    let s = &model.stats;
    w.u32(FEATURE_COUNT)?;
    for v in s.feature_mean.iter().chain(&s.feature_std) {
        w.f64(*v);
    }
    w.f64(s.qoe_mean);
    w.f64(s.qoe_std);
    w.u32(model.metadata.len())?;
    w.0.extend_from_slice(model.metadata.as_bytes());

    let params = model.network.as_params().params();
    w.u32(params.len())?;
    for t in params {
        w.u8(t.shape().len() as u8);
        for &e in t.shape() {
            w.u32(e)?;
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    Ok(w.0)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or(FormatError::Truncated)?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

fn malformed(msg: impl Into<String>) -> QoeError {
    QoeError::Format(FormatError::Malformed(msg.into()))
}

pub fn decode_model(bytes: &[u8]) -> Result<QoeModel> {
    let mut r = Reader { data: bytes, pos: 0 };
    let magic = r.take(MAGIC.len()).map_err(|_| {
        if MAGIC.starts_with(bytes) {
            FormatError::Truncated
        } else {
            FormatError::BadMagic
        }
    })?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }

    let kind = r.u8()?;
    let mut network = match kind {
        KIND_WAVENET => {
            let mut v = [0usize; 5];
            for slot in &mut v {
                *slot = r.u32()?;
            }
            let config = WaveNetConfig {
                filter_size: v[0],
                num_filters: v[1],
                dilation_base: v[2],
                num_layers: v[3],
                input_features: v[4],
            };
            if config.validate().is_err() {
                return Err(malformed(format!("invalid WaveNet config {v:?}")));
            }
            // The weights must fit in what is left; checked before allocating.
            if wavenet_size_hint(&config).map_or(true, |n| n > r.remaining() / 8) {
                return Err(FormatError::Truncated.into());
            }
            Network::WaveNet(WaveNet::zeros(config).map_err(|e| malformed(e.to_string()))?)
        }
        KIND_LSTM => {
            let config = LstmConfig {
                hidden_size: r.u32()?,
                input_features: r.u32()?,
            };
            let size = config
                .hidden_size
                .checked_add(config.input_features)
                .and_then(|w| w.checked_mul(4 * config.hidden_size));
            if config.validate().is_err() {
                return Err(malformed(format!("invalid LSTM config {config:?}")));
            }
            if size.map_or(true, |n| n > r.remaining() / 8) {
                return Err(FormatError::Truncated.into());
            }
            Network::Lstm(Lstm::zeros(config).map_err(|e| malformed(e.to_string()))?)
        }
        other => return Err(malformed(format!("unknown model kind {other}"))),
    };
    let window_len = r.u32()?;
    let features = r.u32()?;
    if features != FEATURE_COUNT {
        return Err(malformed(format!("{features} normalized features, expected {FEATURE_COUNT}")));
    }
    let mut stats = NormStats::identity();
    for v in stats.feature_mean.iter_mut().chain(stats.feature_std.iter_mut()) {
        *v = r.f64()?;
    }
    stats.qoe_mean = r.f64()?;
    stats.qoe_std = r.f64()?;
    let meta_len = r.u32()?;
    let metadata = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| malformed("metadata is not UTF-8"))?
        .to_string();

    let count = r.u32()?;
    let mut params = network.as_params_mut().params_mut();
    if count != params.len() {
        return Err(malformed(format!("{count} tensors, model has {}", params.len())));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        if shape != p.shape() {
            return Err(malformed(format!("tensor {i} has shape {shape:?}, expected {:?}", p.shape())));
        }
        for v in p.data_mut() {
            *v = r.f64()?;
        }
    }
    drop(params);

    let body_end = r.pos;
    let stored = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    if r.remaining() != 0 {
        return Err(malformed(format!("{} trailing bytes after checksum", r.remaining())));
    }
    stats.validate().map_err(|e| malformed(e.to_string()))?;
    if window_len == 0 {
        return Err(malformed("window length 0"));
    }
    if !network.as_params().params().iter().all(|t| t.is_finite()) {
        return Err(malformed("non-finite weights"));
    }
    Ok(QoeModel {
        network,
        stats,
        window_len,
        metadata,
    })
}

fn wavenet_size_hint(c: &WaveNetConfig) -> Option<usize> {
    c.num_filters
        .checked_mul(c.num_filters)?
        .checked_mul(c.filter_size)?
        .checked_mul(c.num_layers)
}

pub fn save_model(path: impl AsRef<Path>, model: &QoeModel) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<QoeModel> {
    decode_model(&std::fs::read(path)?)
}
