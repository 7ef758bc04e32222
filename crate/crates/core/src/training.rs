//! Windowed supervised training for both networks.
//!
//! Every window of `window_len` steps ending at `t` predicts the QoE at `t`.
//! A mini-batch is a run of up to `batch_size` consecutive windows of one
//! session. WaveNet evaluates such a run with a single causal pass over its
//! span, which gives the same outputs as evaluating each window alone once
//! `window_len` covers the receptive field. The LSTM runs the same windows
//! as a batch with state reset at each window start.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{derive_features, NormStats, SessionTrace, FEATURE_COUNT};
use crate::error::{QoeError, Result};
use crate::models::{ArchConfig, Lstm, Network, QoeModel, WaveNet};
use crate::nn::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub window_len: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window_len: 8,
            batch_size: 32,
            max_epochs: 100,
            learning_rate: 0.001,
            early_stop_patience: 10,
            validation_fraction: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(QoeError::invalid("window_len, batch_size and max_epochs must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(QoeError::invalid(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(QoeError::invalid("validation_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "window_len={} batch_size={} max_epochs={} learning_rate={} patience={} validation_fraction={} seed={}",
            self.window_len,
            self.batch_size,
            self.max_epochs,
            self.learning_rate,
            self.early_stop_patience,
            self.validation_fraction,
            self.seed
        )
    }
}

/// Windows of `w` steps ending at every `t` in `w-1 ..= T-1`, each paired
/// with the target at `t`.
pub fn make_windows(features: &Tensor, targets: &[f64], w: usize) -> Result<Vec<(Tensor, f64)>> {
    let (c, steps) = features.dims2()?;
    if targets.len() != steps {
        return Err(QoeError::shape(format!("{} targets for {steps} timesteps", targets.len())));
    }
    if w == 0 || steps < w {
        return Err(QoeError::invalid(format!("session of {steps} steps is shorter than window {w}")));
    }
    (w - 1..steps)
        .map(|t| {
            let mut data = Vec::with_capacity(c * w);
            for f in 0..c {
                data.extend_from_slice(&features.row(f)[t + 1 - w..=t]);
            }
            Ok((Tensor::from_vec(&[c, w], data)?, targets[t]))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_windows: usize,
    pub val_windows: usize,
    /// Sessions that were skipped, with the reason.
    pub warnings: Vec<String>,
}

impl TrainingLog {
    /// CSV with `#`-prefixed comment lines first.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("epoch,train_mse,val_mse,epoch_seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_mse, e.val_mse, e.epoch_seconds);
        }
        out
    }

    pub fn epoch_seconds(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.epoch_seconds).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: QoeModel,
    pub log: TrainingLog,
}

/// One normalized session ready for windowing.
struct Prepared {
    features: Tensor,
    targets: Vec<f64>,
}

/// `count` consecutive windows of session `session`, the first ending at `first_end`.
#[derive(Debug, Clone, Copy)]
struct Block {
    session: usize,
    first_end: usize,
    count: usize,
}

/// Normalized sessions and their mini-batch blocks, split into training and
/// validation sets.
pub struct WindowSet {
    sessions: Vec<Prepared>,
    train: Vec<Block>,
    val: Vec<Block>,
    window_len: usize,
    stats: NormStats,
    warnings: Vec<String>,
}

impl WindowSet {
    /// Fits normalization on `sessions`, cuts blocks and holds out a seeded
    /// fraction of them for validation.
    pub fn build(sessions: &[&SessionTrace], config: &TrainConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let mut warnings = Vec::new();
        let mut raw = Vec::new();
        for s in sessions {
            let Some(q) = s.qoe() else {
                warnings.push(format!("session '{}' has no QoE labels, skipped", s.session_id));
                continue;
            };
            if s.len() < config.window_len {
                warnings.push(format!(
                    "session '{}' has {} samples, fewer than the window of {}, skipped",
                    s.session_id,
                    s.len(),
                    config.window_len
                ));
                continue;
            }
            raw.push((derive_features(s)?, q));
        }
        if raw.is_empty() {
            return Err(QoeError::NoLabels(format!(
                "none of {} training sessions has labels and at least {} samples",
                sessions.len(),
                config.window_len
            )));
        }
        let feats: Vec<_> = raw.iter().map(|(f, _)| f).collect();
        let targets: Vec<&[f64]> = raw.iter().map(|(_, q)| q.as_slice()).collect();
        let stats = NormStats::fit(&feats, &targets)?;

        let mut prepared = Vec::with_capacity(raw.len());
        let mut blocks = Vec::new();
        for (i, (f, q)) in raw.iter().enumerate() {
            let features = stats.normalize(f)?.into_values();
            let targets: Vec<f64> = q.iter().map(|&v| stats.normalize_qoe(v)).collect();
            let steps = targets.len();
            let mut first_end = config.window_len - 1;
            while first_end < steps {
                let count = config.batch_size.min(steps - first_end);
                blocks.push(Block {
                    session: i,
                    first_end,
                    count,
                });
                first_end += count;
            }
            prepared.push(Prepared { features, targets });
        }

        rng.shuffle(&mut blocks);
        let n_val = if blocks.len() >= 2 {
            ((blocks.len() as f64 * config.validation_fraction).floor() as usize).min(blocks.len() - 1)
        } else {
            0
        };
        let val = blocks.split_off(blocks.len() - n_val);
        Ok(Self {
            sessions: prepared,
            train: blocks,
            val,
            window_len: config.window_len,
            stats,
            warnings,
        })
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn train_windows(&self) -> usize {
        self.train.iter().map(|b| b.count).sum()
    }

    pub fn val_windows(&self) -> usize {
        self.val.iter().map(|b| b.count).sum()
    }

    fn targets(&self, b: &Block) -> &[f64] {
        &self.sessions[b.session].targets[b.first_end..b.first_end + b.count]
    }

    /// Input columns `first_end - w + 1 .. first_end + count`, i.e. every
    /// step any window of the block reads.
    fn span(&self, b: &Block) -> Result<Tensor> {
        let start = b.first_end + 1 - self.window_len;
        self.sessions[b.session]
            .features
            .slice_cols(start, b.first_end + b.count)
    }

    /// `[4, count]` inputs at offset `s` of each window, for the LSTM.
    fn lstm_steps(&self, b: &Block) -> Result<Vec<Tensor>> {
        let f = &self.sessions[b.session].features;
        let w = self.window_len;
        (0..w)
            .map(|s| f.slice_cols(b.first_end + 1 - w + s, b.first_end + 1 - w + s + b.count))
            .collect()
    }
}

fn squared_error(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut sse = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            sse += d * d;
            2.0 * d / n
        })
        .collect();
    (sse, grad)
}

/// Predictions for every window of a block, plus gradients when `grads` is given.
fn run_block(network: &Network, set: &WindowSet, b: &Block, grads: Option<&mut [Tensor]>) -> Result<f64> {
    let target = set.targets(b);
    match network {
        Network::WaveNet(m) => wavenet_block(m, set, b, target, grads),
        Network::Lstm(m) => lstm_block(m, set, b, target, grads),
    }
}

fn wavenet_block(m: &WaveNet, set: &WindowSet, b: &Block, target: &[f64], grads: Option<&mut [Tensor]>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(set.span(b)?);
    let y = m.record_from(&mut tape, x, set.window_len - 1)?;
    let (sse, g) = squared_error(tape.value(y).data(), target);
    if let Some(grads) = grads {
        if sse.is_finite() {
            tape.backward(y, Tensor::from_vec(&[1, g.len()], g)?, grads)?;
        }
    }
    Ok(sse)
}

fn lstm_block(m: &Lstm, set: &WindowSet, b: &Block, target: &[f64], grads: Option<&mut [Tensor]>) -> Result<f64> {
    let (out, trace) = m.forward_windows(&set.lstm_steps(b)?)?;
    let (sse, g) = squared_error(&out, target);
    if let Some(grads) = grads {
        if sse.is_finite() {
            m.backward_windows(&trace, &g, grads)?;
        }
    }
    Ok(sse)
}

pub(crate) fn check_window(arch: &ArchConfig, config: &TrainConfig) -> Result<()> {
    if let ArchConfig::WaveNet(c) = arch {
        let rf = c.effective_receptive_field()?;
        if config.window_len < rf {
            return Err(QoeError::invalid(format!(
                "window_len {} is shorter than the WaveNet receptive field {rf}",
                config.window_len
            )));
        }
    }
    let features = match arch {
        ArchConfig::WaveNet(c) => c.input_features,
        ArchConfig::Lstm(c) => c.input_features,
    };
    if features != FEATURE_COUNT {
        return Err(QoeError::invalid(format!("models take {FEATURE_COUNT} input features, got {features}")));
    }
    Ok(())
}

/// Called after each epoch; returning `false` stops training.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochLog) -> bool;

/// Trains a freshly initialized network on the labeled `sessions`.
pub fn train(arch: &ArchConfig, sessions: &[&SessionTrace], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(arch, sessions, config, &mut |_| true)
}

pub fn train_with_hook(
    arch: &ArchConfig,
    sessions: &[&SessionTrace],
    config: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_window(arch, config)?;
    let mut master = SplitMix64::new(config.seed);
    let mut init_rng = master.fork();
    let mut split_rng = master.fork();
    let mut order_rng = master.fork();

    let set = WindowSet::build(sessions, config, &mut split_rng)?;
    let mut network = arch.build(&mut init_rng)?;
    let log = fit(&mut network, &set, config, &mut order_rng, hook)?;
    let metadata = format!("{} {}", arch.describe(), config.describe());
    Ok(TrainOutcome {
        model: QoeModel {
            network,
            stats: *set.stats(),
            window_len: config.window_len,
            metadata,
        },
        log,
    })
}

/// Optimizes `network` in place on a prepared window set and restores the
/// weights of the best validation epoch.
pub fn fit(
    network: &mut Network,
    set: &WindowSet,
    config: &TrainConfig,
    rng: &mut SplitMix64,
    hook: EpochHook<'_>,
) -> Result<TrainingLog> {
    let names = network.as_params().param_names();
    let mut adam = AdamState::new(
        network.as_params().params(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut log = TrainingLog {
        train_windows: set.train_windows(),
        val_windows: set.val_windows(),
        warnings: set.warnings.clone(),
        ..TrainingLog::default()
    };
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut sse = 0.0;
        let mut grads = network.as_params().zero_grads();
        for (batch, &bi) in order.iter().enumerate() {
            let block = &set.train[bi];
            for g in &mut grads {
                g.data_mut().fill(0.0);
            }
            let block_sse = run_block(network, set, block, Some(&mut grads))?;
            if !block_sse.is_finite() {
                return Err(QoeError::NonFiniteLoss { epoch, batch: batch + 1 });
            }
            sse += block_sse;
            let mut params = network.as_params_mut().params_mut();
            adam_step(&mut params, &grads, &names, &mut adam).map_err(|e| match e {
                QoeError::NonFinite(_) => QoeError::NonFiniteLoss { epoch, batch: batch + 1 },
                other => other,
            })?;
        }
        let train_mse = sse / set.train_windows().max(1) as f64;
        let val_mse = if set.val.is_empty() {
            train_mse
        } else {
            let mut val_sse = 0.0;
            for block in &set.val {
                val_sse += run_block(network, set, block, None)?;
            }
            val_sse / set.val_windows() as f64
        };
        if !val_mse.is_finite() {
            return Err(QoeError::NonFiniteLoss { epoch, batch: 0 });
        }
        let entry = EpochLog {
            epoch,
            train_mse,
            val_mse,
            epoch_seconds: started.elapsed().as_secs_f64(),
        };
        log.epochs.push(entry);

        if best.as_ref().map_or(true, |(b, _)| val_mse < *b) {
            best = Some((val_mse, network.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let keep_going = hook(&entry);
        if since_best >= config.early_stop_patience {
            log.stopped_early = true;
            break;
        }
        if !keep_going {
            break;
        }
    }
    if let Some((_, weights)) = best {
        *network = weights;
    }
    Ok(log)
}

/// Runs one training epoch over `set` without early stopping or validation
/// and returns its wall time in seconds. Used by the benchmarks.
pub fn timed_epoch(network: &mut Network, set: &WindowSet, adam: &mut AdamState) -> Result<f64> {
    let names = network.as_params().param_names();
    let started = Instant::now();
    let mut grads = network.as_params().zero_grads();
    for (batch, block) in set.train.iter().enumerate() {
        for g in &mut grads {
            g.data_mut().fill(0.0);
        }
        let sse = run_block(network, set, block, Some(&mut grads))?;
        if !sse.is_finite() {
            return Err(QoeError::NonFiniteLoss { epoch: 0, batch: batch + 1 });
        }
        let mut params = network.as_params_mut().params_mut();
        adam_step(&mut params, &grads, &names, adam)?;
    }
    Ok(started.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::models::{LstmConfig, WaveNetConfig};

    #[test]
    fn window_counts() {
        let f = Tensor::from_vec(&[4, 120], (0..480).map(|v| v as f64).collect()).unwrap();
        let q: Vec<f64> = (0..120).map(|v| v as f64).collect();
        assert_eq!(make_windows(&f.slice_cols(0, 8).unwrap(), &q[..8], 8).unwrap().len(), 1);
        let windows = make_windows(&f, &q, 8).unwrap();
        assert_eq!(windows.len(), 113);
        let (w, target) = &windows[0];
        assert_eq!(w.row(0), &(0..8).map(|v| v as f64).collect::<Vec<_>>()[..]);
        assert_eq!(*target, 7.0);
        assert!(make_windows(&f.slice_cols(0, 5).unwrap(), &q[..5], 8).is_err());
    }

    fn small_data() -> Vec<SessionTrace> {
        generate_synthetic(&SynthConfig {
            seed: 5,
            num_sessions: 6,
            duration_s: 40,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn blocks_cover_every_window_once() {
        let data = small_data();
        let refs: Vec<_> = data.iter().collect();
        let config = TrainConfig::default();
        let set = WindowSet::build(&refs, &config, &mut SplitMix64::new(1)).unwrap();
        assert_eq!(set.train_windows() + set.val_windows(), 6 * 33);
        let mut seen = std::collections::HashSet::new();
        for b in set.train.iter().chain(&set.val) {
            for t in b.first_end..b.first_end + b.count {
                assert!(seen.insert((b.session, t)));
            }
        }
    }

    #[test]
    fn shared_pass_equals_per_window_predictions() {
        let data = small_data();
        let refs: Vec<_> = data.iter().collect();
        let config = TrainConfig::default();
        let set = WindowSet::build(&refs, &config, &mut SplitMix64::new(1)).unwrap();
        let model = WaveNet::new(WaveNetConfig::default(), &mut SplitMix64::new(2)).unwrap();
        let b = set.train[0];
        let mut tape = Tape::new();
        let x = tape.input(set.span(&b).unwrap());
        let y = model.record(&mut tape, x).unwrap();
        let shared = &tape.value(y).data()[config.window_len - 1..];
        let f = &set.sessions[b.session].features;
        for (i, &p) in shared.iter().enumerate() {
            let t = b.first_end + i;
            let window = f.slice_cols(t + 1 - config.window_len, t + 1).unwrap();
            let alone = model.forward(&window).unwrap();
            assert!((alone[config.window_len - 1] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let data = small_data();
        let refs: Vec<_> = data.iter().collect();
        let config = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        for arch in [ArchConfig::WaveNet(WaveNetConfig::default()), ArchConfig::Lstm(LstmConfig::default())] {
            let a = train(&arch, &refs, &config).unwrap();
            let b = train(&arch, &refs, &config).unwrap();
            assert_eq!(a.model, b.model);
            assert_eq!(a.log.epochs.len(), 3);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let data = small_data();
        let refs: Vec<_> = data.iter().collect();
        let config = TrainConfig {
            max_epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let arch = ArchConfig::WaveNet(WaveNetConfig::default());
        let trained = train(&arch, &refs, &config).unwrap();
        let mut master = SplitMix64::new(config.seed);
        let initial = arch.build(&mut master.fork()).unwrap();
        assert_eq!(trained.model.network.as_params().params(), initial.as_params().params());
    }

    #[test]
    fn unlabeled_and_short_sessions() {
        let mut data = small_data();
        for s in &mut data {
            for x in &mut s.samples {
                x.qoe = None;
            }
        }
        let refs: Vec<_> = data.iter().collect();
        let arch = ArchConfig::Lstm(LstmConfig::default());
        let err = train(&arch, &refs, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, QoeError::NoLabels(_)));
    }

    #[test]
    fn window_shorter_than_receptive_field_is_rejected() {
        let data = small_data();
        let refs: Vec<_> = data.iter().collect();
        let config = TrainConfig {
            window_len: 4,
            ..TrainConfig::default()
        };
        assert!(train(&ArchConfig::WaveNet(WaveNetConfig::default()), &refs, &config).is_err());
        let lstm = train(
            &ArchConfig::Lstm(LstmConfig::default()),
            &refs,
            &TrainConfig {
                max_epochs: 1,
                ..config
            },
        );
        assert!(lstm.is_ok());
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainingLog {
            epochs: vec![EpochLog {
                epoch: 1,
                train_mse: 0.5,
                val_mse: 0.25,
                epoch_seconds: 0.125,
            }],
            ..TrainingLog::default()
        };
        let csv = log.to_csv(&["seed=1".into()]);
        assert_eq!(csv, "# seed=1\nepoch,train_mse,val_mse,epoch_seconds\n1,0.5,0.25,0.125\n");
    }
}
