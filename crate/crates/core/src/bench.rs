//! Training and inference timing for WaveNet and the LSTM on identical data.
//!
//! Everything runs on the calling thread with `Instant` (monotonic). The
//! first 10% of iterations of every measurement are warmup and are dropped.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use crate::data::{SessionTrace, FEATURE_COUNT};
use crate::error::{QoeError, Result};
use crate::models::{ArchConfig, ModelKind, Network};
use crate::nn::{AdamConfig, AdamState, Tensor};
use crate::rng::SplitMix64;
use crate::training::{check_window, timed_epoch, TrainConfig, WindowSet};

pub const MIN_EPOCHS: usize = 5;
pub const MIN_PREDICTIONS: usize = 1000;

/// Published figures for the same comparison on other hardware, shown next
/// to the measured ones for direction only: (WaveNet, LSTM).
pub const REFERENCE_EPOCH_SECONDS: (f64, f64) = (0.083, 4.351);
pub const REFERENCE_INFERENCE_MS: (f64, f64) = (1.149, 1.996);

fn warmup_count(n: usize) -> usize {
    n.div_ceil(10)
}

/// Runs `f` `n` times after `ceil(n / 10)` untimed warmup calls and returns
/// the seconds taken by each timed call.
pub fn time_calls(n: usize, mut f: impl FnMut(usize)) -> Vec<f64> {
    let warm = warmup_count(n);
    for i in 0..warm {
        f(i);
    }
    (0..n)
        .map(|i| {
            let started = Instant::now();
            f(warm + i);
            started.elapsed().as_secs_f64()
        })
        .collect()
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub samples: usize,
}

impl LatencyStats {
    pub fn from_seconds(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(QoeError::invalid("no latency samples"));
        }
        let mut ms: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        Ok(Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: nearest_rank(&ms, 50.0),
            p95_ms: nearest_rank(&ms, 95.0),
            p99_ms: nearest_rank(&ms, 99.0),
            samples: ms.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingTiming {
    pub model: ModelKind,
    pub params: usize,
    pub epoch_seconds: Vec<f64>,
}

impl TrainingTiming {
    pub fn median(&self) -> f64 {
        median(&self.epoch_seconds)
    }
}

/// Median epoch wall time of each architecture on the same window set.
/// Every model sees identical blocks in identical order.
pub fn bench_training(
    sessions: &[&SessionTrace],
    archs: &[ArchConfig],
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<TrainingTiming>> {
    if epochs < MIN_EPOCHS {
        return Err(QoeError::invalid(format!(
            "training benchmark needs at least {MIN_EPOCHS} epochs, got {epochs}"
        )));
    }
    for arch in archs {
        check_window(arch, config)?;
    }
    let mut rng = SplitMix64::new(config.seed);
    let mut init_rng = rng.fork();
    let set = WindowSet::build(sessions, config, &mut rng.fork())?;
    archs
        .iter()
        .map(|arch| {
            let mut network = arch.build(&mut init_rng.fork())?;
            let adam_config = AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            };
            let mut adam = AdamState::new(network.as_params().params(), adam_config);
            for _ in 0..warmup_count(epochs) {
                timed_epoch(&mut network, &set, &mut adam)?;
            }
            let epoch_seconds = (0..epochs)
                .map(|_| timed_epoch(&mut network, &set, &mut adam))
                .collect::<Result<_>>()?;
            Ok(TrainingTiming {
                model: arch.kind(),
                params: network.as_params().param_count(),
                epoch_seconds,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct InferenceTiming {
    pub model: ModelKind,
    pub params: usize,
    pub latency: LatencyStats,
}

/// Latency of `n` single-window predictions per network, each on a window
/// not seen before. Windows are drawn up front so only the forward pass is
/// timed.
pub fn bench_inference(networks: &[&Network], window_len: usize, n: usize, seed: u64) -> Result<Vec<InferenceTiming>> {
    if n < MIN_PREDICTIONS {
        return Err(QoeError::invalid(format!(
            "inference benchmark needs at least {MIN_PREDICTIONS} predictions, got {n}"
        )));
    }
    if window_len == 0 {
        return Err(QoeError::invalid("window length must be positive"));
    }
    let mut rng = SplitMix64::new(seed);
    let total = n + warmup_count(n);
    let windows = (0..total)
        .map(|_| {
            let data = (0..FEATURE_COUNT * window_len).map(|_| rng.uniform(-2.0, 2.0)).collect();
            Tensor::from_vec(&[FEATURE_COUNT, window_len], data)
        })
        .collect::<Result<Vec<_>>>()?;
    networks
        .iter()
        .map(|network| {
            network.predict_last(&windows[0])?;
            let mut failure = None;
            let seconds = time_calls(n, |i| match network.predict_last(black_box(&windows[i])) {
                Ok(v) => {
                    black_box(v);
                }
                Err(e) => failure = Some(e),
            });
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(InferenceTiming {
                model: network.kind(),
                params: network.as_params().param_count(),
                latency: LatencyStats::from_seconds(&seconds)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: ModelKind,
    pub params: usize,
    pub epoch_s_median: Option<f64>,
    pub inference: Option<LatencyStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub environment: String,
}

pub const BENCH_CSV_HEADER: &str = "model,params,epoch_s_median,inf_ms_mean,inf_ms_p50,inf_ms_p95,inf_ms_p99";

impl BenchReport {
    /// One row per model, in the order models first appear.
    pub fn combine(training: &[TrainingTiming], inference: &[InferenceTiming], environment: String) -> Self {
        let mut rows: Vec<BenchRow> = Vec::new();
        let mut row_for = |model: ModelKind, params: usize| -> usize {
            match rows.iter().position(|r| r.model == model) {
                Some(i) => i,
                None => {
                    rows.push(BenchRow {
                        model,
                        params,
                        epoch_s_median: None,
                        inference: None,
                    });
                    rows.len() - 1
                }
            }
        };
        let mut epoch = Vec::new();
        for t in training {
            epoch.push((row_for(t.model, t.params), t.median()));
        }
        let mut latency = Vec::new();
        for t in inference {
            latency.push((row_for(t.model, t.params), t.latency));
        }
        for (i, e) in epoch {
            rows[i].epoch_s_median = Some(e);
        }
        for (i, l) in latency {
            rows[i].inference = Some(l);
        }
        Self { rows, environment }
    }

    pub fn row(&self, model: ModelKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// LSTM epoch time over WaveNet epoch time.
    pub fn training_speedup(&self) -> Option<f64> {
        let w = self.row(ModelKind::WaveNet)?.epoch_s_median?;
        let l = self.row(ModelKind::Lstm)?.epoch_s_median?;
        Some(l / w)
    }

    /// LSTM mean latency over WaveNet mean latency.
    pub fn inference_speedup(&self) -> Option<f64> {
        let w = self.row(ModelKind::WaveNet)?.inference?.mean_ms;
        let l = self.row(ModelKind::Lstm)?.inference?.mean_ms;
        Some(l / w)
    }

    /// CSV with `# ` comment lines (environment first, then `comments`).
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for line in self.environment.lines().chain(comments.iter().map(String::as_str)) {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "{BENCH_CSV_HEADER}");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let i = r.inference;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.model.name(),
                r.params,
                opt(r.epoch_s_median),
                opt(i.map(|l| l.mean_ms)),
                opt(i.map(|l| l.p50_ms)),
                opt(i.map(|l| l.p95_ms)),
                opt(i.map(|l| l.p99_ms)),
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let cell = |v: Option<f64>, digits: usize| v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into());
        let get = |m: ModelKind| self.row(m);
        let (w, l) = (get(ModelKind::WaveNet), get(ModelKind::Lstm));
        let ratio = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a / b);
        let epoch = |r: Option<&BenchRow>| r.and_then(|r| r.epoch_s_median);
        let lat = |r: Option<&BenchRow>, f: fn(&LatencyStats) -> f64| r.and_then(|r| r.inference.as_ref().map(f));

        let mut out = String::new();
        let _ = writeln!(out, "| | WaveNet | LSTM | LSTM / WaveNet |");
        let _ = writeln!(out, "|---|---:|---:|---:|");
        let params = |r: Option<&BenchRow>| r.map(|r| r.params.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "| Parameters | {} | {} | |", params(w), params(l));
        let _ = writeln!(
            out,
            "| Training time (s/epoch, median) | {} | {} | {} |",
            cell(epoch(w), 4),
            cell(epoch(l), 4),
            cell(ratio(epoch(l), epoch(w)), 2)
        );
        let rows: [(&str, fn(&LatencyStats) -> f64); 4] = [
            ("Inference time (ms, mean)", |s| s.mean_ms),
            ("Inference time (ms, p50)", |s| s.p50_ms),
            ("Inference time (ms, p95)", |s| s.p95_ms),
            ("Inference time (ms, p99)", |s| s.p99_ms),
        ];
        for (label, f) in rows {
            let _ = writeln!(
                out,
                "| {label} | {} | {} | {} |",
                cell(lat(w, f), 4),
                cell(lat(l, f), 4),
                cell(ratio(lat(l, f), lat(w, f)), 2)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Reference figures from other hardware (direction only): training {} vs {} s/epoch, inference {} vs {} ms.",
            REFERENCE_EPOCH_SECONDS.0, REFERENCE_EPOCH_SECONDS.1, REFERENCE_INFERENCE_MS.0, REFERENCE_INFERENCE_MS.1
        );
        let _ = writeln!(out);
        for line in self.environment.lines() {
            let _ = writeln!(out, "> {line}");
        }
        out
    }
}

pub fn environment_note(epochs: usize, predictions: usize) -> String {
    format!(
        "single-threaded, monotonic clock, {} {} build\n\
         training: median of {epochs} epochs after {} warmup epoch(s)\n\
         inference: {predictions} single-window predictions after {} warmup calls\n\
         the reference speedup came from parallel hardware; here both models share one core and one GEMM",
        std::env::consts::OS,
        std::env::consts::ARCH,
        warmup_count(epochs),
        warmup_count(predictions),
    )
}

/// Both default architectures timed on `sessions`: training with `config`,
/// inference on freshly initialized networks.
pub fn run_bench(sessions: &[&SessionTrace], config: &TrainConfig, epochs: usize, predictions: usize) -> Result<BenchReport> {
    let archs = [
        ArchConfig::default_for(ModelKind::WaveNet),
        ArchConfig::default_for(ModelKind::Lstm),
    ];
    let training = bench_training(sessions, &archs, config, epochs)?;
    let mut rng = SplitMix64::new(config.seed);
    let networks = archs.iter().map(|a| a.build(&mut rng.fork())).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Network> = networks.iter().collect();
    let inference = bench_inference(&refs, config.window_len, predictions, config.seed)?;
    Ok(BenchReport::combine(&training, &inference, environment_note(epochs, predictions)))
}
