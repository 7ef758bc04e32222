//! Correlation and error metrics, per-session evaluation and reports.

use std::fmt::Write as _;

use crate::data::{SessionTrace, SplitPlan};
use crate::error::{QoeError, Result};
use crate::models::QoeModel;

/// A correlation value; `degenerate` marks a constant input, reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

fn check_pair(x: &[f64], y: &[f64], min_len: usize, what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(QoeError::shape(format!("{what}: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < min_len {
        return Err(QoeError::invalid(format!("{what} needs at least {min_len} samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(QoeError::NonFinite(format!("{what} input")));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn pearson(x: &[f64], y: &[f64]) -> Correlation {
    // tested directly: the rounded mean of a constant vector can miss its value
    if is_constant(x) || is_constant(y) {
        return Correlation {
            value: 0.0,
            degenerate: true,
        };
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Correlation {
            value: 0.0,
            degenerate: true,
        };
    }
    Correlation {
        value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Pearson linear correlation.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y, 2, "pcc")?;
    Ok(pearson(x, y))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank-order correlation.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y, 2, "srocc")?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1, "rmse")?;
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionMetrics {
    pub session_id: String,
    pub pcc: f64,
    pub srocc: f64,
    pub rmse: f64,
    pub samples: usize,
    pub degenerate: bool,
}

impl SessionMetrics {
    pub fn compute(session_id: &str, truth: &[f64], pred: &[f64]) -> Result<Self> {
        let p = pcc(truth, pred)?;
        let s = srocc(truth, pred)?;
        Ok(Self {
            session_id: session_id.to_string(),
            pcc: p.value,
            srocc: s.value,
            rmse: rmse(truth, pred)?,
            samples: truth.len(),
            degenerate: p.degenerate || s.degenerate,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub pcc: f64,
    pub srocc: f64,
    pub rmse: f64,
}

/// Per-session predictions kept for the prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionPredictions {
    pub session_id: String,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by session id.
    pub sessions: Vec<SessionMetrics>,
    pub predictions: Vec<SessionPredictions>,
    pub warnings: Vec<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl EvalReport {
    pub fn from_predictions(mut predictions: Vec<SessionPredictions>, warnings: Vec<String>) -> Result<Self> {
        predictions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let sessions = predictions
            .iter()
            .map(|p| SessionMetrics::compute(&p.session_id, &p.truth, &p.pred))
            .collect::<Result<_>>()?;
        Ok(Self {
            sessions,
            predictions,
            warnings,
        })
    }

    fn column(&self, f: fn(&SessionMetrics) -> f64) -> Vec<f64> {
        self.sessions.iter().map(f).collect()
    }

    /// Unweighted mean over sessions.
    pub fn mean(&self) -> Option<Aggregate> {
        (!self.sessions.is_empty()).then(|| Aggregate {
            pcc: mean(&self.column(|s| s.pcc)),
            srocc: mean(&self.column(|s| s.srocc)),
            rmse: mean(&self.column(|s| s.rmse)),
        })
    }

    pub fn median(&self) -> Option<Aggregate> {
        (!self.sessions.is_empty()).then(|| Aggregate {
            pcc: median(self.column(|s| s.pcc)),
            srocc: median(self.column(|s| s.srocc)),
            rmse: median(self.column(|s| s.rmse)),
        })
    }

    pub fn degenerate_sessions(&self) -> Vec<&str> {
        self.sessions.iter().filter(|s| s.degenerate).map(|s| s.session_id.as_str()).collect()
    }

    /// `session_id,pcc,srocc,rmse,samples,degenerate` rows followed by
    /// `*mean*` and `*median*` rows; `comments` go first as `#` lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("session_id,pcc,srocc,rmse,samples,degenerate\n");
        for s in &self.sessions {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.session_id, s.pcc, s.srocc, s.rmse, s.samples, s.degenerate as u8
            );
        }
        let total: usize = self.sessions.iter().map(|s| s.samples).sum();
        for (label, agg) in [("*mean*", self.mean()), ("*median*", self.median())] {
            if let Some(a) = agg {
                let _ = writeln!(out, "{label},{},{},{},{total},", a.pcc, a.srocc, a.rmse);
            }
        }
        out
    }

    /// `session_id,t,qoe_true,qoe_pred`.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("session_id,t,qoe_true,qoe_pred\n");
        for p in &self.predictions {
            for (t, (a, b)) in p.truth.iter().zip(&p.pred).enumerate() {
                let _ = writeln!(out, "{},{t},{a},{b}", p.session_id);
            }
        }
        out
    }

    /// Fixed-width summary for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.sessions.iter().map(|s| s.session_id.len()).max().unwrap_or(0).max(10);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>7}", "session", "PCC", "SROCC", "RMSE", "T");
        for s in &self.sessions {
            let flag = if s.degenerate { "  (degenerate)" } else { "" };
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>7}{flag}",
                s.session_id, s.pcc, s.srocc, s.rmse, s.samples
            );
        }
        for (label, agg) in [("mean", self.mean()), ("median", self.median())] {
            if let Some(a) = agg {
                let _ = writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}", label, a.pcc, a.srocc, a.rmse);
            }
        }
        out
    }
}

/// Predicts one labeled session with `model`.
pub fn predict_labeled(model: &QoeModel, trace: &SessionTrace) -> Result<Option<SessionPredictions>> {
    let Some(truth) = trace.qoe() else {
        return Ok(None);
    };
    Ok(Some(SessionPredictions {
        session_id: trace.session_id.clone(),
        truth,
        pred: model.predict_session(trace)?,
    }))
}

/// Evaluates every plan entry's test session with the model `model_for`
/// returns for that entry. Unlabeled or too-short test sessions are skipped
/// with a warning.
pub fn evaluate<'m>(
    plan: &SplitPlan,
    sessions: &[SessionTrace],
    mut model_for: impl FnMut(&crate::data::PlanEntry) -> Result<&'m QoeModel>,
) -> Result<EvalReport> {
    let mut predictions = Vec::new();
    let mut warnings = Vec::new();
    for entry in &plan.entries {
        let trace = sessions
            .iter()
            .find(|s| s.session_id == entry.test)
            .ok_or_else(|| QoeError::invalid(format!("plan names unknown session '{}'", entry.test)))?;
        if trace.len() < 2 {
            warnings.push(format!("session '{}' has fewer than 2 samples, skipped", trace.session_id));
            continue;
        }
        let model = model_for(entry)?;
        match predict_labeled(model, trace)? {
            Some(p) => predictions.push(p),
            None => warnings.push(format!("session '{}' has no QoE labels, skipped", trace.session_id)),
        }
    }
    EvalReport::from_predictions(predictions, warnings)
}
