use crate::error::{QoeError, Result};

/// One second of playback.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: u32,
    /// Short-time subjective quality, 0-100.
    pub stsq: f64,
    /// Playback indicator: true while rebuffering.
    pub pi: bool,
    /// Subjective QoE ground truth, 0-100, when labeled.
    pub qoe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTrace {
    pub session_id: String,
    pub content_id: Option<String>,
    pub pattern_id: Option<String>,
    pub samples: Vec<Sample>,
}

impl SessionTrace {
    pub fn new(session_id: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self {
            session_id: session_id.into(),
            content_id: None,
            pattern_id: None,
            samples,
        }
    }

    /// Builds a trace from per-second columns, timestamps 0..T.
    pub fn from_columns(
        session_id: impl Into<String>,
        stsq: &[f64],
        pi: &[bool],
        qoe: Option<&[f64]>,
    ) -> Result<Self> {
        if stsq.len() != pi.len() || qoe.is_some_and(|q| q.len() != stsq.len()) {
            return Err(QoeError::Trace("column lengths differ".into()));
        }
        let samples = (0..stsq.len())
            .map(|i| Sample {
                t: i as u32,
                stsq: stsq[i],
                pi: pi[i],
                qoe: qoe.map(|q| q[i]),
            })
            .collect();
        let trace = Self::new(session_id, samples);
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True when every sample carries a QoE label.
    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.qoe.is_some())
    }

    pub fn qoe(&self) -> Option<Vec<f64>> {
        self.samples.iter().map(|s| s.qoe).collect()
    }

    pub fn stsq(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.stsq).collect()
    }

    pub fn pi(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.pi).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(QoeError::Trace(format!("session {} has no samples", self.session_id)));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.t as usize != i {
                return Err(QoeError::Trace(format!(
                    "session {}: timestamp gap, expected t={i} but found t={}",
                    self.session_id, s.t
                )));
            }
            check_score("stsq", s.stsq).map_err(|m| {
                QoeError::Trace(format!("session {} t={i}: {m}", self.session_id))
            })?;
            if let Some(q) = s.qoe {
                check_score("qoe", q).map_err(|m| {
                    QoeError::Trace(format!("session {} t={i}: {m}", self.session_id))
                })?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_score(name: &str, v: f64) -> std::result::Result<(), String> {
    if !v.is_finite() || !(0.0..=100.0).contains(&v) {
        return Err(format!("{name} value {v} out of range [0, 100]"));
    }
    Ok(())
}
