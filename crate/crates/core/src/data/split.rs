//! Train/test split protocols.
//!
//! * `lfovia-loo`: one entry per session; training excludes every session
//!   sharing the test session's content id or playout-pattern id.
//! * `live-random80`: one entry per session; training is a seeded random
//!   `floor(0.8 * (N - 1))` of the other sessions.
//! * `holdout`: the last `test_count` sessions (by id) are tested against a
//!   single model trained on all the others.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::trace::SessionTrace;
use crate::error::{QoeError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitProtocol {
    LfoviaLoo,
    LiveRandom80,
    Holdout { test_count: usize },
}

impl SplitProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            SplitProtocol::LfoviaLoo => "lfovia-loo",
            SplitProtocol::LiveRandom80 => "live-random80",
            SplitProtocol::Holdout { .. } => "holdout",
        }
    }
}

impl fmt::Display for SplitProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitProtocol {
    type Err = QoeError;

    /// `holdout` parses with a test count of 0; callers fill it in.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lfovia-loo" => Ok(SplitProtocol::LfoviaLoo),
            "live-random80" => Ok(SplitProtocol::LiveRandom80),
            "holdout" => Ok(SplitProtocol::Holdout { test_count: 0 }),
            other => Err(QoeError::invalid(format!(
                "unknown split protocol '{other}' (expected lfovia-loo, live-random80 or holdout)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanEntry {
    pub test: String,
    pub train: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub protocol: SplitProtocol,
    pub seed: u64,
    pub entries: Vec<PlanEntry>,
}

impl SplitPlan {
    /// True when every entry trains on the same sessions, so one model serves all.
    pub fn is_shared(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].train == w[1].train)
    }

    pub fn entry(&self, test: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.test == test)
    }
}

pub fn build_split_plan(sessions: &[SessionTrace], protocol: SplitProtocol, seed: u64) -> Result<SplitPlan> {
    let mut ids: Vec<&SessionTrace> = sessions.iter().collect();
    ids.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    let mut seen = HashSet::new();
    for s in &ids {
        if !seen.insert(s.session_id.as_str()) {
            return Err(QoeError::invalid(format!("duplicate session id '{}'", s.session_id)));
        }
    }

    let entries = match protocol {
        SplitProtocol::LfoviaLoo => lfovia_entries(&ids)?,
        SplitProtocol::LiveRandom80 => live_entries(&ids, seed)?,
        SplitProtocol::Holdout { test_count } => holdout_entries(&ids, test_count)?,
    };
    Ok(SplitPlan {
        protocol,
        seed,
        entries,
    })
}

fn lfovia_entries(sessions: &[&SessionTrace]) -> Result<Vec<PlanEntry>> {
    let mut meta = Vec::with_capacity(sessions.len());
    for s in sessions {
        match (s.content_id.as_deref(), s.pattern_id.as_deref()) {
            (Some(c), Some(p)) if !c.is_empty() && !p.is_empty() => meta.push((s.session_id.as_str(), c, p)),
            _ => {
                return Err(QoeError::invalid(format!(
                    "lfovia-loo needs content_id and pattern_id, missing for session '{}'",
                    s.session_id
                )))
            }
        }
    }
    meta.iter()
        .map(|&(test, content, pattern)| {
            let train: Vec<String> = meta
                .iter()
                .filter(|&&(_, c, p)| c != content && p != pattern)
                .map(|&(id, _, _)| id.to_string())
                .collect();
            if train.is_empty() {
                return Err(QoeError::DegenerateSplit(format!(
                    "no session differs from '{test}' in both content and pattern"
                )));
            }
            Ok(PlanEntry {
                test: test.to_string(),
                train,
            })
        })
        .collect()
}

fn live_entries(sessions: &[&SessionTrace], seed: u64) -> Result<Vec<PlanEntry>> {
    let n = sessions.len();
    let keep = 4 * n.saturating_sub(1) / 5;
    if keep == 0 {
        return Err(QoeError::DegenerateSplit(format!(
            "live-random80 on {n} session(s) leaves floor(0.8 * {}) = 0 training sessions",
            n.saturating_sub(1)
        )));
    }
    let mut master = SplitMix64::new(seed);
    sessions
        .iter()
        .map(|test| {
            let mut rng = master.fork();
            let mut others: Vec<&str> = sessions
                .iter()
                .filter(|s| s.session_id != test.session_id)
                .map(|s| s.session_id.as_str())
                .collect();
            rng.shuffle(&mut others);
            others.truncate(keep);
            others.sort_unstable();
            Ok(PlanEntry {
                test: test.session_id.clone(),
                train: others.into_iter().map(String::from).collect(),
            })
        })
        .collect()
}

fn holdout_entries(sessions: &[&SessionTrace], test_count: usize) -> Result<Vec<PlanEntry>> {
    let n = sessions.len();
    if test_count == 0 || test_count >= n {
        return Err(QoeError::DegenerateSplit(format!(
            "holdout of {test_count} test session(s) out of {n} leaves no train or no test set"
        )));
    }
    let split = n - test_count;
    let train: Vec<String> = sessions[..split].iter().map(|s| s.session_id.clone()).collect();
    Ok(sessions[split..]
        .iter()
        .map(|s| PlanEntry {
            test: s.session_id.clone(),
            train: train.clone(),
        })
        .collect())
}
