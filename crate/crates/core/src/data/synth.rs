//! Seeded synthetic sessions with a fixed recursive QoE oracle.
//!
//! Generation, per session `i` (session seeds come from one master
//! [`SplitMix64`] seeded with the config seed, one draw per session):
//!
//! 1. `level ~ U[40, 90)`, `value = level`.
//! 2. For each second: if a stall is in progress it continues; otherwise,
//!    if the previous second was playback, a stall starts with probability
//!    `0.05 * stall_intensity` and lasts `1 + below(8)` seconds.
//! 3. While playing, with probability 0.05 the level jumps to `U[20, 95)`
//!    (a bitrate switch); then `value += 0.15 * (level - value) + U[-1.5, 1.5)`
//!    clamped to [20, 95]. The value is frozen during stalls. STSQ is `value`.
//! 4. QoE follows [`oracle_qoe`].

use super::features::RebufferTracker;
use super::trace::{Sample, SessionTrace};
use crate::error::{QoeError, Result};
use crate::rng::SplitMix64;

pub const ORACLE_ALPHA: f64 = 0.8;
pub const ORACLE_STALL_PENALTY: f64 = 40.0;
pub const ORACLE_RECENCY_PENALTY: f64 = 20.0;
pub const ORACLE_RECENCY_SECONDS: f64 = 15.0;

const STALL_RATE_PER_SECOND: f64 = 0.05;
const MAX_STALL_SECONDS: u64 = 8;
const LEVEL_SHIFT_PROB: f64 = 0.05;
const STSQ_MIN: f64 = 20.0;
const STSQ_MAX: f64 = 95.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_sessions: usize,
    pub duration_s: usize,
    pub stall_intensity: f64,
    pub num_contents: usize,
    pub num_patterns: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_sessions: 250,
            duration_s: 120,
            stall_intensity: 0.3,
            num_contents: 6,
            num_patterns: 6,
        }
    }
}

/// `qoe_0 = stsq_0`, then
/// `qoe_t = a*qoe_{t-1} + (1-a)*(stsq_t - P*pi_t - R*max(0, 1 - tr_t/tau))`
/// clamped to [0, 100].
pub fn oracle_qoe(stsq: &[f64], pi: &[bool]) -> Vec<f64> {
    let mut tracker = RebufferTracker::new();
    let mut out = Vec::with_capacity(stsq.len());
    for (t, (&s, &p)) in stsq.iter().zip(pi).enumerate() {
        let (_, tr) = tracker.push(p);
        let q = if t == 0 {
            s
        } else {
            let stall = if p { ORACLE_STALL_PENALTY } else { 0.0 };
            let recency = ORACLE_RECENCY_PENALTY * (1.0 - tr / ORACLE_RECENCY_SECONDS).max(0.0);
            let instant = s - stall - recency;
            ORACLE_ALPHA * out[t - 1] + (1.0 - ORACLE_ALPHA) * instant
        };
        out.push(q.clamp(0.0, 100.0));
    }
    out
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<SessionTrace>> {
    if !(0.0..=1.0).contains(&config.stall_intensity) {
        return Err(QoeError::invalid(format!(
            "stall intensity {} outside [0, 1]",
            config.stall_intensity
        )));
    }
    if config.duration_s < 30 {
        return Err(QoeError::invalid(format!(
            "duration {} s is below the 30 s minimum",
            config.duration_s
        )));
    }
    if config.num_sessions == 0 || config.num_contents == 0 || config.num_patterns == 0 {
        return Err(QoeError::invalid("sessions, contents and patterns must be >= 1"));
    }
    let mut master = SplitMix64::new(config.seed);
    let width = config.num_sessions.saturating_sub(1).to_string().len().max(4);
    (0..config.num_sessions)
        .map(|i| {
            let mut rng = master.fork();
            let (stsq, pi) = simulate_session(&mut rng, config.duration_s, config.stall_intensity);
            let qoe = oracle_qoe(&stsq, &pi);
            let samples = (0..config.duration_s)
                .map(|t| Sample {
                    t: t as u32,
                    stsq: stsq[t],
                    pi: pi[t],
                    qoe: Some(qoe[t]),
                })
                .collect();
            Ok(SessionTrace {
                session_id: format!("s{i:0width$}"),
                content_id: Some(format!("c{}", i % config.num_contents)),
                pattern_id: Some(format!("p{}", (i / config.num_contents) % config.num_patterns)),
                samples,
            })
        })
        .collect()
}

fn simulate_session(rng: &mut SplitMix64, duration: usize, intensity: f64) -> (Vec<f64>, Vec<bool>) {
    let stall_rate = STALL_RATE_PER_SECOND * intensity;
    let mut level = rng.uniform(40.0, 90.0);
    let mut value = level;
    let mut stall_left = 0u64;
    let mut prev_pi = false;
    let mut stsq = Vec::with_capacity(duration);
    let mut pi = Vec::with_capacity(duration);
    for _ in 0..duration {
        let stalled = if stall_left > 0 {
            stall_left -= 1;
            true
        } else if !prev_pi && rng.bernoulli(stall_rate) {
            stall_left = rng.below(MAX_STALL_SECONDS);
            true
        } else {
            false
        };
        if !stalled {
            if rng.bernoulli(LEVEL_SHIFT_PROB) {
                level = rng.uniform(STSQ_MIN, STSQ_MAX);
            }
            value += 0.15 * (level - value) + rng.uniform(-1.5, 1.5);
            value = value.clamp(STSQ_MIN, STSQ_MAX);
        }
        stsq.push(value);
        pi.push(stalled);
        prev_pi = stalled;
    }
    (stsq, pi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, intensity: f64) -> SynthConfig {
        SynthConfig {
            seed,
            num_sessions: 8,
            duration_s: 60,
            stall_intensity: intensity,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_intensity_never_stalls() {
        let sessions = generate_synthetic(&small(5, 0.0)).unwrap();
        assert!(sessions.iter().all(|s| s.samples.iter().all(|x| !x.pi)));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_synthetic(&small(9, 0.5)).unwrap(), generate_synthetic(&small(9, 0.5)).unwrap());
        assert_ne!(generate_synthetic(&small(9, 0.5)).unwrap(), generate_synthetic(&small(10, 0.5)).unwrap());
    }

    #[test]
    fn ranges_and_run_lengths() {
        let sessions = generate_synthetic(&small(3, 1.0)).unwrap();
        let mut saw_stall = false;
        for s in &sessions {
            s.validate().unwrap();
            let pi = s.pi();
            let mut run = 0;
            for &p in &pi {
                if p {
                    run += 1;
                    saw_stall = true;
                } else {
                    assert!(run <= 8);
                    run = 0;
                }
            }
            for x in &s.samples {
                assert!((20.0..=95.0).contains(&x.stsq));
                assert!((0.0..=100.0).contains(&x.qoe.unwrap()));
            }
        }
        assert!(saw_stall);
    }

    #[test]
    fn invalid_arguments() {
        assert!(generate_synthetic(&small(1, 1.5)).is_err());
        assert!(generate_synthetic(&SynthConfig { duration_s: 29, ..small(1, 0.1) }).is_err());
    }

    #[test]
    fn oracle_on_hand_built_trace() {
        // Hand evaluation; tr = 1, 2, 0, 0, 1, 2 (t + 1 before the first stall):
        //   q0 = 60
        //   q1 = 0.8*60 + 0.2*(62 - 20*(1 - 2/15))     = 56.933333...
        //   q2 = 0.8*q1 + 0.2*(62 - 40 - 20)            = 45.946666...
        //   q3 = 0.8*q2 + 0.2*(62 - 40 - 20)            = 37.157333...
        //   q4 = 0.8*q3 + 0.2*(70 - 20*(1 - 1/15))     = 39.992533...
        //   q5 = 0.8*q4 + 0.2*(70 - 20*(1 - 2/15))     = 42.52736
        let stsq = [60.0, 62.0, 62.0, 62.0, 70.0, 70.0];
        let pi = [false, false, true, true, false, false];
        let expected = [
            60.0,
            56.933_333_333_333_34,
            45.946_666_666_666_67,
            37.157_333_333_333_34,
            39.992_533_333_333_34,
            42.527_36,
        ];
        let got = oracle_qoe(&stsq, &pi);
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn oracle_clamps() {
        let q = oracle_qoe(&[0.0; 10], &[true; 10]);
        assert!(q.iter().all(|&v| v == 0.0));
    }
}
