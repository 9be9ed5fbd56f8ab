//! Wall-clock timing: warmup, repetitions, median and interquartile spread.
//!
//! Every timing figure reported by this workspace is measured here, on the
//! monotonic clock.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const MIN_REPETITIONS: usize = 5;
pub const DEFAULT_WARMUP: usize = 1;

#[derive(Debug, Clone, Copy)]
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn elapsed_s(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Where a measurement was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub host: String,
    pub cores: usize,
    pub os: String,
    pub arch: String,
    pub build_profile: String,
    pub avx2: bool,
}

impl EnvFingerprint {
    pub fn capture() -> Self {
        let host = std::env::var("HOSTNAME")
            .ok()
            .filter(|h| !h.is_empty())
            .or_else(|| {
                std::fs::read_to_string("/etc/hostname")
                    .ok()
                    .map(|h| h.trim().to_owned())
                    .filter(|h| !h.is_empty())
            })
            .unwrap_or_else(|| "unknown".to_owned());
        #[cfg(target_arch = "x86_64")]
        let avx2 = std::is_x86_feature_detected!("avx2");
        #[cfg(not(target_arch = "x86_64"))]
        let avx2 = false;
        Self {
            host,
            cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.to_owned(),
            arch: std::env::consts::ARCH.to_owned(),
            build_profile: if cfg!(debug_assertions) { "debug" } else { "release" }.to_owned(),
            avx2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub label: String,
    pub warmup: usize,
    pub repetitions: usize,
    /// Seconds per timed repetition, in run order.
    pub times_s: Vec<f64>,
    pub median_s: f64,
    /// Interquartile range.
    pub iqr_s: f64,
    pub mean_s: f64,
    pub std_dev_s: f64,
    pub environment: EnvFingerprint,
}

impl TimingSample {
    pub fn from_times(label: impl Into<String>, warmup: usize, times_s: Vec<f64>) -> Self {
        let mut sorted = times_s.clone();
        sorted.sort_by(f64::total_cmp);
        let n = times_s.len();
        let mean_s = times_s.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            times_s.iter().map(|t| (t - mean_s).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            label: label.into(),
            warmup,
            repetitions: n,
            median_s: quantile(&sorted, 0.5),
            iqr_s: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
            mean_s,
            std_dev_s: var.sqrt(),
            times_s,
            environment: EnvFingerprint::capture(),
        }
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TimingError<E> {
    #[error("at least {MIN_REPETITIONS} repetitions are required, got {0}")]
    TooFewRepetitions(usize),
    #[error("'{label}' failed on repetition {repetition}: {source}")]
    Body {
        label: String,
        repetition: usize,
        source: E,
    },
}

impl From<TimingError<Error>> for Error {
    fn from(e: TimingError<Error>) -> Self {
        match e {
            TimingError::TooFewRepetitions(n) => {
                Error::Config(format!("at least {MIN_REPETITIONS} repetitions are required, got {n}"))
            }
            TimingError::Body { source, .. } => source,
        }
    }
}

/// Runs `setup` once, then `body` `warmup + repetitions` times, timing each
/// call and discarding the warmup calls. Returns the sample and the output
/// of the last call.
pub fn time_fn<S, T, E>(
    label: &str,
    setup: impl FnOnce() -> Result<S, E>,
    mut body: impl FnMut(&mut S) -> Result<T, E>,
    warmup: usize,
    repetitions: usize,
) -> Result<(TimingSample, T), TimingError<E>> {
    if repetitions < MIN_REPETITIONS {
        return Err(TimingError::TooFewRepetitions(repetitions));
    }
    let warmup = warmup.max(DEFAULT_WARMUP);
    let wrap = |repetition, source| TimingError::Body {
        label: label.to_owned(),
        repetition,
        source,
    };
    let mut state = setup().map_err(|e| wrap(0, e))?;
    let mut times = Vec::with_capacity(repetitions);
    let mut last = None;
    for rep in 0..warmup + repetitions {
        let clock = Stopwatch::start();
        let out = body(&mut state).map_err(|e| wrap(rep, e))?;
        let elapsed = clock.elapsed_s();
        if rep >= warmup {
            times.push(elapsed);
        }
        last = Some(out);
    }
    let last = last.expect("at least one repetition ran");
    Ok((TimingSample::from_times(label, warmup, times), last))
}

/// Like [`time_fn`] for several states at once, but interleaved: each round
/// runs `body` once on every state in order, so slow drift in machine speed
/// lands on all of them alike. Returns one sample and last output per state.
pub fn time_round_robin<S, T, E>(
    labels: &[String],
    mut states: Vec<S>,
    mut body: impl FnMut(&mut S) -> Result<T, E>,
    warmup: usize,
    repetitions: usize,
) -> Result<Vec<(TimingSample, T)>, TimingError<E>> {
    if repetitions < MIN_REPETITIONS {
        return Err(TimingError::TooFewRepetitions(repetitions));
    }
    assert_eq!(labels.len(), states.len(), "one label per state");
    let warmup = warmup.max(DEFAULT_WARMUP);
    let mut times = vec![Vec::with_capacity(repetitions); states.len()];
    let mut last: Vec<Option<T>> = states.iter().map(|_| None).collect();
    for rep in 0..warmup + repetitions {
        for (i, state) in states.iter_mut().enumerate() {
            let clock = Stopwatch::start();
            let out = body(state).map_err(|source| TimingError::Body {
                label: labels[i].clone(),
                repetition: rep,
                source,
            })?;
            let elapsed = clock.elapsed_s();
            if rep >= warmup {
                times[i].push(elapsed);
            }
            last[i] = Some(out);
        }
    }
    Ok(labels
        .iter()
        .zip(times)
        .zip(last)
        .map(|((label, t), out)| {
            (
                TimingSample::from_times(label.clone(), warmup, t),
                out.expect("at least one repetition ran"),
            )
        })
        .collect())
}
