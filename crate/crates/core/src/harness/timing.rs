//! Wall-clock measurement of pipeline stages.
//!
//! Uses the monotonic clock, which is unavailable on `wasm32-unknown-unknown`;
//! nothing in the browser build calls into this module.

use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Runs `thunk` once and returns its value with the elapsed milliseconds.
pub fn time_stage<T>(thunk: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = thunk();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

/// Mean and population standard deviation of a set of durations (ms).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

impl StageStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            samples: samples.len(),
        }
    }
}

/// Runs `thunk` `reps` times and summarises the durations.
pub fn repeat_stage<T>(reps: usize, mut thunk: impl FnMut() -> T) -> StageStats {
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let (out, ms) = time_stage(&mut thunk);
            std::hint::black_box(out);
            ms
        })
        .collect();
    StageStats::from_samples(&samples)
}
