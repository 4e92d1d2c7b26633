use std::collections::VecDeque;

use serde::Serialize;

/// Number of readings the rolling latency window keeps.
pub const DEFAULT_WINDOW: usize = 10;

/// Rolling window of per-cycle latencies in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    window: usize,
    samples: VecDeque<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySnapshot {
    pub window: usize,
    pub count: usize,
    pub mean_ms: Option<f64>,
    pub stddev_ms: Option<f64>,
    pub samples_ms: Vec<f64>,
}

impl Default for LatencyStats {
    fn default() -> Self {
        LatencyStats::new(DEFAULT_WINDOW)
    }
}

impl LatencyStats {
    pub fn new(window: usize) -> Self {
        assert!(window > 0, "latency window must hold at least one sample");
        LatencyStats {
            window,
            samples: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, ms: f64) {
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(ms);
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        summarize(self.samples.iter().copied()).map(|s| s.0)
    }

    /// Sample standard deviation; needs two readings.
    pub fn stddev(&self) -> Option<f64> {
        summarize(self.samples.iter().copied()).and_then(|s| s.1)
    }

    pub fn snapshot(&self) -> LatencySnapshot {
        LatencySnapshot {
            window: self.window,
            count: self.samples.len(),
            mean_ms: self.mean(),
            stddev_ms: self.stddev(),
            samples_ms: self.samples.iter().copied().collect(),
        }
    }
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn summarize<I: IntoIterator<Item = f64>>(values: I) -> Option<(f64, Option<f64>)> {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| {
        let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Some((mean, sd))
}
