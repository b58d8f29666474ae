//! Learning-rate decay and mini-batch size schedules.
//!
//! Epochs are 1-based throughout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

/// Number of stages in a dynamic batch-size schedule built from shorthand.
pub const DYNAMIC_STAGES: usize = 5;

/// `floor(fraction · total)` with a guard against representation error
/// (e.g. `0.29 · 100 = 28.999…`).
fn boundary(fraction: f64, total: usize) -> usize {
    (fraction * total as f64 + 1e-9).floor() as usize
}

/// Multi-step learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub total_epochs: usize,
    /// Fractions of the run after which the rate decays, strictly increasing in (0, 1).
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
}

impl LrSchedule {
    /// Decay by 10x at 50% and 75% of training.
    pub fn multi_step(initial_lr: f64, total_epochs: usize) -> Result<Self> {
        Self::new(initial_lr, total_epochs, vec![0.5, 0.75], 0.1)
    }

    pub fn new(initial_lr: f64, total_epochs: usize, decay_points: Vec<f64>, decay_factor: f64) -> Result<Self> {
        let s = Self { initial_lr, total_epochs, decay_points, decay_factor };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return usage(format!("initial learning rate must be positive, got {}", self.initial_lr));
        }
        if self.total_epochs == 0 {
            return usage("total epochs must be >= 1");
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return usage(format!("decay factor must be positive, got {}", self.decay_factor));
        }
        let mut prev = 0.0;
        for &p in &self.decay_points {
            if !(p > prev && p < 1.0) {
                return usage(format!(
                    "decay points must be strictly increasing in (0, 1), got {:?}",
                    self.decay_points
                ));
            }
            prev = p;
        }
        Ok(())
    }

    /// First epoch run at each decayed rate.
    pub fn decay_epochs(&self) -> Vec<usize> {
        self.decay_points.iter().map(|&p| boundary(p, self.total_epochs) + 1).collect()
    }

    /// Inclusive epoch ranges over which the learning rate is constant.
    /// Segments can be empty for very short runs.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 1;
        for first in self.decay_epochs() {
            out.push((start, first - 1));
            start = first;
        }
        out.push((start, self.total_epochs));
        out
    }

    fn check_epoch(&self, epoch: usize) -> Result<()> {
        if epoch == 0 || epoch > self.total_epochs {
            return usage(format!("epoch {epoch} outside 1..={}", self.total_epochs));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.check_epoch(epoch)?;
        let passed = self.decay_epochs().iter().filter(|&&d| epoch >= d).count();
        Ok(self.initial_lr * self.decay_factor.powi(passed as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Fixed,
    /// Stage sequence spread over the whole run.
    Dynamic,
    /// Stage sequence restarted within every constant-learning-rate segment.
    DynamicMs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub kind: BatchKind,
    pub sizes: Vec<usize>,
    pub total_epochs: usize,
}

/// Splits `len` epochs into `stages` contiguous spans whose lengths differ by
/// at most one; the earlier spans take the remainder.
pub fn stage_lengths(len: usize, stages: usize) -> Vec<usize> {
    let base = len / stages;
    let extra = len % stages;
    (0..stages).map(|s| base + usize::from(s < extra)).collect()
}

/// Index of the stage containing 0-based `offset` within a span of `len`.
fn stage_of(offset: usize, len: usize, stages: usize) -> usize {
    let mut acc = 0;
    for (s, l) in stage_lengths(len, stages).into_iter().enumerate() {
        acc += l;
        if offset < acc {
            return s;
        }
    }
    stages - 1
}

impl BatchSchedule {
    pub fn fixed(size: usize, total_epochs: usize) -> Result<Self> {
        Self::new(BatchKind::Fixed, vec![size], total_epochs)
    }

    pub fn new(kind: BatchKind, sizes: Vec<usize>, total_epochs: usize) -> Result<Self> {
        let s = Self { kind, sizes, total_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return usage(format!("batch sizes must be non-empty and >= 1, got {:?}", self.sizes));
        }
        if self.kind == BatchKind::Fixed && self.sizes.len() != 1 {
            return usage("a fixed batch schedule has exactly one size");
        }
        if self.total_epochs == 0 {
            return usage("total epochs must be >= 1");
        }
        Ok(())
    }

    /// Batch size used throughout `epoch`.
    pub fn batch_size_at(&self, lr: &LrSchedule, epoch: usize) -> Result<usize> {
        if epoch == 0 || epoch > self.total_epochs {
            return usage(format!("epoch {epoch} outside 1..={}", self.total_epochs));
        }
        let stages = self.sizes.len();
        let idx = match self.kind {
            BatchKind::Fixed => 0,
            BatchKind::Dynamic => stage_of(epoch - 1, self.total_epochs, stages),
            BatchKind::DynamicMs => {
                if lr.total_epochs != self.total_epochs {
                    return usage(format!(
                        "learning-rate schedule covers {} epochs, batch schedule {}",
                        lr.total_epochs, self.total_epochs
                    ));
                }
                let (start, end) = lr
                    .segments()
                    .into_iter()
                    .find(|&(s, e)| s <= epoch && epoch <= e)
                    .expect("segments cover every epoch");
                stage_of(epoch - start, end + 1 - start, stages)
            }
        };
        Ok(self.sizes[idx])
    }

    /// Parses `s{A}`, `s{A}-to-{B}` or `s{A}-to-{B}-MS`, with powers of two
    /// for dynamic endpoints. A plain integer is accepted as a fixed size.
    pub fn from_shorthand(name: &str, total_epochs: usize) -> Result<Self> {
        expand_shorthand(name, total_epochs)
    }

    /// Shorthand label for this schedule, inverse of [`expand_shorthand`]
    /// for schedules built from it.
    pub fn label(&self) -> String {
        match self.kind {
            BatchKind::Fixed => format!("s{}", self.sizes[0]),
            BatchKind::Dynamic | BatchKind::DynamicMs => {
                let suffix = if self.kind == BatchKind::DynamicMs { "-MS" } else { "" };
                format!("s{}-to-{}{suffix}", self.sizes[0], self.sizes[self.sizes.len() - 1])
            }
        }
    }
}

impl fmt::Display for BatchSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn parse_size(s: &str, name: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => usage(format!("unparseable batch schedule {name:?}")),
    }
}

/// Expands schedule shorthand into a [`BatchSchedule`].
///
/// A dynamic span from `A` to `B` covers `d = |log2(B / A)|` doublings over
/// [`DYNAMIC_STAGES`] stages; stage `s` uses exponent `floor(s · d / 4)`, so
/// the `d` steps are spread as evenly as possible and endpoints repeat when
/// `d < 4` (`s16-to-64` gives `{16, 16, 32, 32, 64}`).
pub fn expand_shorthand(name: &str, total_epochs: usize) -> Result<BatchSchedule> {
    let trimmed = name.trim();
    if let Ok(size) = trimmed.parse::<usize>() {
        return BatchSchedule::fixed(size, total_epochs);
    }
    let body = match trimmed.strip_prefix('s') {
        Some(b) => b,
        None => return usage(format!("unparseable batch schedule {name:?}")),
    };
    let (body, ms) = match body.strip_suffix("-MS") {
        Some(b) => (b, true),
        None => (body, false),
    };
    let Some((a, b)) = body.split_once("-to-") else {
        if ms {
            return usage(format!("-MS needs a dynamic span in {name:?}"));
        }
        return BatchSchedule::fixed(parse_size(body, name)?, total_epochs);
    };
    let (a, b) = (parse_size(a, name)?, parse_size(b, name)?);
    if !a.is_power_of_two() || !b.is_power_of_two() {
        return usage(format!("dynamic endpoints must be powers of two in {name:?}"));
    }
    let (ea, eb) = (a.trailing_zeros() as i64, b.trailing_zeros() as i64);
    let d = (eb - ea).abs();
    let dir = (eb - ea).signum();
    let last = (DYNAMIC_STAGES - 1) as i64;
    let sizes = (0..DYNAMIC_STAGES as i64).map(|s| 1usize << (ea + dir * (s * d / last))).collect();
    let kind = if ms { BatchKind::DynamicMs } else { BatchKind::Dynamic };
    BatchSchedule::new(kind, sizes, total_epochs)
}

/// Parses learning-rate shorthand such as `lr0.1` (or a bare number).
pub fn parse_lr(name: &str) -> Result<f64> {
    let t = name.trim();
    let t = t.strip_prefix("lr").unwrap_or(t);
    match t.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => usage(format!("unparseable learning rate {name:?}")),
    }
}
