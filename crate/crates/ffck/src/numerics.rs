//! Deterministic numerical kernels and the log-odds / log-Bayes-factor
//! calculus used by every analysis module.
//!
//! Internal unit is nats throughout; dits are a display conversion
//! (`LogOdds::dits`, one dit = ln 10 nats). Probabilities of exactly 0 or 1
//! map to ∓∞ log-odds with a saturation flag instead of erroring, since
//! filtered datasets can contain near-saturated completions.

use crate::error::{FfckError, Result};

pub const LN_10: f64 = std::f64::consts::LN_10;

/// Log-odds values beyond this magnitude are treated as saturated when a
/// finite mean is required (see [`LogOdds::clamped_nats`]).
pub const SATURATION_CLAMP_NATS: f64 = 30.0;

/// A probability in `[0, 1]`. NaN is rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(FfckError::Domain("probability is NaN".into()));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(FfckError::Domain(format!(
                "probability {value} outside [0, 1]"
            )));
        }
        Ok(Probability(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// log(p / (1 - p)) in nats; ±∞ at the endpoints.
    pub fn log_odds(self) -> LogOdds {
        log_odds(self)
    }
}

/// Display unit for log-odds quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogUnit {
    Nats,
    Dits,
}

/// log(p / (1 - p)). Stored in nats; ±∞ marks a saturated probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogOdds {
    nats: f64,
    saturated: bool,
}

impl LogOdds {
    pub fn from_nats(nats: f64) -> Self {
        LogOdds {
            nats,
            saturated: nats.is_infinite(),
        }
    }

    pub fn nats(self) -> f64 {
        self.nats
    }

    pub fn dits(self) -> f64 {
        self.nats / LN_10
    }

    pub fn in_unit(self, unit: LogUnit) -> f64 {
        match unit {
            LogUnit::Nats => self.nats(),
            LogUnit::Dits => self.dits(),
        }
    }

    /// True when the source probability was exactly 0 or 1.
    pub fn is_saturated(self) -> bool {
        self.saturated
    }

    /// Value clamped to ±[`SATURATION_CLAMP_NATS`], so aggregate means stay
    /// finite in the presence of saturated completions.
    pub fn clamped_nats(self) -> f64 {
        self.nats.clamp(-SATURATION_CLAMP_NATS, SATURATION_CLAMP_NATS)
    }
}

/// The additive evidence update between two probabilities:
/// `log_odds(p2) - log_odds(p1)`, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogBayesFactor {
    nats: f64,
    /// Set when either endpoint log-odds was infinite.
    saturated: bool,
}

impl LogBayesFactor {
    pub fn from_nats(nats: f64) -> Self {
        LogBayesFactor {
            nats,
            saturated: !nats.is_finite(),
        }
    }

    pub fn nats(self) -> f64 {
        self.nats
    }

    pub fn dits(self) -> f64 {
        self.nats / LN_10
    }

    pub fn is_saturated(self) -> bool {
        self.saturated
    }
}

/// log(p / (1 - p)) in nats. Endpoints give ±∞.
pub fn log_odds(p: Probability) -> LogOdds {
    let v = p.value();
    if v == 0.0 {
        return LogOdds {
            nats: f64::NEG_INFINITY,
            saturated: true,
        };
    }
    if v == 1.0 {
        return LogOdds {
            nats: f64::INFINITY,
            saturated: true,
        };
    }
    LogOdds {
        nats: (v / (1.0 - v)).ln(),
        saturated: false,
    }
}

/// The log Bayes factor transforming `p1` into `p2`.
pub fn log_bayes_factor(p1: Probability, p2: Probability) -> LogBayesFactor {
    let a = log_odds(p1);
    let b = log_odds(p2);
    let nats = b.nats() - a.nats();
    LogBayesFactor {
        // (+inf) - (+inf) and the like: saturate instead of propagating NaN.
        nats: if nats.is_nan() { 0.0 } else { nats },
        saturated: a.is_saturated() || b.is_saturated(),
    }
}

/// Numerically stabilized softmax (max subtraction). Entries sum to 1.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(FfckError::Domain("softmax of empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FfckError::Domain("softmax input has non-finite entry".into()));
    }
    Ok(softmax_unchecked(x))
}

/// Softmax without input validation; the caller guarantees finite entries.
pub fn softmax_unchecked(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Log-odds shift of coordinate `i` when bumping logit `i` by `c`:
/// `log_odds(softmax(x + c·e_i)_i) − log_odds(softmax(x)_i)`.
///
/// Both softmaxes are evaluated directly; the result equals `c` (exactly, up
/// to rounding), which the property suite asserts.
pub fn logit_bump_shift(x: &[f64], i: usize, c: f64) -> Result<LogBayesFactor> {
    if i >= x.len() {
        return Err(FfckError::Input(format!(
            "index {i} out of range for vector of length {}",
            x.len()
        )));
    }
    if !c.is_finite() {
        return Err(FfckError::Domain("bump amount must be finite".into()));
    }
    let base = softmax(x)?;
    let mut bumped_logits = x.to_vec();
    bumped_logits[i] += c;
    let bumped = softmax(&bumped_logits)?;
    let p1 = Probability::new(base[i].min(1.0))?;
    let p2 = Probability::new(bumped[i].min(1.0))?;
    Ok(log_bayes_factor(p1, p2))
}

/// RMS normalization epsilon (guards the zero vector).
pub const RMS_EPS: f64 = 1e-6;

/// RMS-normalize `x` and scale elementwise by `gain`.
pub fn rms_normalize(x: &[f64], gain: &[f64]) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(FfckError::dimension(x.len(), gain.len(), "rms_normalize gain"));
    }
    if x.is_empty() {
        return Err(FfckError::Domain("rms_normalize of empty vector".into()));
    }
    Ok(rms_normalize_unchecked(x, gain))
}

pub fn rms_normalize_unchecked(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let inv = rms_inverse(x);
    x.iter()
        .zip(gain.iter())
        .map(|(v, g)| v * inv * g)
        .collect()
}

/// 1 / sqrt(mean(x²) + eps)
pub fn rms_inverse(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

pub const ROPE_BASE: f64 = 10000.0;

/// Rotation angle of rotary pair `pair` at `position` for head dim `d_head`.
pub fn rope_angle(position: usize, pair: usize, d_head: usize) -> f64 {
    let freq = ROPE_BASE.powf(-2.0 * pair as f64 / d_head as f64);
    position as f64 * freq
}

/// Standard rotary position rotation: consecutive dim pairs `(2k, 2k+1)` are
/// rotated by a position-dependent angle. Norm-preserving.
pub fn rope_apply(q_or_k: &[f64], position: usize) -> Result<Vec<f64>> {
    if q_or_k.len() % 2 != 0 {
        return Err(FfckError::Domain(format!(
            "rotary rotation needs an even dimension, got {}",
            q_or_k.len()
        )));
    }
    Ok(rope_apply_unchecked(q_or_k, position))
}

pub fn rope_apply_unchecked(x: &[f64], position: usize) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(d);
    for pair in 0..d / 2 {
        let theta = rope_angle(position, pair, d);
        let (sin, cos) = theta.sin_cos();
        let a = x[2 * pair];
        let b = x[2 * pair + 1];
        out.push(a * cos - b * sin);
        out.push(a * sin + b * cos);
    }
    out
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
