//! Order-statistic quantile engine.
//!
//! Three pieces live here:
//!
//! * the split-conformal empirical quantile `S_(⌈(n+1)(1−α)⌉)`, with an explicit
//!   `+∞` sentinel when the rank overflows `n`;
//! * the per-sample robust quantile over `m` perturbation scores, whose rank is
//!   clamped to `m` so that `α̃ = 0` yields the sample maximum;
//! * the Chernoff concentration half-width `ε_n = √(3(1−α)·ln(2/δ)/n)` that
//!   bounds the gap between empirical and population quantile levels.
//!
//! The conformal quantile is an exchangeability device: its rank may exceed the
//! sample size, and the overflow outcome must stay `+∞` (forcing the full label
//! set downstream), never a large float. The inner robust quantile is instead a
//! Monte-Carlo estimate of a population quantity, which is why its rank clamps.

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

use crate::{Error, Result};

/// A quantile or threshold value: a finite score cut-off or the `+∞` sentinel.
///
/// `Infinite` compares above every finite value. Serialized as a JSON number,
/// or the string `"+inf"` for the sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantileValue {
    Finite(f64),
    Infinite,
}

impl QuantileValue {
    pub fn is_infinite(&self) -> bool {
        matches!(self, QuantileValue::Infinite)
    }

    pub fn as_finite(&self) -> Option<f64> {
        match self {
            QuantileValue::Finite(v) => Some(*v),
            QuantileValue::Infinite => None,
        }
    }

    /// Whether a score falls at or below this cut-off.
    pub fn covers(&self, score: f64) -> bool {
        match self {
            QuantileValue::Finite(v) => score <= *v,
            QuantileValue::Infinite => true,
        }
    }

    /// Add a finite inflation constant; the sentinel absorbs it.
    pub fn add(&self, delta: f64) -> QuantileValue {
        match self {
            QuantileValue::Finite(v) => QuantileValue::Finite(v + delta),
            QuantileValue::Infinite => QuantileValue::Infinite,
        }
    }
}

impl PartialOrd for QuantileValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (QuantileValue::Finite(a), QuantileValue::Finite(b)) => a.partial_cmp(b),
            (QuantileValue::Finite(_), QuantileValue::Infinite) => Some(Ordering::Less),
            (QuantileValue::Infinite, QuantileValue::Finite(_)) => Some(Ordering::Greater),
            (QuantileValue::Infinite, QuantileValue::Infinite) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for QuantileValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantileValue::Finite(v) => write!(f, "{v}"),
            QuantileValue::Infinite => write!(f, "+inf"),
        }
    }
}

impl Serialize for QuantileValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            QuantileValue::Finite(v) => serializer.serialize_f64(*v),
            QuantileValue::Infinite => serializer.serialize_str("+inf"),
        }
    }
}

impl<'de> Deserialize<'de> for QuantileValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = QuantileValue;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or the string \"+inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<QuantileValue, E> {
                Ok(QuantileValue::Finite(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<QuantileValue, E> {
                Ok(QuantileValue::Finite(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<QuantileValue, E> {
                Ok(QuantileValue::Finite(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<QuantileValue, E> {
                match v {
                    "+inf" | "inf" => Ok(QuantileValue::Infinite),
                    other => Err(E::custom(format!("unexpected quantile string {other:?}"))),
                }
            }
        }
        deserializer.deserialize_any(V)
    }
}

/// 1-based order-statistic rank, or the overflow flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantileRank {
    /// The value is the `rank`-th smallest input, `1 ≤ rank ≤ n`.
    Index(usize),
    /// The nominal rank exceeded `n`.
    Overflow,
}

/// Result of a quantile computation: the value, the rank that produced it, and
/// the coverage level `1 − α` it targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileResult {
    pub value: QuantileValue,
    pub rank: QuantileRank,
    pub level: f64,
}

/// Nominal conformal rank `⌈(n+1)·level⌉`, possibly `n+1` (overflow).
///
/// The product is guarded against the float artifact where e.g.
/// `10·(1−0.1)` evaluates just above `9` and a bare `ceil` lands on `10`.
pub(crate) fn conformal_rank(n: usize, level: f64) -> usize {
    let raw = (n as f64 + 1.0) * level;
    (raw - 1e-9).ceil().max(1.0) as usize
}

fn sorted_copy(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
}

/// Split-conformal empirical quantile: the `⌈(n+1)(1−α)⌉`-th smallest score.
///
/// Returns the `+∞` sentinel when the rank exceeds `n`, which happens whenever
/// `n < (1−α)/α`: the calibration set is too small to certify the level.
pub fn empirical_quantile(scores: &[f64], alpha: f64) -> Result<QuantileResult> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("empirical_quantile needs scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")));
    }
    let level = 1.0 - alpha;
    Ok(quantile_at_level(scores, level))
}

/// Order-statistic rule at a raw coverage level in `(0, 1]`. Level `1.0` always
/// overflows to the sentinel since the rank is `n+1`.
pub(crate) fn quantile_at_level(scores: &[f64], level: f64) -> QuantileResult {
    let n = scores.len();
    let rank = conformal_rank(n, level);
    if rank > n {
        return QuantileResult {
            value: QuantileValue::Infinite,
            rank: QuantileRank::Overflow,
            level,
        };
    }
    let sorted = sorted_copy(scores);
    QuantileResult {
        value: QuantileValue::Finite(sorted[rank - 1]),
        rank: QuantileRank::Index(rank),
        level,
    }
}

/// Per-sample robust quantile over `m` perturbation scores.
///
/// The rank `⌈(m+1)(1−α̃)⌉` is clamped to `m`, so `α̃ = 0` returns the sample
/// maximum (the worst observed perturbation) instead of overflowing. The inner
/// quantile estimates a population quantity, not an exchangeability rank, so
/// clamping is the right finite-`m` behavior.
pub fn robust_quantile(sample_scores: &[f64], alpha_tilde: f64) -> Result<QuantileResult> {
    if sample_scores.is_empty() {
        return Err(Error::EmptyInput("robust_quantile needs scores"));
    }
    if !(0.0..1.0).contains(&alpha_tilde) {
        return Err(Error::invalid(
            "alpha_tilde",
            format!("{alpha_tilde} not in [0, 1)"),
        ));
    }
    let m = sample_scores.len();
    let level = 1.0 - alpha_tilde;
    let rank = conformal_rank(m, level).min(m);
    let sorted = sorted_copy(sample_scores);
    Ok(QuantileResult {
        value: QuantileValue::Finite(sorted[rank - 1]),
        rank: QuantileRank::Index(rank),
        level,
    })
}

/// Two-sided concentration half-width for empirical quantile levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationBand {
    /// `ε_n = √(3(1−α)·ln(2/δ)/n)`.
    pub half_width: f64,
    pub n: usize,
    pub alpha: f64,
    pub delta: f64,
}

/// Chernoff half-width `ε_n = √(3(1−α)·ln(2/δ)/n)`.
///
/// With probability at least `1−δ`, the population quantile at level `α` is
/// sandwiched between the empirical quantiles at levels `α + ε_n` and
/// `α − ε_n`; the width shrinks at the `1/√n` rate.
pub fn concentration_half_width(n: usize, alpha: f64, delta: f64) -> Result<ConcentrationBand> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta", format!("{delta} not in (0, 1)")));
    }
    let half_width = (3.0 * (1.0 - alpha) * (2.0 / delta).ln() / n as f64).sqrt();
    Ok(ConcentrationBand {
        half_width,
        n,
        alpha,
        delta,
    })
}
