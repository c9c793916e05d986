//! Non-conformity score functions for classification.
//!
//! Two scores are supported, both mapping a class-probability vector and a
//! candidate label to a scalar in `[0, 1]`:
//!
//! * **HPS**: `1 − p[y]`, one minus the candidate-class probability.
//! * **APS**: `Σ_{y'} p[y']·1{p[y'] > p[y]} + u·p[y]`, the cumulative mass of
//!   classes strictly more probable than the candidate plus a `u ~ U[0,1]`
//!   randomized share of the candidate's own mass. Ties contribute nothing to
//!   the sum.
//!
//! For APS, one `u` is drawn per input sample and reused across every candidate
//! label evaluated for that sample, which keeps prediction sets nested in the
//! threshold.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::ProbabilityTable;
use crate::seed::{stage_rng, Stage};
use crate::{Error, Result};

/// Sum must be within this of 1 to be accepted as-is.
const SUM_TOLERANCE: f64 = 1e-6;
/// Sum within this of 1 is silently renormalized; beyond it the vector is
/// rejected so corrupt data surfaces.
const RENORMALIZE_TOLERANCE: f64 = 1e-4;
/// Slack on individual entries for values arriving from text formats.
const ENTRY_SLACK: f64 = 1e-9;

/// A validated class-probability vector: entries in `[0, 1]` summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
}

impl ProbabilityVector {
    /// Validate and build. Sums within `1e-6` of 1 pass unchanged; sums within
    /// `1e-4` are renormalized; anything else is rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidProbabilities("no classes".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < -ENTRY_SLACK || p > 1.0 + ENTRY_SLACK {
                return Err(Error::InvalidProbabilities(format!(
                    "entry {i} is {p}, outside [0, 1]"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        let mut probs = probs;
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
                return Err(Error::InvalidProbabilities(format!(
                    "entries sum to {sum}, beyond renormalization tolerance"
                )));
            }
            for p in &mut probs {
                *p /= sum;
            }
        }
        for p in &mut probs {
            *p = p.clamp(0.0, 1.0);
        }
        Ok(Self { probs })
    }

    /// Number of classes.
    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, y: usize) -> Option<f64> {
        self.probs.get(y).copied()
    }

    fn class_prob(&self, y: usize) -> Result<f64> {
        self.get(y).ok_or(Error::LabelOutOfRange {
            label: y,
            classes: self.class_count(),
        })
    }
}

/// A non-conformity score. Both HPS and APS values lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Score(f64);

impl Score {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which non-conformity score to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Hps,
    Aps,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreKind::Hps => f.write_str("hps"),
            ScoreKind::Aps => f.write_str("aps"),
        }
    }
}

/// HPS score: `1 − p[y]`.
pub fn hps_score(p: &ProbabilityVector, y: usize) -> Result<Score> {
    Ok(Score(1.0 - p.class_prob(y)?))
}

/// APS score: strictly-greater cumulative mass plus `u` times the candidate's
/// own mass. `u = 0` gives the strictly-greater mass alone; `u = 1` adds the
/// full candidate mass.
pub fn aps_score(p: &ProbabilityVector, y: usize, u: f64) -> Result<Score> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid("u", format!("{u} not in [0, 1]")));
    }
    let p_y = p.class_prob(y)?;
    let greater_mass: f64 = p.as_slice().iter().filter(|&&q| q > p_y).sum();
    Ok(Score(greater_mass + u * p_y))
}

/// Score one label with either kind, drawing `u` from the supplied RNG when
/// APS asks for it.
pub(crate) fn score_with_rng(
    p: &ProbabilityVector,
    y: usize,
    kind: ScoreKind,
    rng: &mut impl rand::Rng,
) -> Result<Score> {
    match kind {
        ScoreKind::Hps => hps_score(p, y),
        ScoreKind::Aps => aps_score(p, y, rng.gen::<f64>()),
    }
}

/// Score every table row against its candidate label.
///
/// For APS, the per-row `u` is derived from `(seed, row)` only, so scoring the
/// same row against several candidate labels (repeat calls with the same seed)
/// shares one draw per row.
pub fn score_batch(
    table: &ProbabilityTable,
    labels: &[usize],
    kind: ScoreKind,
    seed: u64,
) -> Result<Vec<Score>> {
    if table.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            message: "table rows vs labels",
            left: table.len(),
            right: labels.len(),
        });
    }
    table
        .rows()
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (row, &y))| match kind {
            ScoreKind::Hps => hps_score(&row.probs, y),
            ScoreKind::Aps => {
                let u = stage_rng(seed, Stage::BatchScoreU, i as u64).gen::<f64>();
                aps_score(&row.probs, y, u)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ProbabilityTable, TableRow};
    use proptest::prelude::*;

    fn pv(probs: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(probs.to_vec()).unwrap()
    }

    fn table(rows: &[(&[f64], usize)]) -> ProbabilityTable {
        ProbabilityTable::from_rows(
            rows.iter()
                .enumerate()
                .map(|(i, (probs, label))| TableRow {
                    id: i as u64,
                    label: *label,
                    probs: pv(probs),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hps_matches_hand_examples() {
        let p = pv(&[0.7, 0.2, 0.1]);
        assert!((hps_score(&p, 0).unwrap().value() - 0.3).abs() < 1e-12);
        assert!((hps_score(&p, 2).unwrap().value() - 0.9).abs() < 1e-12);
        let one_hot = pv(&[0.0, 1.0, 0.0]);
        assert_eq!(hps_score(&one_hot, 1).unwrap().value(), 0.0);
    }

    #[test]
    fn hps_rejects_label_out_of_range() {
        let p = pv(&[0.5, 0.5]);
        assert!(matches!(
            hps_score(&p, 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn aps_matches_hand_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        assert!((aps_score(&p, 1, 1.0).unwrap().value() - 0.8).abs() < 1e-12);
        assert_eq!(aps_score(&p, 0, 0.0).unwrap().value(), 0.0);
        assert!((aps_score(&p, 2, 0.5).unwrap().value() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn aps_ties_contribute_nothing() {
        // Classes tied with p[y] are excluded from the strict sum.
        let p = pv(&[0.4, 0.4, 0.2]);
        assert_eq!(aps_score(&p, 0, 0.0).unwrap().value(), 0.0);
        assert_eq!(aps_score(&p, 1, 0.0).unwrap().value(), 0.0);
        assert!((aps_score(&p, 2, 0.0).unwrap().value() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn aps_rejects_bad_u() {
        let p = pv(&[0.5, 0.5]);
        assert!(aps_score(&p, 0, -0.1).is_err());
        assert!(aps_score(&p, 0, 1.1).is_err());
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![]).is_err());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbabilityVector::new(vec![0.4, 0.4]).is_err());

        // Within 1e-4 of one: renormalized.
        let p = ProbabilityVector::new(vec![0.50002, 0.5]).unwrap();
        let sum: f64 = p.as_slice().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // Within 1e-6: accepted unchanged.
        let p = ProbabilityVector::new(vec![0.5000001, 0.5]).unwrap();
        assert_eq!(p.get(0), Some(0.5000001));
    }

    #[test]
    fn score_batch_hps_example() {
        let t = table(&[(&[0.9, 0.1], 0), (&[0.4, 0.6], 1)]);
        let scores = score_batch(&t, &[0, 1], ScoreKind::Hps, 0).unwrap();
        let values: Vec<f64> = scores.iter().map(|s| s.value()).collect();
        assert!((values[0] - 0.1).abs() < 1e-12);
        assert!((values[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn score_batch_empty_table() {
        let t = ProbabilityTable::from_rows(vec![]).unwrap();
        assert!(score_batch(&t, &[], ScoreKind::Hps, 0).unwrap().is_empty());
    }

    #[test]
    fn score_batch_shape_mismatch() {
        let t = table(&[(&[0.9, 0.1], 0)]);
        assert!(score_batch(&t, &[0, 1], ScoreKind::Hps, 0).is_err());
    }

    #[test]
    fn score_batch_aps_deterministic_and_label_independent_u() {
        let t = table(&[(&[0.5, 0.3, 0.2], 0), (&[0.2, 0.3, 0.5], 1)]);
        let a = score_batch(&t, &[1, 2], ScoreKind::Aps, 9).unwrap();
        let b = score_batch(&t, &[1, 2], ScoreKind::Aps, 9).unwrap();
        assert_eq!(a, b);
        let c = score_batch(&t, &[1, 2], ScoreKind::Aps, 10).unwrap();
        assert_ne!(a, c);

        // The per-row u does not depend on the candidate label: scoring row 0
        // against label 0 and label 1 must use the same draw. Recover u from
        // the affine form u = (score − greater_mass) / p[y].
        let s0 = score_batch(&t, &[0, 0], ScoreKind::Aps, 9).unwrap()[0].value();
        let s1 = score_batch(&t, &[1, 0], ScoreKind::Aps, 9).unwrap()[0].value();
        let u0 = s0 / 0.5;
        let u1 = (s1 - 0.5) / 0.3;
        assert!((u0 - u1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hps_monotone_decreasing_in_own_mass(
            base in 0.05..0.9f64,
            bump in 0.0..0.1f64,
            other in 0.0..1.0f64,
        ) {
            // Increase p[y], rescale the remaining mass: score never increases.
            let rest = 1.0 - base;
            let p_lo = pv(&[base, rest * other, rest * (1.0 - other)]);
            let hi = base + bump;
            let rest_hi = 1.0 - hi;
            let p_hi = pv(&[hi, rest_hi * other, rest_hi * (1.0 - other)]);
            let s_lo = hps_score(&p_lo, 0).unwrap().value();
            let s_hi = hps_score(&p_hi, 0).unwrap().value();
            prop_assert!(s_hi <= s_lo + 1e-12);
        }

        #[test]
        fn aps_affine_in_u_with_slope_own_mass(
            raw in proptest::collection::vec(0.01..1.0f64, 2..6),
            y_pick in 0.0..1.0f64,
            u in 0.0..1.0f64,
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let y = ((y_pick * probs.len() as f64) as usize).min(probs.len() - 1);
            let p = pv(&probs);
            let at_zero = aps_score(&p, y, 0.0).unwrap().value();
            let at_u = aps_score(&p, y, u).unwrap().value();
            prop_assert!((at_u - at_zero - u * probs[y]).abs() < 1e-12);
        }

        #[test]
        fn scores_stay_in_unit_interval(
            raw in proptest::collection::vec(0.01..1.0f64, 2..8),
            y_pick in 0.0..1.0f64,
            u in 0.0..1.0f64,
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let y = ((y_pick * probs.len() as f64) as usize).min(probs.len() - 1);
            let p = pv(&probs);
            let h = hps_score(&p, y).unwrap().value();
            let a = aps_score(&p, y, u).unwrap().value();
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
        }

        #[test]
        fn scores_invariant_under_non_candidate_permutation(
            raw in proptest::collection::vec(0.01..1.0f64, 3..6),
            u in 0.0..1.0f64,
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            // Candidate stays at index 0; reverse the rest.
            let mut permuted = probs.clone();
            permuted[1..].reverse();
            let p = pv(&probs);
            let q = pv(&permuted);
            let h_p = hps_score(&p, 0).unwrap().value();
            let h_q = hps_score(&q, 0).unwrap().value();
            prop_assert!((h_p - h_q).abs() < 1e-12);
            let a_p = aps_score(&p, 0, u).unwrap().value();
            let a_q = aps_score(&q, 0, u).unwrap().value();
            prop_assert!((a_p - a_q).abs() < 1e-12);
        }
    }
}
