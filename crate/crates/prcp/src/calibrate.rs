//! The four calibration procedures and prediction-set construction.
//!
//! * **Vanilla CP**: the plain `⌈(n+1)(1−α)⌉`-th order statistic of clean
//!   calibration scores.
//! * **Inflated-AR**: vanilla plus a worst-case inflation constant `M_r`.
//! * **iPRCP**: a sharpened quantile level `α*_iPR = 1 − (1−α)/(1−η)` plus a
//!   high-probability inflation constant `M_{r,η}`.
//! * **aPRCP**: the quantile-of-quantile rule: per calibration sample, an
//!   inner `(1−α̃)`-quantile of its score over `m` random perturbations; then
//!   the `⌈(n+1)(1−α+s)⌉`-th order statistic across samples. The levels couple
//!   through `α̃ = 1 − (1−α)/(1−α+s)`, and a cross-domain density gap `d`
//!   tightens the inner level to `α̃ − d`.
//!
//! Setting `s = 0` collapses aPRCP to worst-case behavior: `α̃ = 0` makes the
//! inner quantile the per-sample maximum, and the outer rule is vanilla CP on
//! those maxima.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{LabeledDataset, SoftmaxClassifier};
use crate::noise::{sample_noise, NoiseScheme, PerturbationBudget};
use crate::quantile::{
    conformal_rank, empirical_quantile, quantile_at_level, robust_quantile, QuantileValue,
};
use crate::scores::{score_with_rng, ProbabilityVector, Score, ScoreKind};
use crate::seed::{stage_rng, subseed, Stage};
use crate::{Error, Result};

/// Which calibration procedure produced a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "inflated-AR")]
    InflatedAr,
    #[serde(rename = "iPRCP")]
    Iprcp,
    #[serde(rename = "aPRCP")]
    Aprcp,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Vanilla => f.write_str("vanilla"),
            Method::InflatedAr => f.write_str("inflated-AR"),
            Method::Iprcp => f.write_str("iPRCP"),
            Method::Aprcp => f.write_str("aPRCP"),
        }
    }
}

/// The parameters a threshold was calibrated with. Only the fields relevant to
/// its method are present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_gap: Option<f64>,
}

impl ThresholdParams {
    fn bare(alpha: f64) -> Self {
        Self {
            alpha,
            s: None,
            alpha_tilde: None,
            eta: None,
            m_r: None,
            d_gap: None,
        }
    }
}

/// A calibrated score threshold `τ` with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: QuantileValue,
    pub method: Method,
    pub params: ThresholdParams,
}

impl Threshold {
    /// Build and check the parameter invariant: aPRCP params must satisfy the
    /// level coupling `α̃ + d = 1 − (1−α)/(1−α+s)` within `1e-12`.
    pub fn new(value: QuantileValue, method: Method, params: ThresholdParams) -> Result<Self> {
        if method == Method::Aprcp {
            let (Some(s), Some(alpha_tilde)) = (params.s, params.alpha_tilde) else {
                return Err(Error::invalid(
                    "params",
                    "aPRCP threshold needs both s and alpha_tilde",
                ));
            };
            let coupled = level_coupling(params.alpha, s);
            let gap = params.d_gap.unwrap_or(0.0);
            if (alpha_tilde + gap - coupled).abs() > 1e-12 {
                return Err(Error::invalid(
                    "params",
                    format!(
                        "alpha_tilde {alpha_tilde} + d {gap} inconsistent with \
                         1 - (1-alpha)/(1-alpha+s) = {coupled}"
                    ),
                ));
            }
        }
        Ok(Self {
            value,
            method,
            params,
        })
    }
}

/// One calibration sample's perturbation scores and inner robust quantile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub index: usize,
    pub scores: Vec<f64>,
    pub robust_quantile: f64,
}

/// The labels admitted by a threshold at one test point, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, y: usize) -> bool {
        self.labels.binary_search(&y).is_ok()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")))
    }
}

/// Plain split-CP threshold: `τ = Q(α)`, the `⌈(n+1)(1−α)⌉`-th smallest score.
pub fn vanilla_cp_threshold(cal_scores: &[f64], alpha: f64) -> Result<Threshold> {
    let q = empirical_quantile(cal_scores, alpha)?;
    Threshold::new(q.value, Method::Vanilla, ThresholdParams::bare(alpha))
}

/// Worst-case inflated threshold: `τ^AR = Q(α) + M_r`.
pub fn inflated_ar_threshold(cal_scores: &[f64], alpha: f64, m_r: f64) -> Result<Threshold> {
    if !(m_r.is_finite() && m_r >= 0.0) {
        return Err(Error::invalid(
            "m_r",
            format!("{m_r} not a finite value >= 0"),
        ));
    }
    let q = empirical_quantile(cal_scores, alpha)?;
    let params = ThresholdParams {
        m_r: Some(m_r),
        ..ThresholdParams::bare(alpha)
    };
    Threshold::new(q.value.add(m_r), Method::InflatedAr, params)
}

/// iPRCP threshold: `τ^iPR = Q(α*_iPR) + M_{r,η}` with
/// `α*_iPR = 1 − (1−α)/(1−η)`.
///
/// `η = 0` reduces to the inflated-AR rule; `η = α` drives `α*` to zero, so
/// the quantile overflows to `+∞` regardless of `M_{r,η}`.
pub fn iprcp_threshold(
    cal_scores: &[f64],
    alpha: f64,
    eta: f64,
    m_r_eta: f64,
) -> Result<Threshold> {
    check_alpha(alpha)?;
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::invalid(
            "eta",
            format!("{eta} not a finite value >= 0"),
        ));
    }
    if eta > alpha {
        return Err(Error::invalid(
            "eta",
            format!("eta {eta} exceeds alpha {alpha}; iPRCP needs 0 <= eta <= alpha"),
        ));
    }
    if !(m_r_eta.is_finite() && m_r_eta >= 0.0) {
        return Err(Error::invalid(
            "m_r",
            format!("{m_r_eta} not a finite value >= 0"),
        ));
    }
    if cal_scores.is_empty() {
        return Err(Error::EmptyInput("iprcp_threshold needs scores"));
    }
    let alpha_star = 1.0 - (1.0 - alpha) / (1.0 - eta);
    let q = quantile_at_level(cal_scores, 1.0 - alpha_star);
    let params = ThresholdParams {
        eta: Some(eta),
        m_r: Some(m_r_eta),
        ..ThresholdParams::bare(alpha)
    };
    Threshold::new(q.value.add(m_r_eta), Method::Iprcp, params)
}

/// The Algorithm-1 level coupling `α̃ = 1 − (1−α)/(1−α+s)`.
fn level_coupling(alpha: f64, s: f64) -> f64 {
    1.0 - (1.0 - alpha) / (1.0 - alpha + s)
}

/// A consistent aPRCP parameter triple, plus the cross-domain gap if any.
///
/// `alpha_tilde` is the *effective* inner level actually used by calibration:
/// the coupled value `1 − (1−α)/(1−α+s)` minus `d_gap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprcpParams {
    alpha: f64,
    s: f64,
    alpha_tilde: f64,
    d_gap: f64,
}

impl AprcpParams {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Effective inner quantile level `α̃` (after any density-gap adjustment).
    pub fn alpha_tilde(&self) -> f64 {
        self.alpha_tilde
    }

    pub fn d_gap(&self) -> f64 {
        self.d_gap
    }

    /// Outer coverage level `1 − α + s`.
    pub fn outer_level(&self) -> f64 {
        1.0 - self.alpha + self.s
    }

    /// Tighten the inner level for cross-domain noise: `α̃ ← α̃_coupled − d`.
    pub fn with_density_gap(self, d: f64) -> Result<Self> {
        let alpha_tilde = cross_domain_alpha(self.alpha, self.s, d)?;
        Ok(Self {
            alpha_tilde,
            d_gap: d,
            ..self
        })
    }

    /// Pin the inner level to `α̃` regardless of `s`, recording the deviation
    /// from the Algorithm-1 coupling as a signed density gap. A negative gap
    /// means the inner quantile is looser than the coupled rule, so the
    /// Theorem-1 guarantee no longer applies; this is the knob the trade-off
    /// sweeps turn when they hold `α̃` fixed while `s` varies.
    pub fn with_fixed_inner_level(self, alpha_tilde: f64) -> Result<Self> {
        if !(alpha_tilde >= 0.0 && alpha_tilde < 1.0) {
            return Err(Error::invalid(
                "alpha_tilde",
                format!("{alpha_tilde} not in [0, 1)"),
            ));
        }
        let d_gap = level_coupling(self.alpha, self.s) - alpha_tilde;
        Ok(Self {
            alpha_tilde,
            d_gap,
            ..self
        })
    }

    fn threshold_params(&self) -> ThresholdParams {
        ThresholdParams {
            s: Some(self.s),
            alpha_tilde: Some(self.alpha_tilde),
            d_gap: (self.d_gap != 0.0).then_some(self.d_gap),
            ..ThresholdParams::bare(self.alpha)
        }
    }
}

/// Complete the aPRCP level triple from `α` and either `s` or `α̃` (or both,
/// in which case they must agree within `1e-9`).
///
/// `s` must lie in `[0, α]`; a directly supplied `α̃` may be any value in
/// `[0, 1)`, including ones whose implied `s` exceeds `α` (the outer rule then
/// overflows to `+∞`, which is the honest outcome of such a request).
pub fn derive_aprcp_params(
    alpha: f64,
    s: Option<f64>,
    alpha_tilde: Option<f64>,
) -> Result<AprcpParams> {
    check_alpha(alpha)?;
    let (s, alpha_tilde) = match (s, alpha_tilde) {
        (None, None) => {
            return Err(Error::invalid("s", "aPRCP needs s or alpha_tilde"));
        }
        (Some(s), given_tilde) => {
            if !(s.is_finite() && s >= 0.0 && s <= alpha) {
                return Err(Error::invalid(
                    "s",
                    format!("{s} not in [0, alpha] with alpha = {alpha}"),
                ));
            }
            let coupled = level_coupling(alpha, s);
            if let Some(tilde) = given_tilde {
                let implied_s = (1.0 - alpha) * tilde / (1.0 - tilde);
                if (implied_s - s).abs() > 1e-9 {
                    return Err(Error::invalid(
                        "alpha_tilde",
                        format!(
                            "alpha_tilde {tilde} implies s = {implied_s}, \
                             inconsistent with supplied s = {s}"
                        ),
                    ));
                }
            }
            (s, coupled)
        }
        (None, Some(tilde)) => {
            if !(tilde.is_finite() && (0.0..1.0).contains(&tilde)) {
                return Err(Error::invalid(
                    "alpha_tilde",
                    format!("{tilde} not in [0, 1)"),
                ));
            }
            ((1.0 - alpha) * tilde / (1.0 - tilde), tilde)
        }
    };
    Ok(AprcpParams {
        alpha,
        s,
        alpha_tilde,
        d_gap: 0.0,
    })
}

/// Cross-domain inner level `α*_aPR = 1 − d − (1−α)/(1−α+s)`.
///
/// Errors when the gap `d` eats the whole inner slack (result below zero),
/// which means the calibration and evaluation noise differ too much for the
/// requested `(α, s)`.
pub fn cross_domain_alpha(alpha: f64, s: f64, d: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(s.is_finite() && s >= 0.0 && s <= alpha) {
        return Err(Error::invalid(
            "s",
            format!("{s} not in [0, alpha] with alpha = {alpha}"),
        ));
    }
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::invalid(
            "d_gap",
            format!("{d} not a finite value >= 0"),
        ));
    }
    let adjusted = level_coupling(alpha, s) - d;
    if adjusted < 0.0 {
        return Err(Error::InfeasibleDensityGap { gap: d, adjusted });
    }
    Ok(adjusted)
}

/// Algorithm-1 line 6: the `⌈(n+1)(1−α+s)⌉`-th smallest robust quantile.
/// The rank is *not* clamped; overflow yields the `+∞` sentinel.
pub fn aprcp_outer_threshold(
    robust_quantiles: &[f64],
    alpha: f64,
    s: f64,
) -> Result<QuantileValue> {
    if robust_quantiles.is_empty() {
        return Err(Error::EmptyInput("aprcp_outer_threshold needs quantiles"));
    }
    check_alpha(alpha)?;
    if !(s.is_finite() && s >= 0.0) {
        return Err(Error::invalid("s", format!("{s} not a finite value >= 0")));
    }
    let n = robust_quantiles.len();
    let rank = conformal_rank(n, 1.0 - alpha + s);
    if rank > n {
        return Ok(QuantileValue::Infinite);
    }
    let mut sorted = robust_quantiles.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(QuantileValue::Finite(sorted[rank - 1]))
}

/// Algorithm-1 lines 5–6 on a precomputed score matrix: row `i` holds sample
/// `i`'s scores over its `m` perturbations.
///
/// This is the entry point for enumerated (non-sampled) perturbation sets; the
/// degeneracy check of Corollary 1 runs the worst-case oracle through exactly
/// this code path.
pub fn aprcp_threshold_from_scores(
    score_matrix: &[Vec<f64>],
    params: &AprcpParams,
) -> Result<(Threshold, Vec<CalibrationRecord>)> {
    if score_matrix.is_empty() {
        return Err(Error::EmptyInput("aprcp_threshold_from_scores needs rows"));
    }
    let records = score_matrix
        .iter()
        .enumerate()
        .map(|(index, row)| {
            let q = robust_quantile(row, params.alpha_tilde)?;
            Ok(CalibrationRecord {
                index,
                scores: row.clone(),
                robust_quantile: q
                    .value
                    .as_finite()
                    .expect("clamped inner quantile is always finite"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let inner: Vec<f64> = records.iter().map(|r| r.robust_quantile).collect();
    let value = aprcp_outer_threshold(&inner, params.alpha, params.s)?;
    let threshold = Threshold::new(value, Method::Aprcp, params.threshold_params())?;
    Ok((threshold, records))
}

/// Whether calibration samples share one set of perturbation draws or each
/// draw their own (the default; Algorithm 1 draws i.i.d. across samples).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawMode {
    Independent,
    Shared,
}

/// Algorithm 1 end to end: draw `m` perturbations per calibration sample,
/// score them, take inner robust quantiles, then the outer order statistic.
///
/// Per-sample work derives its own sub-seeds, so the result is independent of
/// the rayon thread count.
#[allow(clippy::too_many_arguments)]
pub fn aprcp_calibrate(
    cal_data: &LabeledDataset,
    clf: &SoftmaxClassifier,
    score_kind: ScoreKind,
    budget: &PerturbationBudget,
    noise_scheme: &NoiseScheme,
    m: usize,
    params: &AprcpParams,
    mode: DrawMode,
    seed: u64,
) -> Result<(Threshold, Vec<CalibrationRecord>)> {
    if cal_data.is_empty() {
        return Err(Error::EmptyInput("aprcp_calibrate needs calibration data"));
    }
    if m == 0 {
        return Err(Error::invalid("m", "need at least one perturbation draw"));
    }
    let score_matrix = perturbed_score_matrix(
        cal_data,
        clf,
        score_kind,
        budget,
        noise_scheme,
        m,
        mode,
        seed,
    )?;
    aprcp_threshold_from_scores(&score_matrix, params)
}

/// Scores `S_ij = S(X_i + ε_ij, Y_i)` for every calibration sample `i` and
/// perturbation draw `j`. Exposed so callers sweeping levels can reuse one
/// matrix: the draws do not depend on `(s, α̃)`, only the quantile ranks do.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_score_matrix(
    cal_data: &LabeledDataset,
    clf: &SoftmaxClassifier,
    score_kind: ScoreKind,
    budget: &PerturbationBudget,
    noise_scheme: &NoiseScheme,
    m: usize,
    mode: DrawMode,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..cal_data.len())
        .into_par_iter()
        .map(|i| {
            let noise_index = match mode {
                DrawMode::Independent => i as u64,
                DrawMode::Shared => 0,
            };
            let noise = sample_noise(
                noise_scheme,
                budget,
                m,
                subseed(seed, Stage::CalNoise as u64, noise_index),
            )?;
            let x = &cal_data.xs()[i];
            let y = cal_data.ys()[i];
            noise
                .iter()
                .enumerate()
                .map(|(j, eps)| {
                    let xp: Vec<f64> = x.iter().zip(eps).map(|(a, b)| a + b).collect();
                    let probs = clf.predict_proba(&xp)?;
                    let mut rng = stage_rng(seed, Stage::CalScoreU, (i * m + j) as u64);
                    Ok(score_with_rng(&probs, y, score_kind, &mut rng)?.value())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// Algorithm-1 line 7: the labels whose score falls at or below `τ`.
///
/// One APS randomization draw `u` is shared across all candidate labels of the
/// test point, keeping sets nested in `τ`. The `+∞` sentinel admits every
/// label; a `τ` below the smallest score yields the empty set, which coverage
/// accounting counts as a miss.
pub fn prediction_set(
    probs: &ProbabilityVector,
    threshold: &Threshold,
    score_kind: ScoreKind,
    seed: u64,
) -> Result<PredictionSet> {
    let u: f64 = {
        use rand::Rng as _;
        stage_rng(seed, Stage::EvalSetU, 0).gen()
    };
    prediction_set_with_u(probs, &threshold.value, score_kind, u)
}

/// As [`prediction_set`] with the APS draw `u` supplied by the caller.
pub fn prediction_set_with_u(
    probs: &ProbabilityVector,
    tau: &QuantileValue,
    score_kind: ScoreKind,
    u: f64,
) -> Result<PredictionSet> {
    let labels = (0..probs.class_count())
        .map(|y| {
            let score: Score = match score_kind {
                ScoreKind::Hps => crate::scores::hps_score(probs, y)?,
                ScoreKind::Aps => crate::scores::aps_score(probs, y, u)?,
            };
            Ok((y, tau.covers(score.value())))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter_map(|(y, inside)| inside.then_some(y))
        .collect();
    Ok(PredictionSet { labels })
}
