//! Evaluation harness: probabilistic and worst-case coverage metrics, the
//! repeated-run experiment driver, and the `(α̃, s)` trade-off sweep.
//!
//! Per test sample, the probabilistic metrics average an indicator and a set
//! size over `n_s` random perturbations; the worst-case metrics evaluate a
//! single adversarial perturbation. Runs resample both data and noise, each
//! run from its own sub-seed, and reports aggregate mean plus sample standard
//! deviation over runs. Reports carry no timestamps, so identical configs and
//! seeds serialize byte-identically.

use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{worst_case_perturbation, AttackConfig};
use crate::calibrate::{
    aprcp_calibrate, derive_aprcp_params, inflated_ar_threshold, iprcp_threshold,
    prediction_set_with_u, vanilla_cp_threshold, DrawMode, Method, Threshold,
};
use crate::classifier::{
    bayes_classifier, generate_synthetic_dataset, inflation_bound, LabeledDataset,
    ProbabilityTable, SoftmaxClassifier, SyntheticTaskSpec,
};
use crate::noise::{sample_noise, NoiseScheme, PerturbationBudget};
use crate::quantile::QuantileValue;
use crate::scores::{score_batch, ScoreKind};
use crate::seed::{stage_rng, subseed, Stage};
use crate::{Error, Result};

/// Which evaluation regime to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Random perturbations, Eqs. (10)–(11).
    Probabilistic,
    /// Adversarial perturbations, Eqs. (12)–(13).
    Worst,
}

/// One test sample's metrics: the covered fraction (or indicator) and the
/// (mean) prediction-set size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub coverage: f64,
    pub set_size: f64,
}

/// Noise sub-seed for test sample `i`; exposed so oracle tests can replay the
/// exact perturbations the harness used.
pub fn eval_noise_seed(seed: u64, i: usize) -> u64 {
    subseed(seed, Stage::EvalNoise as u64, i as u64)
}

/// APS randomization draw for test sample `i`, perturbed copy `j`, given the
/// per-sample copy count `n_s`. Worst-case evaluation uses copy `j = 0`.
pub fn eval_set_u(seed: u64, i: usize, j: usize, n_s: usize) -> f64 {
    stage_rng(seed, Stage::EvalSetU, (i * n_s + j) as u64).gen()
}

/// Attack sub-seed for test sample `i`; exposed for the same oracle purpose.
pub fn attack_seed(seed: u64, i: usize) -> u64 {
    subseed(seed, Stage::Attack as u64, i as u64)
}

/// Eqs. (10)–(11): per test sample, the fraction of `n_s` perturbed copies
/// whose prediction set contains the truth, and the mean set size over those
/// copies.
#[allow(clippy::too_many_arguments)]
pub fn probabilistic_eval(
    threshold: &Threshold,
    clf: &SoftmaxClassifier,
    test_data: &LabeledDataset,
    budget: &PerturbationBudget,
    n_s: usize,
    scheme: &NoiseScheme,
    score_kind: ScoreKind,
    seed: u64,
) -> Result<Vec<SampleMetrics>> {
    if test_data.is_empty() {
        return Err(Error::EmptyInput("probabilistic_eval needs test data"));
    }
    if n_s == 0 {
        return Err(Error::invalid("n_s", "need at least one perturbation draw"));
    }
    (0..test_data.len())
        .into_par_iter()
        .map(|i| {
            let x = &test_data.xs()[i];
            let y = test_data.ys()[i];
            let noise = sample_noise(scheme, budget, n_s, eval_noise_seed(seed, i))?;
            let mut covered = 0usize;
            let mut size_sum = 0usize;
            for (j, eps) in noise.iter().enumerate() {
                let point: Vec<f64> = x.iter().zip(eps).map(|(a, b)| a + b).collect();
                let probs = clf.predict_proba(&point)?;
                let u = eval_set_u(seed, i, j, n_s);
                let set = prediction_set_with_u(&probs, &threshold.value, score_kind, u)?;
                covered += usize::from(set.contains(y));
                size_sum += set.len();
            }
            Ok(SampleMetrics {
                coverage: covered as f64 / n_s as f64,
                set_size: size_sum as f64 / n_s as f64,
            })
        })
        .collect()
}

/// Eqs. (12)–(13): per test sample, attack once, then record the coverage
/// indicator and set size at the attacked point.
pub fn worst_case_eval(
    threshold: &Threshold,
    clf: &SoftmaxClassifier,
    test_data: &LabeledDataset,
    attack_cfg: &AttackConfig,
    score_kind: ScoreKind,
    seed: u64,
) -> Result<Vec<SampleMetrics>> {
    if test_data.is_empty() {
        return Err(Error::EmptyInput("worst_case_eval needs test data"));
    }
    (0..test_data.len())
        .into_par_iter()
        .map(|i| {
            let x = &test_data.xs()[i];
            let y = test_data.ys()[i];
            let (eps, _) =
                worst_case_perturbation(clf, x, y, score_kind, attack_cfg, attack_seed(seed, i))?;
            let point: Vec<f64> = x.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let probs = clf.predict_proba(&point)?;
            let u = eval_set_u(seed, i, 0, 1);
            let set = prediction_set_with_u(&probs, &threshold.value, score_kind, u)?;
            Ok(SampleMetrics {
                coverage: f64::from(u8::from(set.contains(y))),
                set_size: set.len() as f64,
            })
        })
        .collect()
}

/// Full experiment configuration: task, method, levels, noise, evaluation
/// regime, and run count. Serialized verbatim into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub score_kind: ScoreKind,
    pub classes: usize,
    pub dim: usize,
    pub n_cal: usize,
    pub n_test: usize,
    /// Calibration-time perturbation draws per sample (aPRCP only).
    pub m: usize,
    /// Evaluation-time perturbation draws per sample (probabilistic mode).
    pub n_s: usize,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Explicit inflation constant; defaults to the analytic HPS bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_gap: Option<f64>,
    /// Hold the aPRCP inner level fixed at this value while `s` sweeps the
    /// outer level (the appendix protocol), instead of the Algorithm-1
    /// coupling. Recorded in thresholds as a signed density gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_alpha_tilde: Option<f64>,
    pub radius: f64,
    pub cal_scheme: NoiseScheme,
    pub eval_scheme: NoiseScheme,
    pub mode: EvalMode,
    pub attack_steps: usize,
    pub attack_restarts: usize,
    pub draw_mode: DrawMode,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    /// The desk-scale default mirrors the deployed protocol: 4 classes in
    /// `d = 8`, `n = 2000` calibration and 500 test points, `m = n_s = 128`,
    /// `r = 0.125`, target coverage 0.9, 50 runs.
    fn default() -> Self {
        Self {
            method: Method::Aprcp,
            score_kind: ScoreKind::Hps,
            classes: 4,
            dim: 8,
            n_cal: 2000,
            n_test: 500,
            m: 128,
            n_s: 128,
            alpha: 0.1,
            s: Some(0.05),
            alpha_tilde: None,
            eta: None,
            m_r: None,
            d_gap: None,
            fixed_alpha_tilde: None,
            radius: 0.125,
            cal_scheme: NoiseScheme::UniformBall,
            eval_scheme: NoiseScheme::Shell { shells: 64 },
            mode: EvalMode::Probabilistic,
            attack_steps: crate::adversary::DEFAULT_ATTACK_STEPS,
            attack_restarts: crate::adversary::DEFAULT_ATTACK_RESTARTS,
            draw_mode: DrawMode::Independent,
            runs: 50,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn budget(&self) -> Result<PerturbationBudget> {
        PerturbationBudget::new(self.radius, self.dim)
    }

    pub fn task(&self) -> Result<SyntheticTaskSpec> {
        SyntheticTaskSpec::default_task(self.classes, self.dim)
    }

    /// Validate every parameter domain before any compute.
    pub fn validate(&self) -> Result<()> {
        self.task()?;
        self.budget()?;
        self.cal_scheme.validate()?;
        self.eval_scheme.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(
                "alpha",
                format!("{} not in (0, 1)", self.alpha),
            ));
        }
        if self.n_cal == 0 {
            return Err(Error::invalid("n", "need at least one calibration sample"));
        }
        if self.n_test == 0 {
            return Err(Error::invalid("n_test", "need at least one test sample"));
        }
        if self.runs == 0 {
            return Err(Error::invalid("runs", "need at least one run"));
        }
        if self.mode == EvalMode::Probabilistic && self.n_s == 0 {
            return Err(Error::invalid("n_s", "need at least one evaluation draw"));
        }
        if let Some(m_r) = self.m_r {
            if !(m_r.is_finite() && m_r >= 0.0) {
                return Err(Error::invalid(
                    "m_r",
                    format!("{m_r} not a finite value >= 0"),
                ));
            }
        }
        match self.method {
            Method::Aprcp => {
                if self.m == 0 {
                    return Err(Error::invalid("m", "aPRCP needs calibration draws"));
                }
                let params = derive_aprcp_params(self.alpha, self.s, self.alpha_tilde)?;
                if let Some(d) = self.d_gap {
                    params.with_density_gap(d)?;
                }
                if let Some(fixed) = self.fixed_alpha_tilde {
                    if self.d_gap.is_some() {
                        return Err(Error::invalid(
                            "fixed_alpha_tilde",
                            "cannot combine a fixed inner level with a density gap",
                        ));
                    }
                    params.with_fixed_inner_level(fixed)?;
                }
            }
            Method::Iprcp => {
                let eta = self.eta.unwrap_or(0.0);
                if !(eta >= 0.0 && eta <= self.alpha) {
                    return Err(Error::invalid(
                        "eta",
                        format!("{eta} not in [0, alpha] with alpha = {}", self.alpha),
                    ));
                }
            }
            Method::Vanilla | Method::InflatedAr => {}
        }
        if self.mode == EvalMode::Worst && (self.attack_steps == 0 || self.attack_restarts == 0) {
            return Err(Error::invalid(
                "attack_steps",
                "worst-case mode needs steps and restarts >= 1",
            ));
        }
        Ok(())
    }

    /// The inflation constant for inflated methods: explicit `m_r` if given,
    /// otherwise the analytic HPS bound. The same constant serves as a
    /// conservative `M_{r,η}` for iPRCP, since the uniform bound dominates
    /// every high-probability bound.
    fn inflation(&self, clf: &SoftmaxClassifier, budget: &PerturbationBudget) -> Result<f64> {
        match self.m_r {
            Some(m_r) => Ok(m_r),
            None => inflation_bound(clf, budget, self.score_kind),
        }
    }
}

/// One run's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub threshold: QuantileValue,
    pub coverage: f64,
    pub set_size: f64,
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub set_size_mean: f64,
    pub set_size_std: f64,
}

/// A full experiment's results: the config echo, per-run rows, and aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub per_run: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

/// Sum in ascending value order, so the result is independent of input order.
fn ordered_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = ordered_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = ordered_sum(&sq) / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregate per-run rows; permutation-invariant over run order.
pub fn aggregate_runs(runs: &[RunRecord]) -> Result<Aggregate> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("aggregate_runs needs runs"));
    }
    let coverage: Vec<f64> = runs.iter().map(|r| r.coverage).collect();
    let sizes: Vec<f64> = runs.iter().map(|r| r.set_size).collect();
    let (coverage_mean, coverage_std) = mean_and_std(&coverage);
    let (set_size_mean, set_size_std) = mean_and_std(&sizes);
    Ok(Aggregate {
        runs: runs.len(),
        coverage_mean,
        coverage_std,
        set_size_mean,
        set_size_std,
    })
}

/// Mean `(coverage, set_size)` over per-sample metrics, summed in value order
/// so the result is independent of sample order.
pub fn mean_metrics(samples: &[SampleMetrics]) -> (f64, f64) {
    let coverage: Vec<f64> = samples.iter().map(|s| s.coverage).collect();
    let sizes: Vec<f64> = samples.iter().map(|s| s.set_size).collect();
    (
        ordered_sum(&coverage) / samples.len() as f64,
        ordered_sum(&sizes) / samples.len() as f64,
    )
}

/// Calibrate one threshold on the given data under the config's method.
pub fn calibrate_threshold(
    config: &ExperimentConfig,
    clf: &SoftmaxClassifier,
    cal_data: &LabeledDataset,
    run_seed: u64,
) -> Result<Threshold> {
    let budget = config.budget()?;
    match config.method {
        Method::Vanilla | Method::InflatedAr | Method::Iprcp => {
            let table = ProbabilityTable::from_predictions(clf, cal_data)?;
            let scores = score_batch(
                &table,
                cal_data.ys(),
                config.score_kind,
                subseed(run_seed, Stage::CalScoreU as u64, 0),
            )?;
            let scores: Vec<f64> = scores.iter().map(|s| s.value()).collect();
            match config.method {
                Method::Vanilla => vanilla_cp_threshold(&scores, config.alpha),
                Method::InflatedAr => {
                    let m_r = config.inflation(clf, &budget)?;
                    inflated_ar_threshold(&scores, config.alpha, m_r)
                }
                Method::Iprcp => {
                    let m_r_eta = config.inflation(clf, &budget)?;
                    iprcp_threshold(&scores, config.alpha, config.eta.unwrap_or(0.0), m_r_eta)
                }
                Method::Aprcp => unreachable!(),
            }
        }
        Method::Aprcp => {
            let mut params = derive_aprcp_params(config.alpha, config.s, config.alpha_tilde)?;
            if let Some(d) = config.d_gap {
                params = params.with_density_gap(d)?;
            }
            if let Some(fixed) = config.fixed_alpha_tilde {
                params = params.with_fixed_inner_level(fixed)?;
            }
            let (threshold, _) = aprcp_calibrate(
                cal_data,
                clf,
                config.score_kind,
                &budget,
                &config.cal_scheme,
                config.m,
                &params,
                config.draw_mode,
                run_seed,
            )?;
            Ok(threshold)
        }
    }
}

/// Evaluate a threshold on test data under the config's mode.
pub fn evaluate_threshold(
    config: &ExperimentConfig,
    threshold: &Threshold,
    clf: &SoftmaxClassifier,
    test_data: &LabeledDataset,
    run_seed: u64,
) -> Result<Vec<SampleMetrics>> {
    let budget = config.budget()?;
    match config.mode {
        EvalMode::Probabilistic => probabilistic_eval(
            threshold,
            clf,
            test_data,
            &budget,
            config.n_s,
            &config.eval_scheme,
            config.score_kind,
            run_seed,
        ),
        EvalMode::Worst => {
            let cfg =
                AttackConfig::with_schedule(budget, config.attack_steps, config.attack_restarts);
            worst_case_eval(threshold, clf, test_data, &cfg, config.score_kind, run_seed)
        }
    }
}

/// Derived per-run seed: every run re-draws data, calibration noise, and
/// evaluation noise from its own stream.
pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    subseed(base_seed, Stage::Run as u64, run as u64)
}

/// Execute one run end to end: fresh data, calibrate, evaluate.
pub fn execute_run(config: &ExperimentConfig, run: usize) -> Result<RunRecord> {
    let seed = run_seed(config.seed, run);
    let task = config.task()?;
    let clf = bayes_classifier(&task);
    let cal_data =
        generate_synthetic_dataset(&task, config.n_cal, subseed(seed, Stage::DataGen as u64, 0));
    let test_data = generate_synthetic_dataset(
        &task,
        config.n_test,
        subseed(seed, Stage::DataGen as u64, 1),
    );
    let threshold = calibrate_threshold(config, &clf, &cal_data, seed)?;
    let samples = evaluate_threshold(config, &threshold, &clf, &test_data, seed)?;
    let (coverage, set_size) = mean_metrics(&samples);
    Ok(RunRecord {
        run,
        seed,
        threshold: threshold.value,
        coverage,
        set_size,
    })
}

/// Run the configured experiment `R` times and aggregate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let per_run = (0..config.runs)
        .map(|run| {
            execute_run(config, run).map_err(|e| match e {
                Error::InvalidParameter { name, message } => Error::InvalidParameter {
                    name,
                    message: format!("run {run}: {message}"),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate_runs(&per_run)?;
    Ok(ExperimentReport {
        config: config.clone(),
        per_run,
        aggregate,
    })
}

/// The effective aPRCP level triple `(s, α̃, d_gap)` after applying any
/// density gap or pinned inner level; front ends echo this next to each
/// report so readers see the levels actually calibrated with.
pub fn derive_levels_echo(config: &ExperimentConfig) -> Result<(f64, f64, f64)> {
    let mut params = derive_aprcp_params(config.alpha, config.s, config.alpha_tilde)?;
    if let Some(d) = config.d_gap {
        params = params.with_density_gap(d)?;
    }
    if let Some(fixed) = config.fixed_alpha_tilde {
        params = params.with_fixed_inner_level(fixed)?;
    }
    Ok((params.s(), params.alpha_tilde(), params.d_gap()))
}

/// Grid for [`sweep_tradeoff`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepGrid {
    /// Sweep `s` with the Algorithm-1 coupling (α̃ derived per point), or,
    /// with `fixed_alpha_tilde`, hold the inner level fixed while `s` moves
    /// only the outer level (the appendix protocol).
    S {
        values: Vec<f64>,
        fixed_alpha_tilde: Option<f64>,
    },
    /// Sweep α̃ with the coupling (s derived per point).
    AlphaTilde { values: Vec<f64> },
}

/// One experiment per grid point, all sharing the base seed so every point
/// sees identical data and noise draws and the curves are comparable.
pub fn sweep_tradeoff(
    config: &ExperimentConfig,
    grid: &SweepGrid,
) -> Result<Vec<ExperimentReport>> {
    if config.method != Method::Aprcp {
        return Err(Error::invalid("method", "sweep_tradeoff applies to aPRCP"));
    }
    let points: Vec<ExperimentConfig> = match grid {
        SweepGrid::S {
            values,
            fixed_alpha_tilde,
        } => {
            if values.is_empty() {
                return Err(Error::EmptyInput("sweep grid needs values"));
            }
            values
                .iter()
                .map(|&s| ExperimentConfig {
                    s: Some(s),
                    alpha_tilde: None,
                    fixed_alpha_tilde: *fixed_alpha_tilde,
                    ..config.clone()
                })
                .collect()
        }
        SweepGrid::AlphaTilde { values } => {
            if values.is_empty() {
                return Err(Error::EmptyInput("sweep grid needs values"));
            }
            values
                .iter()
                .map(|&tilde| ExperimentConfig {
                    s: None,
                    alpha_tilde: Some(tilde),
                    fixed_alpha_tilde: None,
                    ..config.clone()
                })
                .collect()
        }
    };
    points.iter().map(run_experiment).collect()
}

impl ExperimentReport {
    /// Pretty JSON, newline-terminated. Deterministic: field order is fixed
    /// and no timestamps are recorded.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Data {
            path: "<report>".into(),
            message: e.to_string(),
        })?;
        text.push('\n');
        Ok(text)
    }

    /// Aligned-column text for humans.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "method {}  score {}  mode {:?}  alpha {}  r {}",
            c.method, c.score_kind, c.mode, c.alpha, c.radius
        );
        let _ = writeln!(
            out,
            "task C={} d={}  n={} n_test={}  m={} n_s={}  runs={}  seed={}",
            c.classes, c.dim, c.n_cal, c.n_test, c.m, c.n_s, c.runs, c.seed
        );
        let mut levels = String::new();
        if let Some(s) = c.s {
            let _ = write!(levels, "s={s} ");
        }
        if let Some(t) = c.alpha_tilde {
            let _ = write!(levels, "alpha_tilde={t} ");
        }
        if let Some(t) = c.fixed_alpha_tilde {
            let _ = write!(levels, "fixed_alpha_tilde={t} ");
        }
        if let Some(e) = c.eta {
            let _ = write!(levels, "eta={e} ");
        }
        if let Some(m) = c.m_r {
            let _ = write!(levels, "m_r={m} ");
        }
        if let Some(d) = c.d_gap {
            let _ = write!(levels, "d_gap={d} ");
        }
        if !levels.is_empty() {
            let _ = writeln!(out, "levels {levels}");
        }
        let _ = writeln!(
            out,
            "{:>4}  {:>20}  {:>12}  {:>9}  {:>9}",
            "run", "seed", "threshold", "coverage", "set_size"
        );
        for r in &self.per_run {
            let _ = writeln!(
                out,
                "{:>4}  {:>20}  {:>12}  {:>9.4}  {:>9.4}",
                r.run,
                r.seed,
                format!("{}", r.threshold),
                r.coverage,
                r.set_size
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "{:>4}  {:>20}  {:>12}  {:>9.4}  {:>9.4}",
            "mean", "", "", a.coverage_mean, a.set_size_mean
        );
        let _ = writeln!(
            out,
            "{:>4}  {:>20}  {:>12}  {:>9.4}  {:>9.4}",
            "std", "", "", a.coverage_std, a.set_size_std
        );
        out
    }

    /// Per-run CSV rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,seed,threshold,coverage,set_size\n");
        for r in &self.per_run {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.run, r.seed, r.threshold, r.coverage, r.set_size
            );
        }
        out
    }
}
