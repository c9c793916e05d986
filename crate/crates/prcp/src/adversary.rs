//! Worst-case perturbation search inside the budget ball.
//!
//! The attack is projected gradient ascent on the HPS score of the true label
//! (equivalently, minimizing the true-class probability), the natural
//! white-box objective for the differentiable softmax classifier. APS has no
//! usable gradient through its sort, so APS evaluations are attacked through
//! the same HPS objective as a surrogate; the returned score is always the
//! HPS objective value.
//!
//! A brute-force polar-grid oracle backs the attack in tests for `d ≤ 3`.

use crate::classifier::SoftmaxClassifier;
use crate::noise::{l2_norm, sample_uniform_ball, PerturbationBudget};
use crate::scores::ScoreKind;
use crate::seed::{subseed, Stage};
use crate::{Error, Result};

/// Projected-gradient-ascent schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    steps: usize,
    step_size: f64,
    restarts: usize,
    budget: PerturbationBudget,
}

/// Default ascent steps.
pub const DEFAULT_ATTACK_STEPS: usize = 100;
/// Default random restarts (restart 0 always starts at zero).
pub const DEFAULT_ATTACK_RESTARTS: usize = 5;

impl AttackConfig {
    pub fn new(
        steps: usize,
        step_size: f64,
        restarts: usize,
        budget: PerturbationBudget,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("attack_steps", "need at least one step"));
        }
        if !(step_size.is_finite() && step_size > 0.0) {
            return Err(Error::invalid(
                "step_size",
                format!("{step_size} not a finite value > 0"),
            ));
        }
        if restarts == 0 {
            return Err(Error::invalid(
                "attack_restarts",
                "need at least one restart",
            ));
        }
        Ok(Self {
            steps,
            step_size,
            restarts,
            budget,
        })
    }

    /// The standard schedule: `T = 100` steps of size `2.5·r/T`, 5 restarts.
    /// The total travel budget `2.5·r` comfortably crosses the ball.
    pub fn default_for(budget: PerturbationBudget) -> Self {
        Self::with_schedule(budget, DEFAULT_ATTACK_STEPS, DEFAULT_ATTACK_RESTARTS)
    }

    /// The default step size for explicit step/restart counts.
    pub fn with_schedule(budget: PerturbationBudget, steps: usize, restarts: usize) -> Self {
        let steps = steps.max(1);
        let step_size = (2.5 * budget.radius() / steps as f64).max(1e-12);
        Self::new(steps, step_size, restarts.max(1), budget).expect("positive schedule")
    }

    pub fn budget(&self) -> &PerturbationBudget {
        &self.budget
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }
}

/// HPS objective `1 − p_y(x+ε)` and its value's gradient pieces at one point.
fn objective_and_gradient(
    clf: &SoftmaxClassifier,
    point: &[f64],
    y: usize,
) -> Result<(f64, Vec<f64>)> {
    let probs = clf.predict_proba(point)?;
    let p = probs.as_slice();
    let p_y = p[y];
    // d(1 − p_y)/dx = p_y·(Σ_c p_c·w_c − w_y).
    let dim = clf.dim();
    let mut grad = vec![0.0; dim];
    for (c, row) in clf.weights().iter().enumerate() {
        for k in 0..dim {
            grad[k] += p[c] * row[k];
        }
    }
    for (k, g) in grad.iter_mut().enumerate() {
        *g = p_y * (*g - clf.weights()[y][k]);
    }
    Ok((1.0 - p_y, grad))
}

fn project(eps: &mut [f64], radius: f64) {
    let norm = l2_norm(eps);
    if norm > radius {
        let scale = if radius == 0.0 { 0.0 } else { radius / norm };
        for e in eps.iter_mut() {
            *e *= scale;
        }
    }
}

/// Projected gradient ascent on the HPS score over the budget ball.
///
/// Runs `restarts` chains (the first from `ε = 0`, the rest from uniform
/// in-ball starts), takes a normalized-gradient step of fixed size, projects
/// onto the ball after every step, and keeps the best iterate seen anywhere.
/// Because `ε = 0` is always evaluated, the returned score never falls below
/// the clean score.
pub fn worst_case_perturbation(
    clf: &SoftmaxClassifier,
    x: &[f64],
    y: usize,
    score_kind: ScoreKind,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    // APS rides the HPS surrogate; nothing kind-specific happens below.
    let _ = score_kind;
    if y >= clf.class_count() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: clf.class_count(),
        });
    }
    if cfg.budget.dim() != clf.dim() {
        return Err(Error::ShapeMismatch {
            message: "budget vs classifier dimension",
            left: cfg.budget.dim(),
            right: clf.dim(),
        });
    }
    let radius = cfg.budget.radius();
    let dim = clf.dim();
    let mut best_eps = vec![0.0; dim];
    let mut best_val = f64::NEG_INFINITY;

    for restart in 0..cfg.restarts {
        let mut eps = if restart == 0 {
            vec![0.0; dim]
        } else {
            sample_uniform_ball(
                &cfg.budget,
                1,
                subseed(seed, Stage::Attack as u64, restart as u64),
            )
            .pop()
            .expect("one draw requested")
        };
        for t in 0..=cfg.steps {
            let point: Vec<f64> = x.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let (val, grad) = objective_and_gradient(clf, &point, y)?;
            if val > best_val {
                best_val = val;
                best_eps.copy_from_slice(&eps);
            }
            if t == cfg.steps {
                break;
            }
            let g_norm = l2_norm(&grad);
            if g_norm <= 1e-12 {
                break; // flat objective: nowhere to climb
            }
            for (e, g) in eps.iter_mut().zip(&grad) {
                *e += cfg.step_size * g / g_norm;
            }
            project(&mut eps, radius);
        }
    }
    Ok((best_eps, best_val))
}

/// Exhaustive polar/spherical-grid maximization of the HPS objective over the
/// closed ball, for `d ≤ 3`. `resolution` counts grid steps per axis, so the
/// `d = 2` grid has about `resolution²` points.
pub fn brute_force_worst(
    clf: &SoftmaxClassifier,
    x: &[f64],
    y: usize,
    score_kind: ScoreKind,
    budget: &PerturbationBudget,
    resolution: usize,
) -> Result<(Vec<f64>, f64)> {
    let _ = score_kind; // HPS objective, as in the attack
    let dim = budget.dim();
    if dim > 3 {
        return Err(Error::DimensionTooHigh { dim, max: 3 });
    }
    if dim != clf.dim() {
        return Err(Error::ShapeMismatch {
            message: "budget vs classifier dimension",
            left: dim,
            right: clf.dim(),
        });
    }
    if resolution == 0 {
        return Err(Error::invalid("resolution", "need at least one grid step"));
    }
    if y >= clf.class_count() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: clf.class_count(),
        });
    }
    let r = budget.radius();
    let res = resolution;
    let mut best_eps = vec![0.0; dim];
    let mut best_val = f64::NEG_INFINITY;
    let mut consider = |eps: Vec<f64>| -> Result<()> {
        let point: Vec<f64> = x.iter().zip(&eps).map(|(a, b)| a + b).collect();
        let (val, _) = objective_and_gradient(clf, &point, y)?;
        if val > best_val {
            best_val = val;
            best_eps = eps;
        }
        Ok(())
    };
    match dim {
        1 => {
            for ri in 0..=res {
                let rad = r * ri as f64 / res as f64;
                consider(vec![rad])?;
                consider(vec![-rad])?;
            }
        }
        2 => {
            consider(vec![0.0, 0.0])?;
            for ri in 1..=res {
                let rad = r * ri as f64 / res as f64;
                for ai in 0..res {
                    let ang = std::f64::consts::TAU * ai as f64 / res as f64;
                    consider(vec![rad * ang.cos(), rad * ang.sin()])?;
                }
            }
        }
        _ => {
            consider(vec![0.0, 0.0, 0.0])?;
            for ri in 1..=res {
                let rad = r * ri as f64 / res as f64;
                for ti in 0..=res {
                    let theta = std::f64::consts::PI * ti as f64 / res as f64;
                    for pi in 0..res {
                        let phi = std::f64::consts::TAU * pi as f64 / res as f64;
                        consider(vec![
                            rad * theta.sin() * phi.cos(),
                            rad * theta.sin() * phi.sin(),
                            rad * theta.cos(),
                        ])?;
                    }
                }
            }
        }
    }
    Ok((best_eps, best_val))
}
