//! Perturbation samplers for the ℓ2 budget ball.
//!
//! Three schemes, all emitting vectors with `‖ε‖₂ ≤ r`:
//!
//! * **Uniform ball**: direction uniform on the sphere, norm `r·U^{1/d}`, so
//!   draws are uniform over the ball's volume. Default for calibration.
//! * **Shell**: `K` equally spaced radii `k·r/K`, equal counts per radius,
//!   directions uniform. Default for evaluation.
//! * **Gaussian in ball**: centered Gaussian draws rejection-resampled until
//!   they land inside the ball, giving a truncated Gaussian rather than a mass
//!   on the boundary.
//!
//! Each sampler is a pure function of `(parameters, seed)`: callers that fan
//! out across threads derive one sub-seed per work item with
//! [`crate::subseed`] and results stay independent of scheduling.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::{Error, Result};

/// Absolute slack on ball membership checks.
const MEMBERSHIP_SLACK: f64 = 1e-12;
/// Rejection sampling re-estimates its acceptance rate every this many draws.
const ACCEPTANCE_PROBE: usize = 10_000;
/// Acceptance rates below this abort with a diagnostic.
const ACCEPTANCE_FLOOR: f64 = 1e-4;

/// An ℓ2 perturbation budget: the ball `{ε : ‖ε‖₂ ≤ r}` in `d` dimensions.
///
/// Only the ℓ2 norm is supported; the `norm_order` field reserves room for
/// other norms without admitting them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    radius: f64,
    dim: usize,
    norm_order: u32,
}

impl PerturbationBudget {
    /// An ℓ2 ball of the given radius and dimension.
    pub fn new(radius: f64, dim: usize) -> Result<Self> {
        Self::with_norm(radius, dim, 2)
    }

    /// As [`PerturbationBudget::new`] but naming the norm order explicitly.
    /// Only `2` is accepted.
    pub fn with_norm(radius: f64, dim: usize, norm_order: u32) -> Result<Self> {
        if norm_order != 2 {
            return Err(Error::invalid(
                "norm_order",
                format!("only the l2 norm is supported, got l{norm_order}"),
            ));
        }
        if !radius.is_finite() || radius < 0.0 {
            return Err(Error::invalid(
                "radius",
                format!("{radius} not a finite value >= 0"),
            ));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "dimension must be at least 1"));
        }
        Ok(Self {
            radius,
            dim,
            norm_order,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether `eps` lies in the ball, with `1e-12` absolute slack.
    pub fn contains(&self, eps: &[f64]) -> bool {
        eps.len() == self.dim && l2_norm(eps) <= self.radius + MEMBERSHIP_SLACK
    }
}

/// Which perturbation distribution to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseScheme {
    UniformBall,
    /// `shells` equally spaced radii, equal counts per radius.
    Shell {
        shells: usize,
    },
    /// Truncated Gaussian with norm scale `sigma` (per-coordinate standard
    /// deviation `sigma/√d`, so `E‖ε‖² = sigma²` before truncation).
    GaussianInBall {
        sigma: f64,
    },
}

impl NoiseScheme {
    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            NoiseScheme::UniformBall => Ok(()),
            NoiseScheme::Shell { shells } => {
                if shells == 0 {
                    Err(Error::invalid("shells", "shell count must be at least 1"))
                } else {
                    Ok(())
                }
            }
            NoiseScheme::GaussianInBall { sigma } => {
                if sigma.is_finite() && sigma > 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(
                        "sigma",
                        format!("{sigma} not a finite value > 0"),
                    ))
                }
            }
        }
    }
}

impl std::fmt::Display for NoiseScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseScheme::UniformBall => f.write_str("uniform-ball"),
            NoiseScheme::Shell { shells } => write!(f, "shell(K={shells})"),
            NoiseScheme::GaussianInBall { sigma } => write!(f, "gaussian-in-ball(sigma={sigma})"),
        }
    }
}

/// Draw `count` vectors uniformly from the budget ball.
pub fn sample_uniform_ball(budget: &PerturbationBudget, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let norm = budget.radius * rng.gen::<f64>().powf(1.0 / budget.dim as f64);
            scaled_direction(budget.dim, norm, &mut rng)
        })
        .collect()
}

/// Draw `per_radius` vectors at each of `k` equally spaced shell radii
/// `r^(j) = j·r/k`, `j = 1..=k`. Norms are exact up to direction-normalization
/// rounding (well within `1e-9`).
pub fn sample_shell_scheme(
    budget: &PerturbationBudget,
    k: usize,
    per_radius: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::invalid("shells", "shell count must be at least 1"));
    }
    if per_radius == 0 {
        return Err(Error::invalid(
            "per_radius",
            "need at least one draw per shell",
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * per_radius);
    for j in 1..=k {
        let radius = budget.radius * j as f64 / k as f64;
        for _ in 0..per_radius {
            out.push(scaled_direction(budget.dim, radius, &mut rng));
        }
    }
    Ok(out)
}

/// Draw `count` vectors from a centered Gaussian truncated to the budget ball.
///
/// `sigma` scales the norm: coordinates have standard deviation `sigma/√d`, so
/// the untruncated norm satisfies `E‖ε‖² = sigma²` and acceptance stays
/// practical whenever `sigma` is within an order of magnitude of `r`. If the
/// observed acceptance rate drops below `1e-4`, sampling aborts with a
/// diagnostic instead of spinning.
pub fn sample_gaussian_ball(
    budget: &PerturbationBudget,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::invalid(
            "sigma",
            format!("{sigma} not a finite value > 0"),
        ));
    }
    if budget.radius == 0.0 {
        // Degenerate ball: the truncated distribution collapses to the origin.
        return Ok(vec![vec![0.0; budget.dim]; count]);
    }
    let coord_std = sigma / (budget.dim as f64).sqrt();
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        let eps: Vec<f64> = (0..budget.dim)
            .map(|_| coord_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if l2_norm(&eps) <= budget.radius {
            out.push(eps);
        }
        if attempts % ACCEPTANCE_PROBE == 0 {
            let rate = out.len() as f64 / attempts as f64;
            if rate < ACCEPTANCE_FLOOR {
                return Err(Error::AcceptanceTooLow {
                    rate,
                    floor: ACCEPTANCE_FLOOR,
                    probe: attempts,
                    sigma,
                    radius: budget.radius,
                });
            }
        }
    }
    Ok(out)
}

/// Draw `count` vectors from `scheme`. The shell scheme splits `count` evenly
/// across radii and rejects counts that do not divide.
pub fn sample_noise(
    scheme: &NoiseScheme,
    budget: &PerturbationBudget,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    scheme.validate()?;
    match *scheme {
        NoiseScheme::UniformBall => Ok(sample_uniform_ball(budget, count, seed)),
        NoiseScheme::Shell { shells } => {
            if count % shells != 0 {
                return Err(Error::invalid(
                    "count",
                    format!("{count} draws do not divide evenly over {shells} shells"),
                ));
            }
            sample_shell_scheme(budget, shells, count / shells, seed)
        }
        NoiseScheme::GaussianInBall { sigma } => sample_gaussian_ball(budget, sigma, count, seed),
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A uniformly random direction scaled to the given norm. The zero norm gives
/// the zero vector.
fn scaled_direction(dim: usize, norm: f64, rng: &mut Rng) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let g_norm = l2_norm(&g);
        if g_norm > 0.0 {
            return g.iter().map(|x| x * norm / g_norm).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn budget(r: f64, d: usize) -> PerturbationBudget {
        PerturbationBudget::new(r, d).unwrap()
    }

    #[test]
    fn budget_validation() {
        assert!(PerturbationBudget::new(-0.1, 4).is_err());
        assert!(PerturbationBudget::new(f64::NAN, 4).is_err());
        assert!(PerturbationBudget::new(0.5, 0).is_err());
        assert!(PerturbationBudget::with_norm(0.5, 4, 1).is_err());
        assert!(PerturbationBudget::with_norm(0.5, 4, 2).is_ok());
    }

    #[test]
    fn membership_check() {
        let b = budget(1.0, 2);
        assert!(b.contains(&[0.6, 0.8]));
        assert!(b.contains(&[0.0, 0.0]));
        assert!(!b.contains(&[0.7, 0.8]));
        assert!(!b.contains(&[1.0])); // wrong dimension
    }

    #[test]
    fn uniform_ball_membership_and_shape() {
        let b = budget(0.125, 32);
        let draws = sample_uniform_ball(&b, 128, 7);
        assert_eq!(draws.len(), 128);
        for eps in &draws {
            assert_eq!(eps.len(), 32);
            assert!(b.contains(eps));
        }
    }

    #[test]
    fn uniform_ball_zero_radius_and_zero_count() {
        let b = budget(0.0, 5);
        let draws = sample_uniform_ball(&b, 3, 1);
        assert_eq!(draws, vec![vec![0.0; 5]; 3]);
        assert!(sample_uniform_ball(&budget(1.0, 5), 0, 1).is_empty());
    }

    #[test]
    fn uniform_ball_deterministic() {
        let b = budget(0.5, 8);
        assert_eq!(
            sample_uniform_ball(&b, 50, 99),
            sample_uniform_ball(&b, 50, 99)
        );
        assert_ne!(
            sample_uniform_ball(&b, 50, 99),
            sample_uniform_ball(&b, 50, 100)
        );
    }

    #[test]
    fn uniform_ball_radial_cdf_matches_t_to_the_d() {
        // Under uniformity, P(‖ε‖ ≤ t·r) = t^d, so t_i = (‖ε_i‖/r)^... the
        // transformed radii u_i = (‖ε_i‖/r)^d must be U(0,1). One-sample
        // Kolmogorov-Smirnov at n = 1e5, significance 1e-3: reject when
        // D_n > sqrt(ln(2/a)/(2n)) ≈ 0.006165.
        let n = 100_000usize;
        let d = 8usize;
        let b = budget(1.0, d);
        let mut u: Vec<f64> = sample_uniform_ball(&b, n, 5)
            .iter()
            .map(|eps| l2_norm(eps).powi(d as i32))
            .collect();
        u.sort_by(f64::total_cmp);
        let mut d_n = 0.0f64;
        for (i, &ui) in u.iter().enumerate() {
            let hi = (i + 1) as f64 / n as f64 - ui;
            let lo = ui - i as f64 / n as f64;
            d_n = d_n.max(hi).max(lo);
        }
        let critical = ((2.0f64 / 1e-3).ln() / (2.0 * n as f64)).sqrt();
        assert!(
            d_n < critical,
            "KS statistic {d_n:.6} exceeds critical value {critical:.6}"
        );
    }

    #[test]
    fn shell_norms_are_exact_multiset() {
        let b = budget(0.8, 6);
        let draws = sample_shell_scheme(&b, 4, 3, 11).unwrap();
        assert_eq!(draws.len(), 12);
        let mut norms: Vec<f64> = draws.iter().map(|e| l2_norm(e)).collect();
        norms.sort_by(f64::total_cmp);
        let expected = [0.2, 0.2, 0.2, 0.4, 0.4, 0.4, 0.6, 0.6, 0.6, 0.8, 0.8, 0.8];
        for (got, want) in norms.iter().zip(expected) {
            assert!(
                (got - want).abs() < 1e-9,
                "norm {got} vs shell radius {want}"
            );
        }
    }

    #[test]
    fn shell_single_draw_hits_exact_budget_radius() {
        let b = budget(0.125, 32);
        let draws = sample_shell_scheme(&b, 1, 1, 3).unwrap();
        assert_eq!(draws.len(), 1);
        assert!((l2_norm(&draws[0]) - 0.125).abs() < 1e-9);

        // The full-scale configuration: 64 shells, 2 draws each.
        let many = sample_shell_scheme(&b, 64, 2, 3).unwrap();
        assert_eq!(many.len(), 128);
        for eps in &many {
            assert!(b.contains(eps));
        }
    }

    #[test]
    fn shell_rejects_degenerate_counts() {
        let b = budget(0.5, 4);
        assert!(sample_shell_scheme(&b, 0, 2, 1).is_err());
        assert!(sample_shell_scheme(&b, 2, 0, 1).is_err());
    }

    #[test]
    fn gaussian_ball_membership_and_determinism() {
        let b = budget(0.125, 32);
        let draws = sample_gaussian_ball(&b, 0.125, 200, 17).unwrap();
        assert_eq!(draws.len(), 200);
        for eps in &draws {
            assert!(b.contains(eps));
        }
        assert_eq!(draws, sample_gaussian_ball(&b, 0.125, 200, 17).unwrap());
    }

    #[test]
    fn gaussian_ball_tiny_sigma_is_near_zero() {
        let b = budget(0.125, 16);
        for eps in sample_gaussian_ball(&b, 1e-9, 20, 2).unwrap() {
            assert!(l2_norm(&eps) < 1e-6);
        }
    }

    #[test]
    fn gaussian_ball_mean_is_near_zero() {
        // CLT bound per coordinate: |mean| < 5·(σ/√d)/√n. Truncation to a
        // centered ball only shrinks the coordinate variance, so the
        // untruncated std is a valid (conservative) scale.
        let n = 100_000usize;
        let d = 8usize;
        let sigma = 0.0625;
        let b = budget(0.125, d);
        let draws = sample_gaussian_ball(&b, sigma, n, 23).unwrap();
        let bound = 5.0 * (sigma / (d as f64).sqrt()) / (n as f64).sqrt();
        for coord in 0..d {
            let mean = draws.iter().map(|e| e[coord]).sum::<f64>() / n as f64;
            assert!(
                mean.abs() < bound,
                "coordinate {coord} mean {mean:.3e} exceeds CLT bound {bound:.3e}"
            );
        }
    }

    #[test]
    fn gaussian_ball_rejects_hopeless_sigma() {
        let b = budget(0.125, 8);
        let err = sample_gaussian_ball(&b, 12.5, 10, 3).unwrap_err();
        match err {
            Error::AcceptanceTooLow { rate, floor, .. } => {
                assert!(rate < floor);
            }
            other => panic!("expected AcceptanceTooLow, got {other:?}"),
        }
        assert_eq!(
            sample_gaussian_ball(&b, 12.5, 10, 3)
                .unwrap_err()
                .exit_code(),
            4
        );
    }

    #[test]
    fn gaussian_ball_rejects_bad_sigma() {
        let b = budget(0.125, 8);
        assert!(sample_gaussian_ball(&b, 0.0, 4, 1).is_err());
        assert!(sample_gaussian_ball(&b, -1.0, 4, 1).is_err());
        assert!(sample_gaussian_ball(&b, f64::NAN, 4, 1).is_err());
    }

    #[test]
    fn scheme_dispatch() {
        let b = budget(0.5, 4);
        let uniform = sample_noise(&NoiseScheme::UniformBall, &b, 8, 1).unwrap();
        assert_eq!(uniform.len(), 8);
        assert_eq!(uniform, sample_uniform_ball(&b, 8, 1));

        let shell = sample_noise(&NoiseScheme::Shell { shells: 4 }, &b, 8, 1).unwrap();
        assert_eq!(shell, sample_shell_scheme(&b, 4, 2, 1).unwrap());
        assert!(sample_noise(&NoiseScheme::Shell { shells: 3 }, &b, 8, 1).is_err());
        assert!(sample_noise(&NoiseScheme::Shell { shells: 0 }, &b, 8, 1).is_err());

        let gauss = sample_noise(&NoiseScheme::GaussianInBall { sigma: 0.25 }, &b, 8, 1).unwrap();
        assert_eq!(gauss, sample_gaussian_ball(&b, 0.25, 8, 1).unwrap());
        assert!(sample_noise(&NoiseScheme::GaussianInBall { sigma: 0.0 }, &b, 8, 1).is_err());
    }

    #[test]
    fn distinct_seeds_share_no_vectors() {
        let b = budget(0.5, 4);
        let a = sample_uniform_ball(&b, 1000, 1);
        let c = sample_uniform_ball(&b, 1000, 2);
        assert!(a.iter().all(|v| !c.contains(v)));
    }

    #[test]
    fn scheme_serde_round_trip() {
        for scheme in [
            NoiseScheme::UniformBall,
            NoiseScheme::Shell { shells: 64 },
            NoiseScheme::GaussianInBall { sigma: 0.125 },
        ] {
            let json = serde_json::to_string(&scheme).unwrap();
            let back: NoiseScheme = serde_json::from_str(&json).unwrap();
            assert_eq!(scheme, back);
        }
    }
}
