//! Stochastic gradient estimation over pruning vectors: Gaussian sampling,
//! the log-likelihood-trick estimate, the mean update, decay schedules, and
//! the Lipschitz lower-bound tracker.
//!
//! The estimate averages `(E(mu+n_i) - b) * n_i / sigma^2` over samples. The
//! 1/M normalization turns the sampled sum into a Monte-Carlo mean; the mean
//! baseline `b` leaves the expectation unchanged (E[n] = 0) and reduces
//! variance. Disabling the baseline restores the bare log-likelihood form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::space::{clamp, ArchitectureSpace, PruningVector};

/// Isotropic Gaussian over pruning vectors, centered on the current mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mu: PruningVector,
    /// Shared isotropic deviation, in normalized vector units.
    pub sigma: f64,
}

impl GaussianPolicy {
    pub fn new(mu: PruningVector, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
        }
        Ok(GaussianPolicy { mu, sigma })
    }
}

/// One evaluated perturbation of the current mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluatedSample {
    pub noise: Vec<f64>,
    /// Penalized error at the perturbed vector.
    pub error: f64,
    pub cost: f64,
    pub loss: f64,
}

/// Linear decay from `initial` to `final_value` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial: f64,
    pub final_value: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(initial: f64, final_value: f64, total_steps: usize) -> Result<Self> {
        if total_steps < 1 {
            return Err(Error::InvalidArgument("schedule needs total_steps >= 1".into()));
        }
        Ok(Schedule {
            initial,
            final_value,
            total_steps,
        })
    }

    pub fn value(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::ScheduleRange {
                step,
                total: self.total_steps,
            });
        }
        let t = step as f64 / self.total_steps as f64;
        Ok(self.initial + (self.final_value - self.initial) * t)
    }
}

pub fn schedule_value(s: &Schedule, step: usize) -> Result<f64> {
    s.value(step)
}

/// Draw `count` i.i.d. noise vectors, each coordinate `N(0, sigma^2)`.
pub fn sample_noises_with(
    dim: usize,
    sigma: f64,
    count: usize,
    rng: &mut DetRng,
) -> Result<Vec<Vec<f64>>> {
    if count < 1 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
    }
    Ok((0..count)
        .map(|_| (0..dim).map(|_| sigma * rng.next_normal()).collect())
        .collect())
}

/// Seeded convenience wrapper; deterministic given the seed.
pub fn sample_noises(dim: usize, sigma: f64, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_noises_with(dim, sigma, count, &mut DetRng::new(seed, 0))
}

/// Monte-Carlo gradient estimate `(1/(M sigma^2)) sum (E_i - b) n_i`.
pub fn estimate_gradient(
    samples: &[EvaluatedSample],
    sigma: f64,
    use_baseline: bool,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let dim = samples[0].noise.len();
    for s in samples {
        if s.noise.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.noise.len(),
            });
        }
    }
    let m = samples.len() as f64;
    let baseline = if use_baseline {
        samples.iter().map(|s| s.error).sum::<f64>() / m
    } else {
        0.0
    };
    let scale = 1.0 / (m * sigma * sigma);
    let mut grad = vec![0.0; dim];
    for s in samples {
        let w = (s.error - baseline) * scale;
        for (g, &n) in grad.iter_mut().zip(&s.noise) {
            *g += w * n;
        }
    }
    Ok(grad)
}

/// `mu' = clamp(mu - alpha * gradient)`; sigma is unchanged.
pub fn update_mu(
    policy: &GaussianPolicy,
    gradient: &[f64],
    alpha: f64,
    space: &ArchitectureSpace,
) -> Result<GaussianPolicy> {
    if gradient.len() != policy.mu.len() {
        return Err(Error::DimensionMismatch {
            expected: policy.mu.len(),
            got: gradient.len(),
        });
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let stepped = PruningVector::new(
        policy
            .mu
            .entries
            .iter()
            .zip(gradient)
            .map(|(&m, &g)| m - alpha * g)
            .collect(),
    );
    Ok(GaussianPolicy {
        mu: clamp(&stepped, space),
        sigma: policy.sigma,
    })
}

/// Maximum difference quotient `|E(mu+n) - E(mu)| / ||n||` over one batch.
/// Zero-norm noise vectors are skipped.
pub fn lipschitz_lower_bound(samples: &[EvaluatedSample], error_at_mu: f64) -> f64 {
    samples
        .iter()
        .filter_map(|s| {
            let norm = s.noise.iter().map(|n| n * n).sum::<f64>().sqrt();
            (norm > 0.0).then(|| (s.error - error_at_mu).abs() / norm)
        })
        .fold(0.0, f64::max)
}

/// Running maximum of the difference quotient across a whole run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LipschitzTracker {
    bound: f64,
}

impl LipschitzTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, samples: &[EvaluatedSample], error_at_mu: f64) -> f64 {
        self.bound = self.bound.max(lipschitz_lower_bound(samples, error_at_mu));
        self.bound
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::desk_space;

    fn samples_from(noises: Vec<Vec<f64>>, errors: Vec<f64>) -> Vec<EvaluatedSample> {
        noises
            .into_iter()
            .zip(errors)
            .map(|(noise, error)| EvaluatedSample {
                noise,
                error,
                cost: 0.0,
                loss: error,
            })
            .collect()
    }

    #[test]
    fn noises_deterministic_and_shaped() {
        let a = sample_noises(4, 0.5, 2, 77).unwrap();
        let b = sample_noises(4, 0.5, 2, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|n| n.len() == 4));
        let one = sample_noises(6, 1.0, 1, 3).unwrap();
        assert_eq!(one[0].len(), 6);
    }

    #[test]
    fn noises_reject_bad_args() {
        assert!(sample_noises(4, 0.5, 0, 1).is_err());
        assert!(sample_noises(4, 0.0, 1, 1).is_err());
        assert!(sample_noises(4, -1.0, 1, 1).is_err());
    }

    #[test]
    fn noise_moments_match_sigma() {
        // Law of large numbers at the stated sample size.
        let sigma = 0.5;
        let noises = sample_noises(4, sigma, 100_000, 12).unwrap();
        for coord in 0..4 {
            let n = noises.len() as f64;
            let mean = noises.iter().map(|v| v[coord]).sum::<f64>() / n;
            let var = noises.iter().map(|v| (v[coord] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 5e-3, "coord {coord} mean {mean}");
            assert!((var.sqrt() - sigma).abs() / sigma < 0.01, "coord {coord} std {}", var.sqrt());
        }
    }

    #[test]
    fn constant_error_with_baseline_is_zero() {
        let noises = sample_noises(5, 0.2, 32, 4).unwrap();
        let samples = samples_from(noises, vec![3.7; 32]);
        let g = estimate_gradient(&samples, 0.2, true).unwrap();
        // Exact in real arithmetic; summation order leaves ~1e-15 residue.
        assert!(g.iter().all(|&x| x.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn mirrored_constant_error_without_baseline_is_zero() {
        let mut noises = sample_noises(5, 0.2, 16, 4).unwrap();
        let mirrored: Vec<Vec<f64>> = noises.iter().map(|n| n.iter().map(|x| -x).collect()).collect();
        noises.extend(mirrored);
        let count = noises.len();
        let samples = samples_from(noises, vec![1.23; count]);
        let g = estimate_gradient(&samples, 0.2, false).unwrap();
        // Mirrored pairs cancel analytically; float order leaves ~1e-15.
        assert!(g.iter().all(|&x| x.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn linear_landscape_recovers_slope() {
        // For linear E the smoothed gradient equals the slope exactly;
        // 10% tolerance covers Monte-Carlo variance at M = 1e4.
        let a = [0.8, -0.4, 0.1, 1.3, -0.9, 0.25, 0.0, 0.6];
        let sigma = 0.1;
        let noises = sample_noises(8, sigma, 10_000, 21).unwrap();
        let errors: Vec<f64> = noises
            .iter()
            .map(|n| 2.0 + n.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>())
            .collect();
        let samples = samples_from(noises, errors);
        let g = estimate_gradient(&samples, sigma, true).unwrap();
        let err: f64 = g.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|y| y * y).sum::<f64>().sqrt();
        assert!(err / norm < 0.1, "relative error {}", err / norm);
    }

    #[test]
    fn baseline_exact_invariance_on_mirrored_constant_set() {
        let mut noises = sample_noises(6, 0.3, 50_000, 8).unwrap();
        let mirrored: Vec<Vec<f64>> = noises.iter().map(|n| n.iter().map(|x| -x).collect()).collect();
        noises.extend(mirrored);
        let count = noises.len();
        let samples = samples_from(noises, vec![0.42; count]);
        let with = estimate_gradient(&samples, 0.3, true).unwrap();
        let without = estimate_gradient(&samples, 0.3, false).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_samples_rejected() {
        assert!(matches!(estimate_gradient(&[], 0.1, true), Err(Error::EmptySamples)));
        let samples = vec![
            EvaluatedSample {
                noise: vec![0.1, 0.2],
                error: 1.0,
                cost: 0.0,
                loss: 1.0,
            },
            EvaluatedSample {
                noise: vec![0.1],
                error: 1.0,
                cost: 0.0,
                loss: 1.0,
            },
        ];
        assert!(matches!(
            estimate_gradient(&samples, 0.1, true),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn update_mu_zero_gradient_and_zero_alpha() {
        let space = desk_space();
        let mu = clamp(&PruningVector::new(vec![0.5; space.dim()]), &space);
        let policy = GaussianPolicy::new(mu.clone(), 0.1).unwrap();
        let zero = vec![0.0; space.dim()];
        assert_eq!(update_mu(&policy, &zero, 0.5, &space).unwrap().mu, mu);
        let g = vec![1.0; space.dim()];
        assert_eq!(update_mu(&policy, &g, 0.0, &space).unwrap().mu, mu);
    }

    #[test]
    fn update_mu_steps_single_entry() {
        let space = desk_space();
        let dim = space.dim();
        // Use an untied entry (spatial) so the tie-averaging clamp is a no-op.
        let mu = clamp(&PruningVector::new(vec![0.5; dim]), &space);
        let policy = GaussianPolicy::new(mu.clone(), 0.1).unwrap();
        let mut g = vec![0.0; dim];
        g[dim - 2] = 1.0;
        let updated = update_mu(&policy, &g, 0.1, &space).unwrap();
        assert!((updated.mu.entries[dim - 2] - 0.4).abs() < 1e-15);
        for i in 0..dim {
            if i != dim - 2 {
                assert_eq!(updated.mu.entries[i], mu.entries[i]);
            }
        }
    }

    #[test]
    fn update_mu_rejects_non_finite() {
        let space = desk_space();
        let policy =
            GaussianPolicy::new(clamp(&PruningVector::new(vec![0.5; space.dim()]), &space), 0.1).unwrap();
        let mut g = vec![0.0; space.dim()];
        g[0] = f64::NAN;
        assert!(matches!(
            update_mu(&policy, &g, 0.1, &space),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = Schedule::new(1.25, 0.25, 100).unwrap();
        assert_eq!(s.value(0).unwrap(), 1.25);
        assert_eq!(s.value(100).unwrap(), 0.25);
        let a = Schedule::new(5.0, 0.0, 100).unwrap();
        assert_eq!(a.value(50).unwrap(), 2.5);
        assert!(matches!(a.value(101), Err(Error::ScheduleRange { .. })));
    }

    #[test]
    fn lipschitz_examples() {
        let noises = sample_noises(4, 0.1, 64, 17).unwrap();
        let constant = samples_from(noises.clone(), vec![2.0; 64]);
        assert_eq!(lipschitz_lower_bound(&constant, 2.0), 0.0);

        let errors: Vec<f64> = noises
            .iter()
            .map(|n| 2.0 + 3.0 * n.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let scaled = samples_from(noises, errors);
        assert!((lipschitz_lower_bound(&scaled, 2.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_quadratic_bound() {
        // On E(x) = ||x - p||^2 the quotient is bounded by ||g|| + r where
        // g = 2(mu - p) and r is the sampling radius.
        let p = [0.1, -0.2, 0.3, 0.0];
        let mu = [0.5, 0.5, 0.5, 0.5];
        let e = |x: &[f64]| -> f64 { x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum() };
        let e_mu = e(&mu);
        let g_norm = 2.0 * mu.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let sigma = 0.05;
        let noises = sample_noises(4, sigma, 1000, 9).unwrap();
        let r = noises
            .iter()
            .map(|n| n.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let samples: Vec<EvaluatedSample> = noises
            .iter()
            .map(|n| {
                let x: Vec<f64> = mu.iter().zip(n).map(|(a, b)| a + b).collect();
                EvaluatedSample {
                    noise: n.clone(),
                    error: e(&x),
                    cost: 0.0,
                    loss: 0.0,
                }
            })
            .collect();
        let bound = lipschitz_lower_bound(&samples, e_mu);
        assert!(bound <= g_norm + r + 1e-12, "{bound} vs {}", g_norm + r);
    }

    #[test]
    fn tracker_is_monotone() {
        let mut tracker = LipschitzTracker::new();
        let mut last = 0.0;
        for seed in 0..10 {
            let noises = sample_noises(4, 0.1, 16, seed).unwrap();
            let errors: Vec<f64> = noises.iter().map(|n| n.iter().sum::<f64>()).collect();
            let b = tracker.observe(&samples_from(noises, errors), 0.0);
            assert!(b >= last);
            assert!(b.is_finite());
            last = b;
        }
    }

    #[test]
    fn estimate_variance_grows_as_sigma_shrinks() {
        // Direction verified empirically on a quadratic landscape: smaller
        // sigma cannot reduce single-sample estimate variance.
        let p = vec![0.2; 6];
        let e = |x: &[f64]| -> f64 { x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum() };
        let mu = vec![0.6; 6];
        let var_at = |sigma: f64, seed: u64| -> f64 {
            let noises = sample_noises(6, sigma, 2000, seed).unwrap();
            let singles: Vec<f64> = noises
                .iter()
                .map(|n| {
                    let x: Vec<f64> = mu.iter().zip(n).map(|(a, b)| a + b).collect();
                    // first coordinate of a single-sample estimate
                    e(&x) * n[0] / (sigma * sigma)
                })
                .collect();
            let m = singles.iter().sum::<f64>() / singles.len() as f64;
            singles.iter().map(|x| (x - m).powi(2)).sum::<f64>() / singles.len() as f64
        };
        assert!(var_at(0.01, 5) > var_at(0.1, 5));
    }
}
