//! Batteries of checks shared by the command line and the test suites.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::discrete::{discrete_loss_minimizer, lemma1_deviation, DiscreteWorld};
use super::normalizer::kernel_integral;
use super::OracleError;
use crate::diffmath::{Rng, Tensor};
use crate::latentspaces::{
    generalized_normal, generalized_normal_abs_mean, sample_conditional, ConditionalSpec, LatentSpaceSpec, QSpec,
    Scenario,
};
use crate::losses::LossKind;
use crate::trainer::NegativeSource;

pub const LEMMA1_TOL: f64 = 1e-4;
pub const MOMENT_BETAS: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 5.0];

#[derive(Clone, Debug, Serialize)]
pub struct Lemma1Check {
    pub loss: &'static str,
    pub negatives: usize,
    pub outcomes: usize,
    pub world: usize,
    pub deviation: f64,
    pub steps: usize,
    pub passed: bool,
}

/// Minimizes every loss on `worlds` random finite worlds (`M ∈ 2..=6`) and
/// compares against the closed form. InfoNCE runs with one and two
/// negatives.
pub fn lemma1_suite(seed: u64, worlds: usize) -> Result<Vec<Lemma1Check>, OracleError> {
    let mut rng = Rng::new(seed);
    let sources = [NegativeSource::FirstMarginal, NegativeSource::SecondMarginal, NegativeSource::Mixture];
    let runs = [
        (LossKind::DeltaNce, 0),
        (LossKind::DeltaScl, 0),
        (LossKind::DeltaNwj, 0),
        (LossKind::DeltaInce, 1),
        (LossKind::DeltaInce, 2),
    ];
    let mut out = Vec::new();
    for w in 0..worlds {
        let m = 2 + w % 5;
        let world = DiscreteWorld::random(&mut rng, m, sources[w % 3])?;
        for (kind, k) in runs {
            let min = discrete_loss_minimizer(&world, kind, k)?;
            let deviation = lemma1_deviation(&world, kind, &min.psi);
            out.push(Lemma1Check {
                loss: kind.name(),
                negatives: k,
                outcomes: m,
                world: w,
                deviation,
                steps: min.steps,
                passed: deviation < LEMMA1_TOL,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentCheck {
    pub beta: f64,
    pub samples: usize,
    pub mean_abs: f64,
    pub expected: f64,
    pub z_score: f64,
}

/// `E|Δ|` of the generalized-normal proposal against `σΓ(2/β)/Γ(1/β)`.
pub fn moment_checks(seed: u64, samples: usize, sigma: f64) -> Result<Vec<MomentCheck>, OracleError> {
    MOMENT_BETAS
        .iter()
        .map(|&beta| {
            let mut rng = Rng::stream(seed, beta.to_bits());
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..samples {
                let a = generalized_normal(&mut rng, beta, sigma).map_err(|e| OracleError::Unsupported(e.to_string()))?.abs();
                sum += a;
                sq += a * a;
            }
            let n = samples as f64;
            let mean_abs = sum / n;
            let se = ((sq / n - mean_abs * mean_abs) / n).sqrt();
            let expected = generalized_normal_abs_mean(beta, sigma);
            Ok(MomentCheck { beta, samples, mean_abs, expected, z_score: (mean_abs - expected) / se })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct HistogramCheck {
    pub anchor: f64,
    pub sigma: f64,
    pub bins: usize,
    pub samples: usize,
    pub chi2: f64,
    pub p_value: f64,
}

/// χ² goodness of fit of the truncated Laplace conditional on `[0, 1]`.
pub fn histogram_check(seed: u64, samples: usize, bins: usize, anchor: f64, sigma: f64) -> Result<HistogramCheck, OracleError> {
    let wrap = |e: &dyn std::fmt::Display| OracleError::Unsupported(e.to_string());
    let space = LatentSpaceSpec::new(1, Scenario::BoxSimple).map_err(|e| wrap(&e))?;
    let cond = ConditionalSpec::new(1.0, vec![sigma], QSpec::Constant).map_err(|e| wrap(&e))?;
    let s = Tensor::column(vec![anchor; samples]);
    let draws = sample_conditional(&space, &cond, &s, &mut Rng::new(seed)).map_err(|e| wrap(&e))?;
    let mut counts = vec![0usize; bins];
    for &v in draws.data() {
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let total = kernel_integral(anchor, 0.0, 1.0, sigma, 1.0);
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (a, b) = (i as f64 / bins as f64, (i + 1) as f64 / bins as f64);
            let e = samples as f64 * kernel_integral(anchor, a, b, sigma, 1.0) / total;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((bins - 1) as f64).map_err(|e| wrap(&e))?;
    Ok(HistogramCheck { anchor, sigma, bins, samples, chi2, p_value: 1.0 - dist.cdf(chi2) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lemma1_suite_passes() {
        let checks = lemma1_suite(7, 5).unwrap();
        assert_eq!(checks.len(), 25);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }

    #[test]
    fn sampler_checks_are_calibrated() {
        for m in moment_checks(3, 100_000, 0.7).unwrap() {
            assert!(m.z_score.abs() < 4.0, "{m:?}");
        }
        let h = histogram_check(4, 100_000, 50, 0.3, 0.3).unwrap();
        assert!(h.p_value > 1e-4, "{h:?}");
    }
}
