//! Learned `α`, `α̃` against their optimal values on the unit square.

use super::normalizer::{alpha_targets, compare_alpha, grid_points, AlphaComparison, AlphaTargetGrid};
use super::OracleError;
use crate::diffmath::Tensor;
use crate::latentspaces::{ConditionalSpec, LatentSpaceSpec, QSpec, Scenario};
use crate::losses::LossKind;
use crate::trainer::{train, Experiment, TrainConfig, TrainError, TrainOutcome};

pub const GRID_RES: usize = 20;
pub const GRID_LO: f64 = 0.05;
pub const GRID_HI: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaStudyConfig {
    pub loss: LossKind,
    pub q: QSpec,
    pub sigma: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl AlphaStudyConfig {
    pub fn new(loss: LossKind, seed: u64) -> Self {
        Self { loss, q: QSpec::Constant, sigma: 1.0, batch: 4096, iterations: 50_000, seed }
    }

    /// Reduced budget that fits a single CPU core in minutes per loss.
    pub fn desk(loss: LossKind, seed: u64) -> Self {
        Self { batch: 2048, iterations: 4_500, ..Self::new(loss, seed) }
    }

    pub fn experiment(&self) -> Result<Experiment, OracleError> {
        let space = LatentSpaceSpec::new(2, Scenario::BoxSimple).map_err(|e| OracleError::Unsupported(e.to_string()))?;
        let cond = ConditionalSpec::new(1.0, vec![self.sigma; 2], self.q)
            .map_err(|e| OracleError::Unsupported(e.to_string()))?;
        let train = TrainConfig {
            loss: self.loss,
            batch: self.batch,
            iterations: self.iterations,
            seed: self.seed,
            eval_every: 0,
            ..Default::default()
        };
        Ok(Experiment::new(space, cond, train))
    }
}

pub struct AlphaStudy {
    pub targets: AlphaTargetGrid,
    pub learned_alpha: Vec<f64>,
    pub learned_alpha_tilde: Vec<f64>,
    pub alpha: AlphaComparison,
    pub alpha_tilde: AlphaComparison,
    pub outcome: TrainOutcome,
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Learned functions at `s` on the grid, reached through the mixer and
/// encoder: `α(f(g(s)))`.
pub fn learned_on_grid(outcome: &TrainOutcome, points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), StudyError> {
    let s = Tensor::from_rows(points).map_err(|e| OracleError::Shape(e.to_string()))?;
    let wrap = |e: crate::diffmath::DiffError| StudyError::Train(TrainError::Diff(e));
    let x = outcome.mixer.forward(&s).map_err(|e| StudyError::Train(TrainError::Mixer(e)))?;
    let z = outcome.model.encode(&x).map_err(wrap)?;
    let a = outcome.model.alpha_on(&z).map_err(wrap)?;
    let at = outcome.model.alpha_tilde_on(&z).map_err(wrap)?;
    let zeros = vec![0.0; points.len()];
    Ok((a.map_or_else(|| zeros.clone(), Tensor::into_data), at.map_or(zeros, Tensor::into_data)))
}

pub fn run_alpha_study(cfg: &AlphaStudyConfig) -> Result<AlphaStudy, StudyError> {
    let exp = cfg.experiment()?;
    let points = grid_points(&exp.space, GRID_LO, GRID_HI, GRID_RES);
    let targets = alpha_targets(&exp.space, &exp.cond, &points)?;
    let outcome = train(&exp)?;
    let (learned_alpha, learned_alpha_tilde) = learned_on_grid(&outcome, &points)?;
    let alpha = compare_alpha(&learned_alpha, &targets.target_alpha)?;
    let alpha_tilde = compare_alpha(&learned_alpha_tilde, &targets.target_alpha_tilde)?;
    Ok(AlphaStudy { targets, learned_alpha, learned_alpha_tilde, alpha, alpha_tilde, outcome })
}

/// `x,y,value` rows for heatmap rendering.
pub fn grid_csv(points: &[Vec<f64>], values: &[f64]) -> String {
    let mut out = String::from("x,y,value\n");
    for (p, v) in points.iter().zip(values) {
        out.push_str(&format!("{},{},{}\n", p[0], p[1], v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_study_produces_grid_comparisons() {
        let cfg = AlphaStudyConfig { batch: 32, iterations: 3, ..AlphaStudyConfig::new(LossKind::DeltaNce, 1) };
        let study = run_alpha_study(&cfg).unwrap();
        assert_eq!(study.learned_alpha.len(), GRID_RES * GRID_RES);
        assert!(study.alpha.max_abs_deviation.is_finite());
        assert!(study.targets.target_alpha_tilde.iter().all(|&v| v == 0.0));
        let csv = grid_csv(&study.targets.points, &study.learned_alpha);
        assert_eq!(csv.lines().count(), GRID_RES * GRID_RES + 1);
    }
}
