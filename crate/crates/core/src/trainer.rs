//! Batch assembly, Adam, and the training loop.

use std::time::Instant;

use log::{debug, info};
use thiserror::Error;

use crate::diffmath::gradcheck::{self, CheckResult};
use crate::diffmath::{DiffError, Rng, Tensor, Var};
use crate::latentspaces::{sample_conditional, sample_marginal, ConditionalSpec, LatentError, LatentSpaceSpec, PairBatch};
use crate::losses::{self, LossKind};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::mixer::{build_mixer, MixerConfig, MixerError, MixerParams};
use crate::netmodels::{
    update_running_stats, AlphaMode, Dhat, DissimilaritySpec, Embeddings, Group, Mode, Model, ModelConfig,
    ModelError, OutputHead, ParamStore, Session,
};

/// Seed streams derived from the run seed.
pub mod streams {
    pub const MODEL_INIT: u64 = 0;
    pub const BATCHES: u64 = 1;
    pub const EVAL_SET: u64 = 2;
    pub const MIXER: u64 = 3;
}

pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("numerical failure at iteration {iteration}: {source}")]
    Numeric {
        iteration: usize,
        source: DiffError,
        /// Parameters before the failing step.
        last_good: Box<ParamStore>,
    },
    #[error(transparent)]
    Diff(DiffError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Diff(e)
    }
}

/// Marginal the negatives are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    /// In-batch anchors (`p_x`).
    FirstMarginal,
    /// In-batch positives (`p_x̃`).
    SecondMarginal,
    /// A fair coin per negative between the two.
    Mixture,
}

impl NegativeSource {
    pub fn name(self) -> &'static str {
        match self {
            NegativeSource::FirstMarginal => "first",
            NegativeSource::SecondMarginal => "second",
            NegativeSource::Mixture => "mixture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::FirstMarginal, Self::SecondMarginal, Self::Mixture].into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub lr_encoder: f64,
    pub lr_alpha: f64,
    pub negative_source: NegativeSource,
    pub alpha_mode: AlphaMode,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_size: usize,
    pub clamp_hi: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::DeltaNce,
            batch: 512,
            iterations: 20_000,
            seed: 0,
            lr_encoder: 1e-4,
            lr_alpha: 1e-2,
            negative_source: NegativeSource::FirstMarginal,
            alpha_mode: AlphaMode::Learned,
            eval_every: 2_000,
            eval_size: 4096,
            clamp_hi: losses::DEFAULT_CLAMP,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch < 2 {
            return Err(TrainError::Config(format!("batch must be at least 2, got {}", self.batch)));
        }
        if self.iterations == 0 {
            return Err(TrainError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr_encoder > 0.0) || !(self.lr_alpha > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.eval_size < 8 {
            return Err(TrainError::Config("evaluation set needs at least 8 pairs".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Everything that defines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub space: LatentSpaceSpec,
    pub cond: ConditionalSpec,
    pub mixer: MixerConfig,
    pub mixer_seed: u64,
    pub head: OutputHead,
    pub dhat: Dhat,
    pub train: TrainConfig,
}

impl Experiment {
    /// Default-scale run on the given space with `d̂` matching the data.
    pub fn new(space: LatentSpaceSpec, cond: ConditionalSpec, train: TrainConfig) -> Self {
        let n = space.n;
        let dhat = Dhat::LpBeta { beta: cond.beta, sigma: cond.sigma.clone() };
        Self { space, cond, mixer: MixerConfig::new(n), mixer_seed: train.seed, head: OutputHead::Unbounded, dhat, train }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n: self.space.n,
            m: self.mixer.m,
            head: self.head,
            dissim: DissimilaritySpec {
                dhat: self.dhat.clone(),
                alpha_mode: self.train.alpha_mode,
                ince: self.train.loss == LossKind::DeltaInce,
            },
        }
    }

    pub fn build_mixer(&self) -> Result<MixerParams, TrainError> {
        Ok(build_mixer(&self.mixer, &mut Rng::stream(self.mixer_seed, streams::MIXER))?)
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. Buffers and parameters without a
/// gradient are left untouched.
pub fn adam_step(
    state: &mut AdamState,
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    lr: impl Fn(Group) -> f64,
) -> Result<(), DiffError> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(DiffError::NonFiniteGradient { op: "adam", node: i });
            }
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = store.get_mut(i);
        if p.group == Group::Buffer {
            continue;
        }
        let rate = lr(p.group);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            *w -= rate * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Which rows of the stacked embedding `[Z; Z̃]` serve as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativePlan {
    /// One negative per anchor (`partners[i]` indexes the stacked rows and
    /// never refers to row `i` or its positive `B + i`).
    pub partners: Vec<usize>,
    /// InfoNCE pool: entry `j` is row `j` or `B + j`; the diagonal is
    /// dropped when scoring.
    pub pool: Vec<usize>,
}

pub fn negative_plan(b: usize, source: NegativeSource, rng: &mut Rng) -> NegativePlan {
    let pick = |rng: &mut Rng, j: usize| match source {
        NegativeSource::FirstMarginal => j,
        NegativeSource::SecondMarginal => b + j,
        NegativeSource::Mixture => {
            if rng.bernoulli(0.5) {
                j
            } else {
                b + j
            }
        }
    };
    let perm = rng.derangement(b);
    let partners = perm.iter().map(|&j| pick(rng, j)).collect();
    let pool = (0..b).map(|j| pick(rng, j)).collect();
    NegativePlan { partners, pool }
}

/// Draws `B` positive pairs, mixes them, and plans the negatives.
pub fn make_batch(
    space: &LatentSpaceSpec,
    cond: &ConditionalSpec,
    mixer: &MixerParams,
    b: usize,
    rng: &mut Rng,
    source: NegativeSource,
) -> Result<(PairBatch, NegativePlan), TrainError> {
    let s = sample_marginal(space, b, rng)?;
    let s_tilde = sample_conditional(space, cond, &s, rng)?;
    let x = mixer.forward(&s)?;
    let x_tilde = mixer.forward(&s_tilde)?;
    let plan = negative_plan(b, source, rng);
    Ok((PairBatch { s, s_tilde, x, x_tilde }, plan))
}

/// Builds the loss for one batch on the session's graph.
pub fn batch_loss(
    model: &Model,
    sess: &mut Session,
    batch: &PairBatch,
    plan: &NegativePlan,
    kind: LossKind,
    clamp_hi: f64,
) -> Result<Var, DiffError> {
    let emb: Embeddings = model.embed_pairs(sess, &batch.x, &batch.x_tilde)?;
    let b = emb.batch;
    let positives: Vec<usize> = (b..2 * b).collect();
    if kind == LossKind::OriginalScl {
        let zt = sess.graph.gather_rows(emb.h, &positives)?;
        let zn = sess.graph.gather_rows(emb.h, &plan.partners)?;
        return losses::scl_original(&mut sess.graph, emb.z, zt, zn);
    }
    let pos = model.delta_rows(sess, &emb, &positives)?;
    let neg = if kind == LossKind::DeltaInce {
        let full = model.delta_matrix(sess, &emb, &plan.pool)?;
        sess.graph.off_diagonal(full)?
    } else {
        model.delta_rows(sess, &emb, &plan.partners)?
    };
    if kind.clamps() {
        let hits = losses::clamped_entries(kind, sess.value(pos), sess.value(neg), clamp_hi);
        if hits > 0 {
            debug!("exponent clamp active on {hits} entries");
        }
    }
    losses::delta_loss(&mut sess.graph, kind, pos, neg, clamp_hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub r2: f64,
    pub mcc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.evals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evals.is_empty()
    }

    /// `iter,loss,r2,mcc` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,r2,mcc\n");
        for r in &self.evals {
            out.push_str(&format!("{},{},{},{}\n", r.iter, r.loss, r.r2, r.mcc));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub mixer: MixerParams,
    pub history: History,
    pub report: MetricsReport,
    pub seconds: f64,
}

/// Held-out latents and observations from the evaluation stream.
pub struct EvalSet {
    pub s: Tensor,
    pub x: Tensor,
}

pub fn eval_set(exp: &Experiment, mixer: &MixerParams) -> Result<EvalSet, TrainError> {
    let mut rng = Rng::stream(exp.train.seed, streams::EVAL_SET);
    let s = sample_marginal(&exp.space, exp.train.eval_size, &mut rng)?;
    let x = mixer.forward(&s)?;
    Ok(EvalSet { s, x })
}

pub fn evaluate(model: &Model, set: &EvalSet) -> Result<MetricsReport, TrainError> {
    let z = model.encode(&set.x)?;
    Ok(metrics::evaluate(&z, &set.s)?)
}

fn clip(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// One optimizer step on a batch; returns the loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &PairBatch,
    plan: &NegativePlan,
    cfg: &TrainConfig,
) -> Result<f64, DiffError> {
    let (loss, mut grads, stats) = {
        let mut sess = model.session(Mode::Train);
        let l = batch_loss(model, &mut sess, batch, plan, cfg.loss, cfg.clamp_hi)?;
        let grads = sess.gradients(l)?;
        (sess.value(l).item(), grads, sess.batch_stats().to_vec())
    };
    if let Some(c) = cfg.grad_clip {
        clip(&mut grads, c);
    }
    let (lr_e, lr_a) = (cfg.lr_encoder, cfg.lr_alpha);
    adam_step(adam, &mut model.store, &grads, |g| if g == Group::Alpha { lr_a } else { lr_e })?;
    update_running_stats(&mut model.store, &stats, BN_MOMENTUM);
    Ok(loss)
}

/// Trains a fresh model for `exp`.
pub fn train(exp: &Experiment) -> Result<TrainOutcome, TrainError> {
    let mixer = exp.build_mixer()?;
    train_with_mixer(exp, mixer)
}

pub fn train_with_mixer(exp: &Experiment, mixer: MixerParams) -> Result<TrainOutcome, TrainError> {
    let cfg = &exp.train;
    cfg.validate()?;
    exp.space.validate()?;
    exp.cond.validate()?;
    if mixer.n != exp.space.n {
        return Err(TrainError::Config(format!("mixer expects n = {}, space has n = {}", mixer.n, exp.space.n)));
    }
    let start = Instant::now();
    let mut model = Model::new(exp.model_config(), &mut Rng::stream(cfg.seed, streams::MODEL_INIT))?;
    let mut adam = AdamState::new(&model.store);
    let mut rng = Rng::stream(cfg.seed, streams::BATCHES);
    let set = eval_set(exp, &mixer)?;
    let mut history = History::default();
    let mut since = Vec::new();
    let mut report = None;
    for iter in 1..=cfg.iterations {
        let (batch, plan) = make_batch(&exp.space, &exp.cond, &mixer, cfg.batch, &mut rng, cfg.negative_source)?;
        let loss = train_step(&mut model, &mut adam, &batch, &plan, cfg).map_err(|source| TrainError::Numeric {
            iteration: iter,
            source,
            last_good: Box::new(model.store.clone()),
        })?;
        history.losses.push(loss);
        since.push(loss);
        let due = cfg.eval_every > 0 && iter % cfg.eval_every == 0;
        if due || iter == cfg.iterations {
            let r = evaluate(&model, &set)?;
            let mean = since.iter().sum::<f64>() / since.len() as f64;
            since.clear();
            info!("iter {iter}: loss {mean:.5} r2 {:.4} mcc {:.4}", r.r2_mean, r.mcc_mean);
            history.evals.push(EvalRecord { iter, loss: mean, r2: r.r2_mean, mcc: r.mcc_mean });
            report = Some(r);
        }
    }
    let report = report.expect("the final iteration always evaluates");
    Ok(TrainOutcome { model, mixer, history, report, seconds: start.elapsed().as_secs_f64() })
}

/// Central differences of the batch loss against its tape gradient for
/// every learned parameter of a freshly initialized model. `eps` is kept
/// small so the stencil rarely straddles an activation kink.
/// Central-difference step for [`loss_gradcheck`]: near the `ε^{1/3}`
/// optimum for a loss of order one; smaller steps are dominated by roundoff.
pub const GRADCHECK_EPS: f64 = 1e-5;

pub fn loss_gradcheck(exp: &Experiment, batch: usize, eps: f64) -> Result<CheckResult, TrainError> {
    let mixer = exp.build_mixer()?;
    let mut model = Model::new(exp.model_config(), &mut Rng::stream(exp.train.seed, streams::MODEL_INIT))?;
    let mut rng = Rng::stream(exp.train.seed, streams::BATCHES);
    let (b, plan) = make_batch(&exp.space, &exp.cond, &mixer, batch, &mut rng, exp.train.negative_source)?;
    let (kind, clamp) = (exp.train.loss, exp.train.clamp_hi);
    let loss_at = |model: &Model| -> Result<f64, DiffError> {
        let mut sess = model.session(Mode::Train);
        let l = batch_loss(model, &mut sess, &b, &plan, kind, clamp)?;
        Ok(sess.value(l).item())
    };
    let grads = {
        let mut sess = model.session(Mode::Train);
        let l = batch_loss(&model, &mut sess, &b, &plan, kind, clamp)?;
        sess.gradients(l)?
    };
    let (mut worst, mut entries) = (0.0f64, 0);
    for idx in 0..model.store.len() {
        if model.store.get(idx).group == Group::Buffer {
            continue;
        }
        for k in 0..model.store.get(idx).value.len() {
            let orig = model.store.get(idx).value.data()[k];
            model.store.get_mut(idx).value.data_mut()[k] = orig + eps;
            let up = loss_at(&model)?;
            model.store.get_mut(idx).value.data_mut()[k] = orig - eps;
            let down = loss_at(&model)?;
            model.store.get_mut(idx).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[idx].as_ref().map_or(0.0, |g| g.data()[k]);
            let gap = (analytic - numeric).abs();
            if gap >= gradcheck::ABS_FLOOR {
                worst = worst.max(gap / analytic.abs().max(numeric.abs()));
            }
            entries += 1;
        }
    }
    Ok(CheckResult { name: format!("{} through encoder and scalar nets", kind.name()), max_rel_error: worst, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latentspaces::Scenario;

    fn small(loss: LossKind, iterations: usize) -> Experiment {
        let space = LatentSpaceSpec::new(2, Scenario::BoxSimple).unwrap();
        let cond = ConditionalSpec::for_space(&space, 1.0).unwrap();
        let train = TrainConfig { loss, batch: 32, iterations, eval_every: 0, eval_size: 256, ..Default::default() };
        Experiment::new(space, cond, train)
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Group::Encoder, Tensor::scalar(1.0));
        store.add("a", Group::Alpha, Tensor::scalar(1.0));
        let mut st = AdamState::new(&store);
        adam_step(&mut st, &mut store, &[Some(Tensor::scalar(0.0)), Some(Tensor::scalar(0.0))], |_| 0.1).unwrap();
        assert_eq!(store.get(0).value.item(), 1.0);
        let mut st = AdamState::new(&store);
        let g = [Some(Tensor::scalar(-3.0)), Some(Tensor::scalar(5.0))];
        adam_step(&mut st, &mut store, &g, |grp| if grp == Group::Alpha { 1e-2 } else { 1e-4 }).unwrap();
        assert!((store.get(0).value.item() - (1.0 + 1e-4)).abs() < 1e-9);
        assert!((store.get(1).value.item() - (1.0 - 1e-2)).abs() < 1e-9);
        let bad = [Some(Tensor::scalar(f64::NAN)), None];
        assert!(adam_step(&mut st, &mut store, &bad, |_| 0.1).is_err());
    }

    #[test]
    fn batch_shapes_and_plans() {
        let exp = small(LossKind::DeltaNce, 1);
        let mixer = exp.build_mixer().unwrap();
        let mut rng = Rng::new(1);
        let (b, plan) = make_batch(&exp.space, &exp.cond, &mixer, 4, &mut rng, NegativeSource::Mixture).unwrap();
        assert_eq!(b.s.shape(), &[4, 2]);
        assert_eq!(b.x_tilde.shape(), &[4, 2]);
        for (i, &p) in plan.partners.iter().enumerate() {
            assert!(p % 4 != i);
        }
        let mut first = 0usize;
        let draws = 4000;
        for _ in 0..draws / 8 {
            let p = negative_plan(8, NegativeSource::Mixture, &mut rng);
            first += p.partners.iter().filter(|&&j| j < 8).count();
        }
        let se = (0.25 / draws as f64).sqrt();
        assert!((first as f64 / draws as f64 - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn single_iteration_history() {
        let out = train(&small(LossKind::DeltaNce, 1)).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history.losses.len(), 1);
        assert!(out.history.to_csv().starts_with("iter,loss,r2,mcc\n1,"));
    }

    #[test]
    fn reproducible_runs() {
        let a = train(&small(LossKind::DeltaInce, 5)).unwrap();
        let b = train(&small(LossKind::DeltaInce, 5)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.store, b.model.store);
    }

    #[test]
    fn every_loss_runs() {
        for kind in LossKind::ALL {
            let out = train(&small(kind, 3)).unwrap();
            assert!(out.history.losses.iter().all(|l| l.is_finite()), "{kind:?}");
        }
    }

    #[test]
    fn learning_rates_follow_groups() {
        let exp = small(LossKind::DeltaNce, 1);
        let mut model = Model::new(exp.model_config(), &mut Rng::new(2)).unwrap();
        let before = model.store.clone();
        let grads: Vec<Option<Tensor>> = model.store.iter().map(|p| Some(p.value.map(|_| 1.0))).collect();
        let mut st = AdamState::new(&model.store);
        adam_step(&mut st, &mut model.store, &grads, |g| if g == Group::Alpha { 1e-2 } else { 1e-4 }).unwrap();
        for (a, b) in before.iter().zip(model.store.iter()) {
            let step = (a.value.data()[0] - b.value.data()[0]).abs();
            let want = match a.group {
                Group::Alpha => 1e-2,
                Group::Encoder => 1e-4,
                Group::Buffer => 0.0,
            };
            assert!((step - want).abs() < 1e-9 * want.max(1.0), "{}: {step}", a.name);
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for kind in LossKind::ALL {
            let mut exp = small(kind, 1);
            exp.dhat = Dhat::LpBeta { beta: 1.5, sigma: vec![0.5, 0.5] };
            let r = loss_gradcheck(&exp, 6, GRADCHECK_EPS).unwrap();
            assert!(r.passed(1e-4), "{}: {}", r.name, r.max_rel_error);
            assert!(r.entries > 1000);
        }
    }

    #[test]
    fn training_leaves_mixer_and_specs_alone() {
        let exp = small(LossKind::DeltaNwj, 2);
        let mixer = exp.build_mixer().unwrap();
        let snapshot = (exp.clone(), mixer.clone());
        let out = train_with_mixer(&exp, mixer).unwrap();
        assert_eq!(out.mixer, snapshot.1);
        assert_eq!(exp, snapshot.0);
    }
}
