use crate::diffmath::{DiffError, Rng, Tensor, Var};

use super::layers::{AlphaNet, Encoder, OutputHead};
use super::{dhat, dhat_pairwise, dissimilarity, DissimilaritySpec, Group, Mode, ModelError, ParamStore, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Latent (and encoder output) dimension.
    pub n: usize,
    /// Observation dimension.
    pub m: usize,
    pub head: OutputHead,
    pub dissim: DissimilaritySpec,
}

/// Encoder, optional `α`/`α̃` networks and offset, with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    alpha: Option<AlphaNet>,
    alpha_tilde: Option<AlphaNet>,
    offset: Option<usize>,
}

/// Graph handles for one batch of pairs encoded together.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// `[2B, n]`: rows `0..B` are `f(x)`, rows `B..2B` are `f(x̃)`.
    pub h: Var,
    /// `[B, n]`, the anchors.
    pub z: Var,
    pub batch: usize,
    /// `α(z)`, `[B, 1]`.
    pub alpha: Option<Var>,
    /// `α̃` on every row of `h`, `[2B, 1]`, centered jointly.
    pub alpha_tilde: Option<Var>,
    pub offset: Option<Var>,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        if cfg.n == 0 || cfg.m == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        cfg.dissim.dhat.validate(cfg.n)?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, rng, cfg.m, cfg.n, cfg.head);
        let alpha = cfg.dissim.uses_alpha().then(|| AlphaNet::new(&mut store, rng, "alpha", cfg.n));
        let alpha_tilde =
            cfg.dissim.uses_alpha_tilde().then(|| AlphaNet::new(&mut store, rng, "alpha_tilde", cfg.n));
        let offset = cfg.dissim.uses_offset().then(|| store.add("offset", Group::Encoder, Tensor::scalar(0.0)));
        Ok(Self { cfg, store, encoder, alpha, alpha_tilde, offset })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn alpha_net(&self) -> Option<&AlphaNet> {
        self.alpha.as_ref()
    }

    pub fn alpha_tilde_net(&self) -> Option<&AlphaNet> {
        self.alpha_tilde.as_ref()
    }

    pub fn offset(&self) -> f64 {
        self.offset.map_or(0.0, |i| self.store.get(i).value.item())
    }

    pub fn session(&self, mode: Mode) -> Session<'_> {
        Session::new(&self.store, mode)
    }

    /// Encodes `[X; X̃]` in one pass and evaluates the scalar networks.
    pub fn embed_pairs(&self, sess: &mut Session, x: &Tensor, xt: &Tensor) -> Result<Embeddings, DiffError> {
        let batch = x.rows();
        if xt.rows() != batch {
            return Err(DiffError::Shape(format!("{batch} anchors but {} positives", xt.rows())));
        }
        let stacked = sess.input(Tensor::vstack(&[x, xt])?);
        let h = self.encoder.forward(sess, stacked)?;
        let anchors: Vec<usize> = (0..batch).collect();
        let z = sess.graph.gather_rows(h, &anchors)?;
        let alpha = match &self.alpha {
            Some(net) => Some(net.forward(sess, z)?),
            None => None,
        };
        let alpha_tilde = match &self.alpha_tilde {
            Some(net) => Some(net.forward(sess, h)?),
            None => None,
        };
        let offset = self.offset.map(|i| sess.param(i));
        Ok(Embeddings { h, z, batch, alpha, alpha_tilde, offset })
    }

    /// `δ(z_i, h_{partners[i]})` as a `[B, 1]` column.
    pub fn delta_rows(&self, sess: &mut Session, emb: &Embeddings, partners: &[usize]) -> Result<Var, DiffError> {
        if partners.len() != emb.batch {
            return Err(DiffError::Shape(format!("{} partners for {} anchors", partners.len(), emb.batch)));
        }
        let zp = sess.graph.gather_rows(emb.h, partners)?;
        let d = dhat(&mut sess.graph, &self.cfg.dissim.dhat, emb.z, zp)?;
        let at = match emb.alpha_tilde {
            Some(a) => Some(sess.graph.gather_rows(a, partners)?),
            None => None,
        };
        dissimilarity(&mut sess.graph, d, emb.alpha, at, emb.offset)
    }

    /// `δ(z_i, h_{pool[j]})` for every anchor and pool entry, `[B, K]`.
    pub fn delta_matrix(&self, sess: &mut Session, emb: &Embeddings, pool: &[usize]) -> Result<Var, DiffError> {
        let zp = sess.graph.gather_rows(emb.h, pool)?;
        let d = dhat_pairwise(&mut sess.graph, &self.cfg.dissim.dhat, emb.z, zp)?;
        let at = match emb.alpha_tilde {
            Some(a) => {
                let col = sess.graph.gather_rows(a, pool)?;
                Some(sess.graph.transpose(col)?)
            }
            None => None,
        };
        dissimilarity(&mut sess.graph, d, emb.alpha, at, emb.offset)
    }

    /// `f(X)` with running statistics.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor, DiffError> {
        let mut sess = self.session(Mode::Eval);
        let xv = sess.input(x.clone());
        let z = self.encoder.forward(&mut sess, xv)?;
        Ok(sess.value(z).clone())
    }

    fn eval_net(&self, net: Option<&AlphaNet>, z: &Tensor) -> Result<Option<Tensor>, DiffError> {
        let Some(net) = net else { return Ok(None) };
        let mut sess = self.session(Mode::Eval);
        let zv = sess.input(z.clone());
        let out = net.forward(&mut sess, zv)?;
        Ok(Some(sess.value(out).clone()))
    }

    /// `α(z)` centered over the given rows, if the model has an `α` net.
    pub fn alpha_on(&self, z: &Tensor) -> Result<Option<Tensor>, DiffError> {
        self.eval_net(self.alpha.as_ref(), z)
    }

    pub fn alpha_tilde_on(&self, z: &Tensor) -> Result<Option<Tensor>, DiffError> {
        self.eval_net(self.alpha_tilde.as_ref(), z)
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<(), ModelError> {
        if store.len() != self.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                store.len(),
                self.store.len()
            )));
        }
        for (mine, theirs) in self.store.iter().zip(store.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        self.store = store.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Distribution;
    use crate::netmodels::{AlphaMode, Dhat};

    fn config(n: usize, head: OutputHead, ince: bool) -> ModelConfig {
        ModelConfig {
            n,
            m: n,
            head,
            dissim: DissimilaritySpec {
                dhat: Dhat::LpBeta { beta: 1.0, sigma: vec![0.5; n] },
                alpha_mode: AlphaMode::Learned,
                ince,
            },
        }
    }

    fn randn(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        rng.sample(Distribution::StandardNormal, &[r, c]).unwrap()
    }

    #[test]
    fn encoder_shapes() {
        let mut rng = Rng::new(1);
        let model = Model::new(config(10, OutputHead::Unbounded, false), &mut rng).unwrap();
        assert_eq!(model.encoder().widths, (100, 200));
        let x = randn(&mut rng, 4, 10);
        let mut sess = model.session(Mode::Train);
        let xv = sess.input(x);
        let z = model.encoder().forward(&mut sess, xv).unwrap();
        assert_eq!(sess.value(z).shape(), &[4, 10]);
        // Two stem layers and six residual layers are normalized.
        assert_eq!(sess.batch_stats().len(), 8);
    }

    #[test]
    fn bounded_head_range() {
        let mut rng = Rng::new(2);
        let model = Model::new(config(3, OutputHead::BoundedBox, false), &mut rng).unwrap();
        let x = randn(&mut rng, 64, 3).map(|v| 5.0 * v);
        let z = model.encode(&x).unwrap();
        assert!(z.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eval_is_repeatable_and_train_needs_two_rows() {
        let mut rng = Rng::new(3);
        let model = Model::new(config(2, OutputHead::Unbounded, false), &mut rng).unwrap();
        let x = randn(&mut rng, 5, 2);
        assert_eq!(model.encode(&x).unwrap(), model.encode(&x).unwrap());
        let mut sess = model.session(Mode::Train);
        let one = sess.input(randn(&mut rng, 1, 2));
        assert_eq!(model.encoder().forward(&mut sess, one).unwrap_err(), DiffError::BatchTooSmall(1));
    }

    #[test]
    fn alpha_centering_and_equivariance() {
        let mut rng = Rng::new(4);
        let mut model = Model::new(config(3, OutputHead::Unbounded, false), &mut rng).unwrap();
        let z = randn(&mut rng, 16, 3);
        let a = model.alpha_on(&z).unwrap().unwrap();
        assert!(a.mean().abs() < 1e-10);
        let perm: Vec<usize> = (0..16).rev().collect();
        let ap = model.alpha_on(&z.gather_rows(&perm).unwrap()).unwrap().unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((ap.data()[i] - a.data()[p]).abs() < 1e-12);
        }
        let idx = model.alpha_net().unwrap().param_indices();
        for i in idx {
            let p = model.store.get_mut(i);
            p.value = p.value.map(|_| 0.0);
        }
        assert!(model.alpha_on(&z).unwrap().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ince_model_has_no_alpha_or_offset() {
        let mut rng = Rng::new(5);
        let model = Model::new(config(2, OutputHead::Unbounded, true), &mut rng).unwrap();
        assert!(model.alpha_net().is_none());
        assert!(model.alpha_tilde_net().is_some());
        assert!(model.store.find("offset").is_none());
    }

    #[test]
    fn delta_matrix_agrees_with_rows() {
        let mut rng = Rng::new(6);
        let model = Model::new(config(2, OutputHead::Unbounded, false), &mut rng).unwrap();
        let x = randn(&mut rng, 4, 2);
        let xt = randn(&mut rng, 4, 2);
        let mut sess = model.session(Mode::Train);
        let emb = model.embed_pairs(&mut sess, &x, &xt).unwrap();
        let pool = [4, 5, 6, 7, 1];
        let m = model.delta_matrix(&mut sess, &emb, &pool).unwrap();
        assert_eq!(sess.value(m).shape(), &[4, 5]);
        let rows = model.delta_rows(&mut sess, &emb, &[7, 1, 4, 5]).unwrap();
        let (mv, rv) = (sess.value(m).clone(), sess.value(rows).clone());
        assert!((mv.get(0, 3) - rv.data()[0]).abs() < 1e-12);
        assert!((mv.get(1, 4) - rv.data()[1]).abs() < 1e-12);
        assert!((mv.get(2, 0) - rv.data()[2]).abs() < 1e-12);
    }
}
