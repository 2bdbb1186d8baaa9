use crate::diffmath::{DiffError, Rng, Tensor, Var};

use super::{kaiming_uniform, Group, Mode, ParamStore, Session};

const LEAKY_SLOPE: f64 = 0.01;
pub(crate) const BN_EPS: f64 = 1e-5;

/// `y = x W (+ b)` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, group: Group, dims: (usize, usize), bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), group, kaiming_uniform(rng, dims.0, dims.1, LEAKY_SLOPE));
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[1, dims.1])));
        Self { weight, bias }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, DiffError> {
        let w = sess.param(self.weight);
        let y = sess.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = sess.param(b);
                sess.graph.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization with learned affine terms and running statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Group::Encoder, Tensor::full(&[1, width], 1.0)),
            beta: store.add(format!("{name}.beta"), Group::Encoder, Tensor::zeros(&[1, width])),
            running_mean: store.add(format!("{name}.running_mean"), Group::Buffer, Tensor::zeros(&[1, width])),
            running_var: store.add(format!("{name}.running_var"), Group::Buffer, Tensor::full(&[1, width], 1.0)),
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, DiffError> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        match sess.mode() {
            Mode::Train => {
                let (y, stats) = sess.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                sess.record_bn(*self, stats);
                Ok(y)
            }
            Mode::Eval => {
                let store = sess.store();
                let mean = store.get(self.running_mean).value.data();
                let var = store.get(self.running_var).value.data();
                sess.graph.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }
}

/// Linear (no bias, absorbed by the normalization) → batch norm → leaky ReLU.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Hidden {
    linear: Linear,
    bn: BatchNorm,
}

impl Hidden {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dims: (usize, usize)) -> Self {
        Self {
            linear: Linear::new(store, rng, name, Group::Encoder, dims, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), dims.1),
        }
    }

    fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, DiffError> {
        let h = self.linear.forward(sess, x)?;
        let h = self.bn.forward(sess, h)?;
        sess.graph.leaky_relu(h, LEAKY_SLOPE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputHead {
    Unbounded,
    /// `b · sigmoid(·)` with a learned scalar `b`, so outputs lie in `(0, b)`.
    BoundedBox,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Unbounded => "unbounded",
            OutputHead::BoundedBox => "bounded-box",
        }
    }
}

/// Two hidden layers (`10n`, `20n`), three residual blocks of two `20n`
/// layers each, and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    stem: [Hidden; 2],
    blocks: [[Hidden; 2]; 3],
    out: Linear,
    head: OutputHead,
    scale: Option<usize>,
    pub widths: (usize, usize),
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, m: usize, n: usize, head: OutputHead) -> Self {
        let (w1, w2) = (10 * n, 20 * n);
        let stem = [Hidden::new(store, rng, "encoder.0", (m, w1)), Hidden::new(store, rng, "encoder.1", (w1, w2))];
        let blocks = std::array::from_fn(|k| {
            [
                Hidden::new(store, rng, &format!("encoder.res{k}.0"), (w2, w2)),
                Hidden::new(store, rng, &format!("encoder.res{k}.1"), (w2, w2)),
            ]
        });
        let out = Linear::new(store, rng, "encoder.out", Group::Encoder, (w2, n), true);
        let scale = (head == OutputHead::BoundedBox)
            .then(|| store.add("encoder.head.scale", Group::Encoder, Tensor::scalar(1.0)));
        Self { stem, blocks, out, head, scale, widths: (w1, w2) }
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for layer in &self.stem {
            h = layer.forward(sess, h)?;
        }
        for [a, b] in &self.blocks {
            let r = a.forward(sess, h)?;
            let r = b.forward(sess, r)?;
            h = sess.graph.add(h, r)?;
        }
        let z = self.out.forward(sess, h)?;
        match self.scale {
            Some(scale) => {
                let s = sess.graph.sigmoid(z)?;
                let b = sess.param(scale);
                sess.graph.mul(s, b)
            }
            None => Ok(z),
        }
    }
}

/// Scalar network `n → 20 → 20 → 1` with GELU, a skip connection around
/// the second layer, and batch-mean-centered output.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

pub(crate) const ALPHA_WIDTH: usize = 20;

impl AlphaNet {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, n: usize) -> Self {
        let w = ALPHA_WIDTH;
        Self {
            l1: Linear::new(store, rng, &format!("{name}.0"), Group::Alpha, (n, w), true),
            l2: Linear::new(store, rng, &format!("{name}.1"), Group::Alpha, (w, w), true),
            // A bias would be removed by the centering.
            l3: Linear::new(store, rng, &format!("{name}.2"), Group::Alpha, (w, 1), false),
        }
    }

    /// `[B, n] → [B, 1]`, centered over the given rows.
    pub fn forward(&self, sess: &mut Session, z: Var) -> Result<Var, DiffError> {
        let h1 = self.l1.forward(sess, z)?;
        let h1 = sess.graph.gelu(h1)?;
        let h2 = self.l2.forward(sess, h1)?;
        let h2 = sess.graph.gelu(h2)?;
        let h2 = sess.graph.add(h2, h1)?;
        let out = self.l3.forward(sess, h2)?;
        sess.graph.mean_center(out)
    }

    /// Indices of every weight, for zeroing or inspection.
    pub fn param_indices(&self) -> Vec<usize> {
        [self.l1, self.l2, self.l3].iter().flat_map(|l| std::iter::once(l.weight).chain(l.bias)).collect()
    }
}
