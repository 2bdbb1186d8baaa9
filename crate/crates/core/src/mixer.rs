//! The generator `g`: an invertible leaky-ReLU MLP from latents to
//! observations.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::diffmath::{DiffError, Rng, Tensor};

/// Condition-number ceiling for every square mixing matrix.
pub const MAX_CONDITION: f64 = 25.0;
/// Draws allowed per layer before construction fails.
pub const MAX_DRAWS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixerError {
    #[error("latent dimension {n} exceeds observation dimension {m}")]
    DimensionOrder { n: usize, m: usize },
    #[error("invalid mixer configuration: {0}")]
    Config(String),
    #[error("no well-conditioned matrix after {0} draws")]
    IllConditioned(usize),
    #[error("layer {0} has a singular weight matrix")]
    Singular(usize),
    #[error("inversion needs square mixing (n = {n}, m = {m})")]
    NotSquare { n: usize, m: usize },
    #[error("{0}")]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerConfig {
    pub n: usize,
    pub m: usize,
    pub layers: usize,
    pub slope: f64,
    /// Gaussian perturbation added to each orthogonal draw, relative to
    /// `1/√m` per entry. Zero keeps the matrices orthogonal.
    pub perturbation: f64,
    pub bias_scale: f64,
}

impl MixerConfig {
    pub fn new(n: usize) -> Self {
        Self { n, m: n, layers: 3, slope: 0.2, perturbation: 0.5, bias_scale: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerLayer {
    /// `[m, m]`; the layer maps a row `x` to `W x + b`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub condition: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams {
    pub n: usize,
    pub m: usize,
    pub slope: f64,
    pub layers: Vec<MixerLayer>,
    /// `[m, n]` isometric embedding applied first when `n < m`.
    pub embed: Option<Tensor>,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::matrix(m.nrows(), m.ncols(), data).expect("non-empty matrix")
}

fn gaussian(rng: &mut Rng, r: usize, c: usize) -> DMatrix<f64> {
    // Row-major fill so the draw order is independent of storage layout.
    let data: Vec<f64> = (0..r * c).map(|_| rng.normal()).collect();
    DMatrix::from_row_slice(r, c, &data)
}

/// Orthonormal columns from the QR factorization of a Gaussian matrix,
/// with signs fixed so the distribution is Haar.
fn orthonormal(rng: &mut Rng, r: usize, c: usize) -> DMatrix<f64> {
    let qr = gaussian(rng, r, c).qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..c {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `σ_max / σ_min`.
pub fn condition_number(w: &Tensor) -> f64 {
    let sv = to_dmatrix(w).singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn build_mixer(cfg: &MixerConfig, rng: &mut Rng) -> Result<MixerParams, MixerError> {
    let MixerConfig { n, m, layers, slope, perturbation, bias_scale } = *cfg;
    if n > m {
        return Err(MixerError::DimensionOrder { n, m });
    }
    if n == 0 || layers == 0 {
        return Err(MixerError::Config("dimensions and depth must be positive".into()));
    }
    if !(slope > 0.0 && slope <= 1.0) {
        return Err(MixerError::Config(format!("leaky-ReLU slope must lie in (0, 1], got {slope}")));
    }
    let embed = (n < m).then(|| from_dmatrix(&orthonormal(rng, m, n)));
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut accepted = None;
        for _ in 0..MAX_DRAWS {
            let mut w = orthonormal(rng, m, m);
            if perturbation > 0.0 {
                w += gaussian(rng, m, m) * (perturbation / (m as f64).sqrt());
            }
            let w = from_dmatrix(&w);
            let condition = condition_number(&w);
            if condition < MAX_CONDITION {
                accepted = Some((w, condition));
                break;
            }
        }
        let (weight, condition) = accepted.ok_or(MixerError::IllConditioned(MAX_DRAWS))?;
        let bias = (0..m).map(|_| bias_scale * rng.normal()).collect();
        out.push(MixerLayer { weight, bias, condition });
    }
    Ok(MixerParams { n, m, slope, layers: out, embed })
}

impl MixerParams {
    /// `g(S)` row-wise: affine layers with leaky ReLU between them.
    pub fn forward(&self, s: &Tensor) -> Result<Tensor, MixerError> {
        if s.cols() != self.n {
            return Err(MixerError::Config(format!("input has {} columns, expected {}", s.cols(), self.n)));
        }
        let mut h = match &self.embed {
            Some(e) => s.matmul(&e.transpose())?,
            None => s.clone(),
        };
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight.transpose())?;
            let m = self.m;
            for (idx, v) in h.data_mut().iter_mut().enumerate() {
                *v += layer.bias[idx % m];
                if k != last && *v < 0.0 {
                    *v *= self.slope;
                }
            }
        }
        Ok(h)
    }

    /// `g⁻¹(X)` by layer-wise linear solves. Square mixing only.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor, MixerError> {
        if self.n != self.m {
            return Err(MixerError::NotSquare { n: self.n, m: self.m });
        }
        let (b, m) = x.dims2();
        if m != self.m {
            return Err(MixerError::Config(format!("input has {m} columns, expected {}", self.m)));
        }
        // Columns are samples.
        let mut h = to_dmatrix(x).transpose();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if k != last {
                h.iter_mut().filter(|v| **v < 0.0).for_each(|v| *v /= self.slope);
            }
            for j in 0..b {
                for i in 0..m {
                    h[(i, j)] -= layer.bias[i];
                }
            }
            let lu = to_dmatrix(&layer.weight).lu();
            h = lu.solve(&h).ok_or(MixerError::Singular(k))?;
        }
        Ok(from_dmatrix(&h.transpose()))
    }

    /// Named parameter tensors, for dumping alongside checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embed {
            out.push(("mixer.embed".to_string(), e.clone()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("mixer.{k}.weight"), l.weight.clone()));
            out.push((format!("mixer.{k}.bias"), Tensor::row(l.bias.clone())));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditioning_gate() {
        let p = build_mixer(&MixerConfig::new(10), &mut Rng::new(1)).unwrap();
        assert_eq!(p.layers.len(), 3);
        for l in &p.layers {
            let c = condition_number(&l.weight);
            assert!(c < MAX_CONDITION);
            assert!((c - l.condition).abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_layer_has_unit_condition() {
        let cfg = MixerConfig { layers: 1, perturbation: 0.0, ..MixerConfig::new(2) };
        let p = build_mixer(&cfg, &mut Rng::new(2)).unwrap();
        assert!((p.layers[0].condition - 1.0).abs() < 1e-8);
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.5, 0.2]]).unwrap();
        let back = p.invert(&p.forward(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_construction() {
        let cfg = MixerConfig::new(5);
        assert_eq!(build_mixer(&cfg, &mut Rng::new(3)).unwrap(), build_mixer(&cfg, &mut Rng::new(3)).unwrap());
    }

    #[test]
    fn identity_and_bias_cases() {
        let layer = |w: Tensor, b: Vec<f64>| MixerLayer { weight: w, bias: b, condition: 1.0 };
        let p = MixerParams {
            n: 2,
            m: 2,
            slope: 0.2,
            layers: vec![layer(Tensor::identity(2), vec![0.0, 0.0])],
            embed: None,
        };
        let s = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        assert_eq!(p.forward(&s).unwrap(), s);
        let q = MixerParams { layers: vec![layer(Tensor::identity(2), vec![0.4, -0.6])], ..p.clone() };
        let zero = Tensor::zeros(&[3, 2]);
        let out = q.forward(&zero).unwrap();
        for i in 0..3 {
            assert_eq!(out.row_slice(i), &[0.4, -0.6]);
        }
        // Activation between two identity layers.
        let two = MixerParams {
            layers: vec![layer(Tensor::identity(2), vec![0.0; 2]), layer(Tensor::identity(2), vec![0.0; 2])],
            ..p
        };
        let x = Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let y = two.forward(&x).unwrap();
        assert!((y.data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(two.invert(&y).unwrap().data()[0], -1.0);
    }

    #[test]
    fn round_trip() {
        let mut rng = Rng::new(4);
        let p = build_mixer(&MixerConfig::new(10), &mut rng).unwrap();
        let s = rng.sample(crate::diffmath::Distribution::Uniform { low: -1.0, high: 1.0 }, &[10_000, 10]).unwrap();
        let back = p.invert(&p.forward(&s).unwrap()).unwrap();
        let err = back.data().iter().zip(s.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "round-trip error {err}");
    }

    #[test]
    fn rectangular_mixing() {
        let cfg = MixerConfig { m: 5, ..MixerConfig::new(3) };
        let p = build_mixer(&cfg, &mut Rng::new(5)).unwrap();
        let s = Tensor::zeros(&[4, 3]);
        assert_eq!(p.forward(&s).unwrap().shape(), &[4, 5]);
        assert!(matches!(p.invert(&Tensor::zeros(&[1, 5])), Err(MixerError::NotSquare { .. })));
        let bad = MixerConfig { m: 2, ..MixerConfig::new(3) };
        assert!(matches!(build_mixer(&bad, &mut Rng::new(0)), Err(MixerError::DimensionOrder { .. })));
    }
}
