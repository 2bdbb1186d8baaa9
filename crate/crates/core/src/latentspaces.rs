//! Latent-space scenarios, the marginal `p(s)`, and the distance-based
//! conditional `p(s̃ | s) ∝ Q(s̃) exp(-Σ_i (|s_i - s̃_i| / σ_i)^β)` restricted
//! to the support.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::diffmath::{DiffError, Rng, Tensor};

/// Rejection attempts allowed per sample before giving up.
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("invalid latent specification: {0}")]
    InvalidSpec(String),
    #[error("sampler gave up after {attempts} attempts (estimated acceptance rate {acceptance:.2e})")]
    Inefficient { attempts: usize, acceptance: f64 },
    #[error("point {0:?} lies outside the support")]
    OutsideSupport(Vec<f64>),
    #[error("{0}")]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scenario {
    /// Uniform on `[0, 1]^n`.
    BoxSimple,
    /// Gaussian with correlated `(2k, 2k + 1)` pairs, truncated to `[0, 1]^n`.
    BoxComplex { rho: f64, mean: f64, std: f64 },
    /// Radius uniform on `(r_inner, r_outer)`, direction uniform.
    HollowBall { r_inner: f64, r_outer: f64 },
    /// `[-1, 1]^n` with the slab `|s_i| <= b` removed on every axis.
    CubeGrid { b: f64 },
}

impl Scenario {
    pub fn box_complex() -> Self {
        Scenario::BoxComplex { rho: 0.8, mean: 0.5, std: 0.3 }
    }

    pub fn hollow_ball() -> Self {
        Scenario::HollowBall { r_inner: 0.5, r_outer: 1.0 }
    }

    pub fn cube_grid() -> Self {
        Scenario::CubeGrid { b: 0.3 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::BoxSimple => "box-simple",
            Scenario::BoxComplex { .. } => "box-complex",
            Scenario::HollowBall { .. } => "hollow-ball",
            Scenario::CubeGrid { .. } => "cube-grid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpaceSpec {
    pub n: usize,
    pub scenario: Scenario,
}

impl LatentSpaceSpec {
    pub fn new(n: usize, scenario: Scenario) -> Result<Self, LatentError> {
        let spec = Self { n, scenario };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        if self.n == 0 {
            return Err(LatentError::InvalidSpec("n must be at least 1".into()));
        }
        match self.scenario {
            Scenario::BoxSimple => {}
            Scenario::BoxComplex { rho, std, .. } => {
                if !(rho.abs() < 1.0) || !(std > 0.0) {
                    return Err(LatentError::InvalidSpec(format!(
                        "box-complex needs |rho| < 1 and std > 0, got rho={rho}, std={std}"
                    )));
                }
            }
            Scenario::HollowBall { r_inner, r_outer } => {
                if !(0.0 < r_inner && r_inner < r_outer) {
                    return Err(LatentError::InvalidSpec(format!(
                        "hollow ball needs 0 < r_inner < r_outer, got {r_inner}, {r_outer}"
                    )));
                }
            }
            Scenario::CubeGrid { b } => {
                if !(0.0 < b && b < 1.0) {
                    return Err(LatentError::InvalidSpec(format!("cube grid needs 0 < b < 1, got {b}")));
                }
            }
        }
        Ok(())
    }

    /// Support predicate.
    pub fn contains(&self, s: &[f64]) -> bool {
        match self.scenario {
            Scenario::BoxSimple | Scenario::BoxComplex { .. } => s.iter().all(|&v| (0.0..=1.0).contains(&v)),
            Scenario::HollowBall { r_inner, r_outer } => {
                let r = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                r_inner < r && r < r_outer
            }
            Scenario::CubeGrid { b } => s.iter().all(|&v| v.abs() > b && v.abs() <= 1.0),
        }
    }

    /// Euclidean diameter of the support's bounding region.
    pub fn diameter(&self) -> f64 {
        let n = self.n as f64;
        match self.scenario {
            Scenario::BoxSimple | Scenario::BoxComplex { .. } => n.sqrt(),
            Scenario::HollowBall { r_outer, .. } => 2.0 * r_outer,
            Scenario::CubeGrid { .. } => 2.0 * n.sqrt(),
        }
    }

    /// Default per-dimension scale: a tenth of the support diameter.
    pub fn default_sigma(&self) -> Vec<f64> {
        vec![0.1 * self.diameter(); self.n]
    }

    /// Per-axis bounds of the support (a box containing it).
    pub fn bounds(&self) -> (f64, f64) {
        match self.scenario {
            Scenario::BoxSimple | Scenario::BoxComplex { .. } => (0.0, 1.0),
            Scenario::HollowBall { r_outer, .. } => (-r_outer, r_outer),
            Scenario::CubeGrid { .. } => (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QSpec {
    Constant,
    /// Two cells per axis; cells with odd `Σ_i ⌊2 s_i⌋` take the value `low`,
    /// the rest take 1.
    Checkerboard { low: f64 },
}

impl QSpec {
    pub fn log_q(&self, s: &[f64]) -> f64 {
        match *self {
            QSpec::Constant => 0.0,
            QSpec::Checkerboard { low } => {
                if is_black(s) {
                    low.ln()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn q(&self, s: &[f64]) -> f64 {
        self.log_q(s).exp()
    }

    pub fn q_max(&self) -> f64 {
        1.0
    }
}

/// Whether `s` falls on a low-valued checkerboard cell.
pub fn is_black(s: &[f64]) -> bool {
    let parity: i64 = s.iter().map(|v| (2.0 * v).floor() as i64).sum();
    parity.rem_euclid(2) == 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalSpec {
    pub beta: f64,
    pub sigma: Vec<f64>,
    pub q: QSpec,
}

impl ConditionalSpec {
    pub fn new(beta: f64, sigma: Vec<f64>, q: QSpec) -> Result<Self, LatentError> {
        let spec = Self { beta, sigma, q };
        spec.validate()?;
        Ok(spec)
    }

    /// The default conditional for a space: constant `Q` and the default
    /// scale.
    pub fn for_space(space: &LatentSpaceSpec, beta: f64) -> Result<Self, LatentError> {
        Self::new(beta, space.default_sigma(), QSpec::Constant)
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(LatentError::InvalidSpec(format!("beta must be positive, got {}", self.beta)));
        }
        if self.sigma.is_empty() || self.sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(LatentError::InvalidSpec(format!("sigma must be positive, got {:?}", self.sigma)));
        }
        if let QSpec::Checkerboard { low } = self.q {
            if !(low > 0.0 && low <= 1.0) {
                return Err(LatentError::InvalidSpec(format!("checkerboard low must lie in (0, 1], got {low}")));
            }
        }
        Ok(())
    }

    /// `d(s, s̃) = Σ_i (|s_i - s̃_i| / σ_i)^β`.
    pub fn distance(&self, s: &[f64], st: &[f64]) -> f64 {
        s.iter()
            .zip(st)
            .zip(&self.sigma)
            .map(|((a, b), sig)| ((a - b).abs() / sig).powf(self.beta))
            .sum()
    }
}

/// Positive pairs and their observations.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub s: Tensor,
    pub s_tilde: Tensor,
    pub x: Tensor,
    pub x_tilde: Tensor,
}

fn check_dims(space: &LatentSpaceSpec, cond: &ConditionalSpec) -> Result<(), LatentError> {
    space.validate()?;
    cond.validate()?;
    if cond.sigma.len() != space.n {
        return Err(LatentError::InvalidSpec(format!(
            "sigma has {} entries for a {}-dimensional space",
            cond.sigma.len(),
            space.n
        )));
    }
    Ok(())
}

/// `B` i.i.d. draws from `p(s)`.
pub fn sample_marginal(space: &LatentSpaceSpec, b: usize, rng: &mut Rng) -> Result<Tensor, LatentError> {
    space.validate()?;
    if b == 0 {
        return Err(LatentError::InvalidSpec("batch size must be at least 1".into()));
    }
    let n = space.n;
    let mut data = Vec::with_capacity(b * n);
    let mut row = vec![0.0; n];
    for _ in 0..b {
        match space.scenario {
            Scenario::BoxSimple => row.iter_mut().for_each(|v| *v = rng.uniform()),
            Scenario::BoxComplex { rho, mean, std } => {
                let mut attempts = 0;
                loop {
                    attempts += 1;
                    correlated_gaussian(rng, rho, mean, std, &mut row);
                    if space.contains(&row) {
                        break;
                    }
                    if attempts >= MAX_REJECTIONS {
                        return Err(LatentError::Inefficient { attempts, acceptance: 1.0 / attempts as f64 });
                    }
                }
            }
            Scenario::HollowBall { r_inner, r_outer } => loop {
                row.iter_mut().for_each(|v| *v = rng.normal());
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                // Open interval: redraw the (measure-zero) endpoint.
                let r = rng.uniform_range(r_inner, r_outer);
                if r <= r_inner {
                    continue;
                }
                row.iter_mut().for_each(|v| *v *= r / norm);
                if space.contains(&row) {
                    break;
                }
            },
            Scenario::CubeGrid { b } => {
                for v in row.iter_mut() {
                    let mag = 1.0 - (1.0 - b) * rng.uniform(); // (b, 1]
                    *v = if rng.bernoulli(0.5) { mag } else { -mag };
                }
            }
        }
        data.extend_from_slice(&row);
    }
    Ok(Tensor::matrix(b, n, data)?)
}

fn correlated_gaussian(rng: &mut Rng, rho: f64, mean: f64, std: f64, out: &mut [f64]) {
    let tail = (1.0 - rho * rho).sqrt();
    let mut i = 0;
    while i < out.len() {
        let z0 = rng.normal();
        out[i] = mean + std * z0;
        if i + 1 < out.len() {
            let z1 = rng.normal();
            out[i + 1] = mean + std * (rho * z0 + tail * z1);
        }
        i += 2;
    }
}

/// One draw from the generalized normal `∝ exp(-(|x| / σ)^β)`.
pub fn generalized_normal(rng: &mut Rng, beta: f64, sigma: f64) -> Result<f64, LatentError> {
    let g = rng.gamma(1.0 / beta)?;
    let mag = sigma * g.powf(1.0 / beta);
    Ok(if rng.bernoulli(0.5) { mag } else { -mag })
}

/// `E|x|` of the generalized normal: `σ Γ(2/β) / Γ(1/β)`.
pub fn generalized_normal_abs_mean(beta: f64, sigma: f64) -> f64 {
    sigma * (ln_gamma(2.0 / beta) - ln_gamma(1.0 / beta)).exp()
}

/// Outcome of conditional sampling with rejection bookkeeping.
#[derive(Clone, Debug)]
pub struct ConditionalDraw {
    pub samples: Tensor,
    /// Proposals drawn in total, over all rows.
    pub proposals: usize,
}

impl ConditionalDraw {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.rows() as f64 / self.proposals as f64
    }
}

/// Draws `s̃ ~ p(s̃ | s)` for every row of `s`.
pub fn sample_conditional(
    space: &LatentSpaceSpec,
    cond: &ConditionalSpec,
    s: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor, LatentError> {
    sample_conditional_counted(space, cond, s, rng).map(|d| d.samples)
}

/// As [`sample_conditional`], also reporting the number of proposals.
pub fn sample_conditional_counted(
    space: &LatentSpaceSpec,
    cond: &ConditionalSpec,
    s: &Tensor,
    rng: &mut Rng,
) -> Result<ConditionalDraw, LatentError> {
    check_dims(space, cond)?;
    let (b, n) = s.dims2();
    if n != space.n {
        return Err(LatentError::InvalidSpec(format!("anchor rows have {n} columns, expected {}", space.n)));
    }
    let q_max = cond.q.q_max();
    let mut data = Vec::with_capacity(b * n);
    let mut cand = vec![0.0; n];
    let mut proposals = 0;
    for i in 0..b {
        let anchor = s.row_slice(i);
        let mut attempts = 0;
        loop {
            attempts += 1;
            for d in 0..n {
                cand[d] = anchor[d] + generalized_normal(rng, cond.beta, cond.sigma[d])?;
            }
            let accept = space.contains(&cand) && {
                let ratio = cond.q.q(&cand) / q_max;
                ratio >= 1.0 || rng.uniform() < ratio
            };
            if accept {
                break;
            }
            if attempts >= MAX_REJECTIONS {
                return Err(LatentError::Inefficient { attempts, acceptance: 1.0 / attempts as f64 });
            }
        }
        proposals += attempts;
        data.extend_from_slice(&cand);
    }
    Ok(ConditionalDraw { samples: Tensor::matrix(b, n, data)?, proposals })
}

/// `log Q(s̃) - d(s, s̃)`, or `-∞` outside the support.
pub fn log_unnormalized_conditional(
    space: &LatentSpaceSpec,
    cond: &ConditionalSpec,
    s: &[f64],
    st: &[f64],
) -> f64 {
    if !space.contains(st) {
        return f64::NEG_INFINITY;
    }
    cond.q.log_q(st) - cond.distance(s, st)
}

/// `log p(s)`. For the truncated Gaussian of `BoxComplex` the truncation
/// constant is omitted.
pub fn log_marginal_density(space: &LatentSpaceSpec, s: &[f64]) -> Result<f64, LatentError> {
    if s.len() != space.n || !space.contains(s) {
        return Err(LatentError::OutsideSupport(s.to_vec()));
    }
    let n = space.n as f64;
    Ok(match space.scenario {
        Scenario::BoxSimple => 0.0,
        Scenario::CubeGrid { b } => -n * (2.0 * (1.0 - b)).ln(),
        Scenario::HollowBall { r_inner, r_outer } => {
            let r = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            -(r_outer - r_inner).ln() - log_sphere_area(space.n) - (n - 1.0) * r.ln()
        }
        Scenario::BoxComplex { rho, mean, std } => {
            let mut acc = 0.0;
            let mut i = 0;
            let norm1 = -0.5 * (2.0 * PI).ln() - std.ln();
            while i < s.len() {
                let u = (s[i] - mean) / std;
                if i + 1 < s.len() {
                    let v = (s[i + 1] - mean) / std;
                    let det = 1.0 - rho * rho;
                    acc += 2.0 * norm1 - 0.5 * det.ln() - (u * u - 2.0 * rho * u * v + v * v) / (2.0 * det);
                } else {
                    acc += norm1 - 0.5 * u * u;
                }
                i += 2;
            }
            acc
        }
    })
}

/// `log |S^{n-1}|`, the log surface area of the unit sphere in `R^n`.
pub fn log_sphere_area(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    2f64.ln() + h * PI.ln() - ln_gamma(h)
}
