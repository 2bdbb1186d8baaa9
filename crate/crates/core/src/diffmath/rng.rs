//! Seedable, platform-independent pseudo-random numbers.
//!
//! The generator is SplitMix64 (64 bits of state). Normals use the
//! Box–Muller transform and gamma variates use Marsaglia–Tsang, so every
//! sample is a fixed function of the uniform stream.

use super::{DiffError, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
    seed: u64,
}

/// Distributions accepted by [`Rng::sample`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    StandardNormal,
    /// Gamma with the given shape and unit scale.
    Gamma { shape: f64 },
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, seed }
    }

    /// An independent stream derived from `(seed, stream)`. Used to give
    /// evaluation data, mixer construction and per-row sampling their own
    /// sequences.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let derived = mix(seed ^ mix(stream.wrapping_add(1).wrapping_mul(GOLDEN)));
        Self { state: derived, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Standard normal via Box–Muller (cosine branch only, no cached spare).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) via Marsaglia–Tsang; shapes below one use the
    /// `Gamma(k + 1) · U^{1/k}` boost.
    pub fn gamma(&mut self, shape: f64) -> Result<f64, DiffError> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(DiffError::Domain(format!("gamma shape must be positive, got {shape}")));
        }
        if shape < 1.0 {
            let g = self.gamma_ge_one(shape + 1.0);
            let u = 1.0 - self.uniform();
            return Ok(g * u.powf(1.0 / shape));
        }
        Ok(self.gamma_ge_one(shape))
    }

    fn gamma_ge_one(&mut self, shape: f64) -> f64 {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v;
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Uniform integer in `0..n` (rejection-free multiply-shift; the bias is
    /// below 2^-64 · n and irrelevant at the sizes used here).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Uniformly random permutation without fixed points (`n >= 2`),
    /// by rejection of shuffles.
    pub fn derangement(&mut self, n: usize) -> Vec<usize> {
        assert!(n >= 2, "a derangement needs at least two elements");
        loop {
            let p = self.permutation(n);
            if p.iter().enumerate().all(|(i, &j)| i != j) {
                return p;
            }
        }
    }

    /// Fills a tensor of the given shape with i.i.d. draws.
    pub fn sample(&mut self, dist: Distribution, shape: &[usize]) -> Result<Tensor, DiffError> {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        match dist {
            Distribution::Uniform { low, high } => {
                if !(low < high) {
                    return Err(DiffError::Domain(format!("uniform({low}, {high}) is empty")));
                }
                data.extend((0..len).map(|_| self.uniform_range(low, high)));
            }
            Distribution::StandardNormal => data.extend((0..len).map(|_| self.normal())),
            Distribution::Gamma { shape: k } => {
                for _ in 0..len {
                    data.push(self.gamma(k)?);
                }
            }
        }
        Tensor::new(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::stream(42, 1);
        let mut d = Rng::stream(42, 2);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn gamma_mean_is_shape() {
        let mut rng = Rng::new(7);
        let xs = rng.sample(Distribution::Gamma { shape: 2.0 }, &[1_000_000]).unwrap();
        let (mean, _) = moments(xs.data());
        // Var[Gamma(k)] = k.
        let se = (2.0f64 / 1e6).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn gamma_small_shape_mean() {
        let mut rng = Rng::new(8);
        let xs = rng.sample(Distribution::Gamma { shape: 0.5 }, &[400_000]).unwrap();
        let (mean, _) = moments(xs.data());
        let se = (0.5f64 / 4e5).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn uniform_mean() {
        let mut rng = Rng::new(9);
        let xs = rng.sample(Distribution::Uniform { low: 0.0, high: 1.0 }, &[1_000_000]).unwrap();
        let (mean, _) = moments(xs.data());
        let se = (1.0f64 / 12.0 / 1e6).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn normal_variance() {
        let mut rng = Rng::new(10);
        let xs = rng.sample(Distribution::StandardNormal, &[1_000_000]).unwrap();
        let (_, var) = moments(xs.data());
        // Var of the sample variance of N(0,1) is 2/(N-1).
        let se = (2.0f64 / 1e6).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn gamma_rejects_nonpositive_shape() {
        let mut rng = Rng::new(0);
        assert!(rng.gamma(0.0).is_err());
        assert!(rng.gamma(-1.0).is_err());
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = Rng::new(3);
        for n in 2..20 {
            let p = rng.derangement(n);
            let mut seen = vec![false; n];
            for (i, &j) in p.iter().enumerate() {
                assert_ne!(i, j);
                seen[j] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }
}
