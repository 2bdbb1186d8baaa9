use crate::diffmath::{DiffError, Graph, Tensor, Var};

/// The fixed interaction term `d̂`.
#[derive(Clone, Debug, PartialEq)]
pub enum Dhat {
    /// `Σ_i (|z_i − z̃_i| / σ_i)^β`.
    LpBeta { beta: f64, sigma: Vec<f64> },
    /// `‖z − z̃‖²`.
    SquaredEuclidean,
}

impl Dhat {
    pub fn validate(&self, n: usize) -> Result<(), DiffError> {
        if let Dhat::LpBeta { beta, sigma } = self {
            if !(*beta > 0.0) {
                return Err(DiffError::Domain(format!("d̂ exponent must be positive, got {beta}")));
            }
            if sigma.len() != n || sigma.iter().any(|s| !(*s > 0.0)) {
                return Err(DiffError::Domain(format!("d̂ needs {n} positive scales, got {sigma:?}")));
            }
        }
        Ok(())
    }

    fn beta_and_scale(&self, n: usize) -> (f64, Vec<f64>) {
        match self {
            Dhat::LpBeta { beta, sigma } => (*beta, sigma.clone()),
            Dhat::SquaredEuclidean => (2.0, vec![1.0; n]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    Learned,
    /// `α = α̃ = c`: only the shared offset is learned.
    ConstantOnly,
    Zero,
}

impl AlphaMode {
    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::Learned => "learned",
            AlphaMode::ConstantOnly => "constant",
            AlphaMode::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissimilaritySpec {
    pub dhat: Dhat,
    pub alpha_mode: AlphaMode,
    /// InfoNCE form `δ = d̂ + α̃`: no `α` and no offset.
    pub ince: bool,
}

impl DissimilaritySpec {
    pub fn uses_alpha(&self) -> bool {
        self.alpha_mode == AlphaMode::Learned && !self.ince
    }

    pub fn uses_alpha_tilde(&self) -> bool {
        self.alpha_mode == AlphaMode::Learned
    }

    pub fn uses_offset(&self) -> bool {
        self.alpha_mode != AlphaMode::Zero && !self.ince
    }
}

/// Row-wise `d̂(z_i, z̃_i)` as a `[B, 1]` column.
pub fn dhat(g: &mut Graph, spec: &Dhat, z: Var, zt: Var) -> Result<Var, DiffError> {
    let n = g.value(z).cols();
    spec.validate(n)?;
    if g.value(zt).cols() != n {
        return Err(DiffError::Shape(format!("d̂ on {n} vs {} columns", g.value(zt).cols())));
    }
    let diff = g.sub(z, zt)?;
    let terms = match spec {
        Dhat::SquaredEuclidean => g.mul(diff, diff)?,
        Dhat::LpBeta { beta, sigma } => {
            let a = g.abs(diff)?;
            let inv = g.constant(Tensor::row(sigma.iter().map(|s| 1.0 / s).collect()));
            let u = g.mul(a, inv)?;
            if *beta == 1.0 {
                u
            } else {
                g.pow(u, *beta)?
            }
        }
    };
    g.sum(terms, Some(1))
}

/// `d̂(z_i, z⁻_j)` for every pair, `[B, K]`.
pub fn dhat_pairwise(g: &mut Graph, spec: &Dhat, z: Var, zneg: Var) -> Result<Var, DiffError> {
    let n = g.value(z).cols();
    spec.validate(n)?;
    let (beta, scale) = spec.beta_and_scale(n);
    g.pairwise_lp(z, zneg, beta, &scale)
}

/// `δ = d̂ + α + α̃ + c` over whichever terms are present. Shapes broadcast,
/// so a `[B, 1]` `α` with a `[1, K]` `α̃` yields the pairwise matrix.
pub fn dissimilarity(
    g: &mut Graph,
    dhat: Var,
    alpha: Option<Var>,
    alpha_tilde: Option<Var>,
    c: Option<Var>,
) -> Result<Var, DiffError> {
    let mut d = dhat;
    for term in [alpha, alpha_tilde, c].into_iter().flatten() {
        d = g.add(d, term)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(beta: f64, sigma: f64, n: usize) -> Dhat {
        Dhat::LpBeta { beta, sigma: vec![sigma; n] }
    }

    fn rows_value(spec: &Dhat, z: &[f64], zt: &[f64]) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(z.to_vec()));
        let b = g.constant(Tensor::row(zt.to_vec()));
        let d = dhat(&mut g, spec, a, b).unwrap();
        g.value(d).item()
    }

    #[test]
    fn dhat_values() {
        assert_eq!(rows_value(&lp(1.0, 1.0, 2), &[0.3, 0.4], &[0.3, 0.4]), 0.0);
        assert_eq!(rows_value(&lp(1.0, 1.0, 2), &[0.0, 0.0], &[1.0, 1.0]), 2.0);
        assert!((rows_value(&lp(3.0, 2.0, 2), &[0.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(rows_value(&Dhat::SquaredEuclidean, &[1.0, 2.0], &[0.0, 0.0]), 5.0);
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![0.0]));
        assert!(dhat(&mut g, &lp(0.0, 1.0, 1), a, a).is_err());
    }

    #[test]
    fn pairwise_matches_rows_and_is_separable() {
        let z = Tensor::from_rows(&[vec![0.1, 0.5], vec![-0.3, 0.2]]).unwrap();
        let neg = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0], vec![0.4, 0.4]]).unwrap();
        let spec = lp(1.5, 0.7, 2);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let nv = g.constant(neg.clone());
        let p = dhat_pairwise(&mut g, &spec, zv, nv).unwrap();
        let alpha = g.constant(Tensor::column(vec![0.3, -0.2]));
        let at = g.constant(Tensor::row(vec![0.1, 0.0, -0.4]));
        let c = g.constant(Tensor::scalar(0.5));
        let d = dissimilarity(&mut g, p, Some(alpha), Some(at), Some(c)).unwrap();
        assert_eq!(g.value(d).shape(), &[2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                let want = rows_value(&spec, z.row_slice(i), neg.row_slice(j));
                assert!((g.value(p).get(i, j) - want).abs() < 1e-14);
            }
        }
        // Moving one negative changes only its column.
        let mut moved = neg.clone();
        moved.set(1, 0, 3.0);
        let mv = g.constant(moved);
        let p2 = dhat_pairwise(&mut g, &spec, zv, mv).unwrap();
        for i in 0..2 {
            for j in [0, 2] {
                assert_eq!(g.value(p).get(i, j), g.value(p2).get(i, j));
            }
            assert_ne!(g.value(p).get(i, 1), g.value(p2).get(i, 1));
        }
    }

    #[test]
    fn sum_of_terms() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::column(vec![2.0]));
        let a = g.constant(Tensor::column(vec![0.3]));
        let at = g.constant(Tensor::column(vec![-0.1]));
        let c = g.constant(Tensor::scalar(0.5));
        let v = dissimilarity(&mut g, d, Some(a), Some(at), Some(c)).unwrap();
        assert!((g.value(v).item() - 2.7).abs() < 1e-15);
        let z = dissimilarity(&mut g, d, None, None, None).unwrap();
        assert_eq!(g.value(z).item(), 2.0);
    }

    #[test]
    fn translation_invariance() {
        let spec = lp(2.5, 0.3, 3);
        let (z, zt) = ([0.1, -0.4, 0.9], [0.6, 0.2, -0.3]);
        let shift = [5.0, -2.0, 0.25];
        let zs: Vec<f64> = z.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let zts: Vec<f64> = zt.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let a = rows_value(&spec, &z, &zt);
        let b = rows_value(&spec, &zs, &zts);
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
    }
}
