//! Contrastive objectives over dissimilarities `δ`. Positive pairs should
//! receive small `δ`, negative pairs large `δ`.

use crate::diffmath::{DiffError, Graph, Tensor, Var};

/// Default upper bound on exponent arguments in δ-SCL and δ-NWJ.
pub const DEFAULT_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    DeltaNce,
    /// In-batch InfoNCE: every other row of the pool is a negative, so
    /// `K = B − 1`.
    DeltaInce,
    DeltaScl,
    DeltaNwj,
    /// Inner-product spectral contrastive loss, without `δ`.
    OriginalScl,
}

impl LossKind {
    pub const ALL: [LossKind; 5] =
        [LossKind::DeltaNce, LossKind::DeltaInce, LossKind::DeltaScl, LossKind::DeltaNwj, LossKind::OriginalScl];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::DeltaNce => "nce",
            LossKind::DeltaInce => "ince",
            LossKind::DeltaScl => "scl",
            LossKind::DeltaNwj => "nwj",
            LossKind::OriginalScl => "scl-original",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the loss uses an exponent clamp.
    pub fn clamps(self) -> bool {
        matches!(self, LossKind::DeltaScl | LossKind::DeltaNwj)
    }
}

fn flat(g: &mut Graph, v: Var) -> Result<Var, DiffError> {
    if g.value(v).is_empty() {
        return Err(DiffError::Shape("loss input is empty".into()));
    }
    Ok(v)
}

/// `mean(softplus(δ⁺)) + mean(softplus(−δ⁻))`.
pub fn nce(g: &mut Graph, pos: Var, neg: Var) -> Result<Var, DiffError> {
    let (pos, neg) = (flat(g, pos)?, flat(g, neg)?);
    let a = g.softplus(pos)?;
    let a = g.mean(a, None)?;
    let nn = g.neg(neg)?;
    let b = g.softplus(nn)?;
    let b = g.mean(b, None)?;
    g.add(a, b)
}

/// Row mean of `logsumexp(−δ⁺_i, −δ⁻_{i,·}) + δ⁺_i` for `pos: [B, 1]`,
/// `neg: [B, K]`.
pub fn ince(g: &mut Graph, pos: Var, neg: Var) -> Result<Var, DiffError> {
    let (b, _) = g.value(pos).dims2();
    let (bn, k) = g.value(neg).dims2();
    if b != bn || k == 0 {
        return Err(DiffError::Shape(format!("InfoNCE needs [B, 1] and [B, K], got {b} and [{bn}, {k}]")));
    }
    let scores = g.concat(&[pos, neg], 1)?;
    let scores = g.neg(scores)?;
    let lse = g.logsumexp(scores, 1)?;
    let per_row = g.add(lse, pos)?;
    g.mean(per_row, None)
}

fn clamped_exp(g: &mut Graph, x: Var, scale: f64, hi: f64) -> Result<Var, DiffError> {
    let arg = g.scale(x, scale)?;
    let arg = g.clamp(arg, f64::NEG_INFINITY, hi)?;
    g.exp(arg)
}

/// `mean(−2 e^{−δ⁺}) + mean(e^{−2δ⁻})` with exponent arguments capped at `hi`.
pub fn scl(g: &mut Graph, pos: Var, neg: Var, hi: f64) -> Result<Var, DiffError> {
    let (pos, neg) = (flat(g, pos)?, flat(g, neg)?);
    let a = clamped_exp(g, pos, -1.0, hi)?;
    let a = g.mean(a, None)?;
    let a = g.scale(a, -2.0)?;
    let b = clamped_exp(g, neg, -2.0, hi)?;
    let b = g.mean(b, None)?;
    g.add(a, b)
}

/// `mean(δ⁺) + mean(e^{−δ⁻})` with the exponent argument capped at `hi`.
pub fn nwj(g: &mut Graph, pos: Var, neg: Var, hi: f64) -> Result<Var, DiffError> {
    let (pos, neg) = (flat(g, pos)?, flat(g, neg)?);
    let a = g.mean(pos, None)?;
    let b = clamped_exp(g, neg, -1.0, hi)?;
    let b = g.mean(b, None)?;
    g.add(a, b)
}

fn row_dot(g: &mut Graph, a: Var, b: Var) -> Result<Var, DiffError> {
    let p = g.mul(a, b)?;
    g.sum(p, Some(1))
}

/// `mean(−2⟨z, z̃⟩) + mean(⟨z, z⁻⟩²)`.
pub fn scl_original(g: &mut Graph, z: Var, zt: Var, zneg: Var) -> Result<Var, DiffError> {
    let pos = row_dot(g, z, zt)?;
    let pos = g.mean(pos, None)?;
    let pos = g.scale(pos, -2.0)?;
    let neg = row_dot(g, z, zneg)?;
    let neg = g.mul(neg, neg)?;
    let neg = g.mean(neg, None)?;
    g.add(pos, neg)
}

/// Dispatches a δ-loss. For [`LossKind::DeltaInce`] `neg` is the `[B, K]`
/// negative matrix; otherwise it holds one negative per row.
pub fn delta_loss(g: &mut Graph, kind: LossKind, pos: Var, neg: Var, clamp_hi: f64) -> Result<Var, DiffError> {
    match kind {
        LossKind::DeltaNce => nce(g, pos, neg),
        LossKind::DeltaInce => ince(g, pos, neg),
        LossKind::DeltaScl => scl(g, pos, neg, clamp_hi),
        LossKind::DeltaNwj => nwj(g, pos, neg, clamp_hi),
        LossKind::OriginalScl => Err(DiffError::Domain("the original SCL loss takes embeddings, not δ".into())),
    }
}

/// Number of exponent arguments that hit the clamp.
pub fn clamped_entries(kind: LossKind, pos: &Tensor, neg: &Tensor, hi: f64) -> usize {
    let over = |t: &Tensor, s: f64| t.data().iter().filter(|&&d| s * d > hi).count();
    match kind {
        LossKind::DeltaScl => over(pos, -1.0) + over(neg, -2.0),
        LossKind::DeltaNwj => over(neg, -1.0),
        _ => 0,
    }
}

/// Evaluates a δ-loss on plain tensors.
pub fn evaluate(kind: LossKind, pos: &Tensor, neg: &Tensor, clamp_hi: f64) -> Result<f64, DiffError> {
    let mut g = Graph::new();
    let p = g.constant(pos.clone());
    let n = g.constant(neg.clone());
    let l = delta_loss(&mut g, kind, p, n, clamp_hi)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{Distribution, Rng};

    fn col(v: &[f64]) -> Tensor {
        Tensor::column(v.to_vec())
    }

    fn eval(kind: LossKind, pos: &[f64], neg: &[f64]) -> f64 {
        evaluate(kind, &col(pos), &col(neg), DEFAULT_CLAMP).unwrap()
    }

    #[test]
    fn nce_values() {
        assert!((eval(LossKind::DeltaNce, &[0.0], &[0.0]) - 2.0 * 2f64.ln()).abs() < 1e-14);
        let l3 = 3f64.ln();
        assert!((eval(LossKind::DeltaNce, &[l3], &[l3]) - 1.673_976_4).abs() < 1e-6);
        assert!(eval(LossKind::DeltaNce, &[-800.0], &[800.0]) < 1e-300);
    }

    #[test]
    fn ince_values() {
        let ev = |pos: f64, neg: &[f64]| {
            evaluate(LossKind::DeltaInce, &col(&[pos]), &Tensor::row(neg.to_vec()), DEFAULT_CLAMP).unwrap()
        };
        assert!((ev(0.3, &[0.3; 7]) - 8f64.ln()).abs() < 1e-14);
        assert!((ev(0.0, &[2f64.ln()]) - 1.5f64.ln()).abs() < 1e-14);
        assert!(ev(0.0, &[1e6, 1e6]).abs() < 1e-300);
    }

    #[test]
    fn scl_and_nwj_values() {
        let l2 = 2f64.ln();
        assert!((eval(LossKind::DeltaScl, &[0.0], &[0.0]) + 1.0).abs() < 1e-15);
        assert!((eval(LossKind::DeltaScl, &[l2], &[l2]) + 0.75).abs() < 1e-15);
        assert!(eval(LossKind::DeltaScl, &[700.0], &[700.0]).abs() < 1e-300);
        assert_eq!(eval(LossKind::DeltaNwj, &[0.0], &[0.0]), 1.0);
        assert_eq!(eval(LossKind::DeltaNwj, &[1.0], &[0.0]), 2.0);
        assert!((eval(LossKind::DeltaNwj, &[0.0], &[4f64.ln()]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn original_scl_values() {
        let ev = |z: &[&[f64]], zt: &[&[f64]], zn: &[&[f64]]| {
            let m = |r: &[&[f64]]| Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap();
            let mut g = Graph::new();
            let (a, b, c) = (g.constant(m(z)), g.constant(m(zt)), g.constant(m(zn)));
            let l = scl_original(&mut g, a, b, c).unwrap();
            g.value(l).item()
        };
        let u: &[f64] = &[0.6, 0.8];
        assert!((ev(&[u], &[u], &[u]) + 1.0).abs() < 1e-14);
        assert_eq!(ev(&[&[1.0, 0.0]], &[&[0.0, 1.0]], &[&[0.0, 2.0]]), 0.0);
        assert_eq!(ev(&[&[1.0, 0.0]], &[&[0.5, 0.0]], &[&[2.0, 0.0]]), 3.0);
    }

    #[test]
    fn ince_gauge_invariance() {
        let mut rng = Rng::new(1);
        let pos = rng.sample(Distribution::StandardNormal, &[6, 1]).unwrap();
        let neg = rng.sample(Distribution::StandardNormal, &[6, 5]).unwrap();
        let base = evaluate(LossKind::DeltaInce, &pos, &neg, DEFAULT_CLAMP).unwrap();
        let shift: Vec<f64> = (0..6).map(|_| 50.0 * rng.normal()).collect();
        let p2 = Tensor::column((0..6).map(|i| pos.data()[i] + shift[i]).collect());
        let mut n2 = neg.clone();
        for i in 0..6 {
            for j in 0..5 {
                n2.set(i, j, neg.get(i, j) + shift[i]);
            }
        }
        let moved = evaluate(LossKind::DeltaInce, &p2, &n2, DEFAULT_CLAMP).unwrap();
        assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn monotone_and_permutation_invariant() {
        let pos = [0.2, -0.5, 1.0];
        let neg = [0.7, 0.1, -0.3];
        for kind in [LossKind::DeltaNce, LossKind::DeltaScl, LossKind::DeltaNwj] {
            let base = eval(kind, &pos, &neg);
            assert_eq!(base, eval(kind, &[1.0, 0.2, -0.5], &[-0.3, 0.7, 0.1]));
            assert!(eval(kind, &[0.1, -0.5, 1.0], &neg) <= base);
            assert!(eval(kind, &pos, &[0.6, 0.1, -0.3]) >= base);
        }
    }

    #[test]
    fn finite_over_wide_range() {
        for kind in [LossKind::DeltaNce, LossKind::DeltaScl, LossKind::DeltaNwj] {
            for (p, n) in [(-1e6, 1e6), (1e6, -1e6), (-1e6, -1e6), (1e6, 1e6)] {
                assert!(eval(kind, &[p], &[n]).is_finite(), "{kind:?} at {p}, {n}");
            }
        }
        let v = evaluate(LossKind::DeltaInce, &col(&[-1e6]), &Tensor::row(vec![1e6, -1e6]), 20.0).unwrap();
        assert!(v.is_finite());
        assert_eq!(clamped_entries(LossKind::DeltaScl, &col(&[-30.0]), &col(&[-30.0]), 20.0), 2);
    }
}
