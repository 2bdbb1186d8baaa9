//! Finite worlds in which the exact-expectation contrastive losses can be
//! minimized over a free score table `ψ = −δ`.

use super::OracleError;
use nalgebra::{DMatrix, DVector};

use crate::diffmath::Rng;
use crate::losses::LossKind;
use crate::trainer::NegativeSource;

pub const MAX_OUTCOMES: usize = 8;
pub const MAX_INCE_NEGATIVES: usize = 2;
pub const MAX_STEPS: usize = 10_000;
pub const GRAD_TOL: f64 = 1e-10;

/// Joint distribution of positive pairs over `M` outcomes and a negative
/// marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteWorld {
    pub m: usize,
    pub p_pos: Vec<Vec<f64>>,
    pub p_x: Vec<f64>,
    pub p_xt: Vec<f64>,
    pub p_neg: Vec<f64>,
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&v| v > 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

impl DiscreteWorld {
    pub fn new(p_pos: Vec<Vec<f64>>, p_neg: Vec<f64>) -> Result<Self, OracleError> {
        let m = p_pos.len();
        if m == 0 || m > MAX_OUTCOMES || p_pos.iter().any(|r| r.len() != m) || p_neg.len() != m {
            return Err(OracleError::InvalidWorld(format!("need square tables of size 1..={MAX_OUTCOMES}")));
        }
        let flat: Vec<f64> = p_pos.concat();
        if !is_distribution(&flat) || !is_distribution(&p_neg) {
            return Err(OracleError::InvalidWorld("tables must be strictly positive and sum to 1".into()));
        }
        let p_x = p_pos.iter().map(|r| r.iter().sum()).collect();
        let p_xt = (0..m).map(|j| p_pos.iter().map(|r| r[j]).sum()).collect();
        Ok(Self { m, p_pos, p_x, p_xt, p_neg })
    }

    /// Random joint with a heavier diagonal, and the chosen negative marginal.
    pub fn random(rng: &mut Rng, m: usize, negatives: NegativeSource) -> Result<Self, OracleError> {
        let mut joint: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| (rng.normal() + if i == j { 1.5 } else { 0.0 }).exp()).collect())
            .collect();
        let total: f64 = joint.iter().flatten().sum();
        joint.iter_mut().flatten().for_each(|v| *v /= total);
        let p_x: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let p_xt: Vec<f64> = (0..m).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
        let p_neg = match negatives {
            NegativeSource::FirstMarginal => p_x,
            NegativeSource::SecondMarginal => p_xt,
            NegativeSource::Mixture => p_x.iter().zip(&p_xt).map(|(a, b)| 0.5 * (a + b)).collect(),
        };
        let s: f64 = p_neg.iter().sum();
        Self::new(joint, p_neg.into_iter().map(|v| v / s).collect())
    }

    /// `log p(x̃ | x) − log p⁻(x̃)`.
    pub fn closed_form(&self) -> Vec<Vec<f64>> {
        (0..self.m)
            .map(|i| (0..self.m).map(|j| (self.p_pos[i][j] / self.p_x[i]).ln() - self.p_neg[j].ln()).collect())
            .collect()
    }
}

type Table = Vec<Vec<f64>>;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Exact expected loss and its gradient with respect to `ψ`.
pub fn exact_loss(world: &DiscreteWorld, kind: LossKind, k: usize, psi: &Table) -> Result<(f64, Table), OracleError> {
    let m = world.m;
    let mut grad = vec![vec![0.0; m]; m];
    let mut loss = 0.0;
    match kind {
        LossKind::DeltaNce | LossKind::DeltaScl | LossKind::DeltaNwj => {
            for i in 0..m {
                for j in 0..m {
                    let (a, b, p) = (world.p_pos[i][j], world.p_x[i] * world.p_neg[j], psi[i][j]);
                    let (l, g) = match kind {
                        LossKind::DeltaNce => (a * softplus(-p) + b * softplus(p), -a * sigmoid(-p) + b * sigmoid(p)),
                        LossKind::DeltaScl => {
                            let e = p.exp();
                            (-2.0 * a * e + b * e * e, -2.0 * a * e + 2.0 * b * e * e)
                        }
                        _ => {
                            let e = p.exp();
                            (-a * p + b * e, -a + b * e)
                        }
                    };
                    loss += l;
                    grad[i][j] = g;
                }
            }
        }
        LossKind::DeltaInce => {
            if k == 0 || k > MAX_INCE_NEGATIVES {
                return Err(OracleError::Unsupported(format!("exact InfoNCE needs 1 <= K <= {MAX_INCE_NEGATIVES}")));
            }
            let slots = k + 1;
            let tuples = m.pow(slots as u32);
            let mut idx = vec![0usize; slots];
            let mut soft = vec![0.0; slots];
            for x in 0..m {
                for t in 0..tuples {
                    let mut r = t;
                    for s in idx.iter_mut() {
                        *s = r % m;
                        r /= m;
                    }
                    let mut w = world.p_pos[x][idx[0]];
                    for &j in &idx[1..] {
                        w *= world.p_neg[j];
                    }
                    let mx = idx.iter().map(|&j| psi[x][j]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (s, &j) in idx.iter().enumerate() {
                        soft[s] = (psi[x][j] - mx).exp();
                        z += soft[s];
                    }
                    loss += w * (mx + z.ln() - psi[x][idx[0]]);
                    for (s, &j) in idx.iter().enumerate() {
                        grad[x][j] += w * soft[s] / z;
                    }
                    grad[x][idx[0]] -= w;
                }
            }
        }
        LossKind::OriginalScl => {
            return Err(OracleError::Unsupported("the inner-product loss has no score-table form".into()))
        }
    }
    if !loss.is_finite() {
        return Err(OracleError::NonFinite);
    }
    Ok((loss, grad))
}

fn norm(t: &Table) -> f64 {
    t.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub psi: Table,
    pub loss: f64,
    pub grad_norm: f64,
    pub steps: usize,
}

/// Damped Newton (Levenberg–Marquardt) from `ψ = 0` until the gradient
/// norm drops below [`GRAD_TOL`]. The Hessian is built by central
/// differences of the exact gradient; damping keeps steps well-defined along
/// the flat row-shift directions of InfoNCE.
pub fn discrete_loss_minimizer(world: &DiscreteWorld, kind: LossKind, k: usize) -> Result<Minimum, OracleError> {
    let m = world.m;
    let dim = m * m;
    let flat = |t: &Table| DVector::from_iterator(dim, t.iter().flatten().copied());
    let table = |v: &DVector<f64>| -> Table { (0..m).map(|i| v.rows(i * m, m).iter().copied().collect()).collect() };
    let mut psi = vec![vec![0.0; m]; m];
    let (mut loss, mut grad) = exact_loss(world, kind, k, &psi)?;
    let mut lambda = 1e-3;
    for steps in 0..MAX_STEPS {
        let gn = norm(&grad);
        if gn < GRAD_TOL {
            return Ok(Minimum { psi, loss, grad_norm: gn, steps });
        }
        let x = flat(&psi);
        let g = flat(&grad);
        let h = 1e-5;
        let mut hess = DMatrix::zeros(dim, dim);
        for c in 0..dim {
            let mut up = x.clone();
            up[c] += h;
            let mut dn = x.clone();
            dn[c] -= h;
            let gu = flat(&exact_loss(world, kind, k, &table(&up))?.1);
            let gd = flat(&exact_loss(world, kind, k, &table(&dn))?.1);
            hess.set_column(c, &((gu - gd) / (2.0 * h)));
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        loop {
            if lambda > 1e12 {
                return Err(OracleError::NonConvergence { steps, grad_norm: gn });
            }
            let damped = &hess + DMatrix::identity(dim, dim) * lambda;
            let Some(d) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = table(&(&x + d));
            match exact_loss(world, kind, k, &trial) {
                Ok((l, tg)) => {
                    let tn = norm(&tg);
                    let slack = 1e-13 * (1.0 + loss.abs());
                    if l < loss - slack || (l <= loss + slack && tn < gn) {
                        psi = trial;
                        loss = l;
                        grad = tg;
                        lambda = (lambda / 3.0).max(1e-12);
                        break;
                    }
                    lambda *= 10.0;
                }
                Err(_) => lambda *= 10.0,
            }
        }
    }
    Err(OracleError::NonConvergence { steps: MAX_STEPS, grad_norm: norm(&grad) })
}

/// Largest entry-wise gap to the closed form; InfoNCE tables are compared
/// after removing each row's mean difference.
pub fn lemma1_deviation(world: &DiscreteWorld, kind: LossKind, psi: &Table) -> f64 {
    let target = world.closed_form();
    let mut worst: f64 = 0.0;
    for (row, trow) in psi.iter().zip(&target) {
        let shift = if kind == LossKind::DeltaInce {
            row.iter().zip(trow).map(|(a, b)| a - b).sum::<f64>() / row.len() as f64
        } else {
            0.0
        };
        for (a, b) in row.iter().zip(trow) {
            worst = worst.max((a - shift - b).abs());
        }
    }
    worst
}

/// Smallest loss change over random unit perturbations of size `eps`.
pub fn second_order_margin(
    world: &DiscreteWorld,
    kind: LossKind,
    k: usize,
    psi: &Table,
    rng: &mut Rng,
    directions: usize,
    eps: f64,
) -> Result<f64, OracleError> {
    let (base, _) = exact_loss(world, kind, k, psi)?;
    let mut worst = f64::INFINITY;
    for _ in 0..directions {
        let eta: Table = (0..world.m).map(|_| (0..world.m).map(|_| rng.normal()).collect()).collect();
        let scale = eps / norm(&eta);
        let moved: Table =
            psi.iter().zip(&eta).map(|(p, e)| p.iter().zip(e).map(|(a, b)| a + scale * b).collect()).collect();
        let (l, _) = exact_loss(world, kind, k, &moved)?;
        worst = worst.min(l - base);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> DiscreteWorld {
        DiscreteWorld::new(vec![vec![0.4, 0.1], vec![0.1, 0.4]], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn two_outcome_example() {
        let w = example();
        for kind in [LossKind::DeltaNce, LossKind::DeltaScl, LossKind::DeltaNwj] {
            let min = discrete_loss_minimizer(&w, kind, 0).unwrap();
            assert!((min.psi[0][0] - 1.6f64.ln()).abs() < 1e-6, "{kind:?}: {:?}", min.psi);
            assert!(lemma1_deviation(&w, kind, &min.psi) < 1e-6);
        }
        let ince = discrete_loss_minimizer(&w, LossKind::DeltaInce, 1).unwrap();
        assert!(lemma1_deviation(&w, LossKind::DeltaInce, &ince.psi) < 1e-6);
    }

    #[test]
    fn gradient_matches_differences() {
        let w = DiscreteWorld::random(&mut Rng::new(1), 3, NegativeSource::Mixture).unwrap();
        let mut rng = Rng::new(2);
        let psi: Table = (0..3).map(|_| (0..3).map(|_| 0.5 * rng.normal()).collect()).collect();
        for (kind, k) in [(LossKind::DeltaNce, 0), (LossKind::DeltaScl, 0), (LossKind::DeltaNwj, 0), (LossKind::DeltaInce, 2)] {
            let (_, g) = exact_loss(&w, kind, k, &psi).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut up = psi.clone();
                    up[i][j] += 1e-6;
                    let mut dn = psi.clone();
                    dn[i][j] -= 1e-6;
                    let num = (exact_loss(&w, kind, k, &up).unwrap().0 - exact_loss(&w, kind, k, &dn).unwrap().0) / 2e-6;
                    assert!((num - g[i][j]).abs() < 1e-8, "{kind:?} [{i},{j}]: {num} vs {}", g[i][j]);
                }
            }
        }
    }

    #[test]
    fn optimum_is_a_local_minimum() {
        let w = DiscreteWorld::random(&mut Rng::new(3), 4, NegativeSource::SecondMarginal).unwrap();
        let min = discrete_loss_minimizer(&w, LossKind::DeltaNce, 0).unwrap();
        let margin = second_order_margin(&w, LossKind::DeltaNce, 0, &min.psi, &mut Rng::new(4), 100, 1e-3).unwrap();
        assert!(margin >= 0.0);
    }

    #[test]
    fn invalid_worlds() {
        assert!(DiscreteWorld::new(vec![vec![0.5, 0.5]], vec![1.0]).is_err());
        assert!(DiscreteWorld::new(vec![vec![0.5, 0.0], vec![0.25, 0.25]], vec![0.5, 0.5]).is_err());
        assert!(exact_loss(&example(), LossKind::DeltaInce, 3, &vec![vec![0.0; 2]; 2]).is_err());
    }
}
