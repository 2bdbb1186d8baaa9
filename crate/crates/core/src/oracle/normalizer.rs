use std::f64::consts::{PI, TAU};

use super::quadrature::integrate_pieces;
use super::OracleError;
use crate::latentspaces::{log_marginal_density, ConditionalSpec, LatentSpaceSpec, QSpec, Scenario};

const TOL: f64 = 1e-14;

/// `e^{-(|s - t| / σ)^β}`.
fn kernel(s: f64, t: f64, sigma: f64, beta: f64) -> f64 {
    (-((s - t).abs() / sigma).powf(beta)).exp()
}

/// `∫_a^b e^{-(|s - t| / σ)^β} dt`.
pub(crate) fn kernel_integral(s: f64, a: f64, b: f64, sigma: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        // Antiderivative of e^{-|t - s| / σ}, continuous at t = s.
        let prim = |t: f64| {
            if t <= s {
                sigma * ((t - s) / sigma).exp()
            } else {
                2.0 * sigma - sigma * (-(t - s) / sigma).exp()
            }
        };
        return prim(b) - prim(a);
    }
    integrate_pieces(|t| kernel(s, t, sigma, beta), a, b, &[s], TOL)
}

/// Per-axis support as a union of intervals.
fn axis_intervals(space: &LatentSpaceSpec) -> Option<Vec<(f64, f64)>> {
    match space.scenario {
        Scenario::BoxSimple | Scenario::BoxComplex { .. } => Some(vec![(0.0, 1.0)]),
        Scenario::CubeGrid { b } => Some(vec![(-1.0, -b), (b, 1.0)]),
        Scenario::HollowBall { r_inner, r_outer } if space.n == 1 => {
            Some(vec![(-r_outer, -r_inner), (r_inner, r_outer)])
        }
        Scenario::HollowBall { .. } => None,
    }
}

/// Kernel mass on even and odd checkerboard cells of one axis.
fn axis_masses(s: f64, intervals: &[(f64, f64)], sigma: f64, beta: f64) -> (f64, f64) {
    let (mut even, mut odd) = (0.0, 0.0);
    for &(a, b) in intervals {
        let mut cuts: Vec<f64> = vec![a];
        let mut k = (2.0 * a).floor() + 1.0;
        while k / 2.0 < b {
            cuts.push(k / 2.0);
            k += 1.0;
        }
        cuts.push(b);
        for w in cuts.windows(2) {
            let mass = kernel_integral(s, w[0], w[1], sigma, beta);
            let cell = (2.0 * 0.5 * (w[0] + w[1])).floor() as i64;
            if cell.rem_euclid(2) == 0 {
                even += mass;
            } else {
                odd += mass;
            }
        }
    }
    (even, odd)
}

/// `Z(s) = ∫_S Q(s̃) e^{-d(s, s̃)} ds̃`.
///
/// Product supports factor per axis; a two-colour checkerboard is handled
/// by the parity identity `Σ_cells (±1)^parity Π = Π (even ± odd)`. The
/// hollow ball is supported for `n ≤ 2`.
pub fn z_normalizer(space: &LatentSpaceSpec, cond: &ConditionalSpec, s: &[f64]) -> Result<f64, OracleError> {
    if s.len() != space.n || cond.sigma.len() != space.n {
        return Err(OracleError::Shape(format!("point and scales must have {} entries", space.n)));
    }
    if let Some(intervals) = axis_intervals(space) {
        let (mut all, mut signed) = (1.0, 1.0);
        for (d, &sd) in s.iter().enumerate() {
            let (e, o) = axis_masses(sd, &intervals, cond.sigma[d], cond.beta);
            all *= e + o;
            signed *= e - o;
        }
        return Ok(match cond.q {
            QSpec::Constant => all,
            QSpec::Checkerboard { low } => 0.5 * (1.0 + low) * all + 0.5 * (1.0 - low) * signed,
        });
    }
    match space.scenario {
        Scenario::HollowBall { r_inner, r_outer } if space.n == 2 => {
            Ok(ball_2d(s, cond, r_inner, r_outer))
        }
        _ => Err(OracleError::Unsupported(format!("normalizer for {} at n = {}", space.scenario.name(), space.n))),
    }
}

pub fn log_z(space: &LatentSpaceSpec, cond: &ConditionalSpec, s: &[f64]) -> Result<f64, OracleError> {
    z_normalizer(space, cond, s).map(f64::ln)
}

/// Angles in `[0, 2π)` where `ρ cos θ` or `ρ sin θ` crosses `c`.
fn crossings(rho: f64, values: &[f64], out: &mut Vec<f64>) {
    for &c in values {
        let u = c / rho;
        if u.abs() < 1.0 {
            let a = u.acos();
            let b = u.asin();
            for t in [a, TAU - a, b, PI - b] {
                out.push(t.rem_euclid(TAU));
            }
        }
    }
}

fn ball_2d(s: &[f64], cond: &ConditionalSpec, r_inner: f64, r_outer: f64) -> f64 {
    let (beta, s0, s1) = (cond.beta, s[0], s[1]);
    let mut edges = vec![s0, s1];
    if matches!(cond.q, QSpec::Checkerboard { .. }) {
        let mut k = -2.0 * r_outer;
        while k <= 2.0 * r_outer {
            edges.push(k.floor() / 2.0);
            k += 1.0;
        }
    }
    let inner = |rho: f64| {
        let mut brk = Vec::new();
        crossings(rho, &edges, &mut brk);
        integrate_pieces(
            |t| {
                let p = [rho * t.cos(), rho * t.sin()];
                cond.q.q(&p) * kernel(s0, p[0], cond.sigma[0], beta) * kernel(s1, p[1], cond.sigma[1], beta)
            },
            0.0,
            TAU,
            &brk,
            1e-13,
        ) * rho
    };
    let rho_breaks: Vec<f64> = edges.iter().map(|c| c.abs()).collect();
    integrate_pieces(inner, r_inner, r_outer, &rho_breaks, 1e-12)
}

/// Grid points and the values `α` and `α̃` take at the optimum:
/// `log Z(s)` and `log p(s) − log Q(s)` (for negatives drawn from `p`).
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTargetGrid {
    pub points: Vec<Vec<f64>>,
    pub target_alpha: Vec<f64>,
    pub target_alpha_tilde: Vec<f64>,
}

/// A `res × res` grid over `[lo, hi]²` keeping points inside the support.
pub fn grid_points(space: &LatentSpaceSpec, lo: f64, hi: f64, res: usize) -> Vec<Vec<f64>> {
    let step = if res > 1 { (hi - lo) / (res - 1) as f64 } else { 0.0 };
    let mut pts = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            let p = vec![lo + step * j as f64, lo + step * i as f64];
            if space.contains(&p) {
                pts.push(p);
            }
        }
    }
    pts
}

pub fn alpha_targets(
    space: &LatentSpaceSpec,
    cond: &ConditionalSpec,
    points: &[Vec<f64>],
) -> Result<AlphaTargetGrid, OracleError> {
    let mut target_alpha = Vec::with_capacity(points.len());
    let mut target_alpha_tilde = Vec::with_capacity(points.len());
    for p in points {
        target_alpha.push(log_z(space, cond, p)?);
        let lp = log_marginal_density(space, p).map_err(|e| OracleError::Unsupported(e.to_string()))?;
        target_alpha_tilde.push(lp - cond.q.log_q(p));
    }
    Ok(AlphaTargetGrid { points: points.to_vec(), target_alpha, target_alpha_tilde })
}

/// Agreement between a learned function and its target on a grid, up to
/// an additive constant.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaComparison {
    /// Least-squares constant added to the learned values.
    pub offset: f64,
    pub max_abs_deviation: f64,
    pub rms_deviation: f64,
    /// Standard deviation of the learned values over the grid.
    pub learned_std: f64,
}

pub fn compare_alpha(learned: &[f64], target: &[f64]) -> Result<AlphaComparison, OracleError> {
    if learned.len() != target.len() || learned.is_empty() {
        return Err(OracleError::Shape(format!("{} learned values vs {} targets", learned.len(), target.len())));
    }
    let n = learned.len() as f64;
    let offset = target.iter().zip(learned).map(|(t, l)| t - l).sum::<f64>() / n;
    let devs: Vec<f64> = learned.iter().zip(target).map(|(l, t)| (l + offset - t).abs()).collect();
    let mean = learned.iter().sum::<f64>() / n;
    Ok(AlphaComparison {
        offset,
        max_abs_deviation: devs.iter().copied().fold(0.0, f64::max),
        rms_deviation: (devs.iter().map(|d| d * d).sum::<f64>() / n).sqrt(),
        learned_std: (learned.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize, beta: f64, q: QSpec) -> ConditionalSpec {
        ConditionalSpec::new(beta, vec![1.0; n], q).unwrap()
    }

    fn box2() -> LatentSpaceSpec {
        LatentSpaceSpec::new(2, Scenario::BoxSimple).unwrap()
    }

    #[test]
    fn closed_form_box_values() {
        let c = unit(2, 1.0, QSpec::Constant);
        let z = z_normalizer(&box2(), &c, &[0.5, 0.5]).unwrap();
        assert!((z - (2.0 - 2.0 * (-0.5f64).exp()).powi(2)).abs() < 1e-15);
        assert!((z - 0.61928).abs() < 1e-5);
        assert!((z.ln() + 0.479210).abs() < 1e-6);
        let z0 = z_normalizer(&box2(), &c, &[0.0, 0.0]).unwrap();
        assert!((z0 - (1.0 - (-1f64).exp()).powi(2)).abs() < 1e-15);
        assert!((z0.ln() + 0.917350).abs() < 1e-6);
        let wide = ConditionalSpec::new(1.0, vec![1e6; 2], QSpec::Constant).unwrap();
        assert!((z_normalizer(&box2(), &wide, &[0.3, 0.8]).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quadrature_matches_closed_form_and_erf() {
        let c = unit(1, 1.0, QSpec::Constant);
        let space = LatentSpaceSpec::new(1, Scenario::BoxSimple).unwrap();
        let exact = z_normalizer(&space, &c, &[0.3]).unwrap();
        let quad = integrate_pieces(|t| kernel(0.3, t, 1.0, 1.0), 0.0, 1.0, &[0.3], 1e-14);
        assert!(((exact - quad) / exact).abs() < 1e-12);
        // β = 2, σ = 1: ∫_0^1 e^{-(t - s)^2} dt = √π/2 (erf(1 - s) + erf(s)), at s = 0.3.
        let g = unit(1, 2.0, QSpec::Constant);
        let z = z_normalizer(&space, &g, &[0.3]).unwrap();
        assert!((z - 0.891_923_550_739_709_7).abs() < 1e-13);
    }

    #[test]
    fn checkerboard_parity_identity() {
        let q = QSpec::Checkerboard { low: 0.1 };
        let c = ConditionalSpec::new(1.5, vec![0.4, 0.7], q).unwrap();
        let s = [0.3, 0.6];
        let fast = z_normalizer(&box2(), &c, &s).unwrap();
        // Sum over the four cells directly.
        let mut slow = 0.0;
        for (xa, xb) in [(0.0, 0.5), (0.5, 1.0)] {
            for (ya, yb) in [(0.0, 0.5), (0.5, 1.0)] {
                let qv = q.q(&[0.5 * (xa + xb), 0.5 * (ya + yb)]);
                slow += qv * kernel_integral(s[0], xa, xb, 0.4, 1.5) * kernel_integral(s[1], ya, yb, 0.7, 1.5);
            }
        }
        assert!(((fast - slow) / slow).abs() < 1e-13);
    }

    #[test]
    fn hollow_ball_polar_matches_grid_sum() {
        let space = LatentSpaceSpec::new(2, Scenario::hollow_ball()).unwrap();
        let c = ConditionalSpec::new(1.0, vec![0.3, 0.3], QSpec::Constant).unwrap();
        let s = [0.6, 0.2];
        let z = z_normalizer(&space, &c, &s).unwrap();
        let m = 1200;
        let h = 2.0 / m as f64;
        let mut sum = 0.0;
        for i in 0..m {
            for j in 0..m {
                let p = [-1.0 + h * (i as f64 + 0.5), -1.0 + h * (j as f64 + 0.5)];
                if space.contains(&p) {
                    sum += (-c.distance(&s, &p)).exp() * h * h;
                }
            }
        }
        assert!(((z - sum) / z).abs() < 2e-3, "polar {z} grid {sum}");
    }

    #[test]
    fn cube_grid_one_dim() {
        let space = LatentSpaceSpec::new(1, Scenario::CubeGrid { b: 0.3 }).unwrap();
        let c = unit(1, 1.0, QSpec::Constant);
        let s = 0.5;
        let z = z_normalizer(&space, &c, &[s]).unwrap();
        let want = integrate_pieces(|t| kernel(s, t, 1.0, 1.0), -1.0, -0.3, &[], 1e-14)
            + integrate_pieces(|t| kernel(s, t, 1.0, 1.0), 0.3, 1.0, &[s], 1e-14);
        assert!((z - want).abs() < 1e-13);
    }

    #[test]
    fn resolution_refinement_is_stable() {
        // Tightening the tolerance does not move the value.
        let c = ConditionalSpec::new(3.0, vec![0.2, 0.2], QSpec::Constant).unwrap();
        let s = [0.41, 0.77];
        let a = z_normalizer(&box2(), &c, &s).unwrap();
        let loose: f64 = (0..2)
            .map(|d| integrate_pieces(|t| kernel(s[d], t, 0.2, 3.0), 0.0, 1.0, &[s[d], 0.5], 1e-10))
            .product();
        assert!(((a - loose) / a).abs() < 1e-8);
    }

    #[test]
    fn targets_and_comparison() {
        let space = box2();
        let c = unit(2, 1.0, QSpec::Constant);
        let pts = grid_points(&space, 0.05, 0.95, 20);
        assert_eq!(pts.len(), 400);
        let t = alpha_targets(&space, &c, &pts).unwrap();
        assert!(t.target_alpha_tilde.iter().all(|&v| v == 0.0));
        let center = alpha_targets(&space, &c, &[vec![0.5, 0.5]]).unwrap();
        assert!((center.target_alpha[0] + 0.479210).abs() < 1e-6);
        let exact = compare_alpha(&t.target_alpha, &t.target_alpha).unwrap();
        assert_eq!(exact.max_abs_deviation, 0.0);
        let shifted: Vec<f64> = t.target_alpha.iter().map(|v| v + 5.0).collect();
        let cmp = compare_alpha(&shifted, &t.target_alpha).unwrap();
        assert!(cmp.max_abs_deviation < 1e-12);
        assert!((cmp.offset + 5.0).abs() < 1e-12);

        let board = unit(2, 1.0, QSpec::Checkerboard { low: 0.1 });
        let t = alpha_targets(&space, &board, &[vec![0.25, 0.25], vec![0.75, 0.25]]).unwrap();
        let step = t.target_alpha_tilde[1] - t.target_alpha_tilde[0];
        assert!((step - 10f64.ln()).abs() < 1e-12);
    }
}
