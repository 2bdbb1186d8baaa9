//! Identifiability scores: R² of a linear fit from recovered to true
//! latents, and the mean correlation coefficient under the best one-to-one
//! matching of dimensions.

use log::warn;
use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::diffmath::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need more than {needed} samples for the regression, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("score matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub r2_per_dim: Vec<f64>,
    pub r2_mean: f64,
    /// `corr[i][j]`: recovered dimension `i` against true dimension `j`.
    pub corr: Vec<Vec<f64>>,
    /// `perm[i]` is the true dimension matched to recovered dimension `i`.
    #[serde(rename = "perm")]
    pub permutation: Vec<usize>,
    #[serde(rename = "mcc")]
    pub mcc_mean: f64,
    #[serde(rename = "samples")]
    pub n_samples: usize,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

/// Least squares of every column of `S` on `[Z | 1]`; returns per-column
/// R² and their mean.
pub fn linear_fit_r2(z: &Tensor, s: &Tensor) -> Result<(Vec<f64>, f64), MetricsError> {
    let ((nz, dz), (ns, ds)) = (z.dims2(), s.dims2());
    if nz != ns {
        return Err(MetricsError::Shape(format!("{nz} recovered rows vs {ns} true rows")));
    }
    if nz <= dz + 1 {
        return Err(MetricsError::TooFewSamples { needed: dz + 1, got: nz });
    }
    let mut design = DMatrix::from_element(nz, dz + 1, 1.0);
    design.view_mut((0, 0), (nz, dz)).copy_from(&to_dmatrix(z));
    let target = to_dmatrix(s);

    let qr = design.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rank_ok = r.diagonal().iter().all(|v| v.abs() > 1e-12 * scale.max(1.0));
    let coef = if rank_ok {
        let qt_s = qr.q().transpose() * &target;
        r.solve_upper_triangular(&qt_s)
    } else {
        None
    };
    let coef = match coef {
        Some(c) => c,
        None => {
            warn!("rank-deficient regression design; using the pseudo-inverse");
            design.clone().svd(true, true).solve(&target, 1e-12).expect("SVD with both factors")
        }
    };
    let resid = &target - &design * coef;
    let mut r2 = Vec::with_capacity(ds);
    for j in 0..ds {
        let col = target.column(j);
        let mean = col.mean();
        let sst: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let sse: f64 = resid.column(j).iter().map(|v| v * v).sum();
        r2.push(if sst > 0.0 { 1.0 - sse / sst } else { 0.0 });
    }
    let mean = r2.iter().sum::<f64>() / ds as f64;
    Ok((r2, mean))
}

/// Pearson correlation between every recovered and every true dimension.
pub fn correlation_matrix(z: &Tensor, s: &Tensor) -> Result<Vec<Vec<f64>>, MetricsError> {
    let ((nz, dz), (ns, ds)) = (z.dims2(), s.dims2());
    if nz != ns || nz < 2 {
        return Err(MetricsError::Shape(format!("{nz} recovered rows vs {ns} true rows")));
    }
    let centered = |t: &Tensor, d: usize| -> Vec<(Vec<f64>, f64)> {
        (0..d)
            .map(|j| {
                let col = t.column_values(j);
                let m = col.iter().sum::<f64>() / col.len() as f64;
                let c: Vec<f64> = col.iter().map(|v| v - m).collect();
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                (c, norm)
            })
            .collect()
    };
    let (cz, cs) = (centered(z, dz), centered(s, ds));
    let mut warned = false;
    let mut out = vec![vec![0.0; ds]; dz];
    for (i, (a, na)) in cz.iter().enumerate() {
        for (j, (b, nb)) in cs.iter().enumerate() {
            if *na == 0.0 || *nb == 0.0 {
                if !warned {
                    warn!("zero-variance column in correlation matrix; entry set to 0");
                    warned = true;
                }
                continue;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out[i][j] = (dot / (na * nb)).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Assignment of rows to columns maximizing the total score (Hungarian
/// method with potentials). Returns `perm` with `perm[row] = column`.
pub fn linear_assignment(score: &[Vec<f64>]) -> Result<Vec<usize>, MetricsError> {
    let n = score.len();
    if let Some(row) = score.iter().find(|r| r.len() != n) {
        return Err(MetricsError::NotSquare(n, row.len()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let max = score.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    // 1-based potentials over a minimization of `max - score`.
    let cost = |i: usize, j: usize| max - score[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Mean matched absolute correlation and the matching.
pub fn mcc(z: &Tensor, s: &Tensor) -> Result<(f64, Vec<usize>, Vec<Vec<f64>>), MetricsError> {
    let corr = correlation_matrix(z, s)?;
    if corr.len() != corr[0].len() {
        return Err(MetricsError::NotSquare(corr.len(), corr[0].len()));
    }
    let abs: Vec<Vec<f64>> = corr.iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
    let perm = linear_assignment(&abs)?;
    let mean = perm.iter().enumerate().map(|(i, &j)| abs[i][j]).sum::<f64>() / perm.len() as f64;
    Ok((mean, perm, corr))
}

/// R² and MCC of recovered latents `z` against true latents `s`.
pub fn evaluate(z: &Tensor, s: &Tensor) -> Result<MetricsReport, MetricsError> {
    let (r2_per_dim, r2_mean) = linear_fit_r2(z, s)?;
    let (mcc_mean, permutation, corr) = mcc(z, s)?;
    Ok(MetricsReport { r2_per_dim, r2_mean, corr, permutation, mcc_mean, n_samples: z.rows() })
}
