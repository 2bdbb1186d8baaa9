//! Central finite differences against tape gradients.

use super::{DiffError, Distribution, Graph, Rng, Tensor, Var};

pub const EPS: f64 = 1e-4;
/// Absolute gaps below this are treated as agreement (both sides ~0).
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Largest relative gap between the tape gradient and central differences
/// of `f` over every entry of every input.
pub fn max_relative_error<F>(inputs: &[Tensor], f: F) -> Result<(f64, usize), DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let eval = |vals: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let (mut worst, mut entries) = (0.0f64, 0);
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for idx in 0..x.len() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[idx] += EPS;
            let up = eval(&vals)?;
            vals[k].data_mut()[idx] -= 2.0 * EPS;
            let down = eval(&vals)?;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.data()[idx];
            let gap = (a - numeric).abs();
            if gap >= ABS_FLOOR {
                worst = worst.max(gap / a.abs().max(numeric.abs()));
            }
            entries += 1;
        }
    }
    Ok((worst, entries))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>>);

fn randn(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rng.sample(Distribution::StandardNormal, &[r, c]).expect("standard normal never fails")
}

fn squared_mean(g: &mut Graph, a: Var) -> Result<Var, DiffError> {
    let w = g.mul(a, a)?;
    g.mean(w, None)
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = Rng::new(seed);
    let x = randn(&mut rng, 3, 4);
    let pos = x.map(|v| v.abs() + 0.3);
    let row = randn(&mut rng, 1, 4);
    let col = randn(&mut rng, 3, 1);
    let a = randn(&mut rng, 4, 3);
    let b = randn(&mut rng, 3, 5);
    let sq = randn(&mut rng, 4, 4);
    let pa = randn(&mut rng, 3, 2);
    let pb = randn(&mut rng, 4, 2);
    let bx = randn(&mut rng, 6, 3);
    let gamma = Tensor::row(vec![1.2, 0.8, -0.5]);
    let shift = Tensor::row(vec![0.1, -0.2, 0.3]);
    let bw = randn(&mut rng, 6, 3);
    let mlp: Vec<Tensor> =
        [(5, 3), (3, 6), (1, 6), (6, 6), (1, 6), (6, 2)].iter().map(|&(r, c)| randn(&mut rng, r, c)).collect();

    let mut out: Vec<Case> = vec![
        ("exp", vec![x.clone()], Box::new(|g, v| {
            let a = g.exp(v[0])?;
            g.sum(a, None)
        })),
        ("log", vec![pos.clone()], Box::new(|g, v| {
            let a = g.log(v[0])?;
            g.sum(a, None)
        })),
        ("pow", vec![pos], Box::new(|g, v| {
            let a = g.pow(v[0], 1.7)?;
            g.sum(a, None)
        })),
        ("sigmoid", vec![x.clone()], Box::new(|g, v| {
            let a = g.sigmoid(v[0])?;
            squared_mean(g, a)
        })),
        ("softplus", vec![x.clone()], Box::new(|g, v| {
            let a = g.softplus(v[0])?;
            squared_mean(g, a)
        })),
        ("leaky_relu", vec![x.clone()], Box::new(|g, v| {
            let a = g.leaky_relu(v[0], 0.2)?;
            squared_mean(g, a)
        })),
        ("gelu", vec![x.clone()], Box::new(|g, v| {
            let a = g.gelu(v[0])?;
            squared_mean(g, a)
        })),
        ("abs", vec![x.clone()], Box::new(|g, v| {
            let a = g.abs(v[0])?;
            squared_mean(g, a)
        })),
        ("clamp", vec![x.clone()], Box::new(|g, v| {
            let a = g.clamp(v[0], -0.5, 0.5)?;
            squared_mean(g, a)
        })),
        ("broadcast add/sub/mul", vec![x.clone(), row, col], Box::new(|g, v| {
            let p = g.mul(v[0], v[1])?;
            let q = g.sub(p, v[2])?;
            let r = g.add(q, v[1])?;
            squared_mean(g, r)
        })),
        ("scale/shift/neg", vec![x, Tensor::scalar(0.7)], Box::new(|g, v| {
            let p = g.mul(v[0], v[1])?;
            let q = g.scale(p, -1.5)?;
            let q = g.shift(q, 2.0)?;
            let q = g.neg(q)?;
            let w = g.mul(q, p)?;
            g.sum(w, None)
        })),
        ("matmul/logsumexp", vec![a.clone(), b], Box::new(|g, v| {
            let p = g.matmul(v[0], v[1])?;
            let l = g.logsumexp(p, 1)?;
            let m = g.logsumexp(p, 0)?;
            let s = g.sum(l, None)?;
            let t = g.mean(m, None)?;
            g.add(s, t)
        })),
        ("transpose/concat/sum/mean", vec![a.clone()], Box::new(|g, v| {
            let t = g.transpose(v[0])?;
            let c = g.concat(&[v[0], v[0]], 0)?;
            let d = g.concat(&[t, t], 1)?;
            let s0 = g.sum(c, Some(0))?;
            let s1 = g.mean(d, Some(1))?;
            let x = squared_mean(g, s0)?;
            let y = squared_mean(g, s1)?;
            g.add(x, y)
        })),
        ("mean_center/gather_rows", vec![a], Box::new(|g, v| {
            let c = g.mean_center(v[0])?;
            let e = g.exp(c)?;
            let r = g.gather_rows(e, &[0, 2, 2, 3])?;
            g.sum(r, None)
        })),
        ("off_diagonal", vec![sq], Box::new(|g, v| {
            let o = g.off_diagonal(v[0])?;
            let e = g.exp(o)?;
            g.sum(e, None)
        })),
        ("batch_norm_train", vec![bx.clone(), gamma.clone(), shift.clone()], Box::new(move |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            let wv = g.constant(bw.clone());
            let p = g.mul(y, wv)?;
            let q = g.mul(p, y)?;
            g.sum(q, None)
        })),
        ("batch_norm_eval", vec![bx, gamma, shift], Box::new(|g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, 0.0, -0.2], &[1.5, 0.5, 2.0], 1e-5)?;
            squared_mean(g, y)
        })),
        ("three-layer mlp", mlp, Box::new(|g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, v[3])?;
            let h = g.add(h, v[4])?;
            let h = g.sigmoid(h)?;
            let o = g.matmul(h, v[5])?;
            let o = g.softplus(o)?;
            g.mean(o, None)
        })),
    ];
    for (name, beta) in [("pairwise_lp beta=1", 1.0), ("pairwise_lp beta=1.5", 1.5), ("pairwise_lp beta=2", 2.0), ("pairwise_lp beta=3", 3.0)] {
        out.push((name, vec![pa.clone(), pb.clone()], Box::new(move |g, v| {
            let d = g.pairwise_lp(v[0], v[1], beta, &[0.7, 1.3])?;
            let e = g.neg(d)?;
            let e = g.exp(e)?;
            g.sum(e, None)
        })));
    }
    out
}

/// Checks every differentiable operation on random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>, DiffError> {
    cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            let (max_rel_error, entries) = max_relative_error(&inputs, f)?;
            Ok(CheckResult { name: name.to_string(), max_rel_error, entries })
        })
        .collect()
}
