//! Adaptive Gauss–Kronrod (7, 15) quadrature.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// Kronrod estimate and the Kronrod–Gauss difference on `[a, b]`.
fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let dx = h * XGK[k];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[k] * s;
        if k % 2 == 1 {
            gauss += WG[k / 2] * s;
        }
    }
    (kronrod * h, (kronrod - gauss).abs() * h)
}

/// `∫_a^b f` to within roughly `tol` absolute error, bisecting where the
/// local error estimate is too large.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    fn rec(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, whole: f64, err: f64, tol: f64, depth: u32) -> f64 {
        if err <= tol || depth == 0 || (b - a).abs() < 1e-15 {
            return whole;
        }
        let m = 0.5 * (a + b);
        let (l, el) = gk15(f, a, m);
        let (r, er) = gk15(f, m, b);
        rec(f, a, m, l, el, 0.5 * tol, depth - 1) + rec(f, m, b, r, er, 0.5 * tol, depth - 1)
    }
    let (whole, err) = gk15(&mut f, a, b);
    rec(&mut f, a, b, whole, err, tol, 48)
}

/// Integrates piecewise over the sorted, deduplicated break points inside
/// `[a, b]`.
pub fn integrate_pieces(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, breaks: &[f64], tol: f64) -> f64 {
    let mut pts: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|&x| x > a && x < b))
        .chain(std::iter::once(b))
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let pieces = (pts.len() - 1).max(1) as f64;
    pts.windows(2).map(|w| integrate(&mut f, w[0], w[1], tol / pieces)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_and_exponentials() {
        assert!((integrate(|x| x.powi(7), 0.0, 2.0, 1e-14) - 32.0).abs() < 1e-12);
        let e = integrate(f64::exp, -1.0, 3.0, 1e-14);
        assert!((e - (3f64.exp() - (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn kinks_need_break_points() {
        let f = |x: f64| (-(x - 0.3).abs()).exp();
        let exact = 2.0 - (-0.3f64).exp() - (-0.7f64).exp();
        let v = integrate_pieces(f, 0.0, 1.0, &[0.3], 1e-14);
        assert!((v - exact).abs() < 1e-13);
    }
}
