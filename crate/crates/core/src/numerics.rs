//! Small numerical kernels shared by the solvers.

use crate::error::{Error, Result};

/// `(e^z - 1) / z`, continuous at `z = 0`.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

/// `log(sum(exp(xs)))` without overflow. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = fixed_order_sum(xs.iter().map(|&x| (x - m).exp()));
    m + s.ln()
}

/// Chunk length of every deterministic reduction in the crate.
pub const REDUCTION_CHUNK: usize = 1024;

/// Sums in fixed-size chunks, then sums the chunk totals left to right.
///
/// Parallel callers reproduce the same bits by summing each chunk sequentially
/// and combining the partials in chunk order.
pub fn fixed_order_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut chunk = 0.0;
    let mut n = 0usize;
    for x in xs {
        chunk += x;
        n += 1;
        if n == REDUCTION_CHUNK {
            total += chunk;
            chunk = 0.0;
            n = 0;
        }
    }
    if n > 0 {
        total += chunk;
    }
    total
}

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
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
    0.209_482_141_084_728,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &mut dyn FnMut(f64) -> Result<f64>, a: f64, b: f64) -> Result<(f64, f64)> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx)? + f(c + dx)?;
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    Ok((kronrod * h, ((kronrod - gauss) * h).abs()))
}

/// Adaptive Gauss-Kronrod quadrature of `f` over `[a, b]`.
///
/// Bisects the interval with the largest error estimate until the total
/// estimate is below `max(abs_tol, rel_tol * |integral|)`.
pub fn integrate(
    mut f: impl FnMut(f64) -> Result<f64>,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut intervals = Vec::new();
    let (v, e) = gk15(&mut f, lo, hi)?;
    intervals.push((lo, hi, v, e));
    for _ in 0..2000 {
        let total: f64 = intervals.iter().map(|s| s.2).sum();
        let err: f64 = intervals.iter().map(|s| s.3).sum();
        if !total.is_finite() {
            return Err(Error::invalid("quadrature produced a non-finite value"));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(sign * total);
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (l, r, _, _) = intervals.swap_remove(worst);
        let m = 0.5 * (l + r);
        let (v1, e1) = gk15(&mut f, l, m)?;
        let (v2, e2) = gk15(&mut f, m, r)?;
        intervals.push((l, m, v1, e1));
        intervals.push((m, r, v2, e2));
    }
    let total: f64 = intervals.iter().map(|s| s.2).sum();
    Ok(sign * total)
}

/// Classical RK4 for `y' = rhs(t, y)`, integrated backward from
/// `y(nodes.last()) = y_end` through the given increasing nodes.
///
/// Returns one value per node. Stops with `Err((k, values))` when the state
/// at node `k` is non-finite or `rhs` fails; `values[k+1..]` are then valid.
pub fn rk4_backward(
    rhs: &dyn Fn(f64, f64) -> Result<f64>,
    y_end: f64,
    nodes: &[f64],
) -> std::result::Result<Vec<f64>, (usize, Vec<f64>)> {
    let n = nodes.len();
    let mut ys = vec![f64::NAN; n];
    if n == 0 {
        return Ok(ys);
    }
    ys[n - 1] = y_end;
    let mut y = y_end;
    for k in (0..n - 1).rev() {
        let t1 = nodes[k + 1];
        let h = nodes[k] - t1;
        let step = || -> Result<f64> {
            let k1 = rhs(t1, y)?;
            let k2 = rhs(t1 + 0.5 * h, y + 0.5 * h * k1)?;
            let k3 = rhs(t1 + 0.5 * h, y + 0.5 * h * k2)?;
            let k4 = rhs(t1 + h, y + h * k3)?;
            Ok(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        };
        match step() {
            Ok(next) if next.is_finite() => {
                y = next;
                ys[k] = y;
            }
            _ => return Err((k, ys)),
        }
    }
    Ok(ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi1_matches_direct_formula_and_limit() {
        assert_eq!(phi1(0.0), 1.0);
        for &z in &[1e-3f64, -0.5, 2.0, -30.0, 1e-4] {
            let direct = (z.exp() - 1.0) / z;
            assert!(
                (phi1(z) - direct).abs() < 1e-12 * direct.abs().max(1.0),
                "z={z}"
            );
        }
        // continuity across the Taylor switch
        assert!((phi1(0.999_999e-5) - phi1(1.000_001e-5)).abs() < 2e-11);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = log_sum_exp(&[-1000.0, -1001.0]);
        assert!((v - (-1000.0 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn fixed_order_sum_matches_chunks() {
        let xs: Vec<f64> = (0..5000).map(|i| (i as f64).sin()).collect();
        let chunked: f64 = xs
            .chunks(REDUCTION_CHUNK)
            .map(|c| c.iter().fold(0.0, |a, b| a + b))
            .fold(0.0, |a, b| a + b);
        assert_eq!(
            fixed_order_sum(xs.iter().copied()).to_bits(),
            chunked.to_bits()
        );
    }

    #[test]
    fn quadrature_known_integrals() {
        let v = integrate(|x| Ok(x.exp()), 0.0, 1.0, 1e-12, 0.0).unwrap();
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
        let v = integrate(|x| Ok(1.0 / (1.0 + x * x)), 2.0, -3.0, 1e-12, 0.0).unwrap();
        let exact = (-3f64).atan() - 2f64.atan();
        assert!((v - exact).abs() < 1e-12);
        let v = integrate(|x| Ok(x.sqrt()), 0.0, 1.0, 1e-10, 0.0).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn rk4_exponential() {
        let nodes: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let ys = rk4_backward(&|_t, y| Ok(-2.0 * y), 1.0, &nodes).unwrap();
        for (t, y) in nodes.iter().zip(&ys) {
            let exact = (2.0 * (1.0 - t)).exp();
            assert!((y - exact).abs() < 1e-8 * exact);
        }
    }
}
