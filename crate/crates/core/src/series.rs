//! Truncated power series in `z` for the ReLU NTK, and their exact transfer
//! into the Gegenbauer basis.
//!
//! For ReLU with `σ_b² ≥ 0` every Taylor coefficient of `Θ` is non-negative,
//! and multiplication by `z` maps `P_k` onto `P_{k-1}` and `P_{k+1}` with
//! positive weights. Running Horner's scheme in the Gegenbauer basis therefore
//! never subtracts, which keeps high levels accurate long after a quadrature
//! projection has drowned in cancellation (around `k = 20` for `d = 100`).

use std::f64::consts::PI;

use crate::error::Result;
use crate::kernel::KernelParams;

/// Truncation order used for NTK spectra.
pub const NTK_SERIES_ORDER: usize = 4096;

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut out = vec![0.0; n];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (o, &bj) in out[i..].iter_mut().zip(b) {
            *o += ai * bj;
        }
    }
    out
}

/// `√x` for `x₀ > 0`.
fn sqrt(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut h = vec![0.0; n];
    h[0] = x[0].sqrt();
    for m in 1..n {
        let cross: f64 = (1..m).map(|i| h[i] * h[m - i]).sum();
        h[m] = (x[m] - cross) / (2.0 * h[0]);
    }
    h
}

/// `a / b` for `b₀ ≠ 0`.
fn div(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut q = vec![0.0; n];
    for m in 0..n {
        let acc: f64 = (0..m).map(|i| q[i] * b[m - i]).sum();
        q[m] = (a[m] - acc) / b[0];
    }
    q
}

/// Taylor coefficients `a_0..=a_order` of `Θ(z)` about `z = 0`.
///
/// Uses `π - arccos c = π/2 + arcsin c`, with `arcsin c` obtained by
/// integrating `c' / √(1 - c²)`.
pub fn ntk_taylor(params: &KernelParams, order: usize) -> Result<Vec<f64>> {
    params.validate()?;
    let n = order + 1;
    let (w, b) = (params.sigma_w_sq, params.sigma_b_sq);
    let mut sigma = vec![0.0; n];
    sigma[0] = b;
    if n > 1 {
        sigma[1] = w;
    }
    let mut norm = w + b;
    let mut theta = sigma.clone();
    for _ in 1..params.depth {
        let c: Vec<f64> = sigma.iter().map(|s| s / norm).collect();
        let mut one_minus = mul(&c, &c);
        one_minus.iter_mut().for_each(|v| *v = -*v);
        one_minus[0] += 1.0;
        let root = sqrt(&one_minus);
        let dc: Vec<f64> = (0..n).map(|m| if m + 1 < n { (m + 1) as f64 * c[m + 1] } else { 0.0 }).collect();
        let dg = div(&dc, &root);
        let mut asin = vec![0.0; n];
        asin[0] = c[0].asin();
        for m in 1..n {
            asin[m] = dg[m - 1] / m as f64;
        }
        let mut open = asin;
        open[0] += PI / 2.0;
        let oc = mul(&open, &c);
        let next: Vec<f64> = (0..n)
            .map(|m| w * norm * (root[m] + oc[m]) / (2.0 * PI) + if m == 0 { b } else { 0.0 })
            .collect();
        let sigma_dot: Vec<f64> = open.iter().map(|o| w * o / (2.0 * PI)).collect();
        let carried = mul(&theta, &sigma_dot);
        theta = next.iter().zip(&carried).map(|(a, c)| a + c).collect();
        sigma = next;
        norm = w * norm * 0.5 + b;
    }
    Ok(theta)
}

/// `Σ a_m z^m` by Horner's rule.
pub fn eval_poly(a: &[f64], z: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

/// Coefficients `c_0..=c_k_max` with `Σ a_m z^m = Σ_k c_k P_k(z)` for the
/// Gegenbauer polynomials of sphere dimension `d`, normalized `P_k(1) = 1`.
///
/// From the three-term recurrence,
/// `z P_k = ((k + d - 2) P_{k+1} + k P_{k-1}) / (2k + d - 2)`.
pub fn taylor_to_gegenbauer(a: &[f64], d: usize, k_max: usize) -> Vec<f64> {
    let order = a.len().saturating_sub(1);
    let width = order + 2;
    let up: Vec<f64> = (0..width)
        .map(|k| if k == 0 { 1.0 } else { (k + d - 2) as f64 / (2 * k + d - 2) as f64 })
        .collect();
    let down: Vec<f64> = (0..width)
        .map(|k| if k == 0 { 0.0 } else { k as f64 / (2 * k + d - 2) as f64 })
        .collect();
    let mut v = vec![0.0; width];
    let mut next = vec![0.0; width];
    for m in (0..a.len()).rev() {
        // With m multiplications still to come, levels above k_max + m can
        // no longer reach 0..=k_max and are dropped.
        let lim = (order - m).min(k_max + m);
        next[..=lim].iter_mut().for_each(|x| *x = 0.0);
        if m < order {
            for k in 0..=(order - m - 1).min(k_max + m + 1) {
                let vk = v[k];
                if k + 1 <= lim {
                    next[k + 1] += vk * up[k];
                }
                if k > 0 {
                    next[k - 1] += vk * down[k];
                }
            }
        }
        next[0] += a[m];
        std::mem::swap(&mut v, &mut next);
    }
    v.truncate(k_max + 1);
    v.resize(k_max + 1, 0.0);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ntk_eval;
    use crate::spectral::gegenbauer;
    use approx::assert_relative_eq;

    #[test]
    fn taylor_matches_kernel_inside_disk() {
        for (depth, b) in [(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.3)] {
            let p = KernelParams::relu(depth, 2.0, b, 10);
            let a = ntk_taylor(&p, 512).unwrap();
            assert!(a.iter().all(|&c| c >= -1e-15), "depth {depth}");
            for z in [-0.6, -0.2, 0.0, 0.3, 0.7] {
                assert_relative_eq!(eval_poly(&a, z), ntk_eval(&p, z).unwrap(), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn monomials_convert_exactly() {
        for d in [2, 3, 7, 100] {
            for deg in 0..9 {
                let mut a = vec![0.0; deg + 1];
                a[deg] = 1.0;
                let c = taylor_to_gegenbauer(&a, d, 12);
                for z in [-0.9, -0.1, 0.4, 1.0] {
                    let back: f64 = c.iter().enumerate().map(|(k, ck)| ck * gegenbauer(d, k, z)).sum();
                    assert_relative_eq!(back, z.powi(deg as i32), epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn truncated_levels_match_full_conversion() {
        let p = KernelParams::relu(3, 2.0, 0.0, 20);
        let a = ntk_taylor(&p, 300).unwrap();
        let full = taylor_to_gegenbauer(&a, 20, 301);
        let cut = taylor_to_gegenbauer(&a, 20, 15);
        for k in 0..=15 {
            assert_relative_eq!(cut[k], full[k], max_relative = 1e-13);
        }
        // Positivity carries over; the total is conserved at z = 1.
        assert!(full.iter().all(|&c| c >= 0.0));
        assert_relative_eq!(full.iter().sum::<f64>(), a.iter().sum::<f64>(), max_relative = 1e-13);
    }
}
