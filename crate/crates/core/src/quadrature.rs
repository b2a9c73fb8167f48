//! Gauss-Gegenbauer quadrature for the weight `(1 - z²)^((d-3)/2)` on
//! `[-1, 1]`, the marginal of the uniform measure on `S^{d-1}` along one axis.
//!
//! Nodes are the eigenvalues of the Jacobi matrix of the orthonormal
//! recurrence (Golub-Welsch). Golub-Welsch also gives each weight as
//! `μ₀ · v₀²` from the first eigenvector component, but that component is only
//! accurate in absolute terms, which ruins the tiny tail weights at large `d`.
//! Weights are therefore taken from the Christoffel function
//! `w_j = 1 / Σ_{n<r} p̂_n(z_j)²`, which is accurate to relative precision; the
//! eigenvector weights serve as a cross-check in the tests.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Ascending nodes in `(-1, 1)`.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// `∫₋₁¹ (1 - z²)^((d-3)/2) dz = √π Γ((d-1)/2) / Γ(d/2)`.
///
/// Evaluated through `m(d + 2) = m(d) (d - 1) / d` from `m(2) = π`,
/// `m(3) = 2`, which stays accurate for large `d` where the Gamma values
/// themselves overflow.
pub fn weight_mass(d: usize) -> f64 {
    assert!(d >= 2, "weight_mass needs d >= 2");
    let (mut m, mut k) = if d % 2 == 0 {
        (std::f64::consts::PI, 2usize)
    } else {
        (2.0, 3usize)
    };
    while k < d {
        m *= (k as f64 - 1.0) / k as f64;
        k += 2;
    }
    m
}

/// Squared off-diagonal of the monic Gegenbauer recurrence, `β_n` for `n ≥ 1`.
fn beta(n: usize, lambda: f64) -> f64 {
    let n = n as f64;
    if lambda == 0.0 {
        // Chebyshev limit of the general expression.
        if n == 1.0 {
            0.5
        } else {
            0.25
        }
    } else {
        n * (n + 2.0 * lambda - 1.0) / (4.0 * (n + lambda) * (n + lambda - 1.0))
    }
}

/// Builds the `r`-point rule for sphere dimension `d`.
pub fn build_quadrature(d: usize, r: usize) -> Result<QuadratureRule> {
    if d < 2 {
        return Err(Error::invalid("d", format!("sphere dimension must be at least 2, got {d}")));
    }
    if r < 2 {
        return Err(Error::invalid("r", format!("quadrature order must be at least 2, got {r}")));
    }
    let lambda = (d as f64 - 2.0) / 2.0;
    let mut diag = vec![0.0; r];
    let mut off: Vec<f64> = (1..r).map(|n| beta(n, lambda).sqrt()).collect();
    off.push(0.0);
    let sqrt_beta = off[..r - 1].to_vec();
    let mut first = vec![0.0; r];
    first[0] = 1.0;
    tql_first_row(&mut diag, &mut off, &mut first)?;

    let mass = weight_mass(d);
    let mut pairs: Vec<(f64, f64)> = diag
        .into_iter()
        .map(|z| (z, christoffel_weight(z, mass, &sqrt_beta)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nodes, weights) = pairs.into_iter().unzip();
    Ok(QuadratureRule {
        dim: d,
        nodes,
        weights,
    })
}

/// `1 / Σ_n p̂_n(z)²` for the orthonormal polynomials
/// `√β_{n+1} p̂_{n+1} = z p̂_n - √β_n p̂_{n-1}`, `p̂_0 = 1/√μ₀`.
///
/// The running values are rescaled by `1e-100` whenever they grow past
/// `1e100`; the number of rescalings is carried alongside.
fn christoffel_weight(z: f64, mass: f64, sqrt_beta: &[f64]) -> f64 {
    const BIG: f64 = 1e100;
    let mut prev = 0.0;
    let mut cur = mass.sqrt().recip();
    let mut sum = cur * cur;
    let mut exp: i32 = 0;
    for n in 0..sqrt_beta.len() {
        let back = if n == 0 { 0.0 } else { sqrt_beta[n - 1] * prev };
        let next = (z * cur - back) / sqrt_beta[n];
        prev = cur;
        cur = next;
        sum += cur * cur;
        if cur.abs() > BIG {
            let s = BIG.recip();
            prev *= s;
            cur *= s;
            sum *= s * s;
            exp += 1;
        }
    }
    // The true sum is sum · BIG^(2 exp).
    (-(sum.ln() + 2.0 * exp as f64 * BIG.ln())).exp()
}

/// Implicit QL with Wilkinson shifts on a symmetric tridiagonal matrix.
///
/// `d` holds the diagonal and is overwritten with eigenvalues; `e[i]` couples
/// rows `i` and `i + 1` and its last entry is scratch. `z` starts as the first
/// row of the accumulated rotation and ends as the first components of the
/// eigenvectors.
fn tql_first_row(d: &mut [f64], e: &mut [f64], z: &mut [f64]) -> Result<()> {
    const MAX_SWEEPS: usize = 60;
    let n = d.len();
    for l in 0..n {
        let mut sweeps = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd || e[m] == 0.0 {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > MAX_SWEEPS {
                return Err(Error::EigenSolve { order: n });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    /// `∫ z^(2m) dτ` via `M₂ₘ = M₂ₘ₋₂ (2m - 1) / (2m + d - 2)`.
    fn even_moment(d: usize, m: usize) -> f64 {
        let mut v = weight_mass(d);
        for j in 1..=m {
            v *= (2 * j - 1) as f64 / (2 * j + d - 2) as f64;
        }
        v
    }

    #[test]
    fn two_point_legendre() {
        let q = build_quadrature(3, 2).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert_relative_eq!(q.nodes()[0], -s, epsilon = 1e-15);
        assert_relative_eq!(q.nodes()[1], s, epsilon = 1e-15);
        assert_relative_eq!(q.weights()[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(q.weights()[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn weight_sums() {
        for r in [2, 7, 40, 300] {
            let q = build_quadrature(3, r).unwrap();
            assert_relative_eq!(q.weights().iter().sum::<f64>(), 2.0, max_relative = 1e-12);
        }
        let q = build_quadrature(4, 50).unwrap();
        assert_relative_eq!(
            q.weights().iter().sum::<f64>(),
            std::f64::consts::FRAC_PI_2,
            max_relative = 1e-12
        );
        let q = build_quadrature(2, 64).unwrap();
        assert_relative_eq!(q.weights().iter().sum::<f64>(), std::f64::consts::PI, max_relative = 1e-12);
    }

    #[test]
    fn mass_matches_gamma_ratio() {
        // Γ((d-1)/2)/Γ(d/2) for small d by hand.
        assert_relative_eq!(weight_mass(5), 4.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(weight_mass(6), 3.0 * std::f64::consts::PI / 8.0, max_relative = 1e-15);
        assert_relative_eq!(weight_mass(7), 16.0 / 15.0, max_relative = 1e-15);
    }

    #[test]
    fn exact_on_monomials() {
        for d in [2, 3, 4, 5, 10, 20, 101] {
            let q = build_quadrature(d, 11).unwrap();
            for deg in 0..=20 {
                let got = q.integrate(|z| z.powi(deg as i32));
                if deg % 2 == 1 {
                    assert!(got.abs() < 1e-13, "d={d} deg={deg} got {got}");
                } else {
                    let want = even_moment(d, deg / 2);
                    assert_relative_eq!(got, want, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn agrees_with_dense_eigensolver() {
        let (d, r) = (10, 40);
        let lambda = (d as f64 - 2.0) / 2.0;
        let mut jac = DMatrix::zeros(r, r);
        for n in 1..r {
            let b = beta(n, lambda).sqrt();
            jac[(n - 1, n)] = b;
            jac[(n, n - 1)] = b;
        }
        let eig = jac.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..r)
            .map(|j| (eig.eigenvalues[j], weight_mass(d) * eig.eigenvectors[(0, j)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let q = build_quadrature(d, r).unwrap();
        for (j, (z, w)) in pairs.into_iter().enumerate() {
            assert_relative_eq!(q.nodes()[j], z, epsilon = 1e-13);
            assert_relative_eq!(q.weights()[j], w, max_relative = 1e-9);
        }
    }

    #[test]
    fn large_order_stays_finite() {
        let q = build_quadrature(100, 1000).unwrap();
        assert!(q.weights().iter().all(|w| w.is_finite() && *w >= 0.0));
        assert!(q.nodes().windows(2).all(|p| p[0] < p[1]));
        assert_relative_eq!(q.weights().iter().sum::<f64>(), weight_mass(100), max_relative = 1e-10);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(build_quadrature(1, 10).is_err());
        assert!(build_quadrature(3, 1).is_err());
    }
}
