//! Infinite-width NTK of a fully connected ReLU network, as a dot-product
//! kernel on the unit sphere.
//!
//! Inputs are unit norm and the first-layer `1/D` scaling is folded into the
//! dot product, so the first pre-activation covariance is
//! `Σ¹(z) = σ_w² z + σ_b²`. Each further layer applies the degree-0/1
//! arc-cosine maps and the tangent kernel accumulates as
//! `Θ^{l+1} = Σ^{l+1} + Θ^l · Σ̇^{l+1}`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::points::{dot, PointSet, UNIT_NORM_TOL};
use crate::quadrature::{build_quadrature, weight_mass};

/// Slack on `|z| ≤ 1` absorbed by clamping.
pub const DOMAIN_SLACK: f64 = 1e-12;

/// Architecture of the network whose NTK is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    /// Number of affine layers, including the readout.
    pub depth: usize,
    pub sigma_w_sq: f64,
    #[serde(default)]
    pub sigma_b_sq: f64,
    pub input_dim: usize,
}

impl KernelParams {
    pub fn relu(depth: usize, sigma_w_sq: f64, sigma_b_sq: f64, input_dim: usize) -> Self {
        Self {
            depth,
            sigma_w_sq,
            sigma_b_sq,
            input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("kernel.depth", "must be at least 1"));
        }
        if !(self.sigma_w_sq > 0.0) || !self.sigma_w_sq.is_finite() {
            return Err(Error::invalid("kernel.sigma_w_sq", "must be positive and finite"));
        }
        if !(self.sigma_b_sq >= 0.0) || !self.sigma_b_sq.is_finite() {
            return Err(Error::invalid("kernel.sigma_b_sq", "must be non-negative and finite"));
        }
        if self.input_dim < 2 {
            return Err(Error::invalid("kernel.input_dim", "must be at least 2"));
        }
        Ok(())
    }
}

/// A kernel that depends on its two unit-norm arguments only through `z = x·x'`.
pub trait DotProductKernel: Send + Sync {
    /// Kernel value at `z`; arguments are clamped into `[-1, 1]`.
    fn eval(&self, z: f64) -> f64;

    fn diag(&self) -> f64 {
        self.eval(1.0)
    }
}

impl<F> DotProductKernel for F
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    fn eval(&self, z: f64) -> f64 {
        self(z.clamp(-1.0, 1.0))
    }
}

/// Quadrature order for the level-0 coefficient.
const CONSTANT_MODE_ORDER: usize = 2000;

/// ReLU NTK with the per-layer diagonal `Σˡ(1)` precomputed.
#[derive(Debug, Clone)]
pub struct NtkKernel {
    params: KernelParams,
    /// `Σˡ(1)` for `l = 1..depth`.
    diag_cov: Vec<f64>,
    /// Subtracted from every value; see [`NtkKernel::without_constant_mode`].
    offset: f64,
}

impl NtkKernel {
    pub fn new(params: KernelParams) -> Result<Self> {
        params.validate()?;
        let mut diag_cov = Vec::with_capacity(params.depth);
        let mut s = params.sigma_w_sq + params.sigma_b_sq;
        for _ in 0..params.depth {
            if !(s > 0.0) {
                return Err(Error::invalid(
                    "kernel",
                    "a layer has zero pre-activation variance",
                ));
            }
            diag_cov.push(s);
            // c = 1: sqrt(1 - c²) = 0 and (π - arccos 1)·1 = π.
            s = params.sigma_w_sq * s * 0.5 + params.sigma_b_sq;
        }
        Ok(Self {
            params,
            diag_cov,
            offset: 0.0,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// The kernel minus its level-0 component `c₀ = E_τ Θ(z)`, which keeps it
    /// positive semi-definite and matches spectra with `η₀ = 0`.
    pub fn without_constant_mode(self) -> Result<Self> {
        let d = self.params.input_dim;
        let rule = build_quadrature(d, CONSTANT_MODE_ORDER)?;
        let c0 = rule.integrate(|z| self.eval_clamped(z)) / weight_mass(d);
        Ok(Self { offset: c0, ..self })
    }

    /// The value subtracted by [`NtkKernel::without_constant_mode`], else 0.
    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Domain-checked evaluation.
    pub fn eval_checked(&self, z: f64) -> Result<f64> {
        if !z.is_finite() || z.abs() > 1.0 + DOMAIN_SLACK {
            return Err(Error::Domain(z));
        }
        Ok(self.eval_clamped(z.clamp(-1.0, 1.0)) - self.offset)
    }

    #[inline]
    fn eval_clamped(&self, z: f64) -> f64 {
        let w = self.params.sigma_w_sq;
        let b = self.params.sigma_b_sq;
        let mut sigma = w * z + b;
        let mut theta = sigma;
        for &norm in &self.diag_cov[..self.params.depth - 1] {
            let c = (sigma / norm).clamp(-1.0, 1.0);
            let open = PI - c.acos();
            let sigma_dot = w * open / (2.0 * PI);
            sigma = w * norm * ((1.0 - c * c).max(0.0).sqrt() + open * c) / (2.0 * PI) + b;
            theta = sigma + theta * sigma_dot;
        }
        theta
    }
}

impl DotProductKernel for NtkKernel {
    #[inline]
    fn eval(&self, z: f64) -> f64 {
        self.eval_clamped(z.clamp(-1.0, 1.0)) - self.offset
    }
}

/// `Θ(z)` for the given architecture.
pub fn ntk_eval(params: &KernelParams, z: f64) -> Result<f64> {
    NtkKernel::new(*params)?.eval_checked(z)
}

fn check_inputs(x: &PointSet, y: &PointSet) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    x.check_unit_norm(UNIT_NORM_TOL)?;
    y.check_unit_norm(UNIT_NORM_TOL)
}

/// Cross Gram matrix `K[i, j] = Θ(x_i · y_j)`.
pub fn gram_matrix<K: DotProductKernel + ?Sized>(
    kernel: &K,
    x: &PointSet,
    y: &PointSet,
) -> Result<DMatrix<f64>> {
    gram_matrix_with(Execution::default(), kernel, x, y)
}

pub fn gram_matrix_with<K: DotProductKernel + ?Sized>(
    exec: Execution,
    kernel: &K,
    x: &PointSet,
    y: &PointSet,
) -> Result<DMatrix<f64>> {
    check_inputs(x, y)?;
    Ok(cross_gram_unchecked(exec, kernel, x, y))
}

/// Column-major fill; each task owns one column `j`.
pub(crate) fn cross_gram_unchecked<K: DotProductKernel + ?Sized>(
    exec: Execution,
    kernel: &K,
    x: &PointSet,
    y: &PointSet,
) -> DMatrix<f64> {
    let (n, m) = (x.len(), y.len());
    let mut data = vec![0.0; n * m];
    if n > 0 {
        exec.for_each_chunk(&mut data, n, |j, col| {
            let yj = y.row(j);
            for (i, v) in col.iter_mut().enumerate() {
                *v = kernel.eval(dot(x.row(i), yj));
            }
        });
    }
    DMatrix::from_vec(n, m, data)
}

/// Symmetric Gram matrix `Θ(X, X)`.
pub fn gram_symmetric<K: DotProductKernel + ?Sized>(
    exec: Execution,
    kernel: &K,
    x: &PointSet,
) -> Result<DMatrix<f64>> {
    x.check_unit_norm(UNIT_NORM_TOL)?;
    let mut g = cross_gram_unchecked(exec, kernel, x, x);
    // Exact symmetry: copy the lower triangle over the upper one.
    let n = g.nrows();
    for j in 0..n {
        for i in 0..j {
            g[(i, j)] = g[(j, i)];
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_kernel() -> NtkKernel {
        NtkKernel::new(KernelParams::relu(3, 2.0, 0.0, 10)).unwrap()
    }

    #[test]
    fn centering_removes_level_zero() {
        use crate::spectral::decompose;
        for d in [3, 10] {
            let k = NtkKernel::new(KernelParams::relu(3, 2.0, 0.0, d)).unwrap();
            let rule = build_quadrature(d, 1000).unwrap();
            let full = decompose(&k, d, 20, &rule).unwrap();
            let c = k.clone().without_constant_mode().unwrap();
            assert!((c.offset() - full.constant_mode).abs() < 1e-9 * full.constant_mode, "d={d}");
            let centered = decompose(&c, d, 20, &rule).unwrap();
            assert!(centered.constant_mode.abs() < 1e-9, "d={d}");
            for (a, b) in full.spectrum.levels().iter().zip(centered.spectrum.levels()) {
                assert!((a.eta - b.eta).abs() <= 1e-9 * a.eta.abs().max(1e-12), "d={d} k={}", a.k);
            }
            assert!((c.eval(0.3) - (k.eval(0.3) - c.offset())).abs() < 1e-15);
        }
    }

    #[test]
    fn depth_three_at_one() {
        // Σ = 2 and Σ̇ = 1 at every layer, so Θ grows by 2 per layer.
        assert_relative_eq!(reference_kernel().eval_checked(1.0).unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn single_layer_is_linear() {
        let p = KernelParams::relu(1, 2.0, 0.0, 4);
        assert_relative_eq!(ntk_eval(&p, 0.5).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(ntk_eval(&p, -0.25).unwrap(), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn depth_three_at_zero_matches_hand_recursion() {
        // Σ¹ = 0, Σ² = 2/π, Σ̇² = 1/2, Θ² = 2/π;
        // c = 1/π, Σ³ = (2/π)(√(1-c²) + (π - acos c)c), Σ̇³ = (π - acos c)/π.
        let c = 1.0 / PI;
        let s3 = 2.0 / PI * ((1.0 - c * c).sqrt() + (PI - c.acos()) * c);
        let sd3 = (PI - c.acos()) / PI;
        let expected = s3 + 2.0 / PI * sd3;
        let got = reference_kernel().eval_checked(0.0).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-14);
        assert_relative_eq!(got, 1.371417272565885, epsilon = 1e-12);
    }

    #[test]
    fn domain_errors_and_clamping() {
        let k = reference_kernel();
        assert!(matches!(k.eval_checked(1.0 + 1e-9), Err(Error::Domain(_))));
        assert!(matches!(k.eval_checked(f64::NAN), Err(Error::Domain(_))));
        assert_eq!(k.eval_checked(1.0 + 5e-13).unwrap(), k.eval_checked(1.0).unwrap());
        assert_eq!(k.eval_checked(-1.0 - 5e-13).unwrap(), k.eval_checked(-1.0).unwrap());
    }

    #[test]
    fn rejects_bad_params() {
        for p in [
            KernelParams::relu(0, 2.0, 0.0, 3),
            KernelParams::relu(2, 0.0, 0.0, 3),
            KernelParams::relu(2, 2.0, -0.1, 3),
            KernelParams::relu(2, 2.0, 0.0, 1),
        ] {
            assert!(NtkKernel::new(p).is_err(), "{p:?}");
        }
    }

    #[test]
    fn increasing_away_from_antipode() {
        // Without bias the kernel increases on [-0.79, 1] for every depth; near
        // z = -1 the linear first layer makes it dip slightly.
        for depth in 2..=5 {
            let k = NtkKernel::new(KernelParams::relu(depth, 2.0, 0.0, 10)).unwrap();
            let mut prev = k.eval(-0.79);
            for i in 1..=1790 {
                let z = -0.79 + i as f64 * 1e-3;
                let v = k.eval(z);
                assert!(v >= prev - 1e-14, "depth {depth}, z = {z}");
                prev = v;
            }
            for i in 0..=2000 {
                assert!(k.eval(-1.0 + i as f64 * 1e-3) <= k.diag() + 1e-12);
            }
        }
        let k = reference_kernel();
        assert!(k.eval(-0.95) < k.eval(-1.0));
    }

    #[test]
    fn gram_basics() {
        let k = reference_kernel();
        let e1 = PointSet::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let e2 = PointSet::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let g = gram_matrix(&k, &e1, &e1).unwrap();
        assert_relative_eq!(g[(0, 0)], 6.0, epsilon = 1e-12);
        let g = gram_matrix(&k, &e1, &e2).unwrap();
        assert_relative_eq!(g[(0, 0)], k.eval(0.0), epsilon = 1e-15);

        let twice = PointSet::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let g = gram_symmetric(Execution::Sequential, &k, &twice).unwrap();
        let eig = g.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        assert_relative_eq!(hi, 12.0, epsilon = 1e-10);
        assert!(lo.abs() < 1e-10);
    }

    #[test]
    fn gram_input_errors() {
        let k = reference_kernel();
        let a = PointSet::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = PointSet::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(gram_matrix(&k, &a, &b), Err(Error::DimensionMismatch { .. })));
        let c = PointSet::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(gram_matrix(&k, &c, &c), Err(Error::NotNormalized { .. })));
    }
}
