//! Mercer decomposition of dot-product kernels on `S^{d-1}`.
//!
//! A dot-product kernel expands as `Θ(z) = Σ_k η_k N(d,k) P_k(z)` with `P_k`
//! the Gegenbauer polynomial normalized to `P_k(1) = 1` and `N(d,k)` the
//! dimension of the degree-`k` spherical harmonics. Every level `k` is an
//! eigenvalue `η_k` of the integral operator with multiplicity `N(d,k)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::DotProductKernel;
use crate::quadrature::QuadratureRule;
use crate::series;

/// Allowed relative gap between the resolved trace and `Θ(1)`.
pub const TRACE_TOLERANCE: f64 = 0.05;

/// A level counts as resolved when its coefficient exceeds the rounding
/// estimate of its quadrature sum by this factor. The estimate ignores node
/// and kernel-evaluation error, which at `d = 100` runs ~20x above it.
const RESOLUTION_FACTOR: f64 = 1024.0;

/// Negative eigenvalues down to this fraction of `max η` are clipped to zero.
const NEGATIVE_CLIP: f64 = 1e-10;

/// Dimension of the space of degree-`k` spherical harmonics on `S^{d-1}`.
///
/// `N(d,k) = (2k + d - 2)/k · C(k + d - 3, k - 1)`, exact in integers while it
/// fits in `u128` and a floating-point product beyond.
pub fn degeneracy(d: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    exact_degeneracy(d as u128, k as u128).map_or_else(|| float_degeneracy(d, k), |n| n as f64)
}

fn exact_degeneracy(d: u128, k: u128) -> Option<u128> {
    // C(k + d - 3, k - 1) = Π_{i=1}^{k-1} (d - 2 + i)/i; each prefix is an integer.
    let mut binom: u128 = 1;
    for i in 1..k {
        binom = binom.checked_mul(d - 2 + i)? / i;
    }
    Some(binom.checked_mul(2 * k + d - 2)? / k)
}

fn float_degeneracy(d: usize, k: usize) -> f64 {
    let mut binom = 1.0;
    for i in 1..k {
        binom *= (d - 2 + i) as f64 / i as f64;
    }
    (2 * k + d - 2) as f64 / k as f64 * binom
}

/// `P_k(z)` for all `k ≤ k_max`, normalized to `P_k(1) = 1`.
pub fn gegenbauer_all(d: usize, k_max: usize, z: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(k_max + 1);
    let (mut prev, mut cur) = (1.0, z);
    out.push(prev);
    if k_max >= 1 {
        out.push(cur);
    }
    for k in 1..k_max {
        let next = gegenbauer_step(d, k, z, cur, prev);
        out.push(next);
        prev = cur;
        cur = next;
    }
    out
}

pub fn gegenbauer(d: usize, k: usize, z: f64) -> f64 {
    gegenbauer_all(d, k, z)[k]
}

/// `P_{k+1}` from `P_k` and `P_{k-1}`, valid for `k ≥ 1`.
#[inline]
fn gegenbauer_step(d: usize, k: usize, z: f64, pk: f64, pkm1: f64) -> f64 {
    let (k, d) = (k as f64, d as f64);
    ((2.0 * k + d - 2.0) * z * pk - k * pkm1) / (k + d - 2.0)
}

/// One eigenvalue level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub k: usize,
    pub eta: f64,
    pub mult: f64,
}

/// Eigenvalue levels with multiplicities; the sole input of the theory.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    dim: Option<usize>,
    levels: Vec<Level>,
}

impl Spectrum {
    /// Validates levels, clipping negligible negative eigenvalues to zero.
    pub fn new(mut levels: Vec<Level>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::SpectrumFormat("no levels".into()));
        }
        let eta_max = levels.iter().map(|l| l.eta).fold(0.0, f64::max);
        for l in levels.iter_mut() {
            if !l.eta.is_finite() {
                return Err(Error::SpectrumFormat(format!("level k={} has eta = {}", l.k, l.eta)));
            }
            if !(l.mult > 0.0) || !l.mult.is_finite() {
                return Err(Error::SpectrumFormat(format!(
                    "level k={} has multiplicity {}; must be positive",
                    l.k, l.mult
                )));
            }
            if l.eta < 0.0 {
                if l.eta < -NEGATIVE_CLIP * eta_max {
                    return Err(Error::SpectrumFormat(format!(
                        "level k={} has negative eigenvalue {}",
                        l.k, l.eta
                    )));
                }
                l.eta = 0.0;
            }
        }
        for w in levels.windows(2) {
            if w[1].k <= w[0].k {
                return Err(Error::SpectrumFormat(format!(
                    "level indices must increase strictly (k={} after k={})",
                    w[1].k, w[0].k
                )));
            }
        }
        Ok(Self { dim: None, levels })
    }

    /// Levels `k = 0, 1, ...` from `(η, multiplicity)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .enumerate()
                .map(|(k, &(eta, mult))| Level { k, eta, mult })
                .collect(),
        )
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.dim = Some(d);
        self
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn etas(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.eta).collect()
    }

    pub fn mults(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.mult).collect()
    }

    pub fn k_max(&self) -> usize {
        self.levels.last().map_or(0, |l| l.k)
    }

    /// `Σ_k mult_k η_k`.
    pub fn trace(&self) -> f64 {
        self.levels.iter().map(|l| l.mult * l.eta).sum()
    }

    /// Number of modes with positive eigenvalue.
    pub fn mode_count(&self) -> f64 {
        self.levels.iter().filter(|l| l.eta > 0.0).map(|l| l.mult).sum()
    }

    pub fn eta_max(&self) -> f64 {
        self.levels.iter().map(|l| l.eta).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for l in &self.levels {
            wtr.serialize(l)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["k", "eta", "mult"] {
            return Err(Error::SpectrumFormat(format!(
                "expected header `k,eta,mult`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut levels = Vec::new();
        for (i, rec) in rdr.deserialize::<Level>().enumerate() {
            levels.push(rec.map_err(|e| Error::SpectrumFormat(format!("row {}: {e}", i + 1)))?);
        }
        Self::new(levels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Result of [`decompose`] with the diagnostics behind it.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Levels `0..=k_max` with `η₀` set to zero.
    pub spectrum: Spectrum,
    /// `η₀` before it was zeroed.
    pub constant_mode: f64,
    /// `Σ_k N(d,k) η_k` over resolved levels, constant mode included.
    pub resolved_trace: f64,
    /// `Θ(1)`.
    pub kernel_trace: f64,
    /// Per level: whether the quadrature sum rose above rounding noise.
    pub resolved: Vec<bool>,
    /// `max_j |Σ_k N η_k P_k(z_j) - Θ(z_j)| / Θ(1)` over the quadrature nodes.
    pub reconstruction_error: f64,
}

impl Decomposition {
    pub fn trace_gap(&self) -> f64 {
        (self.resolved_trace - self.kernel_trace).abs() / self.kernel_trace.abs()
    }

    /// Highest level whose coefficient was resolved.
    pub fn last_resolved(&self) -> Option<usize> {
        self.resolved.iter().rposition(|&r| r)
    }
}

/// Projects `kernel` onto the Gegenbauer basis with the quadrature `rule`.
///
/// Each coefficient is the self-normalized ratio
/// `c_k = Σ w Θ P_k / Σ w P_k²` and `η_k = c_k / N(d,k)`. High levels of
/// smooth kernels can fall below the rounding floor of the numerator, which
/// grows like `ε Σ |w Θ P_k|`; such levels are reported as unresolved and set
/// to zero instead of being filled with cancellation noise.
pub fn decompose<K: DotProductKernel + ?Sized>(
    kernel: &K,
    d: usize,
    k_max: usize,
    rule: &QuadratureRule,
) -> Result<Decomposition> {
    decompose_split(kernel, &[], d, k_max, rule)
}

/// As [`decompose`], for a kernel whose Taylor polynomial `poly` is known.
///
/// The polynomial part is moved to the Gegenbauer basis exactly (see
/// [`crate::series`]); only the remainder `Θ - poly` goes through the
/// quadrature, with its rounding floor taken from `|Θ| + |poly|`. Every level
/// then counts as resolved, and remainder levels below the floor contribute
/// nothing.
pub fn decompose_split<K: DotProductKernel + ?Sized>(
    kernel: &K,
    poly: &[f64],
    d: usize,
    k_max: usize,
    rule: &QuadratureRule,
) -> Result<Decomposition> {
    if rule.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: rule.dim(),
        });
    }
    let r = rule.order();
    let min_order = (4 * k_max).max(64);
    if r < min_order {
        return Err(Error::invalid(
            "spectrum.r",
            format!("quadrature order {r} is below max(4 k_max, 64) = {min_order}"),
        ));
    }
    let z = rule.nodes();
    let w = rule.weights();
    let theta: Vec<f64> = z.iter().map(|&zj| kernel.eval(zj)).collect();
    let kernel_trace = kernel.eval(1.0);
    if !kernel_trace.is_finite() || theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("kernel", "kernel is not finite on [-1, 1]"));
    }
    let poly_at: Vec<f64> = z.iter().map(|&zj| series::eval_poly(poly, zj)).collect();
    let remainder: Vec<f64> = theta.iter().zip(&poly_at).map(|(t, p)| t - p).collect();
    let floor: Vec<f64> = theta.iter().zip(&poly_at).map(|(t, p)| t.abs() + p.abs()).collect();
    let exact = if poly.is_empty() {
        vec![0.0; k_max + 1]
    } else {
        series::taylor_to_gegenbauer(poly, d, k_max)
    };

    let mut coeffs = Vec::with_capacity(k_max + 1);
    let mut resolved = Vec::with_capacity(k_max + 1);
    let mut recon = poly_at.clone();
    let mut prev = vec![1.0; r];
    let mut cur = z.to_vec();
    for k in 0..=k_max {
        let p: &[f64] = if k == 0 { &prev } else { &cur };
        let (mut num, mut abs_num, mut den) = (0.0, 0.0, 0.0);
        for j in 0..r {
            num += w[j] * remainder[j] * p[j];
            abs_num += (w[j] * floor[j] * p[j]).abs();
            den += w[j] * p[j] * p[j];
        }
        let c = num / den;
        let noise = f64::EPSILON * abs_num / den;
        let ok = c.abs() > RESOLUTION_FACTOR * noise;
        let c = if ok { c } else { 0.0 };
        for j in 0..r {
            recon[j] += c * p[j];
        }
        coeffs.push(exact[k] + c);
        resolved.push(ok || !poly.is_empty());
        if k >= 1 && k < k_max {
            for j in 0..r {
                let next = gegenbauer_step(d, k, z[j], cur[j], prev[j]);
                prev[j] = cur[j];
                cur[j] = next;
            }
        }
    }
    // The polynomial part of the reconstruction above is the full series,
    // not its truncation at k_max; swap in the truncated sum.
    if !poly.is_empty() {
        for (j, &zj) in z.iter().enumerate() {
            let full: f64 = poly_at[j];
            let kept: f64 = gegenbauer_all(d, k_max, zj).iter().zip(&exact).map(|(p, c)| p * c).sum();
            recon[j] += kept - full;
        }
    }

    let resolved_trace: f64 = coeffs.iter().sum();
    let scale = kernel_trace.abs();
    let reconstruction_error = recon
        .iter()
        .zip(&theta)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / if scale > 0.0 { scale } else { 1.0 };
    if (resolved_trace - kernel_trace).abs() > TRACE_TOLERANCE * scale + 1e-12 {
        let last = resolved.iter().rposition(|&x| x);
        return Err(Error::SpectralResolution {
            resolved: resolved_trace,
            expected: kernel_trace,
            detail: format!(
                "d = {d}, r = {r}, k_max = {k_max}, last resolved level {}",
                last.map_or("none".to_string(), |k| k.to_string())
            ),
        });
    }

    let constant_mode = coeffs[0];
    let levels = coeffs
        .iter()
        .enumerate()
        .map(|(k, &c)| Level {
            k,
            eta: if k == 0 { 0.0 } else { c / degeneracy(d, k) },
            mult: degeneracy(d, k),
        })
        .collect();
    Ok(Decomposition {
        spectrum: Spectrum::new(levels)?.with_dim(d),
        constant_mode,
        resolved_trace,
        kernel_trace,
        resolved,
        reconstruction_error,
    })
}
