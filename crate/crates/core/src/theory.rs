//! Closed-form generalization errors of (sequential) kernel ridge-less
//! regression, evaluated from a [`Spectrum`].
//!
//! Every sum over eigenmodes is a sum over levels weighted by multiplicity.
//! Targets are described by per-level second moments of their coefficients in
//! the `ψ_k = √η_k φ_k` basis; the default Gaussian ensemble has
//! `⟨w̄_A²⟩ = ⟨w̄_B²⟩ = η_k` and `⟨w̄_A w̄_B⟩ = ρ η_k`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::Spectrum;

/// Relative width at which the κ bisection stops.
const KAPPA_RTOL: f64 = 1e-14;

/// Solution of the self-consistent equation `Σ m η/(κ + Nη) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfConsistency {
    pub n: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// `q_k = κ/(κ + N η_k)`.
    pub q: Vec<f64>,
    /// `q̃_k = η_k q_k²`.
    pub q_tilde: Vec<f64>,
}

impl SelfConsistency {
    /// `N/((1-γ) κ²)`, the weight of the fluctuation feedback term.
    pub fn feedback(&self) -> f64 {
        self.n / ((1.0 - self.gamma) * self.kappa * self.kappa)
    }

    /// Relative residual of the defining equation.
    pub fn residual(&self, spec: &Spectrum) -> f64 {
        let s: f64 = spec
            .levels()
            .iter()
            .map(|l| l.mult * l.eta / (self.kappa + self.n * l.eta))
            .sum();
        (s - 1.0).abs()
    }
}

pub fn solve_kappa(spec: &Spectrum, n: f64) -> Result<SelfConsistency> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("N", format!("sample size must be positive, got {n}")));
    }
    let modes = spec.mode_count();
    if modes <= n {
        return Err(Error::ModeDeficit { n, modes });
    }
    let levels = spec.levels();
    let g = |kappa: f64| -> f64 {
        levels
            .iter()
            .filter(|l| l.eta > 0.0)
            .map(|l| l.mult * l.eta / (kappa + n * l.eta))
            .sum::<f64>()
            - 1.0
    };
    let mut lo = 1e-16 * spec.eta_max();
    let mut hi = spec.trace();
    if !(g(lo) > 0.0) {
        return Err(Error::ModeDeficit { n, modes });
    }
    while hi / lo - 1.0 > KAPPA_RTOL {
        let mid = (lo * hi).sqrt();
        let mid = if mid <= lo || mid >= hi { 0.5 * (lo + hi) } else { mid };
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let kappa = 0.5 * (lo + hi);
    let mut gamma = 0.0;
    let mut q = Vec::with_capacity(levels.len());
    let mut q_tilde = Vec::with_capacity(levels.len());
    for l in levels {
        let denom = kappa + n * l.eta;
        gamma += l.mult * n * l.eta * l.eta / (denom * denom);
        let qk = kappa / denom;
        q.push(qk);
        q_tilde.push(l.eta * qk * qk);
    }
    Ok(SelfConsistency {
        n,
        kappa,
        gamma,
        q,
        q_tilde,
    })
}

/// Per-level second moments of a pair of target coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMoments {
    pub aa: Vec<f64>,
    pub bb: Vec<f64>,
    pub ab: Vec<f64>,
}

impl PairMoments {
    /// Gaussian ensemble with similarity `ρ`.
    pub fn ensemble(spec: &Spectrum, rho: f64) -> Self {
        let eta = spec.etas();
        Self {
            ab: eta.iter().map(|e| rho * e).collect(),
            aa: eta.clone(),
            bb: eta,
        }
    }

    /// Deterministic coefficients, one per level.
    pub fn explicit(wa: &[f64], wb: &[f64]) -> Self {
        Self {
            aa: wa.iter().map(|a| a * a).collect(),
            bb: wb.iter().map(|b| b * b).collect(),
            ab: wa.iter().zip(wb).map(|(a, b)| a * b).collect(),
        }
    }

    fn check(&self, levels: usize) -> Result<()> {
        for (what, v) in [("aa", &self.aa), ("bb", &self.bb), ("ab", &self.ab)] {
            check_len(what, levels, v.len())?;
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho", format!("similarity must lie in [-1, 1], got {rho}")));
    }
    Ok(())
}

fn check_noise(sigma_sq: f64) -> Result<()> {
    if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
        return Err(Error::invalid("sigma_sq", format!("noise variance must be non-negative, got {sigma_sq}")));
    }
    Ok(())
}

/// Single-task error `E₁` for target moments `⟨w̄_k²⟩`.
pub fn e_single(sc: &SelfConsistency, spec: &Spectrum, w_sq: &[f64], sigma_sq: f64) -> Result<f64> {
    check_len("target moments", spec.levels().len(), w_sq.len())?;
    check_noise(sigma_sq)?;
    let signal: f64 = spec
        .levels()
        .iter()
        .zip(&sc.q)
        .zip(w_sq)
        .map(|((l, q), w)| l.mult * l.eta * w * q * q)
        .sum();
    Ok((signal + sc.gamma * sigma_sq) / (1.0 - sc.gamma))
}

/// `E₁` under the Gaussian ensemble.
pub fn e_single_ensemble(spec: &Spectrum, n: f64, sigma_sq: f64) -> Result<f64> {
    let sc = solve_kappa(spec, n)?;
    e_single(&sc, spec, &spec.etas(), sigma_sq)
}

/// Level-wise moments entering the cost of a trained model against a probe.
///
/// For weights `φ` and a probe `u`, per level: `dd = ⟨φ (w̄ - u)²⟩`,
/// `wd = ⟨φ w̄ (w̄ - u)⟩`, `ww = φ ⟨w̄²⟩`. Callers pre-multiply by `φ` so that
/// probes with a `1/q` factor can cancel it analytically.
struct CostTerms {
    dd: Vec<f64>,
    wd: Vec<f64>,
    ww: Vec<f64>,
    phi: Vec<f64>,
}

/// `⟨Σ_k m_k φ_k (v_k - u_k)²⟩` where `v` are the coefficients learned from
/// `N_A` samples of the target with moments `w_sq`.
fn cost(sc: &SelfConsistency, spec: &Spectrum, w_sq: &[f64], t: &CostTerms, sigma_sq: f64) -> f64 {
    let levels = spec.levels();
    let inner: f64 = levels
        .iter()
        .zip(&sc.q)
        .zip(w_sq)
        .map(|((l, q), w)| l.mult * l.eta * w * q * q)
        .sum();
    let fb = sc.feedback() * (inner + sigma_sq);
    levels
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let q = sc.q[k];
            l.mult * (t.dd[k] - 2.0 * t.wd[k] * q + (t.ww[k] + t.phi[k] * l.eta * fb) * q * q)
        })
        .sum()
}

/// Cost of the model trained on target `w̄_A` against an arbitrary probe `u`
/// with weights `φ`, for deterministic coefficient lists.
pub fn lemma2_cost(
    sc_a: &SelfConsistency,
    spec: &Spectrum,
    w_a: &[f64],
    u: &[f64],
    phi: &[f64],
    sigma_sq: f64,
) -> Result<f64> {
    let n = spec.levels().len();
    check_len("w_a", n, w_a.len())?;
    check_len("u", n, u.len())?;
    check_len("phi", n, phi.len())?;
    check_noise(sigma_sq)?;
    if phi.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::invalid("phi", "weights must be non-negative"));
    }
    let terms = CostTerms {
        dd: (0..n).map(|k| phi[k] * (w_a[k] - u[k]).powi(2)).collect(),
        wd: (0..n).map(|k| phi[k] * w_a[k] * (w_a[k] - u[k])).collect(),
        ww: (0..n).map(|k| phi[k] * w_a[k] * w_a[k]).collect(),
        phi: phi.to_vec(),
    };
    let w_sq: Vec<f64> = w_a.iter().map(|w| w * w).collect();
    Ok(cost(sc_a, spec, &w_sq, &terms, sigma_sq))
}

/// Forward transfer `E_{A→B}`: error on target B after training on A then B.
pub fn e_transfer(spec: &Spectrum, n_a: f64, n_b: f64, rho: f64, sigma_sq: f64) -> Result<f64> {
    check_rho(rho)?;
    check_noise(sigma_sq)?;
    let a = solve_kappa(spec, n_a)?;
    let b = solve_kappa(spec, n_b)?;
    Ok(transfer_closed(spec, &a, &b, rho, sigma_sq))
}

fn transfer_closed(spec: &Spectrum, a: &SelfConsistency, b: &SelfConsistency, rho: f64, sigma_sq: f64) -> f64 {
    let (ga, gb) = (a.gamma, b.gamma);
    let mut signal = 0.0;
    let mut cross = 0.0;
    for (k, l) in spec.levels().iter().enumerate() {
        let (qa, qb) = (a.q[k], b.q[k]);
        let e_bk = qb * qb * l.eta * l.eta / (1.0 - gb);
        signal += l.mult * (2.0 * (1.0 - rho) * (1.0 - qa) + qa * qa / (1.0 - ga)) * e_bk;
        cross += l.mult * l.eta * l.eta * qa * qa * qb * qb;
    }
    signal + sigma_sq * noise_factor(a, b, cross)
}

fn noise_factor(a: &SelfConsistency, b: &SelfConsistency, cross: f64) -> f64 {
    a.n / (a.kappa * a.kappa) * cross / ((1.0 - a.gamma) * (1.0 - b.gamma)) + b.gamma / (1.0 - b.gamma)
}

/// Backward transfer `E^{back}_{A→B}`: error on target A after training on A
/// then B.
pub fn e_backward(spec: &Spectrum, n_a: f64, n_b: f64, rho: f64, sigma_sq: f64) -> Result<f64> {
    check_rho(rho)?;
    check_noise(sigma_sq)?;
    let a = solve_kappa(spec, n_a)?;
    let b = solve_kappa(spec, n_b)?;
    let gb = b.gamma;
    let mut signal = 0.0;
    let mut cross = 0.0;
    for (k, l) in spec.levels().iter().enumerate() {
        let (qa, qb) = (a.q[k], b.q[k]);
        let f = qb * (qa - 2.0) + qb * qb * (1.0 - qa) / (1.0 - gb);
        let e_bk = qb * qb * l.eta * l.eta / (1.0 - gb);
        signal += l.mult * (2.0 * (1.0 - rho) * (1.0 + f) * l.eta * l.eta + qa * qa / (1.0 - a.gamma) * e_bk);
        cross += l.mult * l.eta * l.eta * qa * qa * qb * qb;
    }
    Ok(signal + sigma_sq * noise_factor(&a, &b, cross))
}

/// `E_{A→B}` for arbitrary target moments, composed from the trained-model
/// cost rather than the closed form.
pub fn e_transfer_general(
    spec: &Spectrum,
    n_a: f64,
    n_b: f64,
    m: &PairMoments,
    sigma_sq: f64,
) -> Result<f64> {
    m.check(spec.levels().len())?;
    check_noise(sigma_sq)?;
    let a = solve_kappa(spec, n_a)?;
    let b = solve_kappa(spec, n_b)?;
    // Stage B learns the residual w̄_B - v_A, so its error is the single-task
    // formula applied to that residual: φ = η q_B²/(1-γ_B), probe u = w̄_B.
    let phi: Vec<f64> = spec
        .levels()
        .iter()
        .zip(&b.q)
        .map(|(l, q)| l.eta * q * q / (1.0 - b.gamma))
        .collect();
    let terms = CostTerms {
        dd: (0..phi.len()).map(|k| phi[k] * (m.aa[k] - 2.0 * m.ab[k] + m.bb[k])).collect(),
        wd: (0..phi.len()).map(|k| phi[k] * (m.aa[k] - m.ab[k])).collect(),
        ww: (0..phi.len()).map(|k| phi[k] * m.aa[k]).collect(),
        phi,
    };
    Ok(cost(&a, spec, &m.aa, &terms, sigma_sq) + b.gamma * sigma_sq / (1.0 - b.gamma))
}

/// `E^{back}_{A→B}` for arbitrary target moments.
///
/// With `r = w̄_B - v_A` the stage-B residual, the error on A is
/// `Σ η (w̄_A - w̄_B + q_B r)² + γ_B/(1-γ_B) (Σ η q_B² r² + σ²)`; both sums
/// are costs of `v_A` against shifted probes.
pub fn e_backward_general(
    spec: &Spectrum,
    n_a: f64,
    n_b: f64,
    m: &PairMoments,
    sigma_sq: f64,
) -> Result<f64> {
    m.check(spec.levels().len())?;
    check_noise(sigma_sq)?;
    let a = solve_kappa(spec, n_a)?;
    let b = solve_kappa(spec, n_b)?;
    let g = b.gamma / (1.0 - b.gamma);
    let n = spec.levels().len();
    let mut dd = Vec::with_capacity(n);
    let mut wd = Vec::with_capacity(n);
    let mut ww = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for (k, l) in spec.levels().iter().enumerate() {
        let qb = b.q[k];
        let diff_sq = m.aa[k] - 2.0 * m.ab[k] + m.bb[k];
        let a_diff = m.aa[k] - m.ab[k];
        // Probe u = w̄_B + (w̄_A - w̄_B)/q_B with φ = η q_B², plus probe
        // u = w̄_B with φ = η q_B² γ_B/(1-γ_B).
        dd.push(l.eta * ((1.0 - qb).powi(2) + g * qb * qb) * diff_sq);
        wd.push(l.eta * (qb * (qb - 1.0) + g * qb * qb) * a_diff);
        ww.push(l.eta * qb * qb * (1.0 + g) * m.aa[k]);
        phi.push(l.eta * qb * qb * (1.0 + g));
    }
    let terms = CostTerms { dd, wd, ww, phi };
    Ok(cost(&a, spec, &m.aa, &terms, sigma_sq) + g * sigma_sq)
}

/// Similarity below which forward transfer is always negative.
pub fn critical_similarity(spec: &Spectrum, n_a: f64) -> Result<f64> {
    let sc = solve_kappa(spec, n_a)?;
    Ok(critical_from_gamma(sc.gamma))
}

pub fn critical_from_gamma(gamma: f64) -> f64 {
    let s = gamma.sqrt();
    s / (1.0 + s)
}

/// Error on target B of the average `(f_A + f_B)/2` of two independently
/// trained models, for the Gaussian ensemble.
pub fn e_average(spec: &Spectrum, n_a: f64, n_b: f64, rho: f64, sigma_sq: f64) -> Result<f64> {
    check_rho(rho)?;
    e_average_general(spec, n_a, n_b, &PairMoments::ensemble(spec, rho), sigma_sq)
}

pub fn e_average_general(
    spec: &Spectrum,
    n_a: f64,
    n_b: f64,
    m: &PairMoments,
    sigma_sq: f64,
) -> Result<f64> {
    if sigma_sq != 0.0 {
        return Err(Error::Unsupported(
            "the model-average error is only available for noiseless labels (sigma_sq = 0)".into(),
        ));
    }
    m.check(spec.levels().len())?;
    let a = solve_kappa(spec, n_a)?;
    let b = solve_kappa(spec, n_b)?;
    let bias: f64 = spec
        .levels()
        .iter()
        .enumerate()
        .map(|(k, l)| {
            // ⟨(c_a w_A - c_b w_B)²⟩ with c_a = 1 - q_A, c_b = c_a + t. Expanding
            // around c_a avoids cancelling O(1) terms when q_A, q_B ≪ 1.
            let ca = 1.0 - a.q[k];
            let t = a.q[k] + b.q[k];
            let (aa, ab, bb) = (m.aa[k], m.ab[k], m.bb[k]);
            l.mult * l.eta * (ca * ca * (aa - 2.0 * ab + bb) + 2.0 * ca * t * (bb - ab) + t * t * bb)
        })
        .sum();
    let e_a = e_single(&a, spec, &m.aa, 0.0)?;
    let e_b = e_single(&b, spec, &m.bb, 0.0)?;
    Ok(0.25 * bias + 0.25 * a.gamma * e_a + 0.25 * b.gamma * e_b)
}

/// Errors after each of `K` tasks sharing one target.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    /// `errors[n-1]` is the error after training on tasks `1..=n`.
    pub errors: Vec<f64>,
    /// Noise coefficient: `errors[n-1] = signal + noise_coeff[n-1] σ²`.
    pub noise_coeff: Vec<f64>,
}

/// Learning curve over tasks of sizes `sizes`, trained in order, for the
/// Gaussian ensemble.
pub fn learning_curve(spec: &Spectrum, sizes: &[f64], sigma_sq: f64) -> Result<LearningCurve> {
    learning_curve_general(spec, sizes, &spec.etas(), sigma_sq)
}

/// Propagates per-level residual second moments `s_k = ⟨(w̄ - v)_k²⟩` task by
/// task: `s ← q² s + q² η N/((1-γ)κ²) (Σ m η q² s + σ²)`.
pub fn learning_curve_general(
    spec: &Spectrum,
    sizes: &[f64],
    w_sq: &[f64],
    sigma_sq: f64,
) -> Result<LearningCurve> {
    check_len("target moments", spec.levels().len(), w_sq.len())?;
    check_noise(sigma_sq)?;
    if sizes.is_empty() {
        return Err(Error::invalid("sizes", "need at least one task"));
    }
    let levels = spec.levels();
    let mut cache: Vec<(f64, SelfConsistency)> = Vec::new();
    let mut signal = w_sq.to_vec();
    let mut noise = vec![0.0; levels.len()];
    let mut errors = Vec::with_capacity(sizes.len());
    let mut noise_coeff = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let sc = match cache.iter().find(|(m, _)| *m == n) {
            Some((_, sc)) => sc.clone(),
            None => {
                let sc = solve_kappa(spec, n)?;
                cache.push((n, sc.clone()));
                sc
            }
        };
        let fb = sc.feedback();
        let weighted = |s: &[f64]| -> f64 {
            levels
                .iter()
                .zip(&sc.q)
                .zip(s)
                .map(|((l, q), s)| l.mult * l.eta * q * q * s)
                .sum()
        };
        let sig_in = weighted(&signal);
        let noise_in = weighted(&noise) + 1.0;
        for (k, l) in levels.iter().enumerate() {
            let q2 = sc.q[k] * sc.q[k];
            signal[k] = q2 * signal[k] + q2 * l.eta * fb * sig_in;
            noise[k] = q2 * noise[k] + q2 * l.eta * fb * noise_in;
        }
        let total = |s: &[f64]| -> f64 { levels.iter().zip(s).map(|(l, s)| l.mult * l.eta * s).sum() };
        let r = total(&noise);
        errors.push(total(&signal) + r * sigma_sq);
        noise_coeff.push(r);
    }
    Ok(LearningCurve {
        errors,
        noise_coeff,
    })
}

/// Bounds on the spectral radius of the per-task propagation matrix
/// `Q = diag(q²) + N/((1-γ)κ²) · q̃ q̃ᵀ` (mode-wise, levels with `η > 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QBounds {
    /// Maximum row sum `max_k (1 + Nη_k/κ) q_k²`.
    pub inf_norm: f64,
    /// Largest eigenvalue.
    pub lambda_max: f64,
}

pub fn q_bounds(spec: &Spectrum, sc: &SelfConsistency) -> QBounds {
    let levels = spec.levels();
    let pos: Vec<usize> = (0..levels.len()).filter(|&k| levels[k].eta > 0.0).collect();
    let inf_norm = pos
        .iter()
        .map(|&k| (1.0 + sc.n * levels[k].eta / sc.kappa) * sc.q[k] * sc.q[k])
        .fold(0.0, f64::max);
    let diag_max = pos.iter().map(|&k| sc.q[k] * sc.q[k]).fold(0.0, f64::max);
    let c = sc.feedback();
    // Secular equation 1 = c Σ m q̃²/(λ - q²), increasing in λ above max q².
    let h = |lambda: f64| -> f64 {
        1.0 - c * pos
            .iter()
            .map(|&k| levels[k].mult * sc.q_tilde[k].powi(2) / (lambda - sc.q[k] * sc.q[k]))
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (diag_max, inf_norm.max(diag_max) * (1.0 + 1e-12) + 1e-300);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    QBounds {
        inf_norm,
        lambda_max: hi,
    }
}

/// Reference ratios the exact transfer errors approach in limiting regimes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticRatios {
    /// `E_{A→B}(ρ)/E_B` for `N_A ≫ N_B`: `2(1-ρ)`.
    pub forward_ratio: f64,
    /// `E_{A→B}(1)/E_B` upper value for `N_B ≫ N_A`: `1/(1-γ_A)`.
    pub self_negative_ratio: f64,
    /// `E_{A→B}(1)/E_A` for `N_A ≫ N_B`: `1/(1-γ_B)`.
    pub self_forgetting_ratio: f64,
}

pub fn asymptotic_ratios(spec: &Spectrum, n_a: f64, n_b: f64, rho: f64) -> Result<AsymptoticRatios> {
    check_rho(rho)?;
    let a = solve_kappa(spec, n_a)?;
    let b = solve_kappa(spec, n_b)?;
    Ok(AsymptoticRatios {
        forward_ratio: 2.0 * (1.0 - rho),
        self_negative_ratio: 1.0 / (1.0 - a.gamma),
        self_forgetting_ratio: 1.0 / (1.0 - b.gamma),
    })
}

/// Which error a [`CurvePoint`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    E1,
    #[serde(rename = "E_AB")]
    Transfer,
    #[serde(rename = "E_AB_back")]
    Backward,
    #[serde(rename = "E_ave")]
    Average,
    #[serde(rename = "E_n")]
    Sequence,
}

/// One theory value with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub label: Quantity,
    #[serde(rename = "N_A")]
    pub n_a: Option<f64>,
    #[serde(rename = "N_B")]
    pub n_b: Option<f64>,
    pub n: Option<usize>,
    pub rho: Option<f64>,
    pub sigma_sq: f64,
    pub value: f64,
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if points.is_empty() {
        wtr.write_record(["label", "N_A", "N_B", "n", "rho", "sigma_sq", "value"])?;
    }
    for p in points {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    Ok(())
}
