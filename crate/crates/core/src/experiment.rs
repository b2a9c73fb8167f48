//! Monte Carlo experiments over parameter grids, joined with theory.
//!
//! Each trial owns a ChaCha8 stream keyed by `(grid point, trial)` so results
//! do not depend on scheduling. Within a trial, one target pair and one set of
//! inputs and noise draws serve every `ρ` and `σ²` on the grid (common random
//! numbers); Gram factorizations and kernel evaluations are shared the same
//! way.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Protocol};
use crate::error::{Error, Result};
use crate::kernel::{cross_gram_unchecked, gram_symmetric, KernelParams, NtkKernel};
use crate::par::Execution;
use crate::points::PointSet;
use crate::quadrature::build_quadrature;
use crate::sim::{eval_duals, fit_block, sample_inputs, DualPair, SpdSolver, TaskData};
use crate::series::{ntk_taylor, NTK_SERIES_ORDER};
use crate::spectral::{decompose_split, Decomposition, Spectrum};
use crate::theory::{self, CurvePoint, Quantity};

/// Per-trial RNG: master seed plus an independent stream per work unit.
pub fn trial_rng(seed: u64, grid_index: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((grid_index as u64) << 32) | trial as u64);
    rng
}

/// Decomposes the configured NTK: exact Taylor part plus a quadrature pass
/// over the remainder.
pub fn ntk_spectrum(params: &KernelParams, k_max: usize, r: usize) -> Result<Decomposition> {
    let kernel = NtkKernel::new(*params)?;
    let rule = build_quadrature(params.input_dim, r)?;
    let poly = ntk_taylor(params, NTK_SERIES_ORDER)?;
    decompose_split(&kernel, &poly, params.input_dim, k_max, &rule)
}

/// Spectrum for a config: from file if given, else by decomposition.
pub fn config_spectrum(cfg: &Config) -> Result<Spectrum> {
    match &cfg.spectrum.file {
        Some(f) => Ok(Spectrum::load(f)?.with_dim(cfg.kernel.input_dim)),
        None => Ok(ntk_spectrum(&cfg.kernel, cfg.spectrum.k_max, cfg.spectrum.r)?.spectrum),
    }
}

/// One aggregated Monte Carlo result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub protocol: String,
    pub n_task: usize,
    #[serde(rename = "N_A")]
    pub n_a: Option<f64>,
    #[serde(rename = "N_B")]
    pub n_b: Option<f64>,
    pub rho: Option<f64>,
    pub sigma_sq: f64,
    pub mc_mean: f64,
    pub mc_q25: f64,
    pub mc_q75: f64,
    pub mc_stderr: f64,
    pub theory_value: Option<f64>,
}

impl ReportRow {
    pub fn within(&self, rel: f64, n_stderr: f64) -> Option<bool> {
        self.theory_value
            .map(|t| (self.mc_mean - t).abs() <= (rel * t.abs()).max(n_stderr * self.mc_stderr))
    }
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wtr.write_record([
            "protocol", "n_task", "N_A", "N_B", "rho", "sigma_sq", "mc_mean", "mc_q25", "mc_q75", "mc_stderr",
            "theory_value",
        ])?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary statistics of trial values: `(mean, q25, q75, stderr)`.
pub fn summarize(values: &[f64]) -> (f64, f64, f64, f64) {
    let est = crate::sim::Estimate::from_samples(values);
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    (est.mean, quantile(&s, 0.25), quantile(&s, 0.75), est.std_error)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).as_slice().to_vec()
}

/// Shared settings for one Monte Carlo run.
#[derive(Debug, Clone, Copy)]
pub struct McSettings {
    pub n_test: usize,
    pub p_prime: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Errors of one transfer trial, indexed `[σ²][ρ]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TransferErrors {
    pub single_a: f64,
    pub single_b: f64,
    pub forward: f64,
    pub backward: f64,
    pub average: f64,
}

/// One trial of the two-task experiment for every `(σ², ρ)` combination.
#[allow(clippy::too_many_arguments)]
pub fn transfer_trial<R: Rng + ?Sized>(
    rng: &mut R,
    exec: Execution,
    kernel: &NtkKernel,
    n_a: usize,
    n_b: usize,
    rhos: &[f64],
    sigmas_sq: &[f64],
    mc: &McSettings,
) -> Result<Vec<Vec<TransferErrors>>> {
    let d = kernel.params().input_dim;
    let dual = DualPair::sample(rng, d, mc.p_prime)?;
    let xa = sample_inputs(rng, n_a, d);
    let xb = sample_inputs(rng, n_b, d);
    let xt = sample_inputs(rng, mc.n_test, d);
    let eps_a = normals(rng, n_a);
    let eps_b = normals(rng, n_b);

    let coefs: [&[f64]; 2] = [&dual.alpha_a, &dual.alpha_perp];
    let fa_xa = eval_duals(exec, kernel, &dual.anchors, &coefs[..1], &xa).pop().unwrap();
    let mut fb_parts = eval_duals(exec, kernel, &dual.anchors, &coefs, &xb);
    let (fp_xb, fa_xb) = (fb_parts.pop().unwrap(), fb_parts.pop().unwrap());
    let mut ft_parts = eval_duals(exec, kernel, &dual.anchors, &coefs, &xt);
    let (fp_xt, fa_xt) = (ft_parts.pop().unwrap(), ft_parts.pop().unwrap());

    let solver_a = SpdSolver::new(&gram_symmetric(exec, kernel, &xa)?)?;
    let solver_b = SpdSolver::new(&gram_symmetric(exec, kernel, &xb)?)?;
    let k_ta = cross_gram_unchecked(exec, kernel, &xt, &xa);
    let k_tb = cross_gram_unchecked(exec, kernel, &xt, &xb);
    let k_ba = cross_gram_unchecked(exec, kernel, &xb, &xa);

    let mut out = Vec::with_capacity(sigmas_sq.len());
    for &s2 in sigmas_sq {
        let s = s2.sqrt();
        let y_a: Vec<f64> = fa_xa.iter().zip(&eps_a).map(|(f, e)| f + s * e).collect();
        let c_a = solver_a.solve(&y_a);
        let fhat_a_t = matvec(&k_ta, &c_a);
        let fhat_a_b = matvec(&k_ba, &c_a);
        let correction_t = matvec(&k_tb, &solver_b.solve(&fhat_a_b));
        let single_a = mse(&fa_xt, &fhat_a_t);
        let mut row = Vec::with_capacity(rhos.len());
        for &rho in rhos {
            let t = (1.0 - rho * rho).max(0.0).sqrt();
            let fb_t: Vec<f64> = fa_xt.iter().zip(&fp_xt).map(|(a, p)| rho * a + t * p).collect();
            let y_b: Vec<f64> = fa_xb
                .iter()
                .zip(&fp_xb)
                .zip(&eps_b)
                .map(|((a, p), e)| rho * a + t * p + s * e)
                .collect();
            let fhat_b_t = matvec(&k_tb, &solver_b.solve(&y_b));
            let seq: Vec<f64> = (0..mc.n_test)
                .map(|i| fhat_a_t[i] + fhat_b_t[i] - correction_t[i])
                .collect();
            let avg: Vec<f64> = (0..mc.n_test).map(|i| 0.5 * (fhat_a_t[i] + fhat_b_t[i])).collect();
            row.push(TransferErrors {
                single_a,
                single_b: mse(&fb_t, &fhat_b_t),
                forward: mse(&fb_t, &seq),
                backward: mse(&fa_xt, &seq),
                average: mse(&fb_t, &avg),
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// One trial of `K` tasks on a single target; returns `[σ²][n]` errors after
/// each task.
pub fn sequence_trial<R: Rng + ?Sized>(
    rng: &mut R,
    exec: Execution,
    kernel: &NtkKernel,
    sizes: &[usize],
    sigmas_sq: &[f64],
    block: bool,
    mc: &McSettings,
) -> Result<Vec<Vec<f64>>> {
    let d = kernel.params().input_dim;
    let dual = DualPair::sample(rng, d, mc.p_prime)?;
    let xs: Vec<PointSet> = sizes.iter().map(|&n| sample_inputs(rng, n, d)).collect();
    let xt = sample_inputs(rng, mc.n_test, d);
    let eps: Vec<Vec<f64>> = sizes.iter().map(|&n| normals(rng, n)).collect();
    let alpha: [&[f64]; 1] = [&dual.alpha_a];
    let f_x: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| eval_duals(exec, kernel, &dual.anchors, &alpha, x).pop().unwrap())
        .collect();
    let f_t = eval_duals(exec, kernel, &dual.anchors, &alpha, &xt).pop().unwrap();
    let k_t: Vec<DMatrix<f64>> = xs.iter().map(|x| cross_gram_unchecked(exec, kernel, &xt, x)).collect();

    let mut out = Vec::with_capacity(sigmas_sq.len());
    if block {
        for &s2 in sigmas_sq {
            let s = s2.sqrt();
            let tasks = xs
                .iter()
                .zip(&f_x)
                .zip(&eps)
                .map(|((x, f), e)| TaskData::new(x.clone(), f.iter().zip(e).map(|(f, e)| f + s * e).collect()))
                .collect::<Result<Vec<_>>>()?;
            let p = fit_block(exec, kernel, &tasks)?;
            let mut pred = vec![0.0; mc.n_test];
            let mut errs = Vec::with_capacity(sizes.len());
            for (n, stage) in p.stages().iter().enumerate() {
                pred.iter_mut().zip(matvec(&k_t[n], &stage.coef)).for_each(|(p, v)| *p += v);
                errs.push(mse(&f_t, &pred));
            }
            out.push(errs);
        }
        return Ok(out);
    }

    let solvers = xs
        .iter()
        .map(|x| SpdSolver::new(&gram_symmetric(exec, kernel, x)?))
        .collect::<Result<Vec<_>>>()?;
    // Θ(X_n, X_m) for m < n.
    let cross: Vec<Vec<DMatrix<f64>>> = (0..xs.len())
        .map(|n| (0..n).map(|m| cross_gram_unchecked(exec, kernel, &xs[n], &xs[m])).collect())
        .collect();
    for &s2 in sigmas_sq {
        let s = s2.sqrt();
        let mut coefs: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
        let mut pred = vec![0.0; mc.n_test];
        let mut errs = Vec::with_capacity(sizes.len());
        for n in 0..xs.len() {
            let mut resid: Vec<f64> = f_x[n].iter().zip(&eps[n]).map(|(f, e)| f + s * e).collect();
            for (m, c) in coefs.iter().enumerate() {
                resid.iter_mut().zip(matvec(&cross[n][m], c)).for_each(|(r, v)| *r -= v);
            }
            let c = solvers[n].solve(&resid);
            pred.iter_mut().zip(matvec(&k_t[n], &c)).for_each(|(p, v)| *p += v);
            errs.push(mse(&f_t, &pred));
            coefs.push(c);
        }
        out.push(errs);
    }
    Ok(out)
}

/// Single-task errors for every `σ²`.
pub fn single_trial<R: Rng + ?Sized>(
    rng: &mut R,
    exec: Execution,
    kernel: &NtkKernel,
    n: usize,
    sigmas_sq: &[f64],
    mc: &McSettings,
) -> Result<Vec<f64>> {
    Ok(sequence_trial(rng, exec, kernel, &[n], sigmas_sq, false, mc)?
        .into_iter()
        .map(|v| v[0])
        .collect())
}

/// Runs the configured Monte Carlo experiment and joins theory values.
pub fn run_experiment(cfg: &Config, spectrum: &Spectrum, exec: Execution) -> Result<Vec<ReportRow>> {
    let e = &cfg.experiment;
    if !e.simulate {
        return Err(Error::Config(
            "`experiment.simulate` is false: this sweep is theory-only".into(),
        ));
    }
    // The theory works with η₀ = 0, so the simulated kernel drops level 0 too.
    let kernel = NtkKernel::new(cfg.kernel)?.without_constant_mode()?;
    let mc = McSettings {
        n_test: e.n_test,
        p_prime: e.p_prime,
        trials: e.trials,
        seed: e.seed,
    };
    let sig = &e.sigma_sq;
    let mut rows = Vec::new();
    match e.protocol {
        Protocol::Single => {
            for (gi, &n) in e.n.sizes().iter().enumerate() {
                let per_trial = run_trials(exec, &mc, gi, |rng| single_trial(rng, exec, &kernel, n as usize, sig, &mc))?;
                for (si, &s2) in sig.iter().enumerate() {
                    let vals: Vec<f64> = per_trial.iter().map(|t| t[si]).collect();
                    let th = theory::e_single_ensemble(spectrum, n, s2)?;
                    rows.push(row("single", 1, Some(n), None, None, s2, &vals, Some(th)));
                }
            }
        }
        Protocol::Transfer | Protocol::Average => {
            let rhos = e.rho.values();
            let pairs: Vec<(f64, f64)> = e
                .n_a
                .sizes()
                .iter()
                .flat_map(|&a| e.n_b.sizes().into_iter().map(move |b| (a, b)))
                .collect();
            for (gi, &(n_a, n_b)) in pairs.iter().enumerate() {
                let per_trial = run_trials(exec, &mc, gi, |rng| {
                    transfer_trial(rng, exec, &kernel, n_a as usize, n_b as usize, &rhos, sig, &mc)
                })?;
                for (si, &s2) in sig.iter().enumerate() {
                    let pick = |ri: usize, f: fn(&TransferErrors) -> f64| -> Vec<f64> {
                        per_trial.iter().map(|t| f(&t[si][ri])).collect()
                    };
                    let transfer = e.protocol == Protocol::Transfer;
                    if transfer {
                        let th = theory::e_single_ensemble(spectrum, n_a, s2)?;
                        rows.push(row("single_A", 1, Some(n_a), None, None, s2, &pick(0, |t| t.single_a), Some(th)));
                    }
                    for (ri, &rho) in rhos.iter().enumerate() {
                        let th_b = theory::e_single_ensemble(spectrum, n_b, s2)?;
                        rows.push(row("single_B", 1, None, Some(n_b), Some(rho), s2, &pick(ri, |t| t.single_b), Some(th_b)));
                        if transfer {
                            let th = theory::e_transfer(spectrum, n_a, n_b, rho, s2)?;
                            rows.push(row("forward", 2, Some(n_a), Some(n_b), Some(rho), s2, &pick(ri, |t| t.forward), Some(th)));
                            let th = theory::e_backward(spectrum, n_a, n_b, rho, s2)?;
                            rows.push(row("backward", 2, Some(n_a), Some(n_b), Some(rho), s2, &pick(ri, |t| t.backward), Some(th)));
                        }
                        let th = if s2 == 0.0 {
                            Some(theory::e_average(spectrum, n_a, n_b, rho, 0.0)?)
                        } else {
                            None
                        };
                        rows.push(row("average", 2, Some(n_a), Some(n_b), Some(rho), s2, &pick(ri, |t| t.average), th));
                    }
                }
            }
        }
        Protocol::Sequential | Protocol::Block => {
            let block = e.protocol == Protocol::Block;
            let label = if block { "block" } else { "sequential" };
            let per_trial = run_trials(exec, &mc, 0, |rng| sequence_trial(rng, exec, &kernel, &e.task_sizes, sig, block, &mc))?;
            let sizes: Vec<f64> = e.task_sizes.iter().map(|&n| n as f64).collect();
            for (si, &s2) in sig.iter().enumerate() {
                let curve = theory::learning_curve(spectrum, &sizes, s2)?;
                for n in 0..sizes.len() {
                    let vals: Vec<f64> = per_trial.iter().map(|t| t[si][n]).collect();
                    let n_a = (n > 0).then(|| sizes[n - 1]);
                    rows.push(row(label, n + 1, n_a, Some(sizes[n]), Some(1.0), s2, &vals, Some(curve.errors[n])));
                }
            }
        }
    }
    Ok(rows)
}

/// Runs `mc.trials` independent trials of grid point `gi`.
pub fn run_trials<T: Send>(
    exec: Execution,
    mc: &McSettings,
    gi: usize,
    f: impl Fn(&mut ChaCha8Rng) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    exec.map_indexed(mc.trials, |t| f(&mut trial_rng(mc.seed, gi, t)))
        .into_iter()
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn row(
    protocol: &str,
    n_task: usize,
    n_a: Option<f64>,
    n_b: Option<f64>,
    rho: Option<f64>,
    sigma_sq: f64,
    vals: &[f64],
    theory_value: Option<f64>,
) -> ReportRow {
    let (mc_mean, mc_q25, mc_q75, mc_stderr) = summarize(vals);
    ReportRow {
        protocol: protocol.into(),
        n_task,
        n_a,
        n_b,
        rho,
        sigma_sq,
        mc_mean,
        mc_q25,
        mc_q75,
        mc_stderr,
        theory_value,
    }
}

/// Theory values for every point of the configured grid.
pub fn theory_points(cfg: &Config, spectrum: &Spectrum) -> Result<Vec<CurvePoint>> {
    let e = &cfg.experiment;
    let mut out = Vec::new();
    let point = |label, n_a, n_b, n, rho, sigma_sq, value| CurvePoint {
        label,
        n_a,
        n_b,
        n,
        rho,
        sigma_sq,
        value,
    };
    match e.protocol {
        Protocol::Single => {
            for &s2 in &e.sigma_sq {
                for n in e.n.values() {
                    let v = theory::e_single_ensemble(spectrum, n, s2)?;
                    out.push(point(Quantity::E1, Some(n), None, None, None, s2, v));
                }
            }
        }
        Protocol::Transfer | Protocol::Average => {
            let rhos = e.rho.values();
            for &s2 in &e.sigma_sq {
                for n_a in e.n_a.values() {
                    for n_b in e.n_b.values() {
                        for &rho in &rhos {
                            if e.protocol == Protocol::Transfer {
                                let v = theory::e_transfer(spectrum, n_a, n_b, rho, s2)?;
                                out.push(point(Quantity::Transfer, Some(n_a), Some(n_b), None, Some(rho), s2, v));
                                let v = theory::e_backward(spectrum, n_a, n_b, rho, s2)?;
                                out.push(point(Quantity::Backward, Some(n_a), Some(n_b), None, Some(rho), s2, v));
                            }
                            if s2 == 0.0 {
                                let v = theory::e_average(spectrum, n_a, n_b, rho, 0.0)?;
                                out.push(point(Quantity::Average, Some(n_a), Some(n_b), None, Some(rho), s2, v));
                            }
                        }
                    }
                }
                let mut singles: Vec<f64> = e.n_a.values();
                for n in e.n_b.values() {
                    if !singles.contains(&n) {
                        singles.push(n);
                    }
                }
                for n in singles {
                    let v = theory::e_single_ensemble(spectrum, n, s2)?;
                    out.push(point(Quantity::E1, Some(n), None, None, None, s2, v));
                }
            }
        }
        Protocol::Sequential | Protocol::Block => {
            let sizes: Vec<f64> = e.task_sizes.iter().map(|&n| n as f64).collect();
            for &s2 in &e.sigma_sq {
                let curve = theory::learning_curve(spectrum, &sizes, s2)?;
                for (n, v) in curve.errors.into_iter().enumerate() {
                    out.push(point(Quantity::Sequence, None, Some(sizes[n]), Some(n + 1), Some(1.0), s2, v));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        let (m, q25, q75, _) = summarize(&v);
        assert_eq!((m, q25, q75), (3.0, 2.0, 4.0));
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
    }

    #[test]
    fn streams_differ_and_repeat() {
        let a: u64 = trial_rng(1, 0, 0).random();
        let b: u64 = trial_rng(1, 0, 1).random();
        let c: u64 = trial_rng(1, 1, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, trial_rng(1, 0, 0).random::<u64>());
    }

    #[test]
    fn empty_report_has_header() {
        let mut buf = Vec::new();
        write_report_csv(&[], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("protocol,n_task,N_A,N_B,rho"));
    }
}
