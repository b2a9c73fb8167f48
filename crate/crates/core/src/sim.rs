//! Kernel ridge-less regression on sampled data: single-task fits, the
//! sequential residual update, its block-triangular equivalent, model
//! averaging and Monte Carlo error estimates.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{cross_gram_unchecked, gram_symmetric, DotProductKernel};
use crate::par::Execution;
use crate::points::{dot, PointSet, UNIT_NORM_TOL};

/// Base jitter as a fraction of the mean Gram diagonal.
pub const JITTER_BASE: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// `n` i.i.d. Gaussian points in `R^d` scaled to unit norm.
pub fn sample_inputs<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> PointSet {
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut p = PointSet::new(d, data).expect("d > 0");
    p.normalize_rows();
    p
}

/// `f̄(x) = Σ_j α_j Θ(x'_j · x)` over a fixed set of anchors.
#[derive(Debug, Clone)]
pub struct TargetFunction {
    anchors: Arc<PointSet>,
    alpha: Vec<f64>,
}

impl TargetFunction {
    pub fn new(anchors: Arc<PointSet>, alpha: Vec<f64>) -> Result<Self> {
        if anchors.len() != alpha.len() {
            return Err(Error::LengthMismatch {
                what: "target coefficients",
                expected: anchors.len(),
                found: alpha.len(),
            });
        }
        anchors.check_unit_norm(UNIT_NORM_TOL)?;
        Ok(Self { anchors, alpha })
    }

    pub fn anchors(&self) -> &PointSet {
        &self.anchors
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn eval<K: DotProductKernel + ?Sized>(&self, exec: Execution, kernel: &K, x: &PointSet) -> Vec<f64> {
        eval_duals(exec, kernel, &self.anchors, &[&self.alpha], x).pop().unwrap()
    }

    /// `αᵀ Θ(X', X') α`, the squared RKHS norm.
    pub fn rkhs_norm_sq<K: DotProductKernel + ?Sized>(&self, exec: Execution, kernel: &K) -> f64 {
        dot(&self.alpha, &self.eval(exec, kernel, &self.anchors))
    }
}

/// Evaluates several coefficient vectors over shared anchors in one pass.
pub(crate) fn eval_duals<K: DotProductKernel + ?Sized>(
    exec: Execution,
    kernel: &K,
    anchors: &PointSet,
    coefs: &[&[f64]],
    x: &PointSet,
) -> Vec<Vec<f64>> {
    let rows = exec.map_indexed(x.len(), |i| {
        let xi = x.row(i);
        let mut acc = vec![0.0; coefs.len()];
        for (j, a) in anchors.rows().enumerate() {
            let k = kernel.eval(dot(xi, a));
            for (s, c) in acc.iter_mut().zip(coefs) {
                *s += c[j] * k;
            }
        }
        acc
    });
    (0..coefs.len()).map(|c| rows.iter().map(|r| r[c]).collect()).collect()
}

/// Two targets on shared anchors with `corr(α_A, α_B) = ρ` per anchor and
/// `Var α = 1/P'`.
pub fn sample_target_pair<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    rho: f64,
    p_prime: usize,
) -> Result<(TargetFunction, TargetFunction)> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho", format!("similarity must lie in [-1, 1], got {rho}")));
    }
    let dual = DualPair::sample(rng, d, p_prime)?;
    Ok((dual.target_a(), dual.target_b(rho)))
}

/// A target and an independent companion on shared anchors; `ρ`-correlated
/// targets are `ρ A + √(1-ρ²) ⊥`, so one draw serves a whole `ρ` grid.
#[derive(Debug, Clone)]
pub struct DualPair {
    pub anchors: Arc<PointSet>,
    pub alpha_a: Vec<f64>,
    pub alpha_perp: Vec<f64>,
}

impl DualPair {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, d: usize, p_prime: usize) -> Result<Self> {
        if p_prime == 0 {
            return Err(Error::invalid("p_prime", "need at least one anchor"));
        }
        if d < 2 {
            return Err(Error::invalid("input_dim", "must be at least 2"));
        }
        let anchors = Arc::new(sample_inputs(rng, p_prime, d));
        let scale = (p_prime as f64).sqrt().recip();
        let mut draw = || -> Vec<f64> {
            (0..p_prime)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let alpha_a = draw();
        let alpha_perp = draw();
        Ok(Self {
            anchors,
            alpha_a,
            alpha_perp,
        })
    }

    pub fn target_a(&self) -> TargetFunction {
        TargetFunction {
            anchors: Arc::clone(&self.anchors),
            alpha: self.alpha_a.clone(),
        }
    }

    pub fn target_b(&self, rho: f64) -> TargetFunction {
        let s = (1.0 - rho * rho).max(0.0).sqrt();
        TargetFunction {
            anchors: Arc::clone(&self.anchors),
            alpha: self
                .alpha_a
                .iter()
                .zip(&self.alpha_perp)
                .map(|(a, p)| rho * a + s * p)
                .collect(),
        }
    }
}

/// Inputs and noisy labels of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub x: PointSet,
    pub y: Vec<f64>,
}

impl TaskData {
    pub fn new(x: PointSet, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: x.len(),
                found: y.len(),
            });
        }
        if x.is_empty() {
            return Err(Error::invalid("N", "a task needs at least one sample"));
        }
        x.check_unit_norm(UNIT_NORM_TOL)?;
        Ok(Self { x, y })
    }

    /// Fresh inputs labelled by `target` plus `N(0, σ²)` noise.
    pub fn sample<K: DotProductKernel + ?Sized, R: Rng + ?Sized>(
        rng: &mut R,
        exec: Execution,
        kernel: &K,
        target: &TargetFunction,
        n: usize,
        sigma_sq: f64,
    ) -> Result<Self> {
        let x = sample_inputs(rng, n, target.anchors().dim());
        let sigma = sigma_sq.sqrt();
        let mut y = target.eval(exec, kernel, &x);
        for v in &mut y {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        Self::new(x, y)
    }
}

/// Cholesky factor of `Θ(X) + λI` with the smallest admissible jitter.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdSolver {
    /// Tries `λ = 1e-10·tr/N`, escalating ×10 up to `1e-6·tr/N`.
    pub fn new(gram: &DMatrix<f64>) -> Result<Self> {
        let n = gram.nrows();
        let scale = gram.trace() / n as f64;
        let mut rel = JITTER_BASE;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            let mut g = gram.clone();
            for i in 0..n {
                g[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(g) {
                return Ok(Self { chol, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::Conditioning {
            size: n,
            jitter: JITTER_MAX * scale,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.chol
            .solve(&DVector::from_column_slice(rhs))
            .as_slice()
            .to_vec()
    }
}

/// One fitted stage: `f(x) = Σ_i c_i Θ(x_i · x)`.
#[derive(Debug, Clone)]
pub struct Stage {
    pub points: PointSet,
    pub coef: Vec<f64>,
    pub jitter: f64,
}

/// Sum of fitted stages; the zero function when empty.
#[derive(Debug, Clone)]
pub struct Predictor {
    dim: usize,
    stages: Vec<Stage>,
}

impl Predictor {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            stages: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn push(&mut self, stage: Stage) -> Result<()> {
        if stage.points.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: stage.points.dim(),
            });
        }
        self.stages.push(stage);
        Ok(())
    }

    pub fn eval<K: DotProductKernel + ?Sized>(&self, exec: Execution, kernel: &K, x: &PointSet) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for s in &self.stages {
            let v = eval_duals(exec, kernel, &s.points, &[&s.coef], x).pop().unwrap();
            out.iter_mut().zip(v).for_each(|(o, v)| *o += v);
        }
        out
    }

    /// Scales every stage coefficient by `a`.
    pub fn scaled(mut self, a: f64) -> Self {
        for s in &mut self.stages {
            s.coef.iter_mut().for_each(|c| *c *= a);
        }
        self
    }
}

/// Ridge-less fit of one task with `f₀ ≡ 0`.
pub fn fit_krr<K: DotProductKernel + ?Sized>(exec: Execution, kernel: &K, task: &TaskData) -> Result<Predictor> {
    let mut p = Predictor::zero(task.x.dim());
    p.push(fit_stage(exec, kernel, &task.x, &task.y)?)?;
    Ok(p)
}

fn fit_stage<K: DotProductKernel + ?Sized>(exec: Execution, kernel: &K, x: &PointSet, y: &[f64]) -> Result<Stage> {
    let gram = gram_symmetric(exec, kernel, x)?;
    let solver = SpdSolver::new(&gram)?;
    Ok(Stage {
        points: x.clone(),
        coef: solver.solve(y),
        jitter: solver.jitter(),
    })
}

/// Trains on each task in turn, fitting the residual `y_n - f_{n-1}(X_n)`.
pub fn fit_sequential<K: DotProductKernel + ?Sized>(
    exec: Execution,
    kernel: &K,
    tasks: &[TaskData],
) -> Result<Predictor> {
    let first = tasks.first().ok_or_else(|| Error::invalid("tasks", "need at least one task"))?;
    let mut p = Predictor::zero(first.x.dim());
    for t in tasks {
        let prev = p.eval(exec, kernel, &t.x);
        let resid: Vec<f64> = t.y.iter().zip(&prev).map(|(y, f)| y - f).collect();
        p.push(fit_stage(exec, kernel, &t.x, &resid)?)?;
    }
    Ok(p)
}

/// Solves the lower block-triangular system whose block `(n, m)` is
/// `Θ(X_n, X_m)` for `m ≤ n` and zero above the diagonal, by forward block
/// substitution. Diagonal blocks get the same jitter policy as [`fit_krr`].
pub fn fit_block<K: DotProductKernel + ?Sized>(exec: Execution, kernel: &K, tasks: &[TaskData]) -> Result<Predictor> {
    let first = tasks.first().ok_or_else(|| Error::invalid("tasks", "need at least one task"))?;
    let z = assemble_block_system(exec, kernel, tasks)?;
    let offsets = block_offsets(tasks);
    let y: Vec<f64> = tasks.iter().flat_map(|t| t.y.iter().copied()).collect();
    let mut coef = vec![0.0; y.len()];
    let mut p = Predictor::zero(first.x.dim());
    for (n, t) in tasks.iter().enumerate() {
        let (lo, hi) = (offsets[n], offsets[n + 1]);
        let mut rhs = y[lo..hi].to_vec();
        for (i, r) in rhs.iter_mut().enumerate() {
            for j in 0..lo {
                *r -= z[(lo + i, j)] * coef[j];
            }
        }
        let diag = z.view((lo, lo), (hi - lo, hi - lo)).into_owned();
        let solver = SpdSolver::new(&diag)?;
        let c = solver.solve(&rhs);
        coef[lo..hi].copy_from_slice(&c);
        p.push(Stage {
            points: t.x.clone(),
            coef: c,
            jitter: solver.jitter(),
        })?;
    }
    Ok(p)
}

pub(crate) fn block_offsets(tasks: &[TaskData]) -> Vec<usize> {
    let mut off = vec![0];
    for t in tasks {
        off.push(off.last().unwrap() + t.x.len());
    }
    off
}

/// The full lower block-triangular matrix (no jitter).
pub fn assemble_block_system<K: DotProductKernel + ?Sized>(
    exec: Execution,
    kernel: &K,
    tasks: &[TaskData],
) -> Result<DMatrix<f64>> {
    let dim = tasks.first().map_or(0, |t| t.x.dim());
    for t in tasks {
        if t.x.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: t.x.dim(),
            });
        }
        t.x.check_unit_norm(UNIT_NORM_TOL)?;
    }
    let off = block_offsets(tasks);
    let total = *off.last().unwrap();
    let mut z = DMatrix::zeros(total, total);
    for (n, tn) in tasks.iter().enumerate() {
        for (m, tm) in tasks.iter().enumerate().take(n + 1) {
            let block = cross_gram_unchecked(exec, kernel, &tn.x, &tm.x);
            z.view_mut((off[n], off[m]), (tn.x.len(), tm.x.len())).copy_from(&block);
        }
    }
    Ok(z)
}

/// Pointwise mean `(f_A + f_B)/2`.
pub fn model_average(a: &Predictor, b: &Predictor) -> Result<Predictor> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            found: b.dim,
        });
    }
    let mut out = a.clone().scaled(0.5);
    for s in b.clone().scaled(0.5).stages {
        out.push(s)?;
    }
    Ok(out)
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// `∫ (f̄ - f)²` over the sphere, estimated on `n_test` fresh points.
pub fn estimate_error<K: DotProductKernel + ?Sized, R: Rng + ?Sized>(
    rng: &mut R,
    exec: Execution,
    kernel: &K,
    p: &Predictor,
    target: &TargetFunction,
    n_test: usize,
) -> Result<Estimate> {
    if n_test < 2 {
        return Err(Error::invalid("n_test", "need at least two test points"));
    }
    if p.dim() != target.anchors().dim() {
        return Err(Error::DimensionMismatch {
            expected: target.anchors().dim(),
            found: p.dim(),
        });
    }
    let x = sample_inputs(rng, n_test, p.dim());
    let f = target.eval(exec, kernel, &x);
    let g = p.eval(exec, kernel, &x);
    let sq: Vec<f64> = f.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(Estimate::from_samples(&sq))
}

/// `max_i |f(x_i) - y_i| / max_i |y_i|` on a task's own inputs.
pub fn interpolation_error<K: DotProductKernel + ?Sized>(
    exec: Execution,
    kernel: &K,
    p: &Predictor,
    task: &TaskData,
) -> f64 {
    let f = p.eval(exec, kernel, &task.x);
    let scale = task.y.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let err = f.iter().zip(&task.y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}
