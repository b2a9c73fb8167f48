//! Monte Carlo building blocks against quantities known in closed form.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqkrr::kernel::{KernelParams, NtkKernel};
use seqkrr::par::Execution;
use seqkrr::quadrature::{build_quadrature, weight_mass};
use seqkrr::sim::{
    assemble_block_system, fit_block, fit_sequential, interpolation_error, sample_inputs, DualPair, TaskData,
};

const EXEC: Execution = Execution::Sequential;

fn kernel(d: usize) -> NtkKernel {
    NtkKernel::new(KernelParams::relu(3, 2.0, 0.0, d)).unwrap()
}

fn tasks(rng: &mut ChaCha8Rng, k: &NtkKernel, d: usize, sizes: &[usize]) -> Vec<TaskData> {
    let dual = DualPair::sample(rng, d, 200).unwrap();
    let target = dual.target_a();
    sizes
        .iter()
        .map(|&n| TaskData::sample(rng, EXEC, k, &target, n, 1e-3).unwrap())
        .collect()
}

#[test]
fn target_coefficients_have_the_requested_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dual = DualPair::sample(&mut rng, 5, 40_000).unwrap();
    for rho in [0.0, 0.3, 0.9] {
        let b = dual.target_b(rho);
        let a = &dual.alpha_a;
        let (sab, saa, sbb) = a.iter().zip(b.alpha()).fold((0.0, 0.0, 0.0), |(x, y, z), (p, q)| {
            (x + p * q, y + p * p, z + q * q)
        });
        let corr = sab / (saa * sbb).sqrt();
        assert!((corr - rho).abs() < 0.02, "rho {rho}: sample correlation {corr}");
        // Var α = 1/P' on both sides.
        assert!((sbb - 1.0).abs() < 0.03, "sum of squares {sbb}");
    }
}

#[test]
fn target_norms_match_the_kernel() {
    // E‖f̄‖²_H = Θ(1) and E f̄(x)² = ∫Θ² dτ / ∫dτ for anchors drawn uniformly.
    let d = 8;
    let k = kernel(d);
    let rule = build_quadrature(d, 200).unwrap();
    let want_sq = rule.integrate(|z| k.eval_checked(z).unwrap().powi(2)) / weight_mass(d);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let draws = 300;
    let (mut norm, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let f = DualPair::sample(&mut rng, d, 60).unwrap().target_a();
        norm += f.rkhs_norm_sq(EXEC, &k) / draws as f64;
        let x = sample_inputs(&mut rng, 50, d);
        sq += f.eval(EXEC, &k, &x).iter().map(|v| v * v).sum::<f64>() / (50 * draws) as f64;
    }
    assert!((norm / 6.0 - 1.0).abs() < 0.05, "mean RKHS norm {norm}");
    assert!((sq / want_sq - 1.0).abs() < 0.08, "mean square {sq}, want {want_sq}");
}

#[test]
fn sequential_fit_solves_the_block_system() {
    // A dense LU of the full block-triangular system is a third route.
    let d = 6;
    let k = kernel(d);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ts = tasks(&mut rng, &k, d, &[12, 7, 20]);
    let z = assemble_block_system(EXEC, &k, &ts).unwrap();
    let y: Vec<f64> = ts.iter().flat_map(|t| t.y.iter().copied()).collect();
    let coef = z.lu().solve(&DVector::from_vec(y)).unwrap();

    let probe = sample_inputs(&mut rng, 40, d);
    let mut lu_pred = vec![0.0; probe.len()];
    let mut off = 0;
    for t in &ts {
        for i in 0..t.x.len() {
            for (j, p) in lu_pred.iter_mut().enumerate() {
                *p += coef[off + i] * k.eval_checked(seqkrr::points::dot(t.x.row(i), probe.row(j))).unwrap();
            }
        }
        off += t.x.len();
    }
    let seq = fit_sequential(EXEC, &k, &ts).unwrap().eval(EXEC, &k, &probe);
    let blk = fit_block(EXEC, &k, &ts).unwrap().eval(EXEC, &k, &probe);
    let scale = lu_pred.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..probe.len() {
        assert!((seq[j] - lu_pred[j]).abs() < 1e-6 * scale, "sequential vs LU at {j}");
        assert!((blk[j] - lu_pred[j]).abs() < 1e-6 * scale, "block vs LU at {j}");
    }
}

#[test]
fn task_order_matters_but_the_last_task_is_interpolated() {
    let d = 6;
    let k = kernel(d);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ts = tasks(&mut rng, &k, d, &[15, 15]);
    let ab = fit_sequential(EXEC, &k, &ts).unwrap();
    let rev: Vec<TaskData> = ts.iter().rev().cloned().collect();
    let ba = fit_sequential(EXEC, &k, &rev).unwrap();
    assert!(interpolation_error(EXEC, &k, &ab, &ts[1]) < 1e-6);
    assert!(interpolation_error(EXEC, &k, &ba, &ts[0]) < 1e-6);
    let probe = sample_inputs(&mut rng, 20, d);
    let (fa, fb) = (ab.eval(EXEC, &k, &probe), ba.eval(EXEC, &k, &probe));
    let gap = fa.iter().zip(&fb).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(gap > 1e-4, "orders agree to {gap}");
}
