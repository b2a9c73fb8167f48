//! The analytic kernel against the gradient inner product of wide random
//! ReLU networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use seqkrr::kernel::{ntk_eval, KernelParams};

const WIDTH: usize = 4096;
const INITS: u64 = 10;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Row `j` of a hidden weight matrix, regenerated on demand so the full
/// `M × M` matrix never has to be stored.
fn hidden_row(seed: u64, j: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((j as u64 + 1) << 20));
    out.iter_mut().for_each(|w| *w = rng.sample(StandardNormal));
}

/// `⟨∇f(x₀), ∇f(x)⟩` for each `x` in `xs`, for a depth-3 network
/// `u¹ = σ_w W¹x + σ_b b¹`, `u^{l+1} = σ_w/√M W φ(u^l) + σ_b b`, all entries
/// standard normal.
fn empirical_ntk(p: &KernelParams, seed: u64, xs: &[Vec<f64>]) -> Vec<f64> {
    assert_eq!(p.depth, 3);
    let (sw, sb) = (p.sigma_w_sq.sqrt(), p.sigma_b_sq.sqrt());
    let m = WIDTH;
    let d = xs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let w1 = normals(m * d);
    let b1 = normals(m);
    let b2 = normals(m);
    let w3 = normals(m);
    let hidden_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);

    let u1: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            (0..m)
                .map(|j| sw * (0..d).map(|i| w1[j * d + i] * x[i]).sum::<f64>() + sb * b1[j])
                .collect()
        })
        .collect();
    let phi1: Vec<Vec<f64>> = u1.iter().map(|u| u.iter().map(|&v| relu(v)).collect()).collect();
    let scale = sw / (m as f64).sqrt();
    let mut u2 = vec![vec![0.0; m]; xs.len()];
    let mut row = vec![0.0; m];
    for j in 0..m {
        hidden_row(hidden_seed, j, &mut row);
        for (u, ph) in u2.iter_mut().zip(&phi1) {
            u[j] = scale * row.iter().zip(ph).map(|(w, v)| w * v).sum::<f64>() + sb * b2[j];
        }
    }
    let delta2: Vec<Vec<f64>> = u2
        .iter()
        .map(|u| (0..m).map(|j| scale * w3[j] * step(u[j])).collect())
        .collect();
    // δ¹ = (σ_w/√M W²ᵀ δ²) ⊙ φ'(u¹), accumulated row by row.
    let mut back = vec![vec![0.0; m]; xs.len()];
    for j in 0..m {
        hidden_row(hidden_seed, j, &mut row);
        for (b, d2) in back.iter_mut().zip(&delta2) {
            let c = scale * d2[j];
            b.iter_mut().zip(&row).for_each(|(b, w)| *b += c * w);
        }
    }
    let delta1: Vec<Vec<f64>> = back
        .iter()
        .zip(&u1)
        .map(|(b, u)| b.iter().zip(u).map(|(b, u)| b * step(*u)).collect())
        .collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let phi2: Vec<Vec<f64>> = u2.iter().map(|u| u.iter().map(|&v| relu(v)).collect()).collect();
    (0..xs.len())
        .map(|t| {
            let z = dot(&xs[0], &xs[t]);
            let s1 = p.sigma_w_sq * z + p.sigma_b_sq;
            let s2 = p.sigma_w_sq / m as f64 * dot(&phi1[0], &phi1[t]) + p.sigma_b_sq;
            let s3 = p.sigma_w_sq / m as f64 * dot(&phi2[0], &phi2[t]) + p.sigma_b_sq;
            s3 + dot(&delta2[0], &delta2[t]) * s2 + dot(&delta1[0], &delta1[t]) * s1
        })
        .collect()
}

#[test]
fn wide_networks_reproduce_the_kernel() {
    let zs = [1.0, 0.9, 0.5, 0.0, -0.5, -0.9];
    let xs: Vec<Vec<f64>> = zs
        .iter()
        .map(|&z: &f64| vec![z, (1.0 - z * z).max(0.0).sqrt(), 0.0])
        .collect();
    for p in [KernelParams::relu(3, 2.0, 0.0, 3), KernelParams::relu(3, 1.5, 0.2, 3)] {
        let mut mean = vec![0.0; zs.len()];
        for seed in 0..INITS {
            for (m, v) in mean.iter_mut().zip(empirical_ntk(&p, seed + 1, &xs)) {
                *m += v / INITS as f64;
            }
        }
        let scale = ntk_eval(&p, 1.0).unwrap();
        for (z, got) in zs.iter().zip(&mean) {
            let want = ntk_eval(&p, *z).unwrap();
            // Relative to Θ(1): near z = -1 the kernel itself is small.
            assert!(
                (got - want).abs() < 0.05 * scale,
                "sigma_w^2={} z={z}: empirical {got}, analytic {want}",
                p.sigma_w_sq
            );
        }
    }
}
