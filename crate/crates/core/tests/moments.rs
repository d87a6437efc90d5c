//! Monte-Carlo checks of the analytic step covariances.

use auxid_core::experiments::paper_models;
use auxid_core::simulate::simulate_rollout;
use auxid_core::systems::step_covariance;
use auxid_core::Matrix;
use rayon::prelude::*;

const DIM: usize = 5;

/// Sums of `z_k` and `z_k z_k*` for `k = 0, 1` over the first `count` rollouts of a seed family.
fn moments(
    model: &auxid_core::systems::SystemModel,
    seed: u64,
    count: u64,
) -> (Vec<[f64; DIM]>, Vec<[f64; DIM * DIM]>) {
    let zero = || (vec![[0.0; DIM]; 2], vec![[0.0; DIM * DIM]; 2]);
    (0..count)
        .into_par_iter()
        .fold(zero, |(mut s1, mut s2), i| {
            let r = simulate_rollout(model, seed, i);
            for k in 0..2 {
                let z = r.z(k);
                for a in 0..DIM {
                    s1[k][a] += z[a];
                    for b in 0..DIM {
                        s2[k][a * DIM + b] += z[a] * z[b];
                    }
                }
            }
            (s1, s2)
        })
        .reduce(zero, |(mut a1, mut a2), (b1, b2)| {
            for k in 0..2 {
                for i in 0..DIM {
                    a1[k][i] += b1[k][i];
                }
                for i in 0..DIM * DIM {
                    a2[k][i] += b2[k][i];
                }
            }
            (a1, a2)
        })
}

#[test]
fn empirical_covariance_matches_analytic() {
    let (model, _) = paper_models();
    let n = 1_000_000u64;
    let (s1, s2) = moments(&model, 2024, n);
    let nf = n as f64;
    for k in 0..2 {
        let analytic = step_covariance(&model, k).unwrap();
        let empirical = Matrix::from_fn(DIM, DIM, |a, b| {
            (s2[k][a * DIM + b] - s1[k][a] * s1[k][b] / nf) / (nf - 1.0)
        });
        let diff = empirical.max_abs_diff(&analytic);
        assert!(diff <= 1e-2, "k = {k}: max deviation {diff}");
    }
}

#[test]
fn states_have_zero_mean() {
    let (model, _) = paper_models();
    let n = 100_000u64;
    let (s1, _) = moments(&model, 77, n);
    // Var(x_1) entries are at most about 3, so 5 standard errors is below 0.03.
    for k in 0..2 {
        for (i, v) in s1[k].iter().enumerate() {
            let mean = v / n as f64;
            assert!(mean.abs() < 0.03, "k = {k}, coordinate {i}: mean {mean}");
        }
    }
}

#[test]
fn initial_state_scales_with_its_variance() {
    let (model, _) = paper_models();
    let scaled = model.with_variances(1.0, 1.0, 4.0).unwrap();
    let n = 200_000u64;
    let (_, s2) = moments(&scaled, 5, n);
    for i in 0..3 {
        let var = s2[0][i * DIM + i] / n as f64;
        assert!((var - 4.0).abs() < 0.1, "coordinate {i}: variance {var}");
    }
}
