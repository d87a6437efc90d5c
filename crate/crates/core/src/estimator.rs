//! Weighted least squares identification of `Theta = [A B]`.
//!
//! True-system columns carry weight 1 and auxiliary columns at time step `k`
//! carry weight `q_k`. The estimate `X Q Z* (Z Q Z*)^-1` is invariant to a
//! common rescaling of all weights, so every solve divides the weights by
//! their maximum first. This keeps extreme weights such as `q = 1e10`
//! well conditioned.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{min_eig_sym, solve_spd, spectral_norm, weighted_product, Matrix};
use crate::simulate::{observation_matrices, BatchData, ColumnTag, Rollout, Source};

/// Relative ridge added to the Gram matrix when the fallback is enabled.
pub const RIDGE_FACTOR: f64 = 1e-8;

/// Weights applied to auxiliary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSchedule {
    /// `q_k = q` for every step.
    Constant(f64),
    /// `q_k` indexed by time step, `values[k]` for `k = 0..T`.
    PerStep(Vec<f64>),
    /// `q_k = c / sqrt(N_r)`.
    Decaying(f64),
}

impl WeightSchedule {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let values: &[f64] = match self {
            WeightSchedule::Constant(q) | WeightSchedule::Decaying(q) => std::slice::from_ref(q),
            WeightSchedule::PerStep(v) => {
                if v.len() != horizon {
                    return Err(Error::Config(format!(
                        "per-step weights need {horizon} values, got {}",
                        v.len()
                    )));
                }
                v
            }
        };
        if let Some(bad) = values.iter().find(|q| !(**q >= 0.0 && q.is_finite())) {
            return Err(Error::Domain(format!(
                "weights must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(())
    }

    /// Weight of an auxiliary column at step `k` given `true_count` true rollouts.
    pub fn weight(&self, k: usize, true_count: usize) -> f64 {
        match self {
            WeightSchedule::Constant(q) => *q,
            WeightSchedule::PerStep(v) => v[k],
            WeightSchedule::Decaying(c) => {
                if true_count == 0 {
                    *c
                } else {
                    c / (true_count as f64).sqrt()
                }
            }
        }
    }

    pub fn per_step(&self, horizon: usize, true_count: usize) -> Vec<f64> {
        (0..horizon).map(|k| self.weight(k, true_count)).collect()
    }

    /// The constant weight, if the resolved schedule is constant.
    pub fn constant_value(&self, horizon: usize, true_count: usize) -> Option<f64> {
        let v = self.per_step(horizon, true_count);
        v.iter().all(|q| *q == v[0]).then(|| v[0])
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

fn format_weight(q: f64) -> String {
    if q == 0.0 || (1e-3..1e6).contains(&q.abs()) {
        format!("{q}")
    } else {
        format!("{q:e}")
    }
}

/// Short labels such as `q=0.3`, `q=1e10`, `q=1/sqrt(Nr)`.
impl fmt::Display for WeightSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSchedule::Constant(q) => write!(f, "q={}", format_weight(*q)),
            WeightSchedule::PerStep(v) => {
                let parts: Vec<String> = v.iter().map(|q| format_weight(*q)).collect();
                write!(f, "q_k=[{}]", parts.join(";"))
            }
            WeightSchedule::Decaying(c) => write!(f, "q={}/sqrt(Nr)", format_weight(*c)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WlsOptions {
    /// Replace a singular Gram `G` by `G + RIDGE_FACTOR * ||G|| I` instead of failing.
    pub ridge_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub theta: Matrix,
    pub a_hat: Matrix,
    pub b_hat: Matrix,
    /// `Z Q Z*` at the original weight scale.
    pub gram: Matrix,
    pub gram_min_eig: f64,
    pub columns: usize,
    pub ridge_applied: bool,
}

/// Per-column weights for a batch: 1 for true columns, `q_k` otherwise.
pub fn column_weights(tags: &[ColumnTag], true_count: usize, schedule: &WeightSchedule) -> Vec<f64> {
    tags.iter()
        .map(|t| match t.source {
            Source::True => 1.0,
            Source::Auxiliary => schedule.weight(t.k, true_count),
        })
        .collect()
}

/// Normalized weighted Gram plus the factor it was divided by.
struct WeightedSystem {
    gram: Matrix,
    scale: f64,
    ridge_applied: bool,
}

impl WeightedSystem {
    fn build(z: &Matrix, weights: &[f64], options: &WlsOptions) -> Result<Self> {
        if weights.len() != z.cols() {
            return Err(Error::Dimension(format!(
                "{} weights for {} columns",
                weights.len(),
                z.cols()
            )));
        }
        if let Some(bad) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Domain(format!("invalid column weight {bad}")));
        }
        let scale = weights.iter().copied().fold(0.0, f64::max);
        if scale == 0.0 {
            return Err(Error::SingularGram {
                min_eig: 0.0,
                tolerance: 0.0,
                columns: z.cols(),
            });
        }
        let normalized: Vec<f64> = weights.iter().map(|w| w / scale).collect();
        let mut gram = z.gram_weighted(&normalized);
        let mut ridge_applied = false;
        // Probe solvability up front so the error carries the column count.
        match solve_spd(&gram, &Matrix::zeros(gram.rows(), 1)) {
            Ok(_) => {}
            Err(Error::SingularGram { min_eig, tolerance, .. }) if !options.ridge_fallback => {
                return Err(Error::SingularGram {
                    min_eig: min_eig * scale,
                    tolerance: tolerance * scale,
                    columns: z.cols(),
                });
            }
            Err(Error::SingularGram { .. }) => {
                let lambda = RIDGE_FACTOR * spectral_norm(&gram)?.max(f64::MIN_POSITIVE);
                gram.add_scaled(lambda, &Matrix::identity(gram.rows()))?;
                ridge_applied = true;
            }
            Err(e) => return Err(e),
        }
        Ok(Self {
            gram,
            scale,
            ridge_applied,
        })
    }

    /// `lhs Q Z* (Z Q Z*)^-1` using the normalized weights.
    fn apply(&self, lhs: &Matrix, z: &Matrix, weights: &[f64]) -> Result<Matrix> {
        let normalized: Vec<f64> = weights.iter().map(|w| w / self.scale).collect();
        let cross = weighted_product(lhs, z, &normalized);
        Ok(solve_spd(&self.gram, &cross.transpose())?.transpose())
    }
}

/// Weighted least squares on raw regression columns: minimizes
/// `sum_j w_j |x_j - Theta z_j|^2`.
pub fn wls_weighted(x: &Matrix, z: &Matrix, weights: &[f64], options: &WlsOptions) -> Result<Estimate> {
    if x.cols() != z.cols() {
        return Err(Error::Dimension(format!(
            "X has {} columns but Z has {}",
            x.cols(),
            z.cols()
        )));
    }
    if z.rows() < x.rows() {
        return Err(Error::Dimension("Z must have at least as many rows as X".into()));
    }
    let system = WeightedSystem::build(z, weights, options)?;
    let theta = system.apply(x, z, weights)?;
    let n = x.rows();
    let gram = system.gram.scale(system.scale);
    let gram_min_eig = min_eig_sym(&gram)?;
    Ok(Estimate {
        a_hat: theta.columns(0, n),
        b_hat: theta.columns(n, theta.cols() - n),
        theta,
        gram,
        gram_min_eig,
        columns: z.cols(),
        ridge_applied: system.ridge_applied,
    })
}

pub fn wls(batch: &BatchData, schedule: &WeightSchedule) -> Result<Estimate> {
    wls_with(batch, schedule, &WlsOptions::default())
}

pub fn wls_with(batch: &BatchData, schedule: &WeightSchedule, options: &WlsOptions) -> Result<Estimate> {
    schedule.validate(batch.horizon)?;
    let weights = column_weights(&batch.tags, batch.true_count, schedule);
    wls_weighted(&batch.x, &batch.z, &weights, options)
}

/// Estimate from rollouts alone, without knowing either model.
pub fn wls_from_rollouts(
    true_rollouts: &[Rollout],
    aux_rollouts: &[Rollout],
    schedule: &WeightSchedule,
    options: &WlsOptions,
) -> Result<Estimate> {
    let (x, z, tags) = observation_matrices(true_rollouts, aux_rollouts)?;
    let horizon = tags.iter().map(|t| t.k + 1).max().unwrap_or(0);
    schedule.validate(horizon)?;
    let weights = column_weights(&tags, true_rollouts.len(), schedule);
    wls_weighted(&x, &z, &weights, options)
}

/// `sum_j w_j |x_j - Theta z_j|^2`.
pub fn weighted_objective(x: &Matrix, z: &Matrix, weights: &[f64], theta: &Matrix) -> f64 {
    let pred = theta * z;
    (0..x.cols())
        .map(|j| {
            let r: f64 = (0..x.rows()).map(|i| (x.get(i, j) - pred.get(i, j)).powi(2)).sum();
            weights[j] * r
        })
        .sum()
}

/// Spectral norm of the objective gradient `2 (Theta Z Q Z* - X Q Z*)`
/// relative to `||X Q Z*||`.
pub fn normal_equation_residual(x: &Matrix, z: &Matrix, weights: &[f64], theta: &Matrix) -> Result<f64> {
    let cross = weighted_product(x, z, weights);
    let grad = &(theta * &z.gram_weighted(weights)) - &cross;
    Ok(2.0 * spectral_norm(&grad)? / spectral_norm(&cross)?.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone)]
pub struct ErrorDecomposition {
    /// `W Q Z* (Z Q Z*)^-1`
    pub noise_term: Matrix,
    /// `Delta Q Z* (Z Q Z*)^-1`
    pub bias_term: Matrix,
    /// `max |noise + bias - (theta_hat - theta)|`
    pub residual: f64,
}

pub fn error_decomposition(
    batch: &BatchData,
    schedule: &WeightSchedule,
    est: &Estimate,
    true_theta: &Matrix,
) -> Result<ErrorDecomposition> {
    if est.theta.shape() != true_theta.shape() {
        return Err(Error::Dimension("estimate and true Theta differ in shape".into()));
    }
    let weights = column_weights(&batch.tags, batch.true_count, schedule);
    let system = WeightedSystem::build(&batch.z, &weights, &WlsOptions::default())?;
    let noise_term = system.apply(&batch.w, &batch.z, &weights)?;
    let bias_term = system.apply(&batch.delta, &batch.z, &weights)?;
    let measured = &est.theta - true_theta;
    let residual = (&noise_term + &bias_term).max_abs_diff(&measured);
    Ok(ErrorDecomposition {
        noise_term,
        bias_term,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    pub err_theta: f64,
    pub err_a: f64,
    pub err_b: f64,
}

pub fn error_metrics(est: &Estimate, true_theta: &Matrix) -> Result<ErrorMetrics> {
    if est.theta.shape() != true_theta.shape() {
        return Err(Error::Dimension("estimate and true Theta differ in shape".into()));
    }
    let n = est.a_hat.cols();
    let diff = &est.theta - true_theta;
    Ok(ErrorMetrics {
        err_theta: spectral_norm(&diff)?,
        err_a: spectral_norm(&diff.columns(0, n))?,
        err_b: spectral_norm(&diff.columns(n, diff.cols() - n))?,
    })
}

#[derive(Debug, Clone)]
pub struct CvSelection {
    pub chosen: f64,
    /// `(candidate, mean held-out score)` in the order supplied.
    pub scores: Vec<(f64, f64)>,
}

/// Picks a constant auxiliary weight by K-fold cross-validation over true
/// rollouts.
///
/// True rollouts are shuffled with `seed` and dealt round-robin into
/// `folds` folds. Each candidate is fit on every auxiliary rollout plus the
/// training folds and scored by the mean squared one-step prediction error
/// `|x_{k+1} - Theta z_k|^2` over the held-out columns. The lowest mean score
/// wins; ties go to the smaller weight. A candidate whose Gram is singular in
/// some fold scores `inf`.
pub fn select_weight_cv(
    true_rollouts: &[Rollout],
    aux_rollouts: &[Rollout],
    candidates: &[f64],
    folds: usize,
    seed: u64,
) -> Result<CvSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate weights".into()));
    }
    if let Some(bad) = candidates.iter().find(|q| !(**q >= 0.0 && q.is_finite())) {
        return Err(Error::Domain(format!("candidate weight {bad} is invalid")));
    }
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if true_rollouts.len() < folds {
        return Err(Error::Config(format!(
            "{} true rollouts cannot fill {folds} folds",
            true_rollouts.len()
        )));
    }

    let mut order: Vec<usize> = (0..true_rollouts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; true_rollouts.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let splits: Vec<(Vec<Rollout>, Vec<Rollout>)> = (0..folds)
        .map(|f| {
            let (held, train): (Vec<_>, Vec<_>) = true_rollouts.iter().enumerate().partition(|(i, _)| fold_of[*i] == f);
            (
                train.into_iter().map(|(_, r)| r.clone()).collect(),
                held.into_iter().map(|(_, r)| r.clone()).collect(),
            )
        })
        .collect();

    let scores: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|&q| {
            let schedule = WeightSchedule::Constant(q);
            let mut total = 0.0;
            for (train, held) in &splits {
                let fit = match wls_from_rollouts(train, aux_rollouts, &schedule, &WlsOptions::default()) {
                    Ok(est) => est,
                    Err(_) => return Ok((q, f64::INFINITY)),
                };
                let (x, z, _) = observation_matrices(held, &[])?;
                let ones = vec![1.0; x.cols()];
                total += weighted_objective(&x, &z, &ones, &fit.theta) / x.cols() as f64;
            }
            Ok((q, total / folds as f64))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, f64)> = None;
    for &(q, s) in &scores {
        best = match best {
            None => Some((q, s)),
            Some((bq, bs)) if s < bs || (s == bs && q < bq) => Some((q, s)),
            keep => keep,
        };
    }
    let (chosen, score) = best.unwrap();
    if !score.is_finite() {
        return Err(Error::SingularGram {
            min_eig: 0.0,
            tolerance: 0.0,
            columns: 0,
        });
    }
    Ok(CvSelection { chosen, scores })
}
