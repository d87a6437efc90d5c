//! Finite-sample error bounds for the weighted estimator.
//!
//! All logarithms are natural. `||Sigma^{1/2}||` is evaluated as
//! `sqrt(||Sigma||)`, which is the same number for a PSD matrix.

use crate::error::{Error, Result};
use crate::estimator::WeightSchedule;
use crate::numerics::{min_eig_sym, spectral_norm, weighted_product, Matrix};
use crate::simulate::{BatchData, Source};
use crate::systems::{delta_norms, step_covariances, ModelDelta, SystemModel};

/// Rollout-count thresholds `(N_0, N_1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub n0: f64,
    pub n1: f64,
}

impl Thresholds {
    pub fn required(&self) -> f64 {
        self.n0.max(self.n1)
    }

    pub fn met_by(&self, true_count: usize, aux_count: usize) -> bool {
        true_count.min(aux_count) as f64 >= self.required()
    }
}

/// `N_0 = 8(n+p) + 16 ln(2T/delta)`, `N_1 = (4n+2p) ln(T/delta)`.
pub fn thresholds(n: usize, p: usize, horizon: usize, delta: f64) -> Result<Thresholds> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if horizon == 0 {
        return Err(Error::Domain("horizon must be at least 1".into()));
    }
    let (n, p, t) = (n as f64, p as f64, horizon as f64);
    Ok(Thresholds {
        n0: 8.0 * (n + p) + 16.0 * (2.0 * t / delta).ln(),
        n1: (4.0 * n + 2.0 * p) * (t / delta).ln(),
    })
}

/// Everything the bounds depend on.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    pub n: usize,
    pub p: usize,
    pub horizon: usize,
    pub true_count: usize,
    pub aux_count: usize,
    /// Failure-probability parameter; the bound holds with probability `1 - 4 delta`.
    pub delta: f64,
    pub sigma_wbar: f64,
    pub sigma_what: f64,
    pub weights: WeightSchedule,
    pub true_covs: Vec<Matrix>,
    pub aux_covs: Vec<Matrix>,
    pub delta_norms: ModelDelta,
}

impl BoundInputs {
    /// Derives covariances, noise levels and model deltas from the two models.
    pub fn from_models(
        true_model: &SystemModel,
        aux_model: &SystemModel,
        true_count: usize,
        aux_count: usize,
        delta: f64,
        weights: WeightSchedule,
    ) -> Result<Self> {
        let inputs = Self {
            n: true_model.state_dim(),
            p: true_model.input_dim(),
            horizon: true_model.horizon(),
            true_count,
            aux_count,
            delta,
            sigma_wbar: true_model.sigma_w2.sqrt(),
            sigma_what: aux_model.sigma_w2.sqrt(),
            weights,
            true_covs: step_covariances(true_model)?,
            aux_covs: step_covariances(aux_model)?,
            delta_norms: delta_norms(true_model, aux_model)?,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 0.25) {
            return Err(Error::Domain(format!(
                "delta must lie in (0, 0.25) so that 1 - 4 delta > 0, got {}",
                self.delta
            )));
        }
        if self.true_count == 0 {
            return Err(Error::Config("at least one true rollout is required".into()));
        }
        if !(self.sigma_wbar >= 0.0 && self.sigma_what >= 0.0) {
            return Err(Error::Domain("noise standard deviations must be nonnegative".into()));
        }
        let d = self.n + self.p;
        for (name, covs) in [("true", &self.true_covs), ("auxiliary", &self.aux_covs)] {
            if covs.len() != self.horizon {
                return Err(Error::Shape(format!(
                    "{name} covariance list has {} entries, expected {}",
                    covs.len(),
                    self.horizon
                )));
            }
            for c in covs.iter() {
                if c.shape() != (d, d) {
                    return Err(Error::Shape(format!("{name} covariance must be {d}x{d}")));
                }
                if min_eig_sym(c)? < -1e-12 * c.max_abs().max(1.0) {
                    return Err(Error::Domain(format!("{name} covariance is not PSD")));
                }
            }
        }
        if self.delta_norms.per_step.len() != self.horizon {
            return Err(Error::Shape("model delta list must have one entry per step".into()));
        }
        self.weights.validate(self.horizon)
    }

    /// Resolved `q_0 .. q_{T-1}`.
    pub fn q(&self) -> Vec<f64> {
        self.weights.per_step(self.horizon, self.true_count)
    }

    /// `(2n+p) ln(9T/delta)`, the dimension-log factor shared by the noise bounds.
    fn noise_log_factor(&self) -> f64 {
        (2 * self.n + self.p) as f64 * (9.0 * self.horizon as f64 / self.delta).ln()
    }

    /// `c_0 = 16 sqrt((2n+p) ln(9T/delta))`.
    pub fn c0(&self) -> f64 {
        16.0 * self.noise_log_factor().sqrt()
    }

    fn thresholds(&self) -> Result<Thresholds> {
        thresholds(self.n, self.p, self.horizon, self.delta)
    }
}

fn sqrt_norm(m: &Matrix) -> Result<f64> {
    Ok(spectral_norm(m)?.sqrt())
}

fn weighted_sum(mats: &[Matrix], coeffs: &[f64]) -> Result<Matrix> {
    let mut out = Matrix::zeros(mats[0].rows(), mats[0].cols());
    for (m, c) in mats.iter().zip(coeffs) {
        out.add_scaled(*c, m)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub noise_term: f64,
    pub bias_term: f64,
    pub total: f64,
    /// `1 - 4 delta`
    pub confidence: f64,
    pub thresholds: Thresholds,
    /// `min(N_r, N_p) >= max(N_0, N_1)`; the bound is only guaranteed when set.
    pub thresholds_met: bool,
}

/// Bound on `max(||A_hat - A||, ||B_hat - B||)` for per-step weights.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<BoundResult> {
    inputs.validate()?;
    let q = inputs.q();
    let (nr, np) = (inputs.true_count as f64, inputs.aux_count as f64);

    let mut denom_mat = weighted_sum(&inputs.true_covs, &vec![nr; inputs.horizon])?;
    for (c, qk) in inputs.aux_covs.iter().zip(&q) {
        denom_mat.add_scaled(np * qk, c)?;
    }
    let denom = min_eig_sym(&denom_mat)?;

    let mut true_sum = 0.0;
    for c in &inputs.true_covs {
        true_sum += sqrt_norm(c)?;
    }
    let mut aux_sum = 0.0;
    let mut bias_sum = 0.0;
    for ((c, qk), dk) in inputs.aux_covs.iter().zip(&q).zip(&inputs.delta_norms.per_step) {
        aux_sum += qk * sqrt_norm(c)?;
        bias_sum += qk * dk * spectral_norm(c)?;
    }

    let noise_term =
        inputs.c0() * (nr.sqrt() * inputs.sigma_wbar * true_sum + np.sqrt() * inputs.sigma_what * aux_sum) / denom;
    let bias_term = 9.0 * np * bias_sum / denom;
    finish(inputs, noise_term, bias_term)
}

fn finish(inputs: &BoundInputs, noise_term: f64, bias_term: f64) -> Result<BoundResult> {
    let thresholds = inputs.thresholds()?;
    Ok(BoundResult {
        noise_term,
        bias_term,
        total: noise_term + bias_term,
        confidence: 1.0 - 4.0 * inputs.delta,
        thresholds_met: thresholds.met_by(inputs.true_count, inputs.aux_count),
        thresholds,
    })
}

/// Constants of the constant-weight bound.
#[derive(Debug, Clone)]
pub struct CorollaryConstants {
    pub q: f64,
    pub delta_theta: f64,
    pub c0: f64,
    /// `9 sum ||Sigma_hat_k||`
    pub c1: f64,
    /// `sum ||Sigma_bar_k^{1/2}||`
    pub c2: f64,
    /// `sum ||Sigma_hat_k^{1/2}||`
    pub c3: f64,
    /// `sum Sigma_bar_k`
    pub m1: Matrix,
    /// `sum Sigma_hat_k`
    pub m2: Matrix,
}

impl CorollaryConstants {
    pub fn from_inputs(inputs: &BoundInputs) -> Result<Self> {
        inputs.validate()?;
        let q = inputs
            .weights
            .constant_value(inputs.horizon, inputs.true_count)
            .ok_or_else(|| Error::Config("constant-weight bound needs q_k = q for all k".into()))?;
        if !inputs.delta_norms.is_constant(1e-12) {
            return Err(Error::Config(
                "constant-weight bound needs a time-invariant model difference".into(),
            ));
        }
        let ones = vec![1.0; inputs.horizon];
        let mut c1 = 0.0;
        let mut c3 = 0.0;
        for c in &inputs.aux_covs {
            c1 += spectral_norm(c)?;
            c3 += sqrt_norm(c)?;
        }
        let mut c2 = 0.0;
        for c in &inputs.true_covs {
            c2 += sqrt_norm(c)?;
        }
        Ok(Self {
            q,
            delta_theta: inputs.delta_norms.per_step[0],
            c0: inputs.c0(),
            c1: 9.0 * c1,
            c2,
            c3,
            m1: weighted_sum(&inputs.true_covs, &ones)?,
            m2: weighted_sum(&inputs.aux_covs, &ones)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CorollaryBound {
    pub result: BoundResult,
    pub constants: CorollaryConstants,
}

/// The constant-weight, time-invariant-difference form of the bound.
pub fn corollary1_bound(inputs: &BoundInputs) -> Result<CorollaryBound> {
    let k = CorollaryConstants::from_inputs(inputs)?;
    let (nr, np) = (inputs.true_count as f64, inputs.aux_count as f64);
    let mut denom_mat = k.m1.scale(nr);
    denom_mat.add_scaled(k.q * np, &k.m2)?;
    let denom = min_eig_sym(&denom_mat)?;
    let noise_term = k.c0 * (nr.sqrt() * inputs.sigma_wbar * k.c2 + k.q * np.sqrt() * inputs.sigma_what * k.c3) / denom;
    let bias_term = k.q * k.delta_theta * np * k.c1 / denom;
    Ok(CorollaryBound {
        result: finish(inputs, noise_term, bias_term)?,
        constants: k,
    })
}

/// Sufficient condition under which a nonzero constant weight tightens the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenefitCondition {
    pub holds: bool,
    /// `sigma_wbar c_2 / (sqrt(N_r) lambda_min(M_1))`
    pub lhs: f64,
    /// `sigma_what c_3 / (sqrt(N_p) lambda_min(M_2)) + ||delta_Theta|| c_1 / (lambda_min(M_2) c_0)`
    pub rhs: f64,
}

pub fn aux_benefit_condition(inputs: &BoundInputs) -> Result<BenefitCondition> {
    let k = CorollaryConstants::from_inputs(inputs)?;
    let (nr, np) = (inputs.true_count as f64, inputs.aux_count as f64);
    let l1 = min_eig_sym(&k.m1)?;
    let l2 = min_eig_sym(&k.m2)?;
    let lhs = inputs.sigma_wbar * k.c2 / (nr.sqrt() * l1);
    let rhs = inputs.sigma_what * k.c3 / (np.sqrt() * l2) + k.delta_theta * k.c1 / (l2 * k.c0);
    Ok(BenefitCondition {
        holds: lhs > rhs,
        lhs,
        rhs,
    })
}

/// A norm inequality `empirical <= bound`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCheck {
    pub empirical: f64,
    pub bound: f64,
    pub holds: bool,
}

impl NormCheck {
    fn new(empirical: f64, bound: f64) -> Self {
        Self {
            empirical,
            bound,
            holds: empirical <= bound * (1.0 + 1e-12),
        }
    }
}

/// A Loewner-order inequality `gram >= bound_matrix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoewnerCheck {
    pub gram_min_eig: f64,
    pub bound_min_eig: f64,
    /// `lambda_min(gram - bound_matrix)`
    pub margin: f64,
    pub holds: bool,
}

impl LoewnerCheck {
    fn new(gram: &Matrix, bound: &Matrix) -> Result<Self> {
        let margin = min_eig_sym(&(gram - bound))?;
        let tol = 1e-12 * spectral_norm(gram)?.max(spectral_norm(bound)?);
        Ok(Self {
            gram_min_eig: min_eig_sym(gram)?,
            bound_min_eig: min_eig_sym(bound)?,
            margin,
            holds: margin >= -tol,
        })
    }
}

/// Empirical sides and bound sides of the four concentration statements.
#[derive(Debug, Clone)]
pub struct PropositionTerms {
    /// `Z_hat Q_hat Z_hat* >= (N_p/4) sum q_k Sigma_hat_k`
    pub aux_gram: LoewnerCheck,
    /// `||Delta Q Z*|| <= (9 N_p/4) sum q_k ||delta_k|| ||Sigma_hat_k||`
    pub bias_cross: NormCheck,
    /// `Z_bar Z_bar* >= (N_r/4) sum Sigma_bar_k`
    pub true_gram: LoewnerCheck,
    /// `||W_hat Q_hat Z_hat*|| <= 4 sigma_what sqrt(N_p (2n+p) ln(9T/delta)) sum q_k ||Sigma_hat_k^{1/2}||`
    pub aux_noise_cross: NormCheck,
    /// `||W_bar Z_bar*|| <= 4 sigma_wbar sqrt(N_r (2n+p) ln(9T/delta)) sum ||Sigma_bar_k^{1/2}||`
    pub true_noise_cross: NormCheck,
}

impl PropositionTerms {
    pub fn all_hold(&self) -> bool {
        self.aux_gram.holds
            && self.bias_cross.holds
            && self.true_gram.holds
            && self.aux_noise_cross.holds
            && self.true_noise_cross.holds
    }
}

/// Evaluates both sides of each concentration statement on one batch.
pub fn proposition_terms(batch: &BatchData, inputs: &BoundInputs) -> Result<PropositionTerms> {
    inputs.validate()?;
    if batch.true_count != inputs.true_count || batch.aux_count != inputs.aux_count {
        return Err(Error::Config(format!(
            "batch has ({}, {}) rollouts but bound inputs say ({}, {})",
            batch.true_count, batch.aux_count, inputs.true_count, inputs.aux_count
        )));
    }
    if batch.horizon != inputs.horizon {
        return Err(Error::Shape("batch and bound inputs differ in horizon".into()));
    }
    let q = inputs.q();
    let (nr, np) = (inputs.true_count as f64, inputs.aux_count as f64);
    let true_w: Vec<f64> = batch
        .tags
        .iter()
        .map(|t| if t.source == Source::True { 1.0 } else { 0.0 })
        .collect();
    let aux_w: Vec<f64> = batch
        .tags
        .iter()
        .map(|t| if t.source == Source::Auxiliary { q[t.k] } else { 0.0 })
        .collect();
    let all_w: Vec<f64> = true_w.iter().zip(&aux_w).map(|(a, b)| a + b).collect();

    let aux_gram = batch.z.gram_weighted(&aux_w);
    let aux_bound = weighted_sum(&inputs.aux_covs, &q.iter().map(|qk| qk * np / 4.0).collect::<Vec<_>>())?;
    let true_gram = batch.z.gram_weighted(&true_w);
    let true_bound = weighted_sum(&inputs.true_covs, &vec![nr / 4.0; inputs.horizon])?;

    let mut bias_bound = 0.0;
    let mut aux_root = 0.0;
    for ((c, qk), dk) in inputs.aux_covs.iter().zip(&q).zip(&inputs.delta_norms.per_step) {
        bias_bound += qk * dk * spectral_norm(c)?;
        aux_root += qk * sqrt_norm(c)?;
    }
    let mut true_root = 0.0;
    for c in &inputs.true_covs {
        true_root += sqrt_norm(c)?;
    }
    let log_factor = inputs.noise_log_factor();

    Ok(PropositionTerms {
        aux_gram: LoewnerCheck::new(&aux_gram, &aux_bound)?,
        bias_cross: NormCheck::new(
            spectral_norm(&weighted_product(&batch.delta, &batch.z, &all_w))?,
            9.0 * np / 4.0 * bias_bound,
        ),
        true_gram: LoewnerCheck::new(&true_gram, &true_bound)?,
        aux_noise_cross: NormCheck::new(
            spectral_norm(&weighted_product(&batch.w, &batch.z, &aux_w))?,
            4.0 * inputs.sigma_what * (np * log_factor).sqrt() * aux_root,
        ),
        true_noise_cross: NormCheck::new(
            spectral_norm(&weighted_product(&batch.w, &batch.z, &true_w))?,
            4.0 * inputs.sigma_wbar * (nr * log_factor).sqrt() * true_root,
        ),
    })
}

/// Two-sided bounds `(lower, upper)` on `sqrt(lambda_min)` and
/// `sqrt(lambda_max)` of `sum_i u_i u_i*` for `samples` i.i.d. standard
/// Gaussian vectors in dimension `dim`, at confidence `1 - delta`.
pub fn wishart_sqrt_eig_bounds(samples: usize, dim: usize, delta: f64) -> (f64, f64) {
    let slack = (dim as f64).sqrt() + (2.0 * (2.0 / delta).ln()).sqrt();
    let root = (samples as f64).sqrt();
    (root - slack, root + slack)
}

/// Bound on `||sum_i f_i g_i*||` for independent `f_i ~ N(0, Sigma_f)` in
/// dimension `m` and `g_i ~ N(0, Sigma_g)` in dimension `n`, at confidence
/// `1 - delta`. Requires `samples >= 2 (n+m) ln(1/delta)`.
pub fn gaussian_product_norm_bound(
    samples: usize,
    m: usize,
    n: usize,
    sigma_f_norm: f64,
    sigma_g_norm: f64,
    delta: f64,
) -> f64 {
    4.0 * sigma_f_norm.sqrt() * sigma_g_norm.sqrt() * (samples as f64 * (m + n) as f64 * (9.0 / delta).ln()).sqrt()
}
