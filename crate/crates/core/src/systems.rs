//! True and auxiliary system models and their exact state-input covariances.

use crate::error::{Error, Result};
use crate::numerics::{spectral_norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// One `(A, B)` pair used at every step.
    Invariant { a: Matrix, b: Matrix },
    /// Explicit per-step `(A_k, B_k)`.
    Varying { a_seq: Vec<Matrix>, b_seq: Vec<Matrix> },
}

/// `x_{k+1} = A_k x_k + B_k u_k + w_k` with i.i.d. zero-mean Gaussian
/// `u_k ~ N(0, sigma_u2 I)`, `w_k ~ N(0, sigma_w2 I)`, `x_0 ~ N(0, sigma_x2 I)`.
///
/// No stability check is made; unstable models are allowed and can overflow
/// for long horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    dynamics: Dynamics,
    pub sigma_u2: f64,
    pub sigma_w2: f64,
    pub sigma_x2: f64,
    horizon: usize,
}

impl SystemModel {
    pub fn time_invariant(
        a: Matrix,
        b: Matrix,
        sigma_u2: f64,
        sigma_w2: f64,
        sigma_x2: f64,
        horizon: usize,
    ) -> Result<Self> {
        let model = Self {
            dynamics: Dynamics::Invariant { a, b },
            sigma_u2,
            sigma_w2,
            sigma_x2,
            horizon,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn time_varying(
        a_seq: Vec<Matrix>,
        b_seq: Vec<Matrix>,
        sigma_u2: f64,
        sigma_w2: f64,
        sigma_x2: f64,
        horizon: usize,
    ) -> Result<Self> {
        let model = Self {
            dynamics: Dynamics::Varying { a_seq, b_seq },
            sigma_u2,
            sigma_w2,
            sigma_x2,
            horizon,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Domain("horizon must be at least 1".into()));
        }
        if !(self.sigma_u2 > 0.0 && self.sigma_u2.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma_u2 must be positive, got {}",
                self.sigma_u2
            )));
        }
        for (name, v) in [("sigma_w2", self.sigma_w2), ("sigma_x2", self.sigma_x2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let (a_list, b_list): (Vec<&Matrix>, Vec<&Matrix>) = match &self.dynamics {
            Dynamics::Invariant { a, b } => (vec![a], vec![b]),
            Dynamics::Varying { a_seq, b_seq } => {
                if a_seq.len() < self.horizon || b_seq.len() < self.horizon {
                    return Err(Error::Shape(format!(
                        "time-varying model needs at least {} steps, got {} A and {} B",
                        self.horizon,
                        a_seq.len(),
                        b_seq.len()
                    )));
                }
                (a_seq.iter().collect(), b_seq.iter().collect())
            }
        };
        let n = a_list[0].rows();
        let p = b_list[0].cols();
        if n == 0 || p == 0 {
            return Err(Error::Shape("state and input dimensions must be positive".into()));
        }
        if a_list.iter().any(|a| a.shape() != (n, n)) {
            return Err(Error::Shape(format!("every A_k must be {n}x{n}")));
        }
        if b_list.iter().any(|b| b.shape() != (n, p)) {
            return Err(Error::Shape(format!("every B_k must be {n}x{p}")));
        }
        Ok(())
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn is_time_invariant(&self) -> bool {
        matches!(self.dynamics, Dynamics::Invariant { .. })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Same model with a different rollout length.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        let mut m = self.clone();
        m.horizon = horizon;
        m.validate()?;
        Ok(m)
    }

    /// Same dynamics with different variances.
    pub fn with_variances(&self, sigma_u2: f64, sigma_w2: f64, sigma_x2: f64) -> Result<Self> {
        let mut m = self.clone();
        m.sigma_u2 = sigma_u2;
        m.sigma_w2 = sigma_w2;
        m.sigma_x2 = sigma_x2;
        m.validate()?;
        Ok(m)
    }

    pub fn state_dim(&self) -> usize {
        self.a_at(0).rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_at(0).cols()
    }

    /// Number of stored steps, `None` for time-invariant models.
    fn steps(&self) -> Option<usize> {
        match &self.dynamics {
            Dynamics::Invariant { .. } => None,
            Dynamics::Varying { a_seq, .. } => Some(a_seq.len()),
        }
    }

    pub fn a_at(&self, k: usize) -> &Matrix {
        match &self.dynamics {
            Dynamics::Invariant { a, .. } => a,
            Dynamics::Varying { a_seq, .. } => &a_seq[k],
        }
    }

    pub fn b_at(&self, k: usize) -> &Matrix {
        match &self.dynamics {
            Dynamics::Invariant { b, .. } => b,
            Dynamics::Varying { b_seq, .. } => &b_seq[k],
        }
    }

    /// `[A_k B_k]`.
    pub fn theta_at(&self, k: usize) -> Matrix {
        Matrix::hstack(&[self.a_at(k), self.b_at(k)]).expect("A_k and B_k share rows")
    }

    fn check_step(&self, k: usize) -> Result<()> {
        match self.steps() {
            Some(len) if k > len => Err(Error::Index(format!("step {k} beyond the {len} stored steps"))),
            _ => Ok(()),
        }
    }
}

/// Per-step spectral norms of `[A_hat_k - A_bar, B_hat_k - B_bar]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDelta {
    pub per_step: Vec<f64>,
    pub worst: f64,
}

impl ModelDelta {
    pub fn new(per_step: Vec<f64>) -> Self {
        let worst = per_step.iter().copied().fold(0.0, f64::max);
        Self { per_step, worst }
    }

    /// All-zero delta over `horizon` steps.
    pub fn zero(horizon: usize) -> Self {
        Self::new(vec![0.0; horizon])
    }

    pub fn is_constant(&self, tol: f64) -> bool {
        self.per_step
            .iter()
            .all(|d| (d - self.per_step[0]).abs() <= tol * self.worst.max(1.0))
    }
}

/// `Phi(k, l) = A_{k-1} A_{k-2} ... A_l`, the identity when `k == l`.
pub fn transition(model: &SystemModel, k: usize, l: usize) -> Result<Matrix> {
    if k < l {
        return Err(Error::Index(format!("transition({k}, {l}) needs k >= l")));
    }
    model.check_step(k)?;
    let mut phi = Matrix::identity(model.state_dim());
    for j in l..k {
        phi = model.a_at(j) * &phi;
    }
    Ok(phi)
}

/// The input and noise propagation blocks
/// `G_k = [Phi(k-1,1) B_0, Phi(k-1,2) B_1, ..., B_{k-2}]` and
/// `F_k = [Phi(k-1,1), Phi(k-1,2), ..., I]`, so that
/// `x_{k-1} = G_k [u_0; ...; u_{k-2}] + F_k [w_0; ...; w_{k-2}] + Phi(k-1,0) x_0`.
///
/// For `k == 1` both blocks have zero columns.
pub fn gf_matrices(model: &SystemModel, k: usize) -> Result<(Matrix, Matrix)> {
    if k == 0 {
        return Err(Error::Index("G_k and F_k are defined for k >= 1".into()));
    }
    model.check_step(k - 1)?;
    let n = model.state_dim();
    let mut g_blocks = Vec::with_capacity(k - 1);
    let mut f_blocks = Vec::with_capacity(k - 1);
    for j in 0..k - 1 {
        let phi = transition(model, k - 1, j + 1)?;
        g_blocks.push(&phi * model.b_at(j));
        f_blocks.push(phi);
    }
    if g_blocks.is_empty() {
        return Ok((Matrix::zeros(n, 0), Matrix::zeros(n, 0)));
    }
    let g = Matrix::hstack(&g_blocks.iter().collect::<Vec<_>>())?;
    let f = Matrix::hstack(&f_blocks.iter().collect::<Vec<_>>())?;
    Ok((g, f))
}

/// Covariance of `z_k = [x_k; u_k]`:
/// `diag(s_u G_{k+1} G_{k+1}* + s_w F_{k+1} F_{k+1}* + s_x Phi(k,0) Phi(k,0)*, s_u I_p)`.
pub fn step_covariance(model: &SystemModel, k: usize) -> Result<Matrix> {
    let n = model.state_dim();
    let p = model.input_dim();
    let mut top = Matrix::zeros(n, n);
    if k >= 1 {
        let (g, f) = gf_matrices(model, k + 1)?;
        top.add_scaled(model.sigma_u2, &g.gram_rows())?;
        top.add_scaled(model.sigma_w2, &f.gram_rows())?;
    }
    let phi = transition(model, k, 0)?;
    top.add_scaled(model.sigma_x2, &phi.gram_rows())?;
    let bottom = Matrix::identity(p).scale(model.sigma_u2);
    Ok(Matrix::block_diag(&top, &bottom))
}

/// `[step_covariance(model, 0), ..., step_covariance(model, T-1)]`.
pub fn step_covariances(model: &SystemModel) -> Result<Vec<Matrix>> {
    (0..model.horizon()).map(|k| step_covariance(model, k)).collect()
}

pub fn delta_norms(true_model: &SystemModel, aux_model: &SystemModel) -> Result<ModelDelta> {
    if true_model.state_dim() != aux_model.state_dim() || true_model.input_dim() != aux_model.input_dim() {
        return Err(Error::Shape(format!(
            "true system is (n={}, p={}) but auxiliary is (n={}, p={})",
            true_model.state_dim(),
            true_model.input_dim(),
            aux_model.state_dim(),
            aux_model.input_dim()
        )));
    }
    if true_model.horizon() != aux_model.horizon() {
        return Err(Error::Shape(format!(
            "horizons differ: {} vs {}",
            true_model.horizon(),
            aux_model.horizon()
        )));
    }
    let per_step = (0..true_model.horizon())
        .map(|k| spectral_norm(&(&aux_model.theta_at(k) - &true_model.theta_at(k))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelDelta::new(per_step))
}
