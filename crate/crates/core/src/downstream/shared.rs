//! Ridge regression, elliptical bonuses and feature-quality measurements
//! shared by the downstream learners.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, inverse_norm_with, min_eigenvalue, spd_solve};
use crate::mdp::{argmax_lowest, tv_unchecked, DeterministicPolicy, FeatureTable, TabularLowRankMdp, ValueTable};

/// `lambda_d I + sum phi phi^T`, grown one sample at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeState {
    lambda_d: f64,
    matrix: DMatrix<f64>,
    count: usize,
}

impl RidgeState {
    pub fn new(dim: usize, lambda_d: f64) -> Result<Self> {
        if !(lambda_d > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_d must be positive, got {lambda_d}")));
        }
        Ok(Self {
            lambda_d,
            matrix: DMatrix::identity(dim, dim) * lambda_d,
            count: 0,
        })
    }

    pub fn batch<'a>(dim: usize, lambda_d: f64, phis: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut state = Self::new(dim, lambda_d)?;
        for f in phis {
            state.add(f);
        }
        Ok(state)
    }

    pub fn add(&mut self, phi: &[f64]) {
        self.add_weighted(phi, 1);
    }

    /// Adds `count` copies of `phi phi^T`.
    pub fn add_weighted(&mut self, phi: &[f64], count: usize) {
        if count == 0 {
            return;
        }
        let c = count as f64;
        let d = self.matrix.nrows();
        for i in 0..d {
            for j in 0..d {
                self.matrix[(i, j)] += c * phi[i] * phi[j];
            }
        }
        self.count += count;
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn count(&self) -> usize {
        self.count
    }
    pub fn lambda_d(&self) -> f64 {
        self.lambda_d
    }
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn factor(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        cholesky(&self.matrix)
    }
}

/// `w = Lambda^{-1} sum phi y` with `Lambda = lambda_d I + sum phi phi^T`.
pub fn ridge_weights(phis: &[&[f64]], targets: &[f64], lambda_d: f64) -> Result<Vec<f64>> {
    if phis.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} features but {} targets",
            phis.len(),
            targets.len()
        )));
    }
    let Some(first) = phis.first() else {
        return Ok(Vec::new());
    };
    let d = first.len();
    let state = RidgeState::batch(d, lambda_d, phis.iter().copied())?;
    let mut rhs = DVector::<f64>::zeros(d);
    for (f, y) in phis.iter().zip(targets) {
        for i in 0..d {
            rhs[i] += f[i] * y;
        }
    }
    Ok(spd_solve(state.matrix(), &rhs)?.iter().copied().collect())
}

/// `sqrt(phi^T Lambda^{-1} phi)`.
pub fn bonus(phi: &[f64], state: &RidgeState) -> Result<f64> {
    Ok(inverse_norm_with(&state.factor()?, phi))
}

/// Per-step tallies of `(s, a, s')` and observed rewards. The downstream
/// backward passes only ever need these sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCounts {
    num_states: usize,
    num_actions: usize,
    sa: Vec<usize>,
    sas: Vec<usize>,
    reward_sum: Vec<f64>,
}

impl StepCounts {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            sa: vec![0; num_states * num_actions],
            sas: vec![0; num_states * num_actions * num_states],
            reward_sum: vec![0.0; num_states * num_actions],
        }
    }

    pub fn push(&mut self, s: usize, a: usize, reward: f64, s_next: usize) {
        let i = s * self.num_actions + a;
        self.sa[i] += 1;
        self.sas[i * self.num_states + s_next] += 1;
        self.reward_sum[i] += reward;
    }

    pub fn visits(&self, s: usize, a: usize) -> usize {
        self.sa[s * self.num_actions + a]
    }

    pub fn total(&self) -> usize {
        self.sa.iter().sum()
    }

    /// `sum_tau phi(s_tau, a_tau) [r_tau + v(s'_tau)]`; rewards are included
    /// only when `with_rewards` is set.
    pub fn regression_rhs(&self, phi: &FeatureTable, h: usize, v_next: &[f64], with_rewards: bool) -> DVector<f64> {
        let d = phi.dim();
        let mut rhs = DVector::<f64>::zeros(d);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let i = s * self.num_actions + a;
                if self.sa[i] == 0 {
                    continue;
                }
                let row = &self.sas[i * self.num_states..(i + 1) * self.num_states];
                let mut y: f64 = row.iter().zip(v_next).map(|(&c, v)| c as f64 * v).sum();
                if with_rewards {
                    y += self.reward_sum[i];
                }
                for (k, f) in phi.get(h, s, a).iter().enumerate() {
                    rhs[k] += f * y;
                }
            }
        }
        rhs
    }

    /// Covariance `lambda_d I + sum phi phi^T` over the tallied pairs.
    pub fn ridge_state(&self, phi: &FeatureTable, h: usize, lambda_d: f64) -> Result<RidgeState> {
        let mut state = RidgeState::new(phi.dim(), lambda_d)?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                state.add_weighted(phi.get(h, s, a), self.visits(s, a));
            }
        }
        Ok(state)
    }
}

/// What a backward-pass rule sees at one `(h, s, a)`.
#[derive(Debug, Clone, Copy)]
pub struct BackupInput {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    /// `phi_hat_h(s,a)^T w_hat_h`.
    pub linear: f64,
    /// `||phi_hat_h(s,a)||_{Lambda_h^{-1}}`.
    pub norm: f64,
}

/// Least-squares value iteration on tallied data: at each step, regress
/// `[r +] V_{h+1}(s')` on features, hand the fit and the elliptical norm to
/// `rule`, and act greedily (lowest action on ties).
pub fn linear_backward_pass(
    phi: &FeatureTable,
    counts: &[StepCounts],
    lambda_d: f64,
    with_rewards: bool,
    mut rule: impl FnMut(BackupInput) -> f64,
) -> Result<(DeterministicPolicy, ValueTable)> {
    let (hn, sn, kn) = (phi.horizon(), phi.num_states(), phi.num_actions());
    if counts.len() != hn {
        return Err(Error::DimensionMismatch(format!("{} step tallies for horizon {hn}", counts.len())));
    }
    let mut v = vec![0.0; (hn + 1) * sn];
    let mut q = vec![0.0; hn * sn * kn];
    let mut actions = vec![0usize; hn * sn];
    for h in (0..hn).rev() {
        let state = counts[h].ridge_state(phi, h, lambda_d)?;
        let chol = state.factor()?;
        let rhs = counts[h].regression_rhs(phi, h, &v[(h + 1) * sn..(h + 2) * sn], with_rewards);
        let w = chol.solve(&rhs);
        for s in 0..sn {
            for a in 0..kn {
                let f = phi.get(h, s, a);
                let linear: f64 = f.iter().zip(w.iter()).map(|(x, y)| x * y).sum();
                let norm = inverse_norm_with(&chol, f);
                q[(h * sn + s) * kn + a] = rule(BackupInput { h, s, a, linear, norm });
            }
            let (best, value) = argmax_lowest((0..kn).map(|a| q[(h * sn + s) * kn + a]));
            actions[h * sn + s] = best;
            v[h * sn + s] = value;
        }
    }
    Ok((
        DeterministicPolicy::new(hn, sn, kn, actions)?,
        ValueTable::from_parts(hn, sn, kn, v, q)?,
    ))
}

/// Inputs of the downstream misspecification level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct XiDownParams {
    pub xi: f64,
    pub c_l: f64,
    pub c_r: f64,
    pub nu: f64,
    pub kappa: f64,
    pub num_tasks: usize,
    pub n: usize,
    pub log_cardinality: f64,
    pub horizon: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XiDown {
    pub value: f64,
    /// The sampling term without `xi`.
    pub estimation_term: f64,
    pub params: XiDownParams,
}

/// `xi + (C_L C_R nu / kappa) sqrt(2T log(2 |Phi||Psi|^T n H / delta) / n)`.
pub fn xi_down(params: XiDownParams) -> Result<XiDown> {
    if params.kappa <= 0.0 {
        return Err(Error::ReachabilityViolated);
    }
    if params.n == 0 || !(params.delta > 0.0 && params.delta < 1.0) {
        return Err(Error::InvalidArgument("xi_down needs n >= 1 and delta in (0,1)".into()));
    }
    let n = params.n as f64;
    let log_term = std::f64::consts::LN_2 + params.log_cardinality + n.ln() + (params.horizon as f64).ln()
        - params.delta.ln();
    let estimation_term =
        params.c_l * params.c_r * params.nu / params.kappa * (2.0 * params.num_tasks as f64 * log_term / n).sqrt();
    Ok(XiDown {
        value: params.xi + estimation_term,
        estimation_term,
        params,
    })
}

/// Least-squares reconstruction error of a target MDP from given features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureError {
    pub per_step: Vec<f64>,
    /// Steps where the normal equations needed the 1e-8 ridge.
    pub regularized_steps: Vec<usize>,
}

impl FeatureError {
    pub fn max(&self) -> f64 {
        self.per_step.iter().cloned().fold(0.0, f64::max)
    }
}

const FEATURE_RIDGE: f64 = 1e-8;

/// Fits `mu_hat_h` by least squares of the target rows on `phi_hat_h(s,a)`
/// and reports `max_{s,a} TV(P_h(.|s,a), <phi_hat, mu_hat>)` per step.
pub fn approx_feature_error(phi_hat: &FeatureTable, target: &TabularLowRankMdp) -> Result<FeatureError> {
    let (hn, sn, kn, d) = (target.horizon(), target.num_states(), target.num_actions(), phi_hat.dim());
    if phi_hat.horizon() != hn || phi_hat.num_states() != sn || phi_hat.num_actions() != kn {
        return Err(Error::DimensionMismatch("features do not match the target MDP".into()));
    }
    let mut per_step = Vec::with_capacity(hn);
    let mut regularized_steps = Vec::new();
    for h in 0..hn {
        let x = DMatrix::from_fn(sn * kn, d, |r, c| phi_hat.get(h, r / kn, r % kn)[c]);
        let y = DMatrix::from_fn(sn * kn, sn, |r, c| target.kernel().row(h, r / kn, r % kn)[c]);
        let mut gram = x.transpose() * &x;
        let scale = gram.diagonal().max().max(1.0);
        if min_eigenvalue(&gram) <= 1e-12 * scale {
            gram += DMatrix::identity(d, d) * FEATURE_RIDGE;
            regularized_steps.push(h);
        }
        let chol = cholesky(&gram)?;
        let mu = chol.solve(&(x.transpose() * &y));
        let fit = &x * mu;
        let mut worst = 0.0f64;
        for r in 0..sn * kn {
            let fitted: Vec<f64> = fit.row(r).iter().copied().collect();
            worst = worst.max(tv_unchecked(target.kernel().row(h, r / kn, r % kn), &fitted));
        }
        per_step.push(worst);
    }
    Ok(FeatureError {
        per_step,
        regularized_steps,
    })
}

/// `(sum_n Tr(X_n M_{n-1}^{-1}), 2d log(1 + N/(lambda d)))` with
/// `M_0 = lambda I`, `M_n = M_{n-1} + X_n`.
pub fn elliptical_potential_check(stream: &[DMatrix<f64>], lambda: f64) -> Result<(f64, f64)> {
    let Some(first) = stream.first() else {
        return Ok((0.0, 0.0));
    };
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    let d = first.nrows();
    let mut m = DMatrix::<f64>::identity(d, d) * lambda;
    let mut lhs = 0.0;
    for x in stream {
        if x.shape() != (d, d) {
            return Err(Error::DimensionMismatch("stream matrices differ in size".into()));
        }
        let solved = cholesky(&m)?.solve(x);
        lhs += solved.trace();
        m += x;
    }
    let n = stream.len() as f64;
    let rhs = 2.0 * d as f64 * (1.0 + n / (lambda * d as f64)).ln();
    Ok((lhs, rhs))
}
