//! Upstream stage: shared-feature MLE across tasks, elliptical penalties,
//! and per-task pessimistic planning, plus exact measurement of the
//! guarantees the stage is supposed to meet.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::envgen::TaskFamily;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, condition_number, inverse_norm_with, max_generalized_eigenvalue};
use crate::mdp::{
    evaluate_policy, occupancy_measures, optimal_plan, tv_unchecked, DeterministicPolicy, FeatureTable, Policy,
    RewardTable, StochasticPolicy,
};
use crate::model::{fit_all_steps, LearnedModel, ModelClass, OfflineDataset};

/// Eigenvalue threshold used when the behavior second moment is singular.
pub const RANGE_THRESHOLD: f64 = 1e-10;
/// Covariances above this condition number are flagged in the report.
pub const CONDITION_WARNING: f64 = 1e12;

/// `log(|Phi| |Psi|^T n H / delta)` in log space.
pub fn log_confidence_term(log_cardinality: f64, n: usize, horizon: usize, delta: f64) -> f64 {
    log_cardinality + (n.max(1) as f64).ln() + (horizon as f64).ln() - delta.ln()
}

/// `2 log(2 |Phi| |Psi|^T n H / delta) / n`.
pub fn zeta_n(log_cardinality: f64, n: usize, horizon: usize, delta: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 + log_confidence_term(log_cardinality, n, horizon, delta)) / n.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryAlpha {
    pub alpha: f64,
    pub zeta_n: f64,
}

/// `alpha = sqrt(2 n omega zeta_n + lambda d)`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_from_theory(
    n: usize,
    omega: f64,
    lambda: f64,
    dim: usize,
    size_phi: usize,
    size_psi: usize,
    num_tasks: usize,
    horizon: usize,
    delta: f64,
) -> Result<TheoryAlpha> {
    if n == 0 || size_phi == 0 || size_psi == 0 || horizon == 0 || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("alpha_from_theory needs positive sizes and delta in (0,1)".into()));
    }
    let log_card = (size_phi as f64).ln() + num_tasks as f64 * (size_psi as f64).ln();
    let z = zeta_n(log_card, n, horizon, delta);
    let alpha = (2.0 * n as f64 * omega * z + lambda * dim as f64).sqrt();
    if !alpha.is_finite() || !z.is_finite() {
        return Err(Error::Numeric(format!("alpha overflowed (zeta_n = {z})")));
    }
    Ok(TheoryAlpha { alpha, zeta_n: z })
}

/// Ridge default `c * log(|Phi| |Psi|^T n H / delta)`.
pub fn default_lambda(c: f64, log_cardinality: f64, n: usize, horizon: usize, delta: f64) -> f64 {
    (c * log_confidence_term(log_cardinality, n, horizon, delta)).max(f64::MIN_POSITIVE)
}

/// `lambda I + sum phi_hat phi_hat^T` over task t's step-h records.
pub fn empirical_covariance(
    phi_hat: &FeatureTable,
    dataset: &OfflineDataset,
    t: usize,
    h: usize,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let (sn, kn, d) = (phi_hat.num_states(), phi_hat.num_actions(), phi_hat.dim());
    let mut counts = vec![0u32; sn * kn];
    for tr in dataset.step(t, h) {
        counts[tr.state * kn + tr.action] += 1;
    }
    let mut m = DMatrix::<f64>::identity(d, d) * lambda;
    for s in 0..sn {
        for a in 0..kn {
            let c = counts[s * kn + a];
            if c == 0 {
                continue;
            }
            let f = phi_hat.get(h, s, a);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += c as f64 * f[i] * f[j];
                }
            }
        }
    }
    Ok(m)
}

/// `b_hat[t]` as a reward-shaped table, plus the alpha used.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTable {
    pub alpha: f64,
    pub b_hat: Vec<RewardTable>,
}

/// `min{alpha * ||phi_hat_h(s,a)||_{Sigma^-1}, 1}`; `covariances[t][h]`.
pub fn penalty_table(phi_hat: &FeatureTable, covariances: &[Vec<DMatrix<f64>>], alpha: f64) -> Result<PenaltyTable> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must be finite and nonnegative, got {alpha}")));
    }
    let (hn, sn, kn) = (phi_hat.horizon(), phi_hat.num_states(), phi_hat.num_actions());
    let mut b_hat = Vec::with_capacity(covariances.len());
    for per_step in covariances {
        let chols = per_step.iter().map(cholesky).collect::<Result<Vec<_>>>()?;
        b_hat.push(RewardTable::from_fn(hn, sn, kn, |h, s, a| {
            (alpha * inverse_norm_with(&chols[h], phi_hat.get(h, s, a))).min(1.0)
        }));
    }
    Ok(PenaltyTable { alpha, b_hat })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Theory,
    Manual(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorlConfig {
    pub lambda: f64,
    pub alpha_mode: AlphaMode,
    pub delta: f64,
    /// Needed by the theory alpha; the harness passes the measured value.
    pub omega: f64,
}

#[derive(Debug, Clone)]
pub struct MorlOutput {
    pub learned: LearnedModel,
    pub covariances: Vec<Vec<DMatrix<f64>>>,
    pub penalties: PenaltyTable,
    pub policies: Vec<DeterministicPolicy>,
    pub lambda: f64,
    pub alpha: f64,
    pub zeta_n: f64,
    pub n: usize,
    pub log_cardinality: f64,
    /// Steps whose covariance condition number exceeds the warning level.
    pub ill_conditioned: Vec<(usize, usize)>,
}

/// The full upstream pipeline: MLE at every step, covariance and penalty per
/// task, then planning on `(P_hat^t, r^t - b_hat^t)`.
pub fn run_morl(
    dataset: &OfflineDataset,
    class: &ModelClass,
    rewards: &[RewardTable],
    config: &MorlConfig,
) -> Result<MorlOutput> {
    let tasks = dataset.num_tasks();
    if rewards.len() != tasks {
        return Err(Error::DimensionMismatch(format!("{} rewards for {tasks} tasks", rewards.len())));
    }
    let n = dataset.len_per_task();
    let learned = fit_all_steps(class, dataset)?;
    let hn = class.horizon();
    let log_cardinality = class.log_cardinality(tasks);

    let mut covariances = Vec::with_capacity(tasks);
    let mut ill_conditioned = Vec::new();
    for t in 0..tasks {
        let per_step = (0..hn)
            .map(|h| empirical_covariance(&learned.phi_hat, dataset, t, h, config.lambda))
            .collect::<Result<Vec<_>>>()?;
        for (h, m) in per_step.iter().enumerate() {
            if condition_number(m) > CONDITION_WARNING {
                ill_conditioned.push((t, h));
            }
        }
        covariances.push(per_step);
    }

    let zeta = zeta_n(log_cardinality, n, hn, config.delta);
    let alpha = match config.alpha_mode {
        AlphaMode::Manual(a) => a,
        AlphaMode::Theory => {
            alpha_from_theory(
                n.max(1),
                config.omega,
                config.lambda,
                class.dim(),
                class.size_phi(),
                class.size_psi(),
                tasks,
                hn,
                config.delta,
            )?
            .alpha
        }
    };
    let penalties = penalty_table(&learned.phi_hat, &covariances, alpha)?;
    let policies = (0..tasks)
        .map(|t| {
            let shaped = rewards[t].minus(&penalties.b_hat[t]);
            optimal_plan(&learned.p_hat[t], &shaped).map(|(pi, _)| pi)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MorlOutput {
        learned,
        covariances,
        penalties,
        policies,
        lambda: config.lambda,
        alpha,
        zeta_n: zeta,
        n,
        log_cardinality,
        ill_conditioned,
    })
}

/// Behavior-weighted TV error at step `h`, averaged over tasks.
pub fn avg_tv_error(learned: &LearnedModel, family: &TaskFamily, behaviors: &[StochasticPolicy], h: usize) -> Result<f64> {
    if behaviors.len() != family.num_tasks() || learned.num_tasks() != family.num_tasks() {
        return Err(Error::DimensionMismatch("avg_tv_error task counts".into()));
    }
    let (sn, kn) = (family.num_states(), family.num_actions());
    let mut total = 0.0;
    for (t, task) in family.tasks().iter().enumerate() {
        let occ = occupancy_measures(task.kernel(), task.initial(), &behaviors[t])?;
        for s in 0..sn {
            for a in 0..kn {
                let d = occ.get(h, s, a);
                if d > 0.0 {
                    total += d * tv_unchecked(learned.p_hat[t].row(h, s, a), task.kernel().row(h, s, a));
                }
            }
        }
    }
    Ok(total / family.num_tasks() as f64)
}

/// `(1/T) sum_t [V^{pi_t} - V^{pi_hat_t}]` on the true tasks.
pub fn avg_suboptimality(
    policies: &[&dyn Policy],
    comparators: &[&dyn Policy],
    family: &TaskFamily,
    rewards: &[RewardTable],
) -> Result<f64> {
    let tasks = family.num_tasks();
    if policies.len() != tasks || comparators.len() != tasks || rewards.len() != tasks {
        return Err(Error::DimensionMismatch("avg_suboptimality task counts".into()));
    }
    let mut total = 0.0;
    for (t, task) in family.tasks().iter().enumerate() {
        let v_cmp = evaluate_policy(task.kernel(), &rewards[t], comparators[t])?.value(task.initial());
        let v_hat = evaluate_policy(task.kernel(), &rewards[t], policies[t])?.value(task.initial());
        total += v_cmp - v_hat;
    }
    Ok(total / tasks as f64)
}

/// `E_{d^pi_h}[phi phi^T]` under the true kernel of task `t`.
pub fn feature_second_moment(family: &TaskFamily, t: usize, policy: &dyn Policy, h: usize) -> Result<DMatrix<f64>> {
    let task = &family.tasks()[t];
    let occ = occupancy_measures(task.kernel(), task.initial(), policy)?;
    let phi = family.shared_phi();
    let d = phi.dim();
    let mut m = DMatrix::<f64>::zeros(d, d);
    for s in 0..family.num_states() {
        for a in 0..family.num_actions() {
            let w = occ.get(h, s, a);
            if w == 0.0 {
                continue;
            }
            let f = phi.get(h, s, a);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += w * f[i] * f[j];
                }
            }
        }
    }
    Ok(m)
}

/// `sup_x x^T A x / x^T B x` with A, B the comparator and behavior second
/// moments of `phi*_h`. `+inf` when A leaks outside the range of B.
pub fn relative_condition_number(
    family: &TaskFamily,
    t: usize,
    policy: &dyn Policy,
    behavior: &dyn Policy,
    h: usize,
) -> Result<f64> {
    let a = feature_second_moment(family, t, policy, h)?;
    let b = feature_second_moment(family, t, behavior, h)?;
    Ok(max_generalized_eigenvalue(&a, &b, RANGE_THRESHOLD))
}

/// Both sides of the pessimism inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PessimismGap {
    /// `(1/T) sum_t [V_{P_hat, r - b_hat}^{pi_t} - V_{P*, r}^{pi_t}]`.
    pub gap: f64,
    /// `H sqrt(omega zeta_n / T)`.
    pub bound: f64,
}

pub fn pessimism_gap(
    learned: &LearnedModel,
    penalties: &PenaltyTable,
    comparators: &[&dyn Policy],
    family: &TaskFamily,
    rewards: &[RewardTable],
    omega: f64,
    zeta_n: f64,
) -> Result<PessimismGap> {
    let tasks = family.num_tasks();
    if comparators.len() != tasks || rewards.len() != tasks || penalties.b_hat.len() != tasks {
        return Err(Error::DimensionMismatch("pessimism_gap task counts".into()));
    }
    let mut total = 0.0;
    for (t, task) in family.tasks().iter().enumerate() {
        let shaped = rewards[t].minus(&penalties.b_hat[t]);
        let v_model = evaluate_policy(&learned.p_hat[t], &shaped, comparators[t])?.value(task.initial());
        let v_true = evaluate_policy(task.kernel(), &rewards[t], comparators[t])?.value(task.initial());
        total += v_model - v_true;
    }
    Ok(PessimismGap {
        gap: total / tasks as f64,
        bound: family.horizon() as f64 * (omega * zeta_n / tasks as f64).sqrt(),
    })
}

/// Suboptimality bound with unit constant:
/// `H^2 d^{3/2} omega sqrt(C*/n log(|Phi||Psi|^T n H / delta))`.
pub fn suboptimality_bound(
    horizon: usize,
    dim: usize,
    omega: f64,
    c_star: f64,
    n: usize,
    log_cardinality: f64,
    delta: f64,
) -> f64 {
    let h = horizon as f64;
    h * h * (dim as f64).powf(1.5) * omega
        * (c_star / n.max(1) as f64 * log_confidence_term(log_cardinality, n, horizon, delta)).sqrt()
}

/// Truth-dependent measurements of one upstream run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpstreamReport {
    pub avg_tv_error: Vec<f64>,
    /// `sqrt(zeta_n / T)`, the same at every step.
    pub tv_bound: f64,
    pub avg_subopt: f64,
    pub subopt_bound: f64,
    pub pessimism_gap: f64,
    pub pessimism_bound: f64,
    /// Max over tasks and steps.
    pub c_star: f64,
    pub omega: f64,
    pub alpha: f64,
    pub zeta_n: f64,
    pub lambda: f64,
    /// Whether the class contains the true features and embeddings.
    pub realizable: bool,
    pub ill_conditioned: usize,
}

impl UpstreamReport {
    /// Measures against true optimal comparators; pass `comparators` to override.
    pub fn measure(
        output: &MorlOutput,
        family: &TaskFamily,
        class: &ModelClass,
        behaviors: &[StochasticPolicy],
        comparators: Option<&[&dyn Policy]>,
        delta: f64,
    ) -> Result<Self> {
        let tasks = family.num_tasks();
        let hn = family.horizon();
        let rewards = family.rewards();
        let optimal: Vec<DeterministicPolicy>;
        let cmp: Vec<&dyn Policy> = match comparators {
            Some(c) => c.to_vec(),
            None => {
                optimal = family
                    .tasks()
                    .iter()
                    .map(|m| optimal_plan(m.kernel(), m.reward()).map(|(pi, _)| pi))
                    .collect::<Result<Vec<_>>>()?;
                optimal.iter().map(|p| p as &dyn Policy).collect()
            }
        };
        let omega = behaviors.iter().map(|b| b.probs().iter().map(|p| 1.0 / p).fold(0.0, f64::max)).fold(0.0, f64::max);
        let avg_tv_error = (0..hn)
            .map(|h| avg_tv_error(&output.learned, family, behaviors, h))
            .collect::<Result<Vec<_>>>()?;
        let pols: Vec<&dyn Policy> = output.policies.iter().map(|p| p as &dyn Policy).collect();
        let avg_subopt = avg_suboptimality(&pols, &cmp, family, &rewards)?;
        let mut c_star = 0.0f64;
        for t in 0..tasks {
            for h in 0..hn {
                c_star = c_star.max(relative_condition_number(family, t, cmp[t], &behaviors[t], h)?);
            }
        }
        let pg = pessimism_gap(&output.learned, &output.penalties, &cmp, family, &rewards, omega, output.zeta_n)?;
        let realizable = class.phis().iter().any(|p| p == family.shared_phi())
            && family.tasks().iter().all(|m| class.psis().iter().any(|q| q == m.mu()));
        Ok(Self {
            avg_tv_error,
            tv_bound: (output.zeta_n / tasks as f64).sqrt(),
            avg_subopt,
            subopt_bound: suboptimality_bound(hn, family.rank(), omega, c_star, output.n, output.log_cardinality, delta),
            pessimism_gap: pg.gap,
            pessimism_bound: pg.bound,
            c_star,
            omega,
            alpha: output.alpha,
            zeta_n: output.zeta_n,
            lambda: output.lambda,
            realizable,
            ill_conditioned: output.ill_conditioned.len(),
        })
    }
}
