//! Optimistic least-squares value iteration with a known reward table.

use rand::Rng;

use crate::downstream::shared::{linear_backward_pass, StepCounts};
use crate::error::{Error, Result};
use crate::mdp::{
    evaluate_policy, optimal_plan, sample_index, DeterministicPolicy, FeatureTable, RewardTable, TabularLowRankMdp,
    ValueTable,
};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LsviConfig {
    pub lambda_d: f64,
    pub c_beta: f64,
    pub xi_down: f64,
    pub c_l: f64,
    pub delta: f64,
    pub num_episodes: usize,
    /// Keep every episode's `Q_hat` for the optimism monitor.
    #[serde(default)]
    pub record_q: bool,
}

impl LsviConfig {
    /// `c_beta (H d sqrt(iota_n) + H sqrt(d n) xi_down + C_L sqrt(H d))`,
    /// `iota_n = log(H d max(n, 1) max(xi_down, 1) / delta)`.
    pub fn beta_n(&self, horizon: usize, dim: usize, n: usize) -> f64 {
        let (h, d, nf) = (horizon as f64, dim as f64, n as f64);
        let iota = (h * d * nf.max(1.0) * self.xi_down.max(1.0) / self.delta).ln().max(0.0);
        self.c_beta * (h * d * iota.sqrt() + h * (d * nf).sqrt() * self.xi_down + self.c_l * (h * d).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsviOutput {
    pub policies: Vec<DeterministicPolicy>,
    /// Exact value of each episode's policy from the initial distribution.
    pub values: Vec<f64>,
    /// Value of the uniform mixture over `policies`.
    pub mixture_value: f64,
    pub optimal_value: f64,
    pub betas: Vec<f64>,
    /// Per-episode `Q_hat`, present when `record_q` was set.
    pub q_hat: Vec<ValueTable>,
}

impl LsviOutput {
    /// `sum_n (V* - V^{pi_n})`.
    pub fn cumulative_regret(&self) -> f64 {
        self.values.iter().map(|v| self.optimal_value - v).sum()
    }

    pub fn average_regret(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.cumulative_regret() / self.values.len() as f64
        }
    }
}

pub fn lsvi_ucb<R: Rng + ?Sized>(
    target: &TabularLowRankMdp,
    phi_hat: &FeatureTable,
    reward: &RewardTable,
    config: &LsviConfig,
    rng: &mut R,
) -> Result<LsviOutput> {
    let (hn, sn, kn) = (target.horizon(), target.num_states(), target.num_actions());
    if phi_hat.horizon() != hn || phi_hat.num_states() != sn || phi_hat.num_actions() != kn {
        return Err(Error::DimensionMismatch("features do not match the target MDP".into()));
    }
    if reward.horizon() != hn || reward.num_states() != sn || reward.num_actions() != kn {
        return Err(Error::DimensionMismatch("reward does not match the target MDP".into()));
    }
    if !(config.lambda_d > 0.0) || !(config.delta > 0.0 && config.delta < 1.0) || !(config.c_beta >= 0.0) {
        return Err(Error::InvalidArgument("LSVI needs lambda_d > 0, delta in (0,1), c_beta >= 0".into()));
    }
    let (_, opt) = optimal_plan(target.kernel(), reward)?;
    let optimal_value = opt.value(target.initial());
    let mut counts: Vec<StepCounts> = (0..hn).map(|_| StepCounts::new(sn, kn)).collect();
    let mut out = LsviOutput {
        policies: Vec::with_capacity(config.num_episodes),
        values: Vec::with_capacity(config.num_episodes),
        mixture_value: 0.0,
        optimal_value,
        betas: Vec::with_capacity(config.num_episodes),
        q_hat: Vec::new(),
    };
    for n in 1..=config.num_episodes {
        let beta = config.beta_n(hn, phi_hat.dim(), n);
        let (policy, table) = linear_backward_pass(phi_hat, &counts, config.lambda_d, true, |x| {
            (x.linear + beta * x.norm).clamp(0.0, (hn - x.h) as f64)
        })?;
        let mut s = target.initial().sample(rng.random());
        for (h, step) in counts.iter_mut().enumerate() {
            let a = policy.action(h, s);
            let _ = rng.random::<f64>();
            let sp = sample_index(target.kernel().row(h, s, a), rng.random());
            step.push(s, a, reward.get(h, s, a), sp);
            s = sp;
        }
        out.values.push(evaluate_policy(target.kernel(), reward, &policy)?.value(target.initial()));
        out.betas.push(beta);
        out.policies.push(policy);
        if config.record_q {
            out.q_hat.push(table);
        }
    }
    if !out.values.is_empty() {
        out.mixture_value = out.values.iter().sum::<f64>() / out.values.len() as f64;
    }
    Ok(out)
}

/// Counts `(n, h, s, a)` with `Q_hat < Q* - 2H(H - h)xi_down - 1e-6` (steps
/// from 0), where `Q*` is optimal for `reward` under the true kernel.
pub fn optimism_monitor(q_hat: &[ValueTable], target: &TabularLowRankMdp, reward: &RewardTable, xi_down: f64) -> Result<usize> {
    let (_, opt) = optimal_plan(target.kernel(), reward)?;
    let (hn, sn, kn) = (target.horizon(), target.num_states(), target.num_actions());
    let hf = hn as f64;
    let mut violations = 0;
    for table in q_hat {
        if table.horizon() != hn {
            return Err(Error::DimensionMismatch("trace horizon differs from the MDP".into()));
        }
        for h in 0..hn {
            let slack = 2.0 * hf * (hn - h) as f64 * xi_down + 1e-6;
            for s in 0..sn {
                for a in 0..kn {
                    if table.q(h, s, a) < opt.q(h, s, a) - slack {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{gen_target_task, gen_task_family};
    use crate::mdp::fixtures::identity_chain;
    use crate::mdp::occupancy_measures;
    use crate::seed::{derive_seed, rng_from_seed};

    fn config(num_episodes: usize) -> LsviConfig {
        LsviConfig { lambda_d: 1.0, c_beta: 1.0, xi_down: 0.0, c_l: 1.0, delta: 0.1, num_episodes, record_q: true }
    }

    fn seed0_target() -> TabularLowRankMdp {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        gen_target_task(&fam, &[0.25; 4], 0.0, &mut rng_from_seed(1)).unwrap().0
    }

    #[test]
    fn beta_formula() {
        let c = LsviConfig { xi_down: 0.2, ..config(1) };
        let iota = (3.0f64 * 2.0 * 10.0 / 0.1).ln();
        let hand = 6.0 * iota.sqrt() + 3.0 * 20f64.sqrt() * 0.2 + 6f64.sqrt();
        assert!((c.beta_n(3, 2, 10) - hand).abs() < 1e-12);
    }

    #[test]
    fn first_episode_is_pure_bonus() {
        let target = seed0_target();
        let out = lsvi_ucb(&target, target.phi(), target.reward(), &config(1), &mut rng_from_seed(0)).unwrap();
        let beta = out.betas[0];
        for h in 0..3 {
            for s in 0..5 {
                for a in 0..2 {
                    let f = target.phi().get(h, s, a);
                    let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let want = (beta * norm).clamp(0.0, (3 - h) as f64);
                    assert!((out.q_hat[0].q(h, s, a) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_action_mixture_is_the_policy_value() {
        let reward = RewardTable::from_fn(3, 2, 1, |h, _, _| 0.1 * (h + 1) as f64);
        let chain = identity_chain(3, reward.clone());
        for c_beta in [0.0, 1.0, 100.0] {
            let cfg = LsviConfig { c_beta, ..config(7) };
            let out = lsvi_ucb(&chain, chain.phi(), &reward, &cfg, &mut rng_from_seed(0)).unwrap();
            assert!((out.mixture_value - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_matches_averaged_occupancy() {
        let target = seed0_target();
        let out = lsvi_ucb(&target, target.phi(), target.reward(), &config(25), &mut rng_from_seed(5)).unwrap();
        let mean_of_values = out.values.iter().sum::<f64>() / 25.0;
        assert!((out.mixture_value - mean_of_values).abs() < 1e-12);
        let mut via_occupancy = 0.0;
        for pi in &out.policies {
            let occ = occupancy_measures(target.kernel(), target.initial(), pi).unwrap();
            via_occupancy += occ.integrate(target.reward()) / 25.0;
        }
        assert!((out.mixture_value - via_occupancy).abs() < 1e-12);
        for table in &out.q_hat {
            for h in 0..3 {
                for s in 0..5 {
                    for a in 0..2 {
                        assert!((0.0..=(3 - h) as f64).contains(&table.q(h, s, a)));
                    }
                }
            }
        }
    }

    #[test]
    fn huge_bonus_never_violates_and_zero_bonus_does() {
        let target = seed0_target();
        let big = LsviConfig { c_beta: 1e3, ..config(50) };
        let out = lsvi_ucb(&target, target.phi(), target.reward(), &big, &mut rng_from_seed(1)).unwrap();
        assert_eq!(optimism_monitor(&out.q_hat, &target, target.reward(), 0.0).unwrap(), 0);
        let zero = LsviConfig { c_beta: 0.0, ..config(50) };
        let out = lsvi_ucb(&target, target.phi(), target.reward(), &zero, &mut rng_from_seed(1)).unwrap();
        assert!(optimism_monitor(&out.q_hat, &target, target.reward(), 0.0).unwrap() > 0);
    }

    #[test]
    fn optimism_holds_in_most_seeds() {
        let target = seed0_target();
        let flagged = (0..20)
            .filter(|&seed| {
                let mut rng = rng_from_seed(derive_seed(seed, "lsvi-optimism", 0));
                let out = lsvi_ucb(&target, target.phi(), target.reward(), &config(200), &mut rng).unwrap();
                optimism_monitor(&out.q_hat, &target, target.reward(), 0.0).unwrap() > 0
            })
            .count();
        assert!(flagged <= 2, "{flagged} of 20 seeds flagged");
    }
}
