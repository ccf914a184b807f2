//! Reward-free exploration on a target task with given features: explore
//! with the elliptical bonus as reward, then plan for any revealed reward
//! from the collected transitions.

use rand::Rng;

use crate::downstream::shared::{linear_backward_pass, RidgeState, StepCounts};
use crate::error::{Error, Result};
use crate::mdp::{
    sample_index, DeterministicPolicy, FeatureTable, Kernel, RewardTable, TabularLowRankMdp, ValueTable,
};

/// `C_L H sqrt(d) + d H sqrt(log(d K H max(xi_down, 1) / delta)) + H xi_down sqrt(d K)`.
pub fn beta_rfe(c_l: f64, horizon: usize, dim: usize, num_episodes: usize, xi_down: f64, delta: f64) -> f64 {
    let (h, d, k) = (horizon as f64, dim as f64, num_episodes.max(1) as f64);
    c_l * h * d.sqrt() + d * h * (d * k * h * xi_down.max(1.0) / delta).ln().max(0.0).sqrt() + h * xi_down * (d * k).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfeConfig {
    pub num_episodes: usize,
    pub beta: f64,
    pub xi_down: f64,
    /// Compare each episode's optimistic value with the truncated optimal
    /// value of its bonus reward under the true dynamics.
    pub monitor: bool,
}

impl RfeConfig {
    /// Default bonus scale with unit constants.
    pub fn with_default_beta(num_episodes: usize, horizon: usize, dim: usize, c_l: f64, xi_down: f64, delta: f64) -> Self {
        Self {
            num_episodes,
            beta: beta_rfe(c_l, horizon, dim, num_episodes, xi_down, delta),
            xi_down,
            monitor: false,
        }
    }
}

/// Collected pairs with their next states, and per-step covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct RfeDataset {
    /// `tuples[k][h] = (s, a, s')`.
    pub tuples: Vec<Vec<(usize, usize, usize)>>,
    pub ridge: Vec<RidgeState>,
    counts: Vec<StepCounts>,
}

impl RfeDataset {
    pub fn new(phi: &FeatureTable) -> Result<Self> {
        Ok(Self {
            tuples: Vec::new(),
            ridge: (0..phi.horizon()).map(|_| RidgeState::new(phi.dim(), 1.0)).collect::<Result<_>>()?,
            counts: (0..phi.horizon()).map(|_| StepCounts::new(phi.num_states(), phi.num_actions())).collect(),
        })
    }

    pub(crate) fn push_episode(&mut self, phi: &FeatureTable, episode: Vec<(usize, usize, usize)>) {
        for (h, &(s, a, sp)) in episode.iter().enumerate() {
            self.ridge[h].add(phi.get(h, s, a));
            self.counts[h].push(s, a, 0.0, sp);
        }
        self.tuples.push(episode);
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn counts(&self) -> &[StepCounts] {
        &self.counts
    }
}

/// Per-episode diagnostics of the exploration phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RfeTrace {
    /// `V_hat_1^k(s_1)`.
    pub optimistic_value: Vec<f64>,
    /// `||phi_hat_h(s_h, a_h)||_{(Lambda_h^k)^{-1}}` at the visited pairs, `[k][h]`.
    pub visited_norm: Vec<Vec<f64>>,
    /// Truncated optimal value of the bonus reward, when monitored.
    pub truncated_optimal: Vec<f64>,
    pub optimism_violations: usize,
    /// Largest `V~*_1 - V_hat_1 - H^2 xi_down` seen.
    pub worst_excess: f64,
}

/// `V~*_h = min{max_a [r + P V~*_{h+1}], cap}` from the last step down.
pub fn truncated_optimal_value(kernel: &Kernel, reward: &RewardTable, cap: f64) -> Vec<Vec<f64>> {
    let (hn, sn, kn) = (kernel.horizon(), kernel.num_states(), kernel.num_actions());
    let mut v = vec![vec![0.0; sn]; hn + 1];
    for h in (0..hn).rev() {
        for s in 0..sn {
            let best = (0..kn)
                .map(|a| reward.get(h, s, a) + kernel.expect(h, s, a, &v[h + 1]))
                .fold(f64::NEG_INFINITY, f64::max);
            v[h][s] = best.min(cap);
        }
    }
    v
}

/// Exploration phase. Each episode plans optimistically for the bonus
/// reward over the data so far, then rolls the greedy policy out in the
/// true target environment.
pub fn rfe_explore<R: Rng + ?Sized>(
    target: &TabularLowRankMdp,
    phi_hat: &FeatureTable,
    config: &RfeConfig,
    rng: &mut R,
) -> Result<(RfeDataset, RfeTrace)> {
    let (hn, sn, kn) = (target.horizon(), target.num_states(), target.num_actions());
    if phi_hat.horizon() != hn || phi_hat.num_states() != sn || phi_hat.num_actions() != kn {
        return Err(Error::DimensionMismatch("features do not match the target MDP".into()));
    }
    if !(config.beta >= 0.0) {
        return Err(Error::InvalidArgument("beta must be nonnegative".into()));
    }
    let cap = hn as f64;
    let beta = config.beta;
    let mut data = RfeDataset::new(phi_hat)?;
    let mut trace = RfeTrace::default();
    for _ in 0..config.num_episodes {
        let mut norms = vec![0.0; hn * sn * kn];
        let (policy, table) = linear_backward_pass(phi_hat, &data.counts, 1.0, false, |x| {
            norms[(x.h * sn + x.s) * kn + x.a] = x.norm;
            (x.linear + 2.0 * beta * x.norm).clamp(0.0, cap)
        })?;

        let mut s = target.initial().sample(rng.random());
        trace.optimistic_value.push(table.v(0, s));
        if config.monitor {
            let bonus_reward = RewardTable::from_fn(hn, sn, kn, |h, s, a| beta * norms[(h * sn + s) * kn + a]);
            let tilde = truncated_optimal_value(target.kernel(), &bonus_reward, cap);
            let excess = tilde[0][s] - table.v(0, s) - cap * cap * config.xi_down;
            trace.truncated_optimal.push(tilde[0][s]);
            if excess > 1e-6 {
                trace.optimism_violations += 1;
            }
            trace.worst_excess = trace.worst_excess.max(excess);
        }

        let mut episode = Vec::with_capacity(hn);
        let mut visited = Vec::with_capacity(hn);
        for h in 0..hn {
            let a = policy.action(h, s);
            let _ = rng.random::<f64>(); // keep two draws per step, as in sample_episode
            let sp = sample_index(target.kernel().row(h, s, a), rng.random());
            visited.push(norms[(h * sn + s) * kn + a]);
            episode.push((s, a, sp));
            s = sp;
        }
        trace.visited_norm.push(visited);
        data.push_episode(phi_hat, episode);
    }
    Ok((data, trace))
}

/// Planning phase for a revealed reward: one backward pass over the full
/// dataset with bonus `min{beta ||phi||_{Lambda^-1}, H}`.
pub fn rfe_plan(
    data: &RfeDataset,
    phi_hat: &FeatureTable,
    reward: &RewardTable,
    beta: f64,
) -> Result<(DeterministicPolicy, ValueTable)> {
    let cap = phi_hat.horizon() as f64;
    if reward.horizon() != phi_hat.horizon() || reward.num_states() != phi_hat.num_states() {
        return Err(Error::DimensionMismatch("reward does not match features".into()));
    }
    linear_backward_pass(phi_hat, &data.counts, 1.0, false, |x| {
        let u = (beta * x.norm).min(cap);
        (x.linear + reward.get(x.h, x.s, x.a) + u).clamp(0.0, cap)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{gen_target_task, gen_task_family};
    use crate::mdp::fixtures::identity_chain;
    use crate::mdp::{evaluate_policy, optimal_plan};
    use crate::seed::rng_from_seed;

    #[test]
    fn beta_examples() {
        let b = beta_rfe(1.0, 3, 2, 100, 0.0, 0.1);
        let hand = 3.0 * 2f64.sqrt() + 2.0 * 3.0 * (2.0 * 100.0 * 3.0 / 0.1f64).ln().sqrt();
        assert!((b - hand).abs() < 1e-12);
        let b2 = beta_rfe(1.0, 3, 2, 200, 0.0, 0.1);
        let hand2 = 3.0 * 2f64.sqrt() + 2.0 * 3.0 * (2.0 * 200.0 * 3.0 / 0.1f64).ln().sqrt();
        assert!((b2 - hand2).abs() < 1e-12);
    }

    fn seed0_target() -> TabularLowRankMdp {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        gen_target_task(&fam, &[0.25; 4], 0.0, &mut rng_from_seed(1)).unwrap().0
    }

    #[test]
    fn first_episode_closed_form() {
        let target = seed0_target();
        let cfg = RfeConfig { num_episodes: 1, beta: 0.7, xi_down: 0.0, monitor: false };
        let (data, trace) = rfe_explore(&target, target.phi(), &cfg, &mut rng_from_seed(0)).unwrap();
        assert_eq!(data.len(), 1);
        let f = target.phi().get(0, 0, data.tuples[0][0].1);
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((trace.visited_norm[0][0] - norm).abs() < 1e-12);
        let s1_best = (0..2)
            .map(|a| {
                let f = target.phi().get(0, 0, a);
                (2.0 * 0.7 * f.iter().map(|x| x * x).sum::<f64>().sqrt()).min(3.0)
            })
            .fold(f64::MIN, f64::max);
        assert!((trace.optimistic_value[0] - s1_best).abs() < 1e-12);
    }

    #[test]
    fn identity_chain_stays_at_start() {
        let chain = identity_chain(3, RewardTable::zeros(3, 2, 1));
        let cfg = RfeConfig { num_episodes: 5, beta: 1.0, xi_down: 0.0, monitor: false };
        let (data, _) = rfe_explore(&chain, chain.phi(), &cfg, &mut rng_from_seed(0)).unwrap();
        assert!(data.tuples.iter().flatten().all(|&(s, a, sp)| (s, a, sp) == (0, 0, 0)));
    }

    #[test]
    fn ridge_matches_batch_and_q_is_clipped() {
        let target = seed0_target();
        let cfg = RfeConfig { num_episodes: 200, beta: 5.0, xi_down: 0.0, monitor: false };
        let (data, _) = rfe_explore(&target, target.phi(), &cfg, &mut rng_from_seed(2)).unwrap();
        for h in 0..3 {
            let batch = RidgeState::batch(2, 1.0, data.tuples.iter().map(|ep| target.phi().get(h, ep[h].0, ep[h].1))).unwrap();
            assert!((data.ridge[h].matrix() - batch.matrix()).abs().max() < 1e-9);
        }
        let reward = target.reward().clone();
        let (_, table) = rfe_plan(&data, target.phi(), &reward, 5.0).unwrap();
        for h in 0..3 {
            for s in 0..5 {
                for a in 0..2 {
                    assert!((0.0..=3.0).contains(&table.q(h, s, a)));
                }
            }
        }
    }

    #[test]
    fn empty_plan_is_greedy_on_reward() {
        let target = seed0_target();
        let data = RfeDataset::new(target.phi()).unwrap();
        let (pi, table) = rfe_plan(&data, target.phi(), target.reward(), 0.0).unwrap();
        for h in 0..3 {
            for s in 0..5 {
                let r0 = target.reward().get(h, s, 0);
                let r1 = target.reward().get(h, s, 1);
                assert_eq!(pi.action(h, s), if r1 > r0 { 1 } else { 0 });
                assert_eq!(table.v(h, s), r0.max(r1));
            }
        }
        let (pi, table) = rfe_plan(&data, target.phi(), &RewardTable::zeros(3, 5, 2), 0.0).unwrap();
        assert!(pi.actions().iter().all(|&a| a == 0));
        assert_eq!(table.v(0, 0), 0.0);
    }

    #[test]
    fn bonus_shrinks_with_exploration() {
        let target = seed0_target();
        let k = 2000;
        let beta = beta_rfe(1.0, 3, 2, k, 0.0, 0.1);
        let cfg = RfeConfig { num_episodes: k, beta, xi_down: 0.0, monitor: false };
        let (_, trace) = rfe_explore(&target, target.phi(), &cfg, &mut rng_from_seed(0)).unwrap();
        for h in 0..3 {
            let first = trace.visited_norm[0][h];
            let tail: Vec<f64> = trace.visited_norm[k - k / 10..].iter().map(|v| v[h]).collect();
            let avg = tail.iter().sum::<f64>() / tail.len() as f64;
            assert!(avg <= 0.25 * first, "h{h}: {avg} vs first {first}");
        }
    }

    #[test]
    fn planning_improves_with_more_data() {
        let target = seed0_target();
        let reward = target.reward().clone();
        let (_, opt) = optimal_plan(target.kernel(), &reward).unwrap();
        let mut gaps = Vec::new();
        for k in [20, 2000] {
            let beta = beta_rfe(1.0, 3, 2, k, 0.0, 0.1);
            let cfg = RfeConfig { num_episodes: k, beta, xi_down: 0.0, monitor: false };
            let (data, _) = rfe_explore(&target, target.phi(), &cfg, &mut rng_from_seed(4)).unwrap();
            let (pi, _) = rfe_plan(&data, target.phi(), &reward, beta).unwrap();
            let v = evaluate_policy(target.kernel(), &reward, &pi).unwrap().v(0, 0);
            gaps.push(opt.v(0, 0) - v);
        }
        assert!(gaps[1] <= gaps[0] + 1e-12, "{gaps:?}");
    }
}
