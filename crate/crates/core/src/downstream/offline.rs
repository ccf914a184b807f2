//! Pessimistic value iteration on logged target-task data.

use nalgebra::DMatrix;
use rand::Rng;

use crate::downstream::shared::{linear_backward_pass, StepCounts};
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::mdp::{
    occupancy_measures, sample_episode, DeterministicPolicy, FeatureTable, Policy, TabularLowRankMdp, ValueTable,
};
use crate::model::Transition;

/// `c_beta (H d sqrt(iota) + H sqrt(d N_off) xi_down)` with
/// `iota = log(H d max(N_off, 1) max(xi_down, 1) / delta)`.
pub fn pevi_beta(c_beta: f64, horizon: usize, dim: usize, n_off: usize, xi_down: f64, delta: f64) -> f64 {
    let (h, d, n) = (horizon as f64, dim as f64, n_off as f64);
    let iota = (h * d * n.max(1.0) * xi_down.max(1.0) / delta).ln().max(0.0);
    c_beta * (h * d * iota.sqrt() + h * (d * n).sqrt() * xi_down)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PeviConfig {
    pub lambda_d: f64,
    pub beta: f64,
    pub xi_down: f64,
}

/// Episodes of `behavior` in `target`, regrouped by step.
pub fn collect_offline<R: Rng + ?Sized>(
    target: &TabularLowRankMdp,
    behavior: &dyn Policy,
    n_off: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Transition>>> {
    let mut by_step = vec![Vec::with_capacity(n_off); target.horizon()];
    for _ in 0..n_off {
        for step in sample_episode(target, behavior, rng)?.steps {
            by_step[step.h].push(Transition {
                state: step.state,
                action: step.action,
                reward: step.reward,
                next_state: step.next_state,
            });
        }
    }
    Ok(by_step)
}

/// Backward pass with penalty `H xi_down + beta ||phi||_{Lambda^-1}` and
/// `Q_hat` clipped to `[0, H - h]` (steps counted from 0).
pub fn pevi(data: &[Vec<Transition>], phi_hat: &FeatureTable, config: &PeviConfig) -> Result<(DeterministicPolicy, ValueTable)> {
    let (hn, sn, kn) = (phi_hat.horizon(), phi_hat.num_states(), phi_hat.num_actions());
    if data.len() != hn {
        return Err(Error::DimensionMismatch(format!("{} steps of data for horizon {hn}", data.len())));
    }
    if !(config.lambda_d > 0.0) || !(config.beta >= 0.0) || !(config.xi_down >= 0.0) {
        return Err(Error::InvalidArgument("PEVI needs lambda_d > 0, beta >= 0, xi_down >= 0".into()));
    }
    let mut counts = Vec::with_capacity(hn);
    for step in data {
        let mut c = StepCounts::new(sn, kn);
        for tr in step {
            crate::error::check_index("state", tr.state, sn)?;
            crate::error::check_index("action", tr.action, kn)?;
            crate::error::check_index("next state", tr.next_state, sn)?;
            c.push(tr.state, tr.action, tr.reward, tr.next_state);
        }
        counts.push(c);
    }
    let h_total = hn as f64;
    linear_backward_pass(phi_hat, &counts, config.lambda_d, true, |x| {
        let gamma = h_total * config.xi_down + config.beta * x.norm;
        (x.linear - gamma).clamp(0.0, (hn - x.h) as f64)
    })
}

/// Smallest eigenvalue, over steps, of `E[phi_hat phi_hat^T]` under the
/// behavior policy's occupancy in `target`.
pub fn feature_coverage(target: &TabularLowRankMdp, phi_hat: &FeatureTable, behavior: &dyn Policy) -> Result<f64> {
    let occ = occupancy_measures(target.kernel(), target.initial(), behavior)?;
    let d = phi_hat.dim();
    let mut worst = f64::INFINITY;
    for h in 0..target.horizon() {
        let mut m = DMatrix::<f64>::zeros(d, d);
        for s in 0..target.num_states() {
            for a in 0..target.num_actions() {
                let w = occ.get(h, s, a);
                let f = phi_hat.get(h, s, a);
                for i in 0..d {
                    for j in 0..d {
                        m[(i, j)] += w * f[i] * f[j];
                    }
                }
            }
        }
        worst = worst.min(min_eigenvalue(&m));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{gen_behavior_policy, gen_target_task, gen_task_family};
    use crate::mdp::fixtures::ring;
    use crate::mdp::{evaluate_policy, optimal_plan};
    use crate::seed::{derive_seed, rng_from_seed};

    #[test]
    fn beta_formula() {
        let b = pevi_beta(1.0, 3, 2, 100, 0.0, 0.1);
        assert!((b - 6.0 * (3.0f64 * 2.0 * 100.0 / 0.1).ln().sqrt()).abs() < 1e-12);
        let b = pevi_beta(2.0, 3, 2, 100, 0.5, 0.1);
        let iota = (3.0f64 * 2.0 * 100.0 / 0.1).ln();
        assert!((b - 2.0 * (6.0 * iota.sqrt() + 3.0 * 200f64.sqrt() * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_data_gives_zero_values() {
        let fam = gen_task_family(5, 2, 3, 2, 1, &mut rng_from_seed(0)).unwrap();
        let cfg = PeviConfig { lambda_d: 1.0, beta: 1.0, xi_down: 0.0 };
        let (pi, table) = pevi(&vec![Vec::new(); 3], fam.shared_phi(), &cfg).unwrap();
        assert!(pi.actions().iter().all(|&a| a == 0));
        for h in 0..3 {
            for s in 0..5 {
                assert_eq!(table.v(h, s), 0.0);
            }
        }
    }

    #[test]
    fn exhaustive_noiseless_sweep_recovers_optimum() {
        let mdp = ring(3, 3);
        let mut data = vec![Vec::new(); 3];
        for (h, step) in data.iter_mut().enumerate() {
            for s in 0..3 {
                for a in 0..2 {
                    let sp = crate::mdp::sample_index(mdp.kernel().row(h, s, a), 0.5);
                    step.push(Transition { state: s, action: a, reward: mdp.reward().get(h, s, a), next_state: sp });
                }
            }
        }
        let cfg = PeviConfig { lambda_d: 1e-9, beta: 0.0, xi_down: 0.0 };
        let (pi, _) = pevi(&data, mdp.phi(), &cfg).unwrap();
        let (_, opt) = optimal_plan(mdp.kernel(), mdp.reward()).unwrap();
        let v = evaluate_policy(mdp.kernel(), mdp.reward(), &pi).unwrap();
        assert!(opt.v(0, 0) - v.v(0, 0) < 1e-6);
        assert!((opt.v(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn q_respects_clip_bounds() {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        let (target, _) = gen_target_task(&fam, &[0.25; 4], 0.0, &mut rng_from_seed(1)).unwrap();
        let (behavior, _) = gen_behavior_policy(&target, 0.25, &mut rng_from_seed(2)).unwrap();
        let data = collect_offline(&target, &behavior, 300, &mut rng_from_seed(3)).unwrap();
        for beta in [0.0, 0.3, 5.0] {
            let cfg = PeviConfig { lambda_d: 1.0, beta, xi_down: 0.05 };
            let (_, table) = pevi(&data, target.phi(), &cfg).unwrap();
            for h in 0..3 {
                for s in 0..5 {
                    for a in 0..2 {
                        let q = table.q(h, s, a);
                        assert!(q >= 0.0 && q <= (3 - h) as f64);
                    }
                }
            }
        }
        assert!(feature_coverage(&target, target.phi(), &behavior).unwrap() > 0.0);
    }

    #[test]
    fn median_suboptimality_nonincreasing_in_data() {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        let (target, _) = gen_target_task(&fam, &[0.25; 4], 0.0, &mut rng_from_seed(1)).unwrap();
        let (_, opt) = optimal_plan(target.kernel(), target.reward()).unwrap();
        let mut medians = Vec::new();
        for n in [500usize, 2000, 8000] {
            let mut gaps: Vec<f64> = (0..20)
                .map(|seed| {
                    let mut rng = rng_from_seed(derive_seed(seed, "pevi", n as u64));
                    let (behavior, _) = gen_behavior_policy(&target, 0.25, &mut rng).unwrap();
                    let data = collect_offline(&target, &behavior, n, &mut rng).unwrap();
                    let cfg = PeviConfig { lambda_d: 1.0, beta: pevi_beta(1.0, 3, 2, n, 0.0, 0.1), xi_down: 0.0 };
                    let (pi, _) = pevi(&data, target.phi(), &cfg).unwrap();
                    opt.v(0, 0) - evaluate_policy(target.kernel(), target.reward(), &pi).unwrap().v(0, 0)
                })
                .collect();
            gaps.sort_by(f64::total_cmp);
            medians.push(0.5 * (gaps[9] + gaps[10]));
        }
        assert!(medians.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{medians:?}");
    }
}
