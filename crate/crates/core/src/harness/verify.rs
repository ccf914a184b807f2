//! Invariant battery. The fast scope checks exact identities on random
//! instances; the statistical scope adds the seeded studies.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::downstream::offline::{collect_offline, pevi, PeviConfig};
use crate::downstream::online::{lsvi_ucb, LsviConfig};
use crate::downstream::rfe::{rfe_explore, rfe_plan, RfeConfig};
use crate::downstream::shared::{bonus, elliptical_potential_check, RidgeState};
use crate::envgen::{gen_behavior_policy, gen_dataset, gen_model_class, gen_target_task, gen_task_family, sample_simplex, ClassSpec};
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::studies;
use crate::io::{read_json, MdpDocument};
use crate::mdp::{
    evaluate_policy, fixtures, occupancy_measures, optimal_plan, simulation_lemma_sides, tv_distance, validate_factors,
    EmbeddingTable, StochasticPolicy, TabularLowRankMdp,
};
use crate::model::{joint_log_likelihood, mle_fit, ModelClass, OfflineDataset, Transition};
use crate::seed::{child_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Fast,
    Statistical,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
}

impl Check {
    pub fn from_counts(name: &str, cases: usize, failures: usize, detail: String) -> Self {
        Self { name: name.into(), passed: failures == 0 && cases > 0, cases, failures, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} ({} cases, {} failures) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.failures,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Random instance with small random dimensions.
pub fn random_mdp(rng: &mut Rng, num_tasks: usize) -> Result<crate::envgen::TaskFamily> {
    let sn = rng.random_range(2..=6);
    let kn = rng.random_range(1..=3);
    let hn = rng.random_range(1..=4);
    let d = rng.random_range(1..=sn.min(3));
    gen_task_family(sn, kn, hn, d, num_tasks, rng)
}

fn random_policy(mdp: &TabularLowRankMdp, rng: &mut Rng) -> Result<StochasticPolicy> {
    let (hn, sn, kn) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let probs = (0..hn * sn).flat_map(|_| sample_simplex(kn, rng)).collect();
    StochasticPolicy::new(hn, sn, kn, probs)
}

pub fn check_distributions(cases: usize) -> Result<Check> {
    let mut rng = child_rng(0, "verify-distribution", 0);
    let mut failures = 0;
    let mut worst = String::new();
    for _ in 0..cases {
        let fam = random_mdp(&mut rng, 2)?;
        let w = if rng.random::<bool>() { 0.0 } else { 0.3 };
        let (target, _) = gen_target_task(&fam, &[0.5, 0.5], w, &mut rng)?;
        for m in fam.tasks().iter().chain(std::iter::once(&target)) {
            let v = validate_factors(m.phi(), m.mu(), Some(m.reward()));
            if let Some(first) = v.first() {
                failures += 1;
                worst = format!("{}: {}", first.invariant, first.detail);
            }
        }
    }
    Ok(Check::from_counts("distribution", 3 * cases, failures, worst))
}

/// Both expansions of the value difference agree with the direct difference.
pub fn check_simulation_lemma(cases: usize, tol: f64) -> Result<Check> {
    let mut rng = child_rng(0, "verify-simulation", 0);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let fam = random_mdp(&mut rng, 2)?;
        let (a, b) = (&fam.tasks()[0], &fam.tasks()[1]);
        let pi = random_policy(a, &mut rng)?;
        let sides = simulation_lemma_sides(a.kernel(), a.reward(), b.kernel(), b.reward(), a.initial(), &pi)?;
        let err = (sides.lhs - sides.rhs_under_second).abs().max((sides.lhs - sides.rhs_under_first).abs());
        worst = worst.max(err);
        failures += (err > tol) as usize;
    }
    Ok(Check::from_counts("simulation_lemma", cases, failures, format!("max error {worst:.3e} (tol {tol:e})")))
}

/// `sum d^pi r` equals the policy value from dynamic programming.
pub fn check_occupancy_duality(cases: usize, tol: f64) -> Result<Check> {
    let mut rng = child_rng(0, "verify-duality", 0);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let fam = random_mdp(&mut rng, 1)?;
        let m = &fam.tasks()[0];
        let pi = random_policy(m, &mut rng)?;
        let occ = occupancy_measures(m.kernel(), m.initial(), &pi)?;
        let v = evaluate_policy(m.kernel(), m.reward(), &pi)?.value(m.initial());
        let err = (occ.integrate(m.reward()) - v).abs();
        worst = worst.max(err);
        failures += (err > tol) as usize;
        let mass: f64 = (0..m.horizon()).map(|h| occ.state_marginal(h).iter().sum::<f64>()).sum();
        failures += ((mass - m.horizon() as f64).abs() > 1e-9) as usize;
    }
    Ok(Check::from_counts("occupancy_value_duality", cases, failures, format!("max error {worst:.3e} (tol {tol:e})")))
}

pub fn check_tv(cases: usize) -> Result<Check> {
    let mut rng = child_rng(0, "verify-tv", 0);
    let mut failures = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=8);
        let (p, q) = (sample_simplex(n, &mut rng), sample_simplex(n, &mut rng));
        let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
        let tv = tv_distance(&p, &q)?;
        failures += ((tv - 0.5 * l1).abs() > 1e-15 || !(0.0..=1.0).contains(&tv)) as usize;
    }
    Ok(Check::from_counts("tv_half_l1", cases, failures, String::new()))
}

/// `sum Tr(X_n M_{n-1}^{-1}) <= 2d log(1 + N/(lambda d))` for rank-one
/// streams with `||x|| <= 1` and `lambda >= 1`.
pub fn check_elliptical_potential(streams: usize) -> Result<Check> {
    let mut rng = child_rng(0, "verify-potential", 0);
    let (mut failures, mut tightest) = (0, f64::INFINITY);
    for _ in 0..streams {
        let d = rng.random_range(1..=4);
        let len = rng.random_range(1..=150);
        let lambda = 1.0 + 2.0 * rng.random::<f64>();
        let stream: Vec<DMatrix<f64>> = (0..len)
            .map(|_| {
                let scale = rng.random::<f64>().sqrt();
                let dir: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let x = nalgebra::DVector::from_iterator(d, dir.iter().map(|v| v / norm * scale));
                &x * x.transpose()
            })
            .collect();
        let (lhs, rhs) = elliptical_potential_check(&stream, lambda)?;
        tightest = tightest.min(rhs - lhs);
        failures += (lhs > rhs) as usize;
    }
    Ok(Check::from_counts("elliptical_potential", streams, failures, format!("min slack {tightest:.3e}")))
}

/// Adding a sample never increases the bonus anywhere.
pub fn check_bonus_monotone(cases: usize) -> Result<Check> {
    let mut rng = child_rng(0, "verify-bonus", 0);
    let mut failures = 0;
    for _ in 0..cases {
        let d = rng.random_range(1..=4);
        let mut state = RidgeState::new(d, 1.0)?;
        let query = sample_simplex(d, &mut rng);
        let mut prev = bonus(&query, &state)?;
        for _ in 0..20 {
            state.add(&sample_simplex(d, &mut rng));
            let b = bonus(&query, &state)?;
            failures += (b > prev + 1e-12) as usize;
            prev = b;
        }
    }
    Ok(Check::from_counts("bonus_monotone", cases * 20, failures, String::new()))
}

/// Best joint log-likelihood at step `h` by visiting every
/// `(phi, psi_1, .., psi_T)`: `(loglik, phi index, psi indices)`.
pub fn enumerate_mle(class: &ModelClass, data: &OfflineDataset, h: usize) -> Result<(f64, usize, Vec<usize>)> {
    let tasks = data.num_tasks();
    let m = class.size_psi();
    let mut best = (f64::NEG_INFINITY, 0, vec![0; tasks]);
    for (i, phi) in class.phis().iter().enumerate() {
        let mut idx = vec![0usize; tasks];
        'tuples: loop {
            let mus: Vec<&EmbeddingTable> = idx.iter().map(|&j| &class.psis()[j]).collect();
            let ll = joint_log_likelihood(phi, &mus, data, h)?;
            if ll > best.0 {
                best = (ll, i, idx.clone());
            }
            // Odometer step, last task fastest.
            for pos in (0..tasks).rev() {
                idx[pos] += 1;
                if idx[pos] < m {
                    continue 'tuples;
                }
                idx[pos] = 0;
            }
            break;
        }
    }
    Ok(best)
}

/// `mle_fit` attains the enumerated optimum, and the winner is at least as
/// likely as the true model.
pub fn check_mle(instances: usize, max_joint: usize) -> Result<(Check, Check)> {
    let mut rng = child_rng(0, "verify-mle", 0);
    let (mut cases, mut mismatches, mut dominated, mut worst) = (0, 0, 0, 0.0f64);
    for i in 0..instances {
        let tasks = 1 + i % 3;
        let fam = gen_task_family(4, 2, 2, 2, tasks, &mut rng)?;
        let spec = ClassSpec { num_phi_decoys: 3 + i % 5, num_psi_decoys: 2 + i % 7, ..ClassSpec::default() };
        let class = gen_model_class(&fam, &spec, &mut rng)?;
        if class.size_phi() * class.size_psi().pow(tasks as u32) > max_joint {
            continue;
        }
        let behaviors: Vec<StochasticPolicy> =
            fam.tasks().iter().map(|m| gen_behavior_policy(m, 0.2, &mut rng).map(|p| p.0)).collect::<Result<_>>()?;
        let n = [5, 30, 200][i % 3];
        let data = gen_dataset(&fam, &behaviors, n, &mut rng)?;
        let truth: Vec<&EmbeddingTable> = fam.tasks().iter().map(|m| m.mu()).collect();
        for h in 0..2 {
            cases += 1;
            let fit = mle_fit(&class, &data, h)?;
            let (best, _, _) = enumerate_mle(&class, &data, h)?;
            let err = (fit.loglik - best).abs() / best.abs().max(1.0);
            worst = worst.max(err);
            mismatches += (err > 1e-12) as usize;
            let true_ll = joint_log_likelihood(fam.shared_phi(), &truth, &data, h)?;
            dominated += (fit.loglik < true_ll) as usize;
        }
    }
    Ok((
        Check::from_counts("mle_enumeration", cases, mismatches, format!("max relative gap {worst:.3e}")),
        Check::from_counts("mle_dominates_truth", cases, dominated, String::new()),
    ))
}

/// Zero penalty, exact features and one noiseless sample of every
/// `(h, s, a)` recover an optimal policy.
pub fn check_pevi_recovery() -> Result<Check> {
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (hn, sn) in [(3, 3), (4, 3), (5, 4), (2, 2)] {
        let mdp = fixtures::ring(hn, sn);
        let data: Vec<Vec<Transition>> = (0..hn)
            .map(|h| {
                (0..sn)
                    .flat_map(|s| (0..2).map(move |a| (s, a)))
                    .map(|(s, a)| Transition {
                        state: s,
                        action: a,
                        reward: mdp.reward().get(h, s, a),
                        next_state: crate::mdp::sample_index(mdp.kernel().row(h, s, a), 0.5),
                    })
                    .collect()
            })
            .collect();
        let (pi, _) = pevi(&data, mdp.phi(), &PeviConfig { lambda_d: 1e-9, beta: 0.0, xi_down: 0.0 })?;
        let (_, opt) = optimal_plan(mdp.kernel(), mdp.reward())?;
        let gap = opt.value(mdp.initial()) - evaluate_policy(mdp.kernel(), mdp.reward(), &pi)?.value(mdp.initial());
        worst = worst.max(gap);
        failures += (gap >= 1e-6) as usize;
        cases += 1;
    }
    Ok(Check::from_counts("pevi_exact_recovery", cases, failures, format!("max gap {worst:.3e}")))
}

/// Q tables of PEVI, LSVI and RFE planning stay inside their clip ranges.
pub fn check_clip_ranges(cases: usize) -> Result<Check> {
    let mut rng = child_rng(0, "verify-clip", 0);
    let mut failures = 0;
    let mut checked = 0;
    for _ in 0..cases {
        let fam = random_mdp(&mut rng, 1)?;
        let m = &fam.tasks()[0];
        let (hn, sn, kn) = (m.horizon(), m.num_states(), m.num_actions());
        let pi = random_policy(m, &mut rng)?;
        let data = collect_offline(m, &pi, 30, &mut rng)?;
        let beta = 3.0 * rng.random::<f64>();
        let (_, pq) = pevi(&data, m.phi(), &PeviConfig { lambda_d: 1.0, beta, xi_down: 0.01 })?;
        let lcfg = LsviConfig {
            lambda_d: 1.0,
            c_beta: rng.random::<f64>(),
            xi_down: 0.0,
            c_l: 1.0,
            delta: 0.1,
            num_episodes: 5,
            record_q: true,
        };
        let out = lsvi_ucb(m, m.phi(), m.reward(), &lcfg, &mut rng)?;
        let (rdata, _) = rfe_explore(m, m.phi(), &RfeConfig { num_episodes: 10, beta, xi_down: 0.0, monitor: false }, &mut rng)?;
        let (_, rq) = rfe_plan(&rdata, m.phi(), m.reward(), beta)?;
        for h in 0..hn {
            let cap = (hn - h) as f64;
            for s in 0..sn {
                for a in 0..kn {
                    checked += 3;
                    failures += !(0.0..=cap).contains(&pq.q(h, s, a)) as usize;
                    failures += out.q_hat.iter().any(|t| !(0.0..=cap).contains(&t.q(h, s, a))) as usize;
                    failures += !(0.0..=hn as f64).contains(&rq.q(h, s, a)) as usize;
                }
            }
        }
    }
    Ok(Check::from_counts("clip_ranges", checked, failures, String::new()))
}

/// Mixture value equals the member mean and the averaged-occupancy value.
pub fn check_mixture_identity(cases: usize) -> Result<Check> {
    let mut rng = child_rng(0, "verify-mixture", 0);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let fam = random_mdp(&mut rng, 1)?;
        let m = &fam.tasks()[0];
        let lcfg = LsviConfig {
            lambda_d: 1.0,
            c_beta: 0.5,
            xi_down: 0.0,
            c_l: 1.0,
            delta: 0.1,
            num_episodes: 12,
            record_q: false,
        };
        let out = lsvi_ucb(m, m.phi(), m.reward(), &lcfg, &mut rng)?;
        let k = out.policies.len() as f64;
        let mean = out.values.iter().sum::<f64>() / k;
        let mut occ_value = 0.0;
        for pi in &out.policies {
            occ_value += occupancy_measures(m.kernel(), m.initial(), pi)?.integrate(m.reward()) / k;
        }
        let err = (out.mixture_value - mean).abs().max((out.mixture_value - occ_value).abs());
        worst = worst.max(err);
        failures += (err > 1e-12) as usize;
    }
    Ok(Check::from_counts("lsvi_mixture_identity", cases, failures, format!("max error {worst:.3e}")))
}

/// Distribution invariants of a stored MDP document, reported rather than
/// rejected.
pub fn verify_mdp_file(path: impl AsRef<Path>) -> Check {
    let name = "distribution (file)";
    match read_json::<MdpDocument>(path).and_then(|d| d.violations()) {
        Ok(v) => Check::from_counts(
            name,
            1,
            (!v.is_empty()) as usize,
            v.first()
                .map(|x| format!("{} violations, first {}: {}", v.len(), x.invariant, x.detail))
                .unwrap_or_default(),
        ),
        Err(e) => Check { name: name.into(), passed: false, cases: 1, failures: 1, detail: e.to_string() },
    }
}

/// The exact battery: every check that does not depend on sampling noise.
pub fn fast_checks() -> Result<Vec<Check>> {
    let (mle, dominance) = check_mle(30, 100_000)?;
    Ok(vec![
        check_distributions(50)?,
        check_simulation_lemma(100, 1e-8)?,
        check_occupancy_duality(100, 1e-9)?,
        check_tv(200)?,
        check_elliptical_potential(1000)?,
        check_bonus_monotone(100)?,
        mle,
        dominance,
        check_pevi_recovery()?,
        check_clip_ranges(30)?,
        check_mixture_identity(20)?,
    ])
}

pub fn verify(scope: Scope, cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let mut checks = fast_checks()?;
    if scope == Scope::Statistical {
        checks.extend(studies::all_statistical(cfg)?);
    }
    Ok(VerifyReport { checks })
}
