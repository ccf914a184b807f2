//! Seeded sweeps over data sizes and task counts.
//!
//! Seeds split hierarchically: `family_seed` fixes the environment (family,
//! class, behavior policies, target), and each replicate seed fixes the data
//! of one run through `derive_seed(seed, label, index)`. Jobs run in
//! parallel and rows come back in job order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::downstream::offline::{collect_offline, feature_coverage, pevi, pevi_beta, PeviConfig};
use crate::downstream::online::{lsvi_ucb, optimism_monitor, LsviConfig};
use crate::downstream::rfe::{beta_rfe, rfe_explore, rfe_plan, RfeConfig};
use crate::downstream::shared::approx_feature_error;
use crate::envgen::{
    gen_behavior_policy, gen_dataset, gen_model_class, gen_target_task, gen_task_family, linear_reward, sample_theta,
    TaskFamily,
};
use crate::error::{Error, Result};
use crate::harness::config::{Experiment, ExperimentConfig, FeatureSource};
use crate::harness::stats::{fit_loglog_slope, mean, median};
use crate::mdp::{evaluate_policy, optimal_plan, FeatureTable, StochasticPolicy, TabularLowRankMdp};
use crate::model::{fit_all_steps, joint_log_likelihood, ModelClass, OfflineDataset};
use crate::seed::{child_rng, Rng};
use crate::upstream::{default_lambda, run_morl, MorlConfig, MorlOutput, UpstreamReport};

/// Environment shared by every replicate of a given task count.
#[derive(Debug, Clone)]
pub struct Instance {
    pub family: TaskFamily,
    pub class: ModelClass,
    pub behaviors: Vec<StochasticPolicy>,
    /// Max over tasks of the inverse minimum action probability.
    pub omega: f64,
    /// Min over tasks of the reachability constant.
    pub kappa: f64,
}

/// Family, class and behavior policies for `num_tasks` source tasks. The
/// first tasks coincide across task counts.
pub fn build_instance(cfg: &ExperimentConfig, num_tasks: usize) -> Result<Instance> {
    let family = gen_task_family(
        cfg.num_states,
        cfg.num_actions,
        cfg.horizon,
        cfg.rank,
        num_tasks,
        &mut child_rng(cfg.family_seed, "family", 0),
    )?;
    let class = gen_model_class(&family, &cfg.class, &mut child_rng(cfg.family_seed, "class", num_tasks as u64))?;
    let mut behaviors = Vec::with_capacity(num_tasks);
    let (mut omega, mut kappa) = (0.0f64, f64::INFINITY);
    for (t, task) in family.tasks().iter().enumerate() {
        let (pi, cert) =
            gen_behavior_policy(task, cfg.min_action_prob, &mut child_rng(cfg.family_seed, "behavior", t as u64))?;
        omega = omega.max(cert.omega);
        kappa = kappa.min(cert.kappa);
        behaviors.push(pi);
    }
    Ok(Instance { family, class, behaviors, omega, kappa })
}

#[derive(Debug, Clone)]
pub struct UpstreamRun {
    pub dataset: OfflineDataset,
    pub output: MorlOutput,
    pub report: UpstreamReport,
    /// Joint log-likelihood of the true model, summed over steps.
    pub true_loglik: f64,
}

impl UpstreamRun {
    /// The selected model is at least as likely as the true one.
    pub fn dominates_truth(&self) -> bool {
        self.output.learned.loglik() >= self.true_loglik
    }
}

/// One upstream run with `n` episodes per task drawn from `rng`.
pub fn run_upstream(cfg: &ExperimentConfig, inst: &Instance, n: usize, rng: &mut Rng) -> Result<UpstreamRun> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let tasks = inst.family.num_tasks();
    let dataset = gen_dataset(&inst.family, &inst.behaviors, n, rng)?;
    let log_card = inst.class.log_cardinality(tasks);
    let morl = MorlConfig {
        lambda: default_lambda(cfg.lambda_scale, log_card, n, cfg.horizon, cfg.delta),
        alpha_mode: cfg.alpha,
        delta: cfg.delta,
        omega: inst.omega,
    };
    let output = run_morl(&dataset, &inst.class, &inst.family.rewards(), &morl)?;
    let report = UpstreamReport::measure(&output, &inst.family, &inst.class, &inst.behaviors, None, cfg.delta)?;
    let truth: Vec<_> = inst.family.tasks().iter().map(|m| m.mu()).collect();
    let true_loglik = (0..cfg.horizon)
        .map(|h| joint_log_likelihood(inst.family.shared_phi(), &truth, &dataset, h))
        .sum::<Result<f64>>()?;
    Ok(UpstreamRun { dataset, output, report, true_loglik })
}

/// Target task plus the features and misspecification level handed to the
/// downstream learners for one replicate.
#[derive(Debug, Clone)]
pub struct DownstreamSetup {
    pub target: TabularLowRankMdp,
    pub phi_hat: FeatureTable,
    /// Measured `max_h` feature approximation error of `phi_hat` on the target.
    pub xi_down: f64,
    pub behavior: StochasticPolicy,
}

pub fn downstream_setup(cfg: &ExperimentConfig, inst: &Instance, seed: u64) -> Result<DownstreamSetup> {
    let tasks = inst.family.num_tasks();
    let coeffs = vec![1.0 / tasks as f64; tasks];
    let (target, _) = gen_target_task(
        &inst.family,
        &coeffs,
        cfg.downstream.perturbation_weight,
        &mut child_rng(cfg.family_seed, "target", 0),
    )?;
    let (behavior, _) =
        gen_behavior_policy(&target, cfg.min_action_prob, &mut child_rng(cfg.family_seed, "target-behavior", 0))?;
    let phi_hat = match cfg.downstream.features {
        FeatureSource::True => target.phi().clone(),
        FeatureSource::Learned => {
            let mut rng = child_rng(seed, "downstream-upstream", 0);
            let data = gen_dataset(&inst.family, &inst.behaviors, cfg.downstream.upstream_n.max(1), &mut rng)?;
            fit_all_steps(&inst.class, &data)?.phi_hat
        }
    };
    let xi_down = approx_feature_error(&phi_hat, &target)?.max();
    Ok(DownstreamSetup { target, phi_hat, xi_down, behavior })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpstreamRow {
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "T")]
    pub num_tasks: usize,
    pub h: usize,
    pub avg_tv: f64,
    pub tv_bound: f64,
    pub subopt: f64,
    pub subopt_bound: f64,
    pub pessimism_gap: f64,
    pub pessimism_bound: f64,
    pub c_star: f64,
    pub omega: f64,
    pub alpha: f64,
    pub zeta_n: f64,
    pub lambda: f64,
    pub log_cardinality: f64,
    pub delta: f64,
    /// Mean penalty entry over tasks, steps, states and actions.
    pub penalty_mean: f64,
    /// Fraction of penalty entries clipped at 1.
    pub penalty_saturation: f64,
    pub realizable: bool,
    pub dominates_truth: bool,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RfeRow {
    pub seed: u64,
    pub k: usize,
    pub beta: f64,
    pub xi_down: f64,
    pub subopt_median: f64,
    pub subopt_mean: f64,
    /// Mean visited-pair bonus norm over the last tenth of episodes.
    pub tail_bonus: f64,
    pub optimism_violations: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OfflineRow {
    pub seed: u64,
    pub n_off: usize,
    pub beta: f64,
    pub xi_down: f64,
    pub kappa_rho: f64,
    pub subopt: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineRow {
    pub seed: u64,
    pub n_on: usize,
    pub beta_last: f64,
    pub xi_down: f64,
    pub avg_regret: f64,
    pub mixture_value: f64,
    pub optimal_value: f64,
    pub optimism_violations: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub experiment: String,
    pub metric: String,
    #[serde(rename = "T")]
    pub num_tasks: usize,
    pub points: usize,
    pub slope: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub upstream: Vec<UpstreamRow>,
    pub rfe: Vec<RfeRow>,
    pub offline: Vec<OfflineRow>,
    pub online: Vec<OnlineRow>,
    pub fits: Vec<SlopeFit>,
}

fn error_upstream_rows(seed: u64, n: usize, tasks: usize, horizon: usize, delta: f64, err: &Error) -> Vec<UpstreamRow> {
    (0..horizon)
        .map(|h| UpstreamRow {
            seed,
            n,
            num_tasks: tasks,
            h,
            avg_tv: f64::NAN,
            tv_bound: f64::NAN,
            subopt: f64::NAN,
            subopt_bound: f64::NAN,
            pessimism_gap: f64::NAN,
            pessimism_bound: f64::NAN,
            c_star: f64::NAN,
            omega: f64::NAN,
            alpha: f64::NAN,
            zeta_n: f64::NAN,
            lambda: f64::NAN,
            log_cardinality: f64::NAN,
            delta,
            penalty_mean: f64::NAN,
            penalty_saturation: f64::NAN,
            realizable: false,
            dominates_truth: false,
            error: err.to_string(),
        })
        .collect()
}

/// Data stream of the upstream replicate `(seed, T, n)`.
pub fn upstream_rng(seed: u64, num_tasks: usize, n: usize) -> Rng {
    child_rng(seed, "upstream", ((num_tasks as u64) << 32) ^ n as u64)
}

fn upstream_rows(cfg: &ExperimentConfig, inst: &Instance, n: usize, seed: u64) -> Vec<UpstreamRow> {
    let tasks = inst.family.num_tasks();
    let mut rng = upstream_rng(seed, tasks, n);
    let run = match run_upstream(cfg, inst, n, &mut rng) {
        Ok(r) => r,
        Err(e) => return error_upstream_rows(seed, n, tasks, cfg.horizon, cfg.delta, &e),
    };
    let r = &run.report;
    let dominates = run.dominates_truth();
    let entries: Vec<f64> = run.output.penalties.b_hat.iter().flat_map(|b| b.values().iter().copied()).collect();
    let penalty_mean = mean(&entries);
    let penalty_saturation = entries.iter().filter(|&&b| b >= 1.0).count() as f64 / entries.len() as f64;
    r.avg_tv_error
        .iter()
        .enumerate()
        .map(|(h, &avg_tv)| UpstreamRow {
            seed,
            n,
            num_tasks: tasks,
            h,
            avg_tv,
            tv_bound: r.tv_bound,
            subopt: r.avg_subopt,
            subopt_bound: r.subopt_bound,
            pessimism_gap: r.pessimism_gap,
            pessimism_bound: r.pessimism_bound,
            c_star: r.c_star,
            omega: r.omega,
            alpha: r.alpha,
            zeta_n: r.zeta_n,
            lambda: r.lambda,
            log_cardinality: run.output.log_cardinality,
            delta: cfg.delta,
            penalty_mean,
            penalty_saturation,
            realizable: r.realizable,
            dominates_truth: dominates,
            error: String::new(),
        })
        .collect()
}

fn optimal_gap(target: &TabularLowRankMdp, reward: &crate::mdp::RewardTable, pi: &dyn crate::mdp::Policy) -> Result<f64> {
    let (_, opt) = optimal_plan(target.kernel(), reward)?;
    let v = evaluate_policy(target.kernel(), reward, pi)?;
    Ok(opt.value(target.initial()) - v.value(target.initial()))
}

/// One RFE replicate: explore for `k` episodes, then plan for
/// `reward_draws` random linear rewards.
pub fn rfe_job(cfg: &ExperimentConfig, family: &TaskFamily, setup: &DownstreamSetup, k: usize, seed: u64) -> Result<RfeRow> {
    let hn = cfg.horizon;
    let beta = beta_rfe(cfg.c_l, hn, setup.phi_hat.dim(), k, setup.xi_down, cfg.delta);
    let rfe_cfg = RfeConfig { num_episodes: k, beta, xi_down: setup.xi_down, monitor: true };
    let (data, trace) = rfe_explore(&setup.target, &setup.phi_hat, &rfe_cfg, &mut child_rng(seed, "rfe", k as u64))?;
    let mut gaps = Vec::with_capacity(cfg.downstream.reward_draws);
    for j in 0..cfg.downstream.reward_draws {
        let mut rng = child_rng(seed, "rfe-reward", j as u64);
        let theta: Vec<Vec<f64>> = (0..hn).map(|_| sample_theta(cfg.rank, &mut rng)).collect();
        let reward = linear_reward(family.shared_phi(), &theta);
        let (pi, _) = rfe_plan(&data, &setup.phi_hat, &reward, beta)?;
        gaps.push(optimal_gap(&setup.target, &reward, &pi)?);
    }
    let tail = &trace.visited_norm[k - k.div_ceil(10).min(k)..];
    let tail_bonus = if tail.is_empty() { f64::NAN } else { mean(&tail.iter().map(|v| mean(v)).collect::<Vec<_>>()) };
    Ok(RfeRow {
        seed,
        k,
        beta,
        xi_down: setup.xi_down,
        subopt_median: median(&gaps),
        subopt_mean: mean(&gaps),
        tail_bonus,
        optimism_violations: trace.optimism_violations,
        error: String::new(),
    })
}

pub fn offline_job(cfg: &ExperimentConfig, setup: &DownstreamSetup, n_off: usize, seed: u64) -> Result<OfflineRow> {
    let mut rng = child_rng(seed, "offline", n_off as u64);
    let data = collect_offline(&setup.target, &setup.behavior, n_off, &mut rng)?;
    let beta = pevi_beta(cfg.c_beta, cfg.horizon, setup.phi_hat.dim(), n_off, setup.xi_down, cfg.delta);
    let pcfg = PeviConfig { lambda_d: cfg.downstream.lambda_d, beta, xi_down: setup.xi_down };
    let (pi, _) = pevi(&data, &setup.phi_hat, &pcfg)?;
    Ok(OfflineRow {
        seed,
        n_off,
        beta,
        xi_down: setup.xi_down,
        kappa_rho: feature_coverage(&setup.target, &setup.phi_hat, &setup.behavior)?,
        subopt: optimal_gap(&setup.target, setup.target.reward(), &pi)?,
        error: String::new(),
    })
}

pub fn online_job(cfg: &ExperimentConfig, setup: &DownstreamSetup, n_on: usize, seed: u64) -> Result<OnlineRow> {
    let lcfg = LsviConfig {
        lambda_d: cfg.downstream.lambda_d,
        c_beta: cfg.c_beta,
        xi_down: setup.xi_down,
        c_l: cfg.c_l,
        delta: cfg.delta,
        num_episodes: n_on,
        record_q: true,
    };
    let out = lsvi_ucb(
        &setup.target,
        &setup.phi_hat,
        setup.target.reward(),
        &lcfg,
        &mut child_rng(seed, "online", n_on as u64),
    )?;
    let violations = optimism_monitor(&out.q_hat, &setup.target, setup.target.reward(), setup.xi_down)?;
    Ok(OnlineRow {
        seed,
        n_on,
        beta_last: out.betas.last().copied().unwrap_or(f64::NAN),
        xi_down: setup.xi_down,
        avg_regret: out.average_regret(),
        mixture_value: out.mixture_value,
        optimal_value: out.optimal_value,
        optimism_violations: violations,
        error: String::new(),
    })
}

enum Rows {
    Upstream(Vec<UpstreamRow>),
    Rfe(RfeRow),
    Offline(OfflineRow),
    Online(OnlineRow),
}

/// Median over seeds of the step-averaged TV error, fitted against `n T`.
fn upstream_fits(rows: &[UpstreamRow]) -> Vec<SlopeFit> {
    let mut by_point: BTreeMap<(usize, usize), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        by_point.entry((r.num_tasks, r.n)).or_default().entry(r.seed).or_default().push(r.avg_tv);
    }
    let mut per_t: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((t, n), seeds) in by_point {
        let per_seed: Vec<f64> = seeds.values().map(|v| mean(v)).filter(|v| v.is_finite()).collect();
        if per_seed.is_empty() {
            continue;
        }
        let e = per_t.entry(t).or_default();
        e.0.push((n * t) as f64);
        e.1.push(median(&per_seed));
    }
    per_t
        .into_iter()
        .filter_map(|(t, (x, y))| {
            fit_loglog_slope(&x, &y).ok().map(|(slope, stderr)| SlopeFit {
                experiment: "upstream".into(),
                metric: "median_avg_tv_vs_nT".into(),
                num_tasks: t,
                points: x.len(),
                slope,
                stderr,
            })
        })
        .collect()
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let wants = |e| cfg.experiments.contains(&e);
    let mut instances: BTreeMap<usize, Instance> = BTreeMap::new();
    if wants(Experiment::Upstream) {
        for &t in &cfg.grid.tasks {
            instances.insert(t, build_instance(cfg, t)?);
        }
    }
    let downstream = [Experiment::Rfe, Experiment::Offline, Experiment::Online].into_iter().any(wants);
    let down_inst = if downstream { Some(build_instance(cfg, cfg.downstream.upstream_tasks)?) } else { None };
    let setups: Vec<std::result::Result<DownstreamSetup, String>> = match &down_inst {
        Some(inst) => cfg
            .seeds
            .par_iter()
            .map(|&s| downstream_setup(cfg, inst, s).map_err(|e| e.to_string()))
            .collect(),
        None => Vec::new(),
    };

    #[derive(Clone, Copy)]
    enum Job {
        Upstream { t: usize, n: usize, seed: u64 },
        Rfe { k: usize, seed_idx: usize },
        Offline { n: usize, seed_idx: usize },
        Online { n: usize, seed_idx: usize },
    }
    let mut jobs = Vec::new();
    for e in [Experiment::Upstream, Experiment::Rfe, Experiment::Offline, Experiment::Online] {
        if !wants(e) {
            continue;
        }
        match e {
            Experiment::Upstream => {
                for &t in &cfg.grid.tasks {
                    for &n in &cfg.grid.n {
                        jobs.extend(cfg.seeds.iter().map(|&seed| Job::Upstream { t, n, seed }));
                    }
                }
            }
            Experiment::Rfe => {
                for &k in &cfg.grid.k_rfe {
                    jobs.extend((0..cfg.seeds.len()).map(|seed_idx| Job::Rfe { k, seed_idx }));
                }
            }
            Experiment::Offline => {
                for &n in &cfg.grid.n_off {
                    jobs.extend((0..cfg.seeds.len()).map(|seed_idx| Job::Offline { n, seed_idx }));
                }
            }
            Experiment::Online => {
                for &n in &cfg.grid.n_on {
                    jobs.extend((0..cfg.seeds.len()).map(|seed_idx| Job::Online { n, seed_idx }));
                }
            }
        }
    }

    let fail = |e: &str| e.to_string();
    let outputs: Vec<Rows> = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Upstream { t, n, seed } => Rows::Upstream(upstream_rows(cfg, &instances[&t], n, seed)),
            Job::Rfe { k, seed_idx } => {
                let seed = cfg.seeds[seed_idx];
                let r = setups[seed_idx]
                    .as_ref()
                    .map_err(|e| fail(e))
                    .and_then(|s| rfe_job(cfg, &down_inst.as_ref().unwrap().family, s, k, seed).map_err(|e| e.to_string()));
                Rows::Rfe(r.unwrap_or_else(|error| RfeRow {
                    seed,
                    k,
                    beta: f64::NAN,
                    xi_down: f64::NAN,
                    subopt_median: f64::NAN,
                    subopt_mean: f64::NAN,
                    tail_bonus: f64::NAN,
                    optimism_violations: 0,
                    error,
                }))
            }
            Job::Offline { n, seed_idx } => {
                let seed = cfg.seeds[seed_idx];
                let r = setups[seed_idx]
                    .as_ref()
                    .map_err(|e| fail(e))
                    .and_then(|s| offline_job(cfg, s, n, seed).map_err(|e| e.to_string()));
                Rows::Offline(r.unwrap_or_else(|error| OfflineRow {
                    seed,
                    n_off: n,
                    beta: f64::NAN,
                    xi_down: f64::NAN,
                    kappa_rho: f64::NAN,
                    subopt: f64::NAN,
                    error,
                }))
            }
            Job::Online { n, seed_idx } => {
                let seed = cfg.seeds[seed_idx];
                let r = setups[seed_idx]
                    .as_ref()
                    .map_err(|e| fail(e))
                    .and_then(|s| online_job(cfg, s, n, seed).map_err(|e| e.to_string()));
                Rows::Online(r.unwrap_or_else(|error| OnlineRow {
                    seed,
                    n_on: n,
                    beta_last: f64::NAN,
                    xi_down: f64::NAN,
                    avg_regret: f64::NAN,
                    mixture_value: f64::NAN,
                    optimal_value: f64::NAN,
                    optimism_violations: 0,
                    error,
                }))
            }
        })
        .collect();

    let mut result = SweepResult::default();
    for out in outputs {
        match out {
            Rows::Upstream(rows) => result.upstream.extend(rows),
            Rows::Rfe(r) => result.rfe.push(r),
            Rows::Offline(r) => result.offline.push(r),
            Rows::Online(r) => result.online.push(r),
        }
    }
    result.fits = upstream_fits(&result.upstream);
    Ok(result)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl SweepResult {
    /// Writes `<experiment>_<tag>.csv` for every nonempty table and returns
    /// the paths in a fixed order.
    pub fn write_csv(&self, dir: impl AsRef<Path>, tag: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let mut emit = |name: &str, write: &dyn Fn(&Path) -> Result<()>, empty: bool| -> Result<()> {
            if !empty {
                let p = dir.join(format!("{name}_{tag}.csv"));
                write(&p)?;
                paths.push(p);
            }
            Ok(())
        };
        emit("upstream", &|p| write_rows(p, &self.upstream), self.upstream.is_empty())?;
        emit("rfe", &|p| write_rows(p, &self.rfe), self.rfe.is_empty())?;
        emit("offline", &|p| write_rows(p, &self.offline), self.offline.is_empty())?;
        emit("online", &|p| write_rows(p, &self.online), self.online.is_empty())?;
        emit("fits", &|p| write_rows(p, &self.fits), self.fits.is_empty())?;
        Ok(paths)
    }

    pub fn error_count(&self) -> usize {
        self.upstream.iter().filter(|r| !r.error.is_empty()).count()
            + self.rfe.iter().filter(|r| !r.error.is_empty()).count()
            + self.offline.iter().filter(|r| !r.error.is_empty()).count()
            + self.online.iter().filter(|r| !r.error.is_empty()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Grid;
    use crate::upstream::zeta_n;

    fn small(experiments: Vec<Experiment>) -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![0, 1],
            experiments,
            grid: Grid { n: vec![50, 100, 200], tasks: vec![2], k_rfe: vec![30], n_off: vec![40], n_on: vec![20] },
            downstream: crate::harness::config::DownstreamParams { upstream_n: 200, upstream_tasks: 2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn one_point_one_seed_gives_one_row_per_step() {
        let mut cfg = small(vec![Experiment::Upstream]);
        cfg.seeds = vec![7];
        cfg.grid.n = vec![100];
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.upstream.len(), 3);
        assert_eq!(res.upstream.iter().map(|r| r.h).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(res.fits.is_empty());
    }

    #[test]
    fn row_counts_and_plug_in_audit() {
        let cfg = small(vec![Experiment::Upstream, Experiment::Rfe, Experiment::Offline, Experiment::Online]);
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.error_count(), 0);
        for e in [Experiment::Upstream, Experiment::Rfe, Experiment::Offline, Experiment::Online] {
            let got = match e {
                Experiment::Upstream => res.upstream.len(),
                Experiment::Rfe => res.rfe.len(),
                Experiment::Offline => res.offline.len(),
                Experiment::Online => res.online.len(),
            };
            assert_eq!(got, cfg.expected_rows(e), "{e:?}");
        }
        for r in &res.upstream {
            let z = zeta_n(r.log_cardinality, r.n, cfg.horizon, r.delta);
            assert!((z - r.zeta_n).abs() <= 1e-12 * z);
            assert!((r.tv_bound - (z / r.num_tasks as f64).sqrt()).abs() < 1e-12);
            let pb = cfg.horizon as f64 * (r.omega * z / r.num_tasks as f64).sqrt();
            assert!((r.pessimism_bound - pb).abs() < 1e-9 * pb);
            assert!(r.dominates_truth);
        }
        assert_eq!(res.fits.len(), 1);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let cfg = small(vec![Experiment::Upstream, Experiment::Online]);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = run_sweep(&cfg).unwrap().write_csv(a.path(), "x").unwrap();
        let pb = run_sweep(&cfg).unwrap().write_csv(b.path(), "x").unwrap();
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let header = std::fs::read_to_string(&pa[0]).unwrap();
        assert!(header.starts_with(
            "seed,n,T,h,avg_tv,tv_bound,subopt,subopt_bound,pessimism_gap,pessimism_bound,c_star,omega,alpha,zeta_n,"
        ));
    }

    #[test]
    fn families_share_their_prefix_across_task_counts() {
        let cfg = ExperimentConfig::default();
        let a = build_instance(&cfg, 2).unwrap();
        let b = build_instance(&cfg, 4).unwrap();
        assert_eq!(a.family.shared_phi(), b.family.shared_phi());
        assert_eq!(a.family.tasks()[1].kernel(), b.family.tasks()[1].kernel());
        assert_eq!(a.behaviors, b.behaviors[..2]);
    }
}
