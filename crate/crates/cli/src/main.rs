//! `morl`: generate environments, run the upstream and downstream learners,
//! sweep grids to CSV, and run the invariant battery.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use morl_core::downstream::rfe::{beta_rfe, rfe_explore, rfe_plan, RfeConfig};
use morl_core::envgen::{gen_dataset, gen_target_task, linear_reward, sample_theta};
use morl_core::harness::config::{Experiment, ExperimentConfig, FeatureSource};
use morl_core::harness::stats::median;
use morl_core::harness::sweep::{build_instance, downstream_setup, run_sweep, run_upstream, upstream_rng, SweepResult};
use morl_core::harness::verify::{verify, verify_mdp_file, Scope, VerifyReport};
use morl_core::io::{
    read_json, write_json, DatasetDocument, FamilyManifest, FeatureDocument, LearnedModelDocument, MdpDocument,
    PolicyDocument, RewardDocument, RfeDatasetDocument, FORMAT_VERSION,
};
use morl_core::mdp::{evaluate_policy, optimal_plan};
use morl_core::seed::child_rng;
use morl_core::upstream::AlphaMode;

#[derive(Parser, Debug)]
#[command(name = "morl", version, about = "Multitask representation learning for low-rank MDPs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file (or the defaults).
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = "MORL_OUT")]
    out: Option<PathBuf>,
    /// Suffix of output file names.
    #[arg(long, global = true)]
    tag: Option<String>,
    #[arg(long, global = true)]
    states: Option<usize>,
    #[arg(long, global = true)]
    actions: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    family_seed: Option<u64>,
    /// Replicate seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Scale of the downstream bonus and penalty constants.
    #[arg(long, global = true)]
    c_beta: Option<f64>,
    /// Fixed penalty scale instead of the theory value.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Features handed to the downstream learners.
    #[arg(long, global = true, value_enum)]
    feature_source: Option<Features>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Features {
    Learned,
    True,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a task family, behavior policies, a target task and optionally a dataset.
    Gen {
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        /// Episodes per task; no dataset is written when absent.
        #[arg(long)]
        n: Option<usize>,
        /// Seed of the dataset stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Upstream sweep over source task counts and sample sizes.
    Upstream {
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<usize>>,
        /// Also write the dataset, learned model, policies and report of every run.
        #[arg(long)]
        save_artifacts: bool,
    },
    /// Reward-free exploration followed by planning.
    Rfe {
        #[command(subcommand)]
        phase: RfePhase,
    },
    /// Pessimistic offline learning on the target task.
    Offline {
        #[arg(long, value_delimiter = ',')]
        n_off: Option<Vec<usize>>,
    },
    /// Optimistic online learning on the target task.
    Online {
        #[arg(long, value_delimiter = ',')]
        n_on: Option<Vec<usize>>,
    },
    /// Every experiment listed in the config (or on the command line).
    Sweep {
        #[arg(long, value_delimiter = ',', value_enum)]
        experiments: Option<Vec<ExperimentArg>>,
    },
    /// Invariant battery; exits 0 iff every check passes.
    Verify {
        /// Exact checks only (the default).
        #[arg(long, conflicts_with = "statistical")]
        fast: bool,
        /// Exact checks plus the seeded statistical studies.
        #[arg(long)]
        statistical: bool,
        /// Stored MDP documents to check for distribution invariants.
        #[arg(long)]
        mdp_file: Vec<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum RfePhase {
    /// Grid of exploration lengths, planning for random linear rewards.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// One exploration run; writes the dataset, features, target, a sample reward and the trace.
    Explore {
        #[arg(long, default_value_t = 4000)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plan on a stored exploration dataset for a revealed reward.
    Plan {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        /// Target MDP document; when given, the plan is evaluated exactly.
        #[arg(long)]
        mdp: Option<PathBuf>,
        /// Bonus scale; defaults to the exploration value for this dataset size.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        xi_down: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentArg {
    Upstream,
    Rfe,
    Offline,
    Online,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Upstream => Experiment::Upstream,
            ExperimentArg::Rfe => Experiment::Rfe,
            ExperimentArg::Offline => Experiment::Offline,
            ExperimentArg::Online => Experiment::Online,
        }
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.states {
            cfg.num_states = v;
        }
        if let Some(v) = self.actions {
            cfg.num_actions = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.rank {
            cfg.rank = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.family_seed {
            cfg.family_seed = v;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.c_beta {
            cfg.c_beta = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = AlphaMode::Manual(v);
        }
        if let Some(f) = self.feature_source {
            cfg.downstream.features = match f {
                Features::Learned => FeatureSource::Learned,
                Features::True => FeatureSource::True,
            };
        }
        if let Some(t) = &self.tag {
            cfg.tag = t.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = cli.common.config()?;
    match cli.command {
        Command::Gen { tasks, n, seed } => gen(&cfg, tasks, n, seed)?,
        Command::Upstream { n, tasks, save_artifacts } => {
            cfg.experiments = vec![Experiment::Upstream];
            if let Some(n) = n {
                cfg.grid.n = n;
            }
            if let Some(t) = tasks {
                cfg.grid.tasks = t;
            }
            sweep_and_report(&cfg)?;
            if save_artifacts {
                upstream_artifacts(&cfg)?;
            }
        }
        Command::Rfe { phase } => match phase {
            RfePhase::Sweep { k } => {
                cfg.experiments = vec![Experiment::Rfe];
                if let Some(k) = k {
                    cfg.grid.k_rfe = k;
                }
                sweep_and_report(&cfg)?;
            }
            RfePhase::Explore { k, seed } => rfe_explore_cmd(&cfg, k, seed)?,
            RfePhase::Plan { dataset, features, reward, mdp, beta, xi_down } => {
                rfe_plan_cmd(&cfg, &dataset, &features, &reward, mdp.as_deref(), beta, xi_down)?
            }
        },
        Command::Offline { n_off } => {
            cfg.experiments = vec![Experiment::Offline];
            if let Some(n) = n_off {
                cfg.grid.n_off = n;
            }
            sweep_and_report(&cfg)?;
        }
        Command::Online { n_on } => {
            cfg.experiments = vec![Experiment::Online];
            if let Some(n) = n_on {
                cfg.grid.n_on = n;
            }
            sweep_and_report(&cfg)?;
        }
        Command::Sweep { experiments } => {
            if let Some(e) = experiments {
                cfg.experiments = e.into_iter().map(Experiment::from).collect();
            }
            sweep_and_report(&cfg)?;
        }
        Command::Verify { fast: _, statistical, mdp_file } => {
            let scope = if statistical { Scope::Statistical } else { Scope::Fast };
            let mut report = verify(scope, &cfg)?;
            report.checks.extend(mdp_file.iter().map(|p| {
                let mut c = verify_mdp_file(p);
                c.name = format!("distribution ({})", p.display());
                c
            }));
            return Ok(print_report(&report));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &VerifyReport) -> ExitCode {
    for c in &report.checks {
        println!("{}", c.line());
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", report.checks.len());
    if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn sweep_and_report(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let result = run_sweep(cfg)?;
    let paths = result.write_csv(out_dir(cfg), &cfg.tag)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    summarize(&result);
    let errors = result.error_count();
    if errors > 0 {
        eprintln!("warning: {errors} rows recorded errors; see the error column");
    }
    Ok(result)
}

/// Median over seeds of `value`, one line per grid key.
fn print_medians<K: Ord + Copy + std::fmt::Debug>(title: &str, rows: impl Iterator<Item = (K, f64)>) {
    let mut groups: std::collections::BTreeMap<K, Vec<f64>> = Default::default();
    for (k, v) in rows {
        groups.entry(k).or_default().push(v);
    }
    for (k, v) in groups {
        println!("  {title} {k:?}: median {:.4e} over {} seeds", median(&v), v.len());
    }
}

fn summarize(r: &SweepResult) {
    if !r.upstream.is_empty() {
        println!("upstream avg_tv (step 1) by (T, n):");
        print_medians("(T, n) =", r.upstream.iter().filter(|x| x.h == 0).map(|x| ((x.num_tasks, x.n), x.avg_tv)));
        for f in &r.fits {
            println!("  slope of median avg_tv vs nT (T = {}): {:.4} +- {:.4}", f.num_tasks, f.slope, f.stderr);
        }
    }
    if !r.rfe.is_empty() {
        println!("rfe planning suboptimality:");
        print_medians("K =", r.rfe.iter().map(|x| (x.k, x.subopt_median)));
    }
    if !r.offline.is_empty() {
        println!("pevi suboptimality:");
        print_medians("N_off =", r.offline.iter().map(|x| (x.n_off, x.subopt)));
    }
    if !r.online.is_empty() {
        println!("lsvi-ucb average regret:");
        print_medians("N_on =", r.online.iter().map(|x| (x.n_on, x.avg_regret)));
    }
}

fn gen(cfg: &ExperimentConfig, tasks: usize, n: Option<usize>, seed: u64) -> Result<()> {
    cfg.validate()?;
    let dir = out_dir(cfg).join(format!("family_{}", cfg.tag));
    let inst = build_instance(cfg, tasks)?;
    let mut members = Vec::new();
    let mut behaviors = Vec::new();
    for (t, (task, pi)) in inst.family.tasks().iter().zip(&inst.behaviors).enumerate() {
        let m = format!("task_{t}.json");
        write_json(dir.join(&m), &MdpDocument::from_mdp(task))?;
        let b = format!("behavior_{t}.json");
        write_json(dir.join(&b), &PolicyDocument::from_stochastic(pi))?;
        members.push(m);
        behaviors.push(b);
    }
    let coeffs = vec![1.0 / tasks as f64; tasks];
    let (target, _) = gen_target_task(
        &inst.family,
        &coeffs,
        cfg.downstream.perturbation_weight,
        &mut child_rng(cfg.family_seed, "target", 0),
    )?;
    write_json(dir.join("target.json"), &MdpDocument::from_mdp(&target))?;
    let dataset = match n {
        Some(n) => {
            let data = gen_dataset(&inst.family, &inst.behaviors, n, &mut upstream_rng(seed, tasks, n))?;
            write_json(dir.join("dataset.json"), &DatasetDocument::from_dataset(&data))?;
            Some("dataset.json".to_string())
        }
        None => None,
    };
    let manifest = FamilyManifest { version: FORMAT_VERSION, seed: cfg.family_seed, members, behaviors, dataset };
    write_json(dir.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} tasks to {} (omega {:.3}, kappa {:.3e})",
        tasks,
        dir.display(),
        inst.omega,
        inst.kappa
    );
    Ok(())
}

fn upstream_artifacts(cfg: &ExperimentConfig) -> Result<()> {
    for &t in &cfg.grid.tasks {
        let inst = build_instance(cfg, t)?;
        for &n in &cfg.grid.n {
            for &seed in &cfg.seeds {
                let dir = out_dir(cfg).join(format!("upstream_{}", cfg.tag)).join(format!("T{t}_n{n}_seed{seed}"));
                let run = match run_upstream(cfg, &inst, n, &mut upstream_rng(seed, t, n)) {
                    Ok(r) => r,
                    Err(e) => {
                        eprintln!("warning: T={t} n={n} seed={seed}: {e}");
                        continue;
                    }
                };
                write_json(dir.join("dataset.json"), &DatasetDocument::from_dataset(&run.dataset))?;
                write_json(dir.join("model.json"), &LearnedModelDocument::from_model(&run.output.learned))?;
                write_json(dir.join("features.json"), &FeatureDocument::from_table(&run.output.learned.phi_hat))?;
                for (i, pi) in run.output.policies.iter().enumerate() {
                    write_json(dir.join(format!("policy_{i}.json")), &PolicyDocument::from_deterministic(pi))?;
                }
                std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&run.report)?)?;
            }
        }
    }
    println!("wrote upstream artifacts under {}", out_dir(cfg).join(format!("upstream_{}", cfg.tag)).display());
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    episode: usize,
    optimistic_value: f64,
    mean_visited_norm: f64,
    truncated_optimal: f64,
}

fn rfe_explore_cmd(cfg: &ExperimentConfig, k: usize, seed: u64) -> Result<()> {
    cfg.validate()?;
    if k == 0 {
        bail!("--k must be positive");
    }
    let inst = build_instance(cfg, cfg.downstream.upstream_tasks)?;
    let setup = downstream_setup(cfg, &inst, seed)?;
    let beta = beta_rfe(cfg.c_l, cfg.horizon, setup.phi_hat.dim(), k, setup.xi_down, cfg.delta);
    let rcfg = RfeConfig { num_episodes: k, beta, xi_down: setup.xi_down, monitor: true };
    let (data, trace) = rfe_explore(&setup.target, &setup.phi_hat, &rcfg, &mut child_rng(seed, "rfe", k as u64))?;

    let dir = out_dir(cfg);
    let name = |stem: &str, ext: &str| dir.join(format!("{stem}_{}.{ext}", cfg.tag));
    write_json(name("rfe_dataset", "json"), &RfeDatasetDocument::from_dataset(&data))?;
    write_json(name("features", "json"), &FeatureDocument::from_table(&setup.phi_hat))?;
    write_json(name("target", "json"), &MdpDocument::from_mdp(&setup.target))?;
    let mut rng = child_rng(seed, "rfe-reward", 0);
    let theta: Vec<Vec<f64>> = (0..cfg.horizon).map(|_| sample_theta(cfg.rank, &mut rng)).collect();
    write_json(name("reward", "json"), &RewardDocument::from_table(&linear_reward(inst.family.shared_phi(), &theta)))?;

    let mut w = csv::Writer::from_path(name("rfe_trace", "csv"))?;
    for (episode, (v, norms)) in trace.optimistic_value.iter().zip(&trace.visited_norm).enumerate() {
        w.serialize(TraceRow {
            episode,
            optimistic_value: *v,
            mean_visited_norm: norms.iter().sum::<f64>() / norms.len() as f64,
            truncated_optimal: trace.truncated_optimal.get(episode).copied().unwrap_or(f64::NAN),
        })?;
    }
    w.flush()?;
    println!(
        "explored {k} episodes (beta {beta:.3}, xi_down {:.3e}, optimism violations {}); files in {}",
        setup.xi_down,
        trace.optimism_violations,
        dir.display()
    );
    Ok(())
}

fn rfe_plan_cmd(
    cfg: &ExperimentConfig,
    dataset: &Path,
    features: &Path,
    reward: &Path,
    mdp: Option<&Path>,
    beta: Option<f64>,
    xi_down: f64,
) -> Result<()> {
    let phi = read_json::<FeatureDocument>(features)?.to_table()?;
    let data = read_json::<RfeDatasetDocument>(dataset)?.to_dataset(&phi)?;
    let reward = read_json::<RewardDocument>(reward)?.to_table()?;
    let beta = beta.unwrap_or_else(|| beta_rfe(cfg.c_l, phi.horizon(), phi.dim(), data.len().max(1), xi_down, cfg.delta));
    let (pi, v_hat) = rfe_plan(&data, &phi, &reward, beta)?;
    let path = out_dir(cfg).join(format!("rfe_policy_{}.json", cfg.tag));
    write_json(&path, &PolicyDocument::from_deterministic(&pi))?;
    println!("planned on {} episodes with beta {beta:.3}; wrote {}", data.len(), path.display());
    if let Some(m) = mdp {
        let target = read_json::<MdpDocument>(m)?.to_mdp()?;
        let v = evaluate_policy(target.kernel(), &reward, &pi)?;
        let (_, opt) = optimal_plan(target.kernel(), &reward)?;
        let (v, opt) = (v.value(target.initial()), opt.value(target.initial()));
        println!(
            "estimated value {:.6}, true value {v:.6}, optimal {opt:.6}, suboptimality {:.6}",
            v_hat.value(target.initial()),
            opt - v
        );
    }
    Ok(())
}
