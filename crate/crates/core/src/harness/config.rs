use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envgen::ClassSpec;
use crate::error::{Error, Result};
use crate::upstream::AlphaMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Upstream,
    Rfe,
    Offline,
    Online,
}

impl Experiment {
    pub fn label(self) -> &'static str {
        match self {
            Experiment::Upstream => "upstream",
            Experiment::Rfe => "rfe",
            Experiment::Offline => "offline",
            Experiment::Online => "online",
        }
    }
}

/// Which features the downstream learners receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// `phi_hat` from an upstream run on the source tasks.
    Learned,
    /// The true shared features.
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    /// Episodes per source task.
    pub n: Vec<usize>,
    /// Number of source tasks.
    pub tasks: Vec<usize>,
    pub k_rfe: Vec<usize>,
    pub n_off: Vec<usize>,
    pub n_on: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n: vec![250, 1000, 4000, 16000],
            tasks: vec![4],
            k_rfe: vec![4000, 16000],
            n_off: vec![500, 2000, 8000],
            n_on: vec![1000, 4000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamParams {
    pub features: FeatureSource,
    /// Episodes per source task for the upstream fit behind `phi_hat`.
    pub upstream_n: usize,
    /// Source tasks for that fit.
    pub upstream_tasks: usize,
    /// Mixing weight of the out-of-span component in the target kernel.
    pub perturbation_weight: f64,
    /// Random linear rewards revealed after exploration.
    pub reward_draws: usize,
    pub lambda_d: f64,
}

impl Default for DownstreamParams {
    fn default() -> Self {
        Self {
            features: FeatureSource::Learned,
            upstream_n: 10_000,
            upstream_tasks: 4,
            perturbation_weight: 0.0,
            reward_draws: 10,
            lambda_d: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub rank: usize,
    pub class: ClassSpec,
    pub min_action_prob: f64,
    /// `lambda = lambda_scale * log(|Phi||Psi|^T n H / delta)`.
    pub lambda_scale: f64,
    pub alpha: AlphaMode,
    pub c_beta: f64,
    pub c_l: f64,
    pub delta: f64,
    /// Seeds the task family, model class, behavior policies and target.
    pub family_seed: u64,
    /// Replicate seeds; each drives the sampled data of one run.
    pub seeds: Vec<u64>,
    pub experiments: Vec<Experiment>,
    pub grid: Grid,
    pub downstream: DownstreamParams,
    pub output_dir: Option<PathBuf>,
    pub tag: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_states: 5,
            num_actions: 2,
            horizon: 3,
            rank: 2,
            class: ClassSpec::default(),
            min_action_prob: 0.25,
            lambda_scale: 1.0,
            alpha: AlphaMode::Theory,
            c_beta: 1.0,
            c_l: 1.0,
            delta: 0.1,
            family_seed: 0,
            seeds: (0..20).collect(),
            experiments: vec![Experiment::Upstream],
            grid: Grid::default(),
            downstream: DownstreamParams::default(),
            output_dir: None,
            tag: "run".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 || self.rank == 0 {
            return bad("S, K, H and d must be positive");
        }
        if self.rank > self.num_states.min(self.num_states * self.num_actions) {
            return bad("rank exceeds min(S, SK)");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if !(self.min_action_prob > 0.0 && self.min_action_prob * self.num_actions as f64 <= 1.0 + 1e-12) {
            return bad("min_action_prob must lie in (0, 1/K]");
        }
        if !(self.lambda_scale > 0.0) || !(self.c_beta >= 0.0) || !(self.c_l >= 0.0) {
            return bad("lambda_scale must be positive and c_beta, c_l nonnegative");
        }
        if let AlphaMode::Manual(a) = self.alpha {
            if !(a >= 0.0) {
                return bad("manual alpha must be nonnegative");
            }
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.experiments.is_empty() {
            return bad("no experiments requested");
        }
        for e in &self.experiments {
            let empty = match e {
                Experiment::Upstream => self.grid.n.is_empty() || self.grid.tasks.is_empty(),
                Experiment::Rfe => self.grid.k_rfe.is_empty(),
                Experiment::Offline => self.grid.n_off.is_empty(),
                Experiment::Online => self.grid.n_on.is_empty(),
            };
            if empty {
                return bad(&format!("grid for {} is empty", e.label()));
            }
        }
        if self.grid.tasks.contains(&0) || self.downstream.upstream_tasks == 0 {
            return bad("task counts must be positive");
        }
        if !(0.0..1.0).contains(&self.downstream.perturbation_weight) {
            return bad("perturbation_weight must lie in [0, 1)");
        }
        if !(self.downstream.lambda_d > 0.0) {
            return bad("lambda_d must be positive");
        }
        Ok(())
    }

    /// Number of rows `run_sweep` emits for `experiment`.
    pub fn expected_rows(&self, experiment: Experiment) -> usize {
        let points = match experiment {
            Experiment::Upstream => self.grid.n.len() * self.grid.tasks.len() * self.horizon,
            Experiment::Rfe => self.grid.k_rfe.len(),
            Experiment::Offline => self.grid.n_off.len(),
            Experiment::Online => self.grid.n_on.len(),
        };
        if self.experiments.contains(&experiment) {
            points * self.seeds.len()
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds":[3,4],"grid":{"n":[10]}}"#).unwrap();
        assert_eq!(partial.seeds, vec![3, 4]);
        assert_eq!(partial.grid.n, vec![10]);
        assert_eq!(partial.grid.tasks, vec![4]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ExperimentConfig { seeds: vec![1, 1], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1];
        cfg.delta = 1.0;
        assert!(cfg.validate().is_err());
        cfg.delta = 0.1;
        cfg.grid.n.clear();
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn row_counts() {
        let cfg = ExperimentConfig {
            experiments: vec![Experiment::Upstream, Experiment::Online],
            seeds: vec![0, 1, 2],
            ..Default::default()
        };
        assert_eq!(cfg.expected_rows(Experiment::Upstream), 4 * 3 * 3);
        assert_eq!(cfg.expected_rows(Experiment::Online), 2 * 3);
        assert_eq!(cfg.expected_rows(Experiment::Rfe), 0);
    }
}
