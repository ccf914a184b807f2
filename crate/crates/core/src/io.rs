//! Versioned JSON documents for MDPs, policies, datasets and learned models.
//!
//! Floats go through `serde_json`, whose shortest round-trip formatting
//! reproduces every `f64` bit for bit on reload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::downstream::rfe::RfeDataset;
use crate::error::{Error, Result};
use crate::mdp::{
    validate_factors, DeterministicPolicy, EmbeddingTable, FeatureTable, InitialDist, InvariantViolation, RewardTable,
    StochasticPolicy, TabularLowRankMdp,
};
use crate::model::{LearnedModel, OfflineDataset, Transition};

pub const FORMAT_VERSION: u32 = 1;

pub trait Versioned {
    fn version(&self) -> u32;
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, doc: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned + Versioned>(path: impl AsRef<Path>) -> Result<T> {
    let doc: T = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    match doc.version() {
        FORMAT_VERSION => Ok(doc),
        v => Err(Error::UnsupportedVersion(v)),
    }
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn version(&self) -> u32 {
                self.version
            }
        })*
    };
}

pub(crate) fn features_to_nested(phi: &FeatureTable) -> Vec<Vec<Vec<Vec<f64>>>> {
    (0..phi.horizon())
        .map(|h| {
            (0..phi.num_states())
                .map(|s| (0..phi.num_actions()).map(|a| phi.get(h, s, a).to_vec()).collect())
                .collect()
        })
        .collect()
}

fn embedding_to_nested(mu: &EmbeddingTable) -> Vec<Vec<Vec<f64>>> {
    (0..mu.horizon())
        .map(|h| (0..mu.num_states()).map(|s| mu.get(h, s).to_vec()).collect())
        .collect()
}

fn reward_to_nested(r: &RewardTable) -> Vec<Vec<Vec<f64>>> {
    (0..r.horizon())
        .map(|h| {
            (0..r.num_states())
                .map(|s| (0..r.num_actions()).map(|a| r.get(h, s, a)).collect())
                .collect()
        })
        .collect()
}

fn shape_error(what: &str) -> Error {
    Error::DimensionMismatch(format!("{what} has the wrong shape"))
}

fn features_from_nested(x: &[Vec<Vec<Vec<f64>>>], hn: usize, sn: usize, kn: usize, d: usize) -> Result<FeatureTable> {
    let ok = x.len() == hn
        && x.iter().all(|hs| {
            hs.len() == sn && hs.iter().all(|ss| ss.len() == kn && ss.iter().all(|v| v.len() == d))
        });
    if !ok {
        return Err(shape_error("phi"));
    }
    Ok(FeatureTable::from_fn(hn, sn, kn, d, |h, s, a| x[h][s][a].clone()))
}

fn embedding_from_nested(x: &[Vec<Vec<f64>>], hn: usize, sn: usize, d: usize) -> Result<EmbeddingTable> {
    if x.len() != hn || x.iter().any(|hs| hs.len() != sn || hs.iter().any(|v| v.len() != d)) {
        return Err(shape_error("mu"));
    }
    Ok(EmbeddingTable::from_fn(hn, sn, d, |h, s| x[h][s].clone()))
}

fn reward_from_nested(x: &[Vec<Vec<f64>>], hn: usize, sn: usize, kn: usize) -> Result<RewardTable> {
    if x.len() != hn || x.iter().any(|hs| hs.len() != sn || hs.iter().any(|v| v.len() != kn)) {
        return Err(shape_error("reward"));
    }
    Ok(RewardTable::from_fn(hn, sn, kn, |h, s, a| x[h][s][a]))
}

/// `{"version":1,"S":..,"K":..,"H":..,"d":..,"phi":[h][s][a][i],"mu":[h][s'][i],"reward":[h][s][a],"s1":..}`.
/// `s1` is a state index or a distribution over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    pub version: u32,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "K")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub d: usize,
    pub phi: Vec<Vec<Vec<Vec<f64>>>>,
    pub mu: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<Vec<f64>>>,
    pub s1: InitialDist,
}

impl MdpDocument {
    pub fn from_mdp(mdp: &TabularLowRankMdp) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            horizon: mdp.horizon(),
            d: mdp.rank(),
            phi: features_to_nested(mdp.phi()),
            mu: embedding_to_nested(mdp.mu()),
            reward: reward_to_nested(mdp.reward()),
            s1: mdp.initial().clone(),
        }
    }

    /// Tables as stored, checked for shape only.
    pub fn tables(&self) -> Result<(FeatureTable, EmbeddingTable, RewardTable)> {
        let (hn, sn, kn, d) = (self.horizon, self.num_states, self.num_actions, self.d);
        Ok((
            features_from_nested(&self.phi, hn, sn, kn, d)?,
            embedding_from_nested(&self.mu, hn, sn, d)?,
            reward_from_nested(&self.reward, hn, sn, kn)?,
        ))
    }

    /// Invariant violations of the stored factors, without rejecting them.
    pub fn violations(&self) -> Result<Vec<InvariantViolation>> {
        let (phi, mu, reward) = self.tables()?;
        Ok(validate_factors(&phi, &mu, Some(&reward)))
    }

    pub fn to_mdp(&self) -> Result<TabularLowRankMdp> {
        let (phi, mu, reward) = self.tables()?;
        TabularLowRankMdp::new(phi, mu, reward, self.s1.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDocument {
    pub version: u32,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "K")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub reward: Vec<Vec<Vec<f64>>>,
}

impl RewardDocument {
    pub fn from_table(r: &RewardTable) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_states: r.num_states(),
            num_actions: r.num_actions(),
            horizon: r.horizon(),
            reward: reward_to_nested(r),
        }
    }

    pub fn to_table(&self) -> Result<RewardTable> {
        reward_from_nested(&self.reward, self.horizon, self.num_states, self.num_actions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyBody {
    /// `actions[h][s]`.
    Deterministic { actions: Vec<Vec<usize>> },
    /// `probs[h][s][a]`.
    Stochastic { probs: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub version: u32,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "K")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(flatten)]
    pub body: PolicyBody,
}

impl PolicyDocument {
    pub fn from_deterministic(pi: &DeterministicPolicy) -> Self {
        use crate::mdp::Policy;
        let (hn, sn) = (pi.horizon(), pi.num_states());
        Self {
            version: FORMAT_VERSION,
            num_states: sn,
            num_actions: pi.num_actions(),
            horizon: hn,
            body: PolicyBody::Deterministic {
                actions: (0..hn).map(|h| (0..sn).map(|s| pi.action(h, s)).collect()).collect(),
            },
        }
    }

    pub fn from_stochastic(pi: &StochasticPolicy) -> Self {
        use crate::mdp::Policy;
        let (hn, sn) = (pi.horizon(), pi.num_states());
        Self {
            version: FORMAT_VERSION,
            num_states: sn,
            num_actions: pi.num_actions(),
            horizon: hn,
            body: PolicyBody::Stochastic {
                probs: (0..hn).map(|h| (0..sn).map(|s| pi.row(h, s).to_vec()).collect()).collect(),
            },
        }
    }

    pub fn to_stochastic(&self) -> Result<StochasticPolicy> {
        let (hn, sn, kn) = (self.horizon, self.num_states, self.num_actions);
        let mut flat = Vec::with_capacity(hn * sn * kn);
        match &self.body {
            PolicyBody::Deterministic { actions } => {
                if actions.len() != hn || actions.iter().any(|r| r.len() != sn) {
                    return Err(shape_error("actions"));
                }
                for &a in actions.iter().flatten() {
                    crate::error::check_index("action", a, kn)?;
                    flat.extend((0..kn).map(|b| if a == b { 1.0 } else { 0.0 }));
                }
            }
            PolicyBody::Stochastic { probs } => {
                if probs.len() != hn || probs.iter().any(|r| r.len() != sn || r.iter().any(|p| p.len() != kn)) {
                    return Err(shape_error("probs"));
                }
                flat.extend(probs.iter().flatten().flatten().copied());
            }
        }
        StochasticPolicy::new(hn, sn, kn, flat)
    }
}

/// `tuples[t][h]` lists of `(s, a, r, s')` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDocument {
    pub version: u32,
    #[serde(rename = "T")]
    pub num_tasks: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub tuples: Vec<Vec<Vec<Transition>>>,
}

impl DatasetDocument {
    pub fn from_dataset(data: &OfflineDataset) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_tasks: data.num_tasks(),
            horizon: data.horizon(),
            tuples: data.tuples().to_vec(),
        }
    }

    pub fn to_dataset(&self) -> Result<OfflineDataset> {
        if self.tuples.len() != self.num_tasks || self.tuples.iter().any(|t| t.len() != self.horizon) {
            return Err(shape_error("tuples"));
        }
        OfflineDataset::from_tuples(self.tuples.clone())
    }
}

/// Learned features and per-task embeddings with the selected indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModelDocument {
    pub version: u32,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "K")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub d: usize,
    pub phi: Vec<Vec<Vec<Vec<f64>>>>,
    /// `mu[t][h][s'][i]`.
    pub mu: Vec<Vec<Vec<Vec<f64>>>>,
    pub phi_index: Vec<usize>,
    pub mu_index: Vec<Vec<usize>>,
    pub loglik_by_step: Vec<f64>,
}

impl LearnedModelDocument {
    pub fn from_model(m: &LearnedModel) -> Self {
        let phi = &m.phi_hat;
        Self {
            version: FORMAT_VERSION,
            num_states: phi.num_states(),
            num_actions: phi.num_actions(),
            horizon: phi.horizon(),
            d: phi.dim(),
            phi: features_to_nested(phi),
            mu: m.mu_hat.iter().map(embedding_to_nested).collect(),
            phi_index: m.phi_index.clone(),
            mu_index: m.mu_index.clone(),
            loglik_by_step: m.loglik_by_step.clone(),
        }
    }

    pub fn features(&self) -> Result<FeatureTable> {
        features_from_nested(&self.phi, self.horizon, self.num_states, self.num_actions, self.d)
    }
}

/// Paths of the member MDP documents of a generated family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyManifest {
    pub version: u32,
    pub seed: u64,
    pub members: Vec<String>,
    #[serde(default)]
    pub behaviors: Vec<String>,
    #[serde(default)]
    pub dataset: Option<String>,
}

/// Exploration tuples `tuples[k][h] = (s, a, s')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeDatasetDocument {
    pub version: u32,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub tuples: Vec<Vec<(usize, usize, usize)>>,
}

impl RfeDatasetDocument {
    pub fn from_dataset(data: &RfeDataset) -> Self {
        Self { version: FORMAT_VERSION, horizon: data.ridge.len(), tuples: data.tuples.clone() }
    }

    pub fn to_dataset(&self, phi: &FeatureTable) -> Result<RfeDataset> {
        if phi.horizon() != self.horizon {
            return Err(Error::DimensionMismatch("dataset horizon differs from the features".into()));
        }
        let mut data = RfeDataset::new(phi)?;
        for ep in &self.tuples {
            if ep.len() != self.horizon {
                return Err(shape_error("episode"));
            }
            for &(s, a, sp) in ep {
                crate::error::check_index("state", s, phi.num_states())?;
                crate::error::check_index("action", a, phi.num_actions())?;
                crate::error::check_index("next state", sp, phi.num_states())?;
            }
            data.push_episode(phi, ep.clone());
        }
        Ok(data)
    }
}

/// A feature map on its own, e.g. `phi_hat` handed to a downstream learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDocument {
    pub version: u32,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "K")]
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub d: usize,
    pub phi: Vec<Vec<Vec<Vec<f64>>>>,
}

impl FeatureDocument {
    pub fn from_table(phi: &FeatureTable) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_states: phi.num_states(),
            num_actions: phi.num_actions(),
            horizon: phi.horizon(),
            d: phi.dim(),
            phi: features_to_nested(phi),
        }
    }

    pub fn to_table(&self) -> Result<FeatureTable> {
        features_from_nested(&self.phi, self.horizon, self.num_states, self.num_actions, self.d)
    }
}

versioned!(
    FeatureDocument,
    MdpDocument,
    RewardDocument,
    PolicyDocument,
    DatasetDocument,
    LearnedModelDocument,
    FamilyManifest,
    RfeDatasetDocument
);
