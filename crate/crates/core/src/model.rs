//! Finite model classes, offline datasets, and the exact maximum-likelihood
//! selector over `Phi x Psi^T`.

use crate::error::{check_index, Error, Result};
use crate::mdp::{EmbeddingTable, FeatureTable, Kernel};

/// Inner products at or below this disqualify a candidate.
pub const LOGLIK_FLOOR: f64 = 1e-300;

/// One observed step `(s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// `tuples[t][h]`: the step-h records of task t.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    tuples: Vec<Vec<Vec<Transition>>>,
}

impl OfflineDataset {
    pub fn empty(num_tasks: usize, horizon: usize) -> Self {
        Self {
            tuples: vec![vec![Vec::new(); horizon]; num_tasks],
        }
    }

    /// Rejects ragged input: every task needs `horizon` steps with equal counts.
    pub fn from_tuples(tuples: Vec<Vec<Vec<Transition>>>) -> Result<Self> {
        if let Some(first) = tuples.first() {
            let horizon = first.len();
            let n = first.first().map_or(0, Vec::len);
            for task in &tuples {
                if task.len() != horizon || task.iter().any(|step| step.len() != n) {
                    return Err(Error::DimensionMismatch("dataset is not rectangular in (t, h)".into()));
                }
            }
        }
        Ok(Self { tuples })
    }

    pub fn push(&mut self, t: usize, h: usize, tr: Transition) {
        self.tuples[t][h].push(tr);
    }

    pub fn num_tasks(&self) -> usize {
        self.tuples.len()
    }

    pub fn horizon(&self) -> usize {
        self.tuples.first().map_or(0, Vec::len)
    }

    /// Episodes per task.
    pub fn len_per_task(&self) -> usize {
        self.tuples.first().and_then(|t| t.first()).map_or(0, Vec::len)
    }

    pub fn step(&self, t: usize, h: usize) -> &[Transition] {
        &self.tuples[t][h]
    }

    pub fn tuples(&self) -> &[Vec<Vec<Transition>>] {
        &self.tuples
    }

    /// `N[s][a][s']` flattened, for task `t` at step `h`.
    pub fn transition_counts(&self, t: usize, h: usize, num_states: usize, num_actions: usize) -> Vec<u32> {
        let mut counts = vec![0u32; num_states * num_actions * num_states];
        for tr in &self.tuples[t][h] {
            counts[(tr.state * num_actions + tr.action) * num_states + tr.next_state] += 1;
        }
        counts
    }
}

/// Candidate features `Phi` and embeddings `Psi`, index-stable.
#[derive(Debug, Clone)]
pub struct ModelClass {
    phis: Vec<FeatureTable>,
    psis: Vec<EmbeddingTable>,
}

impl ModelClass {
    pub fn new(phis: Vec<FeatureTable>, psis: Vec<EmbeddingTable>) -> Result<Self> {
        let (Some(p0), Some(m0)) = (phis.first(), psis.first()) else {
            return Err(Error::InvalidArgument("model class needs at least one phi and one psi".into()));
        };
        let shape = (p0.horizon(), p0.num_states(), p0.num_actions(), p0.dim());
        if phis.iter().any(|p| (p.horizon(), p.num_states(), p.num_actions(), p.dim()) != shape)
            || psis.iter().any(|m| (m.horizon(), m.num_states(), m.dim()) != (m0.horizon(), m0.num_states(), m0.dim()))
            || (shape.0, shape.1, shape.3) != (m0.horizon(), m0.num_states(), m0.dim())
        {
            return Err(Error::DimensionMismatch("model class candidates disagree in shape".into()));
        }
        Ok(Self { phis, psis })
    }

    pub fn phis(&self) -> &[FeatureTable] {
        &self.phis
    }
    pub fn psis(&self) -> &[EmbeddingTable] {
        &self.psis
    }
    pub fn size_phi(&self) -> usize {
        self.phis.len()
    }
    pub fn size_psi(&self) -> usize {
        self.psis.len()
    }
    pub fn horizon(&self) -> usize {
        self.phis[0].horizon()
    }
    pub fn num_states(&self) -> usize {
        self.phis[0].num_states()
    }
    pub fn num_actions(&self) -> usize {
        self.phis[0].num_actions()
    }
    pub fn dim(&self) -> usize {
        self.phis[0].dim()
    }

    /// `log(|Phi| |Psi|^T)`, computed in log space.
    pub fn log_cardinality(&self, num_tasks: usize) -> f64 {
        (self.phis.len() as f64).ln() + num_tasks as f64 * (self.psis.len() as f64).ln()
    }
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum over all tasks' step-h records of `log <phi_h(s,a), mu^t_h(s')>`.
/// Returns `-inf` once any observed transition gets mass at or below the floor.
pub fn joint_log_likelihood(
    phi: &FeatureTable,
    mus: &[&EmbeddingTable],
    dataset: &OfflineDataset,
    h: usize,
) -> Result<f64> {
    if mus.len() != dataset.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} embeddings for {} tasks",
            mus.len(),
            dataset.num_tasks()
        )));
    }
    if dataset.num_tasks() > 0 {
        check_index("step", h, dataset.horizon())?;
    }
    let mut total = 0.0;
    for (t, mu) in mus.iter().enumerate() {
        for tr in dataset.step(t, h) {
            let p = inner(phi.get(h, tr.state, tr.action), mu.get(h, tr.next_state));
            if p <= LOGLIK_FLOOR {
                return Ok(f64::NEG_INFINITY);
            }
            total += p.ln();
        }
    }
    Ok(total)
}

/// Winning indices at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MleSelection {
    pub phi_index: usize,
    pub mu_index: Vec<usize>,
    pub loglik: f64,
}

/// Count-weighted log-likelihood of one (phi, psi) pair on one task.
fn pair_loglik(phi: &FeatureTable, psi: &EmbeddingTable, counts: &[u32], h: usize) -> f64 {
    let (sn, kn) = (phi.num_states(), phi.num_actions());
    let mut total = 0.0;
    for s in 0..sn {
        for a in 0..kn {
            let f = phi.get(h, s, a);
            let row = &counts[(s * kn + a) * sn..(s * kn + a + 1) * sn];
            for (sp, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let p = inner(f, psi.get(h, sp));
                if p <= LOGLIK_FLOOR {
                    return f64::NEG_INFINITY;
                }
                total += c as f64 * p.ln();
            }
        }
    }
    total
}

/// Exact argmax of the joint likelihood at step `h`. For fixed phi the
/// objective separates over tasks, so each task's psi is chosen alone.
pub fn mle_fit(class: &ModelClass, dataset: &OfflineDataset, h: usize) -> Result<MleSelection> {
    let (sn, kn) = (class.num_states(), class.num_actions());
    let tasks = dataset.num_tasks();
    if tasks > 0 {
        check_index("step", h, dataset.horizon().min(class.horizon()))?;
    }
    let counts: Vec<Vec<u32>> = (0..tasks).map(|t| dataset.transition_counts(t, h, sn, kn)).collect();

    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for (i, phi) in class.phis().iter().enumerate() {
        let mut total = 0.0;
        let mut picks = Vec::with_capacity(tasks);
        for c in &counts {
            let mut task_best = (f64::NEG_INFINITY, 0usize);
            for (j, psi) in class.psis().iter().enumerate() {
                let ll = pair_loglik(phi, psi, c, h);
                if ll > task_best.0 {
                    task_best = (ll, j);
                }
            }
            total += task_best.0;
            picks.push(task_best.1);
        }
        if total == f64::NEG_INFINITY {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| total > *b) {
            best = Some((total, i, picks));
        }
    }
    let (_, phi_index, mu_index) = best.ok_or(Error::IncompatibleClass { step: h })?;
    let mus: Vec<&EmbeddingTable> = mu_index.iter().map(|&j| &class.psis()[j]).collect();
    let loglik = joint_log_likelihood(&class.phis()[phi_index], &mus, dataset, h)?;
    Ok(MleSelection {
        phi_index,
        mu_index,
        loglik,
    })
}

/// MLE output assembled over all steps.
#[derive(Debug, Clone)]
pub struct LearnedModel {
    /// Selected phi candidate per step.
    pub phi_index: Vec<usize>,
    /// Selected psi candidate, `[t][h]`.
    pub mu_index: Vec<Vec<usize>>,
    pub phi_hat: FeatureTable,
    pub mu_hat: Vec<EmbeddingTable>,
    pub p_hat: Vec<Kernel>,
    pub loglik_by_step: Vec<f64>,
}

impl LearnedModel {
    pub fn num_tasks(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn loglik(&self) -> f64 {
        self.loglik_by_step.iter().sum()
    }
}

/// Stitches per-step selections into full feature/embedding tables and
/// kernels `P_hat^t = <phi_hat, mu_hat^t>`.
pub fn reconstruct_kernels(class: &ModelClass, selections: &[MleSelection]) -> Result<LearnedModel> {
    let horizon = class.horizon();
    if selections.len() != horizon {
        return Err(Error::DimensionMismatch(format!(
            "{} selections for horizon {horizon}",
            selections.len()
        )));
    }
    let tasks = selections[0].mu_index.len();
    let (sn, kn, d) = (class.num_states(), class.num_actions(), class.dim());
    let mut phi_hat = FeatureTable::zeros(horizon, sn, kn, d);
    let mut mu_hat = vec![EmbeddingTable::zeros(horizon, sn, d); tasks];
    let mut mu_index = vec![vec![0usize; horizon]; tasks];
    for (h, sel) in selections.iter().enumerate() {
        check_index("phi candidate", sel.phi_index, class.size_phi())?;
        if sel.mu_index.len() != tasks {
            return Err(Error::DimensionMismatch("selections disagree on task count".into()));
        }
        phi_hat.copy_step_from(h, &class.phis()[sel.phi_index]);
        for (t, &j) in sel.mu_index.iter().enumerate() {
            check_index("psi candidate", j, class.size_psi())?;
            mu_hat[t].copy_step_from(h, &class.psis()[j]);
            mu_index[t][h] = j;
        }
    }
    let p_hat = mu_hat
        .iter()
        .map(|mu| Kernel::from_factors(&phi_hat, mu))
        .collect::<Result<Vec<_>>>()?;
    Ok(LearnedModel {
        phi_index: selections.iter().map(|s| s.phi_index).collect(),
        mu_index,
        phi_hat,
        mu_hat,
        p_hat,
        loglik_by_step: selections.iter().map(|s| s.loglik).collect(),
    })
}

/// MLE at every step, then reconstruction.
pub fn fit_all_steps(class: &ModelClass, dataset: &OfflineDataset) -> Result<LearnedModel> {
    let selections = (0..class.horizon())
        .map(|h| mle_fit(class, dataset, h))
        .collect::<Result<Vec<_>>>()?;
    reconstruct_kernels(class, &selections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{gen_behavior_policy, gen_dataset, gen_model_class, gen_task_family, ClassSpec, TaskFamily};
    use crate::mdp::fixtures::identity_chain;
    use crate::mdp::{RewardTable, StochasticPolicy};
    use crate::seed::rng_from_seed;

    fn seed0_setup(n: usize, t: usize) -> (TaskFamily, ModelClass, OfflineDataset) {
        let mut rng = rng_from_seed(0);
        let family = gen_task_family(5, 2, 3, 2, t, &mut rng).unwrap();
        let class = gen_model_class(&family, &ClassSpec::default(), &mut rng).unwrap();
        let behaviors: Vec<StochasticPolicy> = family
            .tasks()
            .iter()
            .map(|m| gen_behavior_policy(m, 0.25, &mut rng).unwrap().0)
            .collect();
        let data = gen_dataset(&family, &behaviors, n, &mut rng).unwrap();
        (family, class, data)
    }

    fn truth_mus(family: &TaskFamily) -> Vec<&EmbeddingTable> {
        family.tasks().iter().map(|m| m.mu()).collect()
    }

    #[test]
    fn empty_dataset_has_zero_loglik() {
        let (family, _, _) = seed0_setup(0, 2);
        let data = OfflineDataset::empty(2, 3);
        let ll = joint_log_likelihood(family.shared_phi(), &truth_mus(&family), &data, 1).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn identity_chain_truth_has_zero_loglik() {
        let mdp = identity_chain(2, RewardTable::zeros(2, 2, 1));
        let family = TaskFamily::from_tasks(vec![mdp.clone()]).unwrap();
        let pi = StochasticPolicy::uniform(2, 2, 1);
        let data = gen_dataset(&family, &[pi], 50, &mut rng_from_seed(1)).unwrap();
        for h in 0..2 {
            assert_eq!(joint_log_likelihood(mdp.phi(), &[mdp.mu()], &data, h).unwrap(), 0.0);
        }
    }

    #[test]
    fn loglik_matches_scalar_oracle() {
        let (family, _, data) = seed0_setup(300, 2);
        let ll = joint_log_likelihood(family.shared_phi(), &truth_mus(&family), &data, 2).unwrap();
        let mut oracle = 0.0;
        for (t, task) in family.tasks().iter().enumerate() {
            for tr in data.step(t, 2) {
                let row = task.kernel().row(2, tr.state, tr.action);
                oracle += row[tr.next_state].ln();
            }
        }
        assert!((ll - oracle).abs() < 1e-10, "{ll} vs {oracle}");
    }

    #[test]
    fn zero_mass_observation_disqualifies() {
        let mdp = identity_chain(1, RewardTable::zeros(1, 2, 1));
        let mut data = OfflineDataset::empty(1, 1);
        data.push(0, 0, Transition { state: 0, action: 0, reward: 0.0, next_state: 1 });
        assert_eq!(joint_log_likelihood(mdp.phi(), &[mdp.mu()], &data, 0).unwrap(), f64::NEG_INFINITY);
        let class = ModelClass::new(vec![mdp.phi().clone()], vec![mdp.mu().clone()]).unwrap();
        assert!(matches!(mle_fit(&class, &data, 0), Err(Error::IncompatibleClass { step: 0 })));
    }

    #[test]
    fn truth_only_class_returns_truth() {
        let (family, _, data) = seed0_setup(200, 2);
        let class = ModelClass::new(
            vec![family.shared_phi().clone()],
            family.tasks().iter().map(|m| m.mu().clone()).collect(),
        )
        .unwrap();
        for h in 0..3 {
            let sel = mle_fit(&class, &data, h).unwrap();
            assert_eq!(sel.phi_index, 0);
            assert_eq!(sel.mu_index, vec![0, 1]);
            let ll = joint_log_likelihood(family.shared_phi(), &truth_mus(&family), &data, h).unwrap();
            assert_eq!(sel.loglik, ll);
        }
    }

    #[test]
    fn brute_force_agrees_on_seed0_class() {
        let (_, class, data) = seed0_setup(2000, 2);
        for h in 0..3 {
            let sel = mle_fit(&class, &data, h).unwrap();
            let mut best = (f64::NEG_INFINITY, 0, 0, 0);
            for i in 0..class.size_phi() {
                for j0 in 0..class.size_psi() {
                    for j1 in 0..class.size_psi() {
                        let mus = [&class.psis()[j0], &class.psis()[j1]];
                        let ll = joint_log_likelihood(&class.phis()[i], &mus, &data, h).unwrap();
                        if ll > best.0 {
                            best = (ll, i, j0, j1);
                        }
                    }
                }
            }
            assert_eq!((sel.phi_index, sel.mu_index.clone()), (best.1, vec![best.2, best.3]));
            assert!((sel.loglik - best.0).abs() <= 1e-9 * best.0.abs());
        }
    }

    #[test]
    fn truth_reconstruction_is_bit_exact() {
        let (family, class, _) = seed0_setup(0, 2);
        // gen_model_class puts phi* at 0 and mu^(t) at t
        let sels: Vec<MleSelection> = (0..3)
            .map(|_| MleSelection { phi_index: 0, mu_index: vec![0, 1], loglik: 0.0 })
            .collect();
        let learned = reconstruct_kernels(&class, &sels).unwrap();
        for (t, task) in family.tasks().iter().enumerate() {
            assert_eq!(&learned.p_hat[t], task.kernel());
        }
    }

    #[test]
    fn any_selection_gives_valid_kernels() {
        let (_, class, _) = seed0_setup(0, 2);
        let sels: Vec<MleSelection> = (0..3)
            .map(|h| MleSelection { phi_index: 7 - h, mu_index: vec![h + 3, 9 - h], loglik: 0.0 })
            .collect();
        let learned = reconstruct_kernels(&class, &sels).unwrap();
        for k in &learned.p_hat {
            for h in 0..3 {
                for s in 0..5 {
                    for a in 0..2 {
                        assert!((k.row(h, s, a).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
        let bad = vec![MleSelection { phi_index: 8, mu_index: vec![0, 0], loglik: 0.0 }; 3];
        assert!(reconstruct_kernels(&class, &bad).is_err());
    }

    #[test]
    fn ragged_dataset_rejected() {
        let tr = Transition { state: 0, action: 0, reward: 0.0, next_state: 0 };
        assert!(OfflineDataset::from_tuples(vec![vec![vec![tr], vec![]]]).is_err());
    }
}
