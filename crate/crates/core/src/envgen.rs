//! Seeded generators: task families sharing one feature map, behavior
//! policies with a mixing floor, decoy model classes, and target tasks.
//!
//! Features are drawn on the probability simplex and every embedding column
//! is a distribution over next states, so all generated kernels are valid by
//! construction.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::mdp::{
    occupancy_measures, EmbeddingTable, FeatureTable, InitialDist, Kernel, Policy, RewardTable,
    StochasticPolicy, TabularLowRankMdp,
};
use crate::model::{ModelClass, OfflineDataset, Transition};

/// Flat Dirichlet draw of length `n`.
pub fn sample_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Embedding whose `d` columns are each a flat-Dirichlet distribution over S.
fn sample_embedding<R: Rng + ?Sized>(horizon: usize, num_states: usize, dim: usize, rng: &mut R) -> EmbeddingTable {
    let mut mu = EmbeddingTable::zeros(horizon, num_states, dim);
    for h in 0..horizon {
        for j in 0..dim {
            let col = sample_simplex(num_states, rng);
            for (sp, p) in col.into_iter().enumerate() {
                mu.get_mut(h, sp)[j] = p;
            }
        }
    }
    mu
}

fn sample_features<R: Rng + ?Sized>(
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    dim: usize,
    rng: &mut R,
) -> FeatureTable {
    FeatureTable::from_fn(horizon, num_states, num_actions, dim, |_, _, _| sample_simplex(dim, rng))
}

/// T MDPs that share one feature table bit-exactly.
#[derive(Debug, Clone)]
pub struct TaskFamily {
    tasks: Vec<TabularLowRankMdp>,
}

impl TaskFamily {
    pub fn from_tasks(tasks: Vec<TabularLowRankMdp>) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return Err(Error::InvalidArgument("task family needs at least one task".into()));
        };
        if tasks.iter().any(|m| m.phi() != first.phi()) {
            return Err(Error::InvalidModel("tasks do not share the feature table".into()));
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[TabularLowRankMdp] {
        &self.tasks
    }
    pub fn shared_phi(&self) -> &FeatureTable {
        self.tasks[0].phi()
    }
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
    pub fn num_states(&self) -> usize {
        self.tasks[0].num_states()
    }
    pub fn num_actions(&self) -> usize {
        self.tasks[0].num_actions()
    }
    pub fn horizon(&self) -> usize {
        self.tasks[0].horizon()
    }
    pub fn rank(&self) -> usize {
        self.tasks[0].rank()
    }
    pub fn rewards(&self) -> Vec<RewardTable> {
        self.tasks.iter().map(|m| m.reward().clone()).collect()
    }
    pub fn kernels(&self) -> Vec<&Kernel> {
        self.tasks.iter().map(|m| m.kernel()).collect()
    }
}

/// How feature and embedding tables are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Concentration {
    /// Flat Dirichlet on the simplex.
    #[default]
    Uniform,
    /// Simplex corners: `phi(s,a) = e_{(sK+a) mod d}`, column j of mu is a point mass on `j mod S`.
    Corners,
}

/// Draws `phi*` first, then each task's embedding and reward in order, so a
/// family with fewer tasks is a prefix of one with more.
pub fn gen_task_family<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    dim: usize,
    num_tasks: usize,
    rng: &mut R,
) -> Result<TaskFamily> {
    gen_task_family_with(num_states, num_actions, horizon, dim, num_tasks, Concentration::Uniform, rng)
}

pub fn gen_task_family_with<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    dim: usize,
    num_tasks: usize,
    concentration: Concentration,
    rng: &mut R,
) -> Result<TaskFamily> {
    if num_states == 0 || num_actions == 0 || horizon == 0 || dim == 0 || num_tasks == 0 {
        return Err(Error::InvalidArgument("S, K, H, d and T must be positive".into()));
    }
    if dim > num_states.min(num_states * num_actions) {
        return Err(Error::InvalidArgument(format!("rank {dim} exceeds min(S, SK)")));
    }
    let phi = match concentration {
        Concentration::Uniform => sample_features(horizon, num_states, num_actions, dim, rng),
        Concentration::Corners => FeatureTable::from_fn(horizon, num_states, num_actions, dim, |_, s, a| {
            let mut e = vec![0.0; dim];
            e[(s * num_actions + a) % dim] = 1.0;
            e
        }),
    };
    let mut tasks = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let mu = match concentration {
            Concentration::Uniform => sample_embedding(horizon, num_states, dim, rng),
            Concentration::Corners => EmbeddingTable::from_fn(horizon, num_states, dim, |_, sp| {
                (0..dim).map(|j| if j % num_states == sp { 1.0 } else { 0.0 }).collect()
            }),
        };
        let reward = RewardTable::from_fn(horizon, num_states, num_actions, |_, _, _| rng.random::<f64>());
        tasks.push(TabularLowRankMdp::new(phi.clone(), mu, reward, InitialDist::Point(0))?);
    }
    TaskFamily::from_tasks(tasks)
}

/// Measured coverage of a behavior policy on one MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCertificate {
    /// `max_{h,s,a} 1/pi_b(a|s)`.
    pub omega: f64,
    /// Minimum state occupancy over steps `h >= 2` (all of `h = 1` when H = 1).
    pub kappa: f64,
    /// `min_s d_h(s)` for every step.
    pub kappa_by_step: Vec<f64>,
    /// Full state marginals `[h][s]`.
    pub state_occupancy: Vec<Vec<f64>>,
}

impl CoverageCertificate {
    pub fn measure(mdp: &TabularLowRankMdp, policy: &StochasticPolicy) -> Result<Self> {
        let omega = policy.probs().iter().map(|p| 1.0 / p).fold(0.0, f64::max);
        let occ = occupancy_measures(mdp.kernel(), mdp.initial(), policy)?;
        let state_occupancy: Vec<Vec<f64>> = (0..mdp.horizon()).map(|h| occ.state_marginal(h)).collect();
        let kappa_by_step: Vec<f64> = state_occupancy
            .iter()
            .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        // A fixed start state makes the h = 1 minimum zero whenever S > 1.
        let skip = usize::from(kappa_by_step.len() > 1);
        let kappa = kappa_by_step[skip..].iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self {
            omega,
            kappa,
            kappa_by_step,
            state_occupancy,
        })
    }

    pub fn is_reachable(&self) -> bool {
        self.kappa > 0.0
    }
}

/// `(1 - eps) softmax(z) + eps / K` with `eps = K * min_action_prob` and
/// standard normal logits.
pub fn gen_behavior_policy<R: Rng + ?Sized>(
    mdp: &TabularLowRankMdp,
    min_action_prob: f64,
    rng: &mut R,
) -> Result<(StochasticPolicy, CoverageCertificate)> {
    let (hn, sn, kn) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    if !(min_action_prob > 0.0 && min_action_prob <= 1.0 / kn as f64 + 1e-15) {
        return Err(Error::InvalidArgument(format!(
            "min_action_prob {min_action_prob} must lie in (0, 1/K]"
        )));
    }
    let eps = (kn as f64 * min_action_prob).min(1.0);
    let mut probs = Vec::with_capacity(hn * sn * kn);
    for _ in 0..hn * sn {
        let z: Vec<f64> = (0..kn).map(|_| StandardNormal.sample(rng)).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - zmax).exp()).collect();
        let total: f64 = e.iter().sum();
        probs.extend(e.iter().map(|x| (1.0 - eps) * x / total + eps / kn as f64));
    }
    let policy = StochasticPolicy::new(hn, sn, kn, probs)?;
    let cert = CoverageCertificate::measure(mdp, &policy)?;
    Ok((policy, cert))
}

/// Decoy construction for a finite model class.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassSpec {
    pub num_phi_decoys: usize,
    pub num_psi_decoys: usize,
    /// Mixing weight of the first decoy.
    pub perturb_scale: f64,
    /// Decoy j mixes with weight `perturb_scale * ladder_ratio^j`.
    pub ladder_ratio: f64,
}

impl Default for ClassSpec {
    fn default() -> Self {
        Self {
            num_phi_decoys: 7,
            num_psi_decoys: 8,
            perturb_scale: 0.2,
            ladder_ratio: 0.5,
        }
    }
}

impl ClassSpec {
    fn weight(&self, level: usize) -> f64 {
        (self.perturb_scale * self.ladder_ratio.powi(level as i32)).min(1.0)
    }
}

/// `Phi = [phi*, decoys...]`, `Psi = [mu^(1..T), decoys...]`. Decoys are
/// convex mixtures of a true table with a fresh random one.
pub fn gen_model_class<R: Rng + ?Sized>(family: &TaskFamily, spec: &ClassSpec, rng: &mut R) -> Result<ModelClass> {
    if !(spec.perturb_scale > 0.0) || !(spec.ladder_ratio > 0.0) {
        return Err(Error::InvalidArgument("perturb_scale and ladder_ratio must be positive".into()));
    }
    let (hn, sn, kn, d) = (family.horizon(), family.num_states(), family.num_actions(), family.rank());
    let truth = family.shared_phi();
    let mut phis = vec![truth.clone()];
    for j in 0..spec.num_phi_decoys {
        let w = spec.weight(j);
        let q = sample_features(hn, sn, kn, d, rng);
        phis.push(FeatureTable::from_fn(hn, sn, kn, d, |h, s, a| {
            truth.get(h, s, a).iter().zip(q.get(h, s, a)).map(|(x, y)| (1.0 - w) * x + w * y).collect()
        }));
    }
    let mut psis: Vec<EmbeddingTable> = family.tasks().iter().map(|m| m.mu().clone()).collect();
    for i in 0..spec.num_psi_decoys {
        let w = spec.weight(i);
        let base = family.tasks()[i % family.num_tasks()].mu();
        let q = sample_embedding(hn, sn, d, rng);
        psis.push(EmbeddingTable::from_fn(hn, sn, d, |h, sp| {
            base.get(h, sp).iter().zip(q.get(h, sp)).map(|(x, y)| (1.0 - w) * x + w * y).collect()
        }));
    }
    ModelClass::new(phis, psis)
}

/// Ratio of pointwise to uniform-average TV between candidate models, the
/// largest over `num_pairs` sampled pairs and all steps.
pub fn measure_c_r<R: Rng + ?Sized>(class: &ModelClass, num_pairs: usize, rng: &mut R) -> Result<f64> {
    let mut worst = 1.0f64;
    for _ in 0..num_pairs {
        let p1 = Kernel::from_factors(
            &class.phis()[rng.random_range(0..class.size_phi())],
            &class.psis()[rng.random_range(0..class.size_psi())],
        )?;
        let p2 = Kernel::from_factors(
            &class.phis()[rng.random_range(0..class.size_phi())],
            &class.psis()[rng.random_range(0..class.size_psi())],
        )?;
        for h in 0..class.horizon() {
            let mut max = 0.0f64;
            let mut sum = 0.0;
            for s in 0..class.num_states() {
                for a in 0..class.num_actions() {
                    let tv = crate::mdp::tv_unchecked(p1.row(h, s, a), p2.row(h, s, a));
                    max = max.max(tv);
                    sum += tv;
                }
            }
            let mean = sum / (class.num_states() * class.num_actions()) as f64;
            if mean > 0.0 {
                worst = worst.max(max / mean);
            }
        }
    }
    Ok(worst)
}

/// Construction record of a downstream target task.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTaskSpec {
    pub coeffs: Vec<f64>,
    pub c_l: f64,
    /// Measured `max_{h,s,a} TV(P_target, sum_t c_t P^t)`.
    pub xi: f64,
    pub perturbation_weight: f64,
    /// Reward parameter per step; `r_h = <phi*_h, theta_h>`.
    pub theta: Vec<Vec<f64>>,
}

/// Direction in the nonnegative orthant with norm at most one.
pub fn sample_theta<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let radius: f64 = rng.random();
    v.into_iter().map(|x| radius * x / norm).collect()
}

/// Reward linear in the given features, clipped to `[0, 1]`.
pub fn linear_reward(phi: &FeatureTable, theta: &[Vec<f64>]) -> RewardTable {
    RewardTable::from_fn(phi.horizon(), phi.num_states(), phi.num_actions(), |h, s, a| {
        phi.get(h, s, a).iter().zip(&theta[h]).map(|(x, y)| x * y).sum::<f64>().clamp(0.0, 1.0)
    })
}

/// Target kernel `(1 - w) sum_t c_t P^t + w Q`. With `w = 0` the target has
/// rank d and features `phi*`; otherwise it has rank 2d with features
/// `[(1-w) phi*, w q]`.
pub fn gen_target_task<R: Rng + ?Sized>(
    family: &TaskFamily,
    coeffs: &[f64],
    perturbation_weight: f64,
    rng: &mut R,
) -> Result<(TabularLowRankMdp, TargetTaskSpec)> {
    if coeffs.len() != family.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for {} tasks",
            coeffs.len(),
            family.num_tasks()
        )));
    }
    let total: f64 = coeffs.iter().sum();
    if coeffs.iter().any(|c| !(*c >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "coefficients must be nonnegative and sum to 1 (sum {total})"
        )));
    }
    let w = perturbation_weight;
    if !(0.0..1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("perturbation weight {w} outside [0,1)")));
    }
    let (hn, sn, kn, d) = (family.horizon(), family.num_states(), family.num_actions(), family.rank());
    let phi_star = family.shared_phi();
    let mixed_mu = EmbeddingTable::from_fn(hn, sn, d, |h, sp| {
        let mut v = vec![0.0; d];
        for (c, task) in coeffs.iter().zip(family.tasks()) {
            for (x, m) in v.iter_mut().zip(task.mu().get(h, sp)) {
                *x += c * m;
            }
        }
        v
    });
    let theta: Vec<Vec<f64>> = (0..hn).map(|_| sample_theta(d, rng)).collect();
    let reward = linear_reward(phi_star, &theta);

    let mdp = if w == 0.0 {
        TabularLowRankMdp::new(phi_star.clone(), mixed_mu, reward, InitialDist::Point(0))?
    } else {
        let q = sample_features(hn, sn, kn, d, rng);
        let nu = sample_embedding(hn, sn, d, rng);
        let phi = FeatureTable::from_fn(hn, sn, kn, 2 * d, |h, s, a| {
            let mut v: Vec<f64> = phi_star.get(h, s, a).iter().map(|x| (1.0 - w) * x).collect();
            v.extend(q.get(h, s, a).iter().map(|x| w * x));
            v
        });
        let mu = EmbeddingTable::from_fn(hn, sn, 2 * d, |h, sp| {
            let mut v = mixed_mu.get(h, sp).to_vec();
            v.extend_from_slice(nu.get(h, sp));
            v
        });
        TabularLowRankMdp::new(phi, mu, reward, InitialDist::Point(0))?
    };

    let reference = Kernel::mixture(coeffs, &family.kernels())?;
    let xi = mdp.kernel().max_tv(&reference);
    Ok((
        mdp,
        TargetTaskSpec {
            coeffs: coeffs.to_vec(),
            c_l: 1.0,
            xi,
            perturbation_weight: w,
            theta,
        },
    ))
}

/// `n` i.i.d. episodes per task, task by task.
pub fn gen_dataset<R: Rng + ?Sized>(
    family: &TaskFamily,
    behaviors: &[StochasticPolicy],
    n: usize,
    rng: &mut R,
) -> Result<OfflineDataset> {
    if behaviors.len() != family.num_tasks() {
        return Err(Error::DimensionMismatch("one behavior policy per task is required".into()));
    }
    let mut data = OfflineDataset::empty(family.num_tasks(), family.horizon());
    for (t, (task, pi)) in family.tasks().iter().zip(behaviors).enumerate() {
        for _ in 0..n {
            let traj = crate::mdp::sample_episode(task, pi as &dyn Policy, rng)?;
            for st in traj.steps {
                data.push(
                    t,
                    st.h,
                    Transition {
                        state: st.state,
                        action: st.action,
                        reward: st.reward,
                        next_state: st.next_state,
                    },
                );
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::identity_chain;
    use crate::mdp::validate_factors;
    use crate::seed::rng_from_seed;

    #[test]
    fn corner_family_is_identity_chain() {
        let fam = gen_task_family_with(2, 1, 1, 2, 1, Concentration::Corners, &mut rng_from_seed(0)).unwrap();
        let chain = identity_chain(1, RewardTable::zeros(1, 2, 1));
        assert_eq!(fam.tasks()[0].kernel(), chain.kernel());
        assert_eq!(fam.shared_phi(), chain.phi());
    }

    #[test]
    fn seed0_family_passes_invariants_and_shares_phi() {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        for task in fam.tasks() {
            assert!(validate_factors(task.phi(), task.mu(), Some(task.reward())).is_empty());
            assert_eq!(task.phi(), fam.shared_phi());
        }
    }

    #[test]
    fn smaller_family_is_prefix() {
        let big = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(3)).unwrap();
        let small = gen_task_family(5, 2, 3, 2, 2, &mut rng_from_seed(3)).unwrap();
        for t in 0..2 {
            assert_eq!(big.tasks()[t].kernel(), small.tasks()[t].kernel());
            assert_eq!(big.tasks()[t].reward(), small.tasks()[t].reward());
        }
    }

    #[test]
    fn rank_above_states_rejected() {
        assert!(gen_task_family(2, 3, 1, 3, 1, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn full_mixing_gives_uniform_policy() {
        let fam = gen_task_family(5, 2, 3, 2, 1, &mut rng_from_seed(0)).unwrap();
        let (pi, cert) = gen_behavior_policy(&fam.tasks()[0], 0.5, &mut rng_from_seed(1)).unwrap();
        assert!(pi.probs().iter().all(|&p| p == 0.5));
        assert_eq!(cert.omega, 2.0);
    }

    #[test]
    fn omega_respects_floor_and_matches_scan() {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        let mut rng = rng_from_seed(2);
        for task in fam.tasks() {
            let (pi, cert) = gen_behavior_policy(task, 0.1, &mut rng).unwrap();
            assert!(cert.omega <= 10.0 + 1e-9);
            let mut scan = 0.0f64;
            for h in 0..3 {
                for s in 0..5 {
                    for a in 0..2 {
                        scan = scan.max(1.0 / pi.prob(h, s, a));
                    }
                }
            }
            assert_eq!(cert.omega, scan);
        }
        assert!(gen_behavior_policy(&fam.tasks()[0], 0.6, &mut rng).is_err());
    }

    #[test]
    fn identity_chain_kappa_is_zero() {
        let chain = identity_chain(3, RewardTable::zeros(3, 2, 1));
        let (_, cert) = gen_behavior_policy(&chain, 1.0, &mut rng_from_seed(0)).unwrap();
        assert_eq!(cert.kappa, 0.0);
        assert!(cert.state_occupancy.iter().all(|row| row[1] == 0.0));
        assert!(!cert.is_reachable());
    }

    #[test]
    fn class_layout_and_validity() {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        let class = gen_model_class(&fam, &ClassSpec::default(), &mut rng_from_seed(1)).unwrap();
        assert_eq!((class.size_phi(), class.size_psi()), (8, 12));
        assert_eq!(&class.phis()[0], fam.shared_phi());
        for phi in class.phis() {
            assert!(phi.max_norm() <= 1.0 + 1e-12);
            for psi in class.psis() {
                assert!(validate_factors(phi, psi, None).is_empty());
            }
        }
        for phi in &class.phis()[1..] {
            let decoy = Kernel::from_factors(phi, fam.tasks()[0].mu()).unwrap();
            assert!(decoy.max_tv(fam.tasks()[0].kernel()) > 0.0);
        }
    }

    #[test]
    fn no_decoys_is_truth_only() {
        let fam = gen_task_family(5, 2, 3, 2, 3, &mut rng_from_seed(0)).unwrap();
        let spec = ClassSpec { num_phi_decoys: 0, num_psi_decoys: 0, ..ClassSpec::default() };
        let class = gen_model_class(&fam, &spec, &mut rng_from_seed(1)).unwrap();
        assert_eq!(class.size_phi(), 1);
        for t in 0..3 {
            assert_eq!(&class.psis()[t], fam.tasks()[t].mu());
        }
    }

    #[test]
    fn target_copy_and_convex_cases() {
        let fam = gen_task_family(5, 2, 3, 2, 3, &mut rng_from_seed(0)).unwrap();
        let (copy, spec) = gen_target_task(&fam, &[1.0, 0.0, 0.0], 0.0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(copy.kernel(), fam.tasks()[0].kernel());
        assert_eq!(spec.xi, 0.0);

        let (mix, spec) = gen_target_task(&fam, &[0.2, 0.5, 0.3], 0.0, &mut rng_from_seed(1)).unwrap();
        assert!(validate_factors(mix.phi(), mix.mu(), Some(mix.reward())).is_empty());
        assert!(spec.xi <= 1e-12);
        assert!(gen_target_task(&fam, &[0.5, 0.4, 0.0], 0.0, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn perturbed_target_xi_bounded_by_weight() {
        let fam = gen_task_family(5, 2, 3, 2, 4, &mut rng_from_seed(0)).unwrap();
        let (target, spec) = gen_target_task(&fam, &[0.25; 4], 0.05, &mut rng_from_seed(0)).unwrap();
        assert!(spec.xi > 0.0 && spec.xi <= 0.05 + 1e-12);
        assert_eq!(target.rank(), 4);
        let reference = Kernel::mixture(&[0.25; 4], &fam.kernels()).unwrap();
        let mut scan = 0.0f64;
        for h in 0..3 {
            for s in 0..5 {
                for a in 0..2 {
                    let tv = crate::mdp::tv_distance(target.kernel().row(h, s, a), reference.row(h, s, a)).unwrap();
                    scan = scan.max(tv);
                }
            }
        }
        assert_eq!(scan, spec.xi);
    }

    #[test]
    fn dataset_shapes_and_frequencies() {
        let fam = gen_task_family(5, 2, 3, 2, 2, &mut rng_from_seed(0)).unwrap();
        let pis: Vec<_> = (0..2).map(|_| StochasticPolicy::uniform(3, 5, 2)).collect();
        let empty = gen_dataset(&fam, &pis, 0, &mut rng_from_seed(0)).unwrap();
        assert_eq!((empty.num_tasks(), empty.horizon(), empty.len_per_task()), (2, 3, 0));

        let n = 10_000;
        let data = gen_dataset(&fam, &pis, n, &mut rng_from_seed(4)).unwrap();
        let again = gen_dataset(&fam, &pis, n, &mut rng_from_seed(4)).unwrap();
        assert_eq!(data, again);
        let (mut cells, mut outside) = (0usize, 0usize);
        for t in 0..2 {
            for h in 0..3 {
                let counts = data.transition_counts(t, h, 5, 2);
                for s in 0..5 {
                    for a in 0..2 {
                        let row = &counts[(s * 2 + a) * 5..(s * 2 + a + 1) * 5];
                        let m: u32 = row.iter().sum();
                        if m == 0 {
                            continue;
                        }
                        let p = fam.tasks()[t].kernel().row(h, s, a);
                        for sp in 0..5 {
                            let f = row[sp] as f64 / m as f64;
                            let sigma = (p[sp] * (1.0 - p[sp]) / m as f64).sqrt();
                            cells += 1;
                            if (f - p[sp]).abs() > 3.0 * sigma + 1e-12 {
                                outside += 1;
                            }
                        }
                    }
                }
            }
        }
        // Each cell leaves its 3 sigma band with probability about 0.0027;
        // allow the count a Poisson upper tail at the 1% level.
        let expected = 0.0027 * cells as f64;
        assert!((outside as f64) <= expected + 3.0 * expected.sqrt() + 2.0, "{outside} of {cells} cells");
    }

    #[test]
    fn identity_chain_dataset_self_loops() {
        let chain = identity_chain(3, RewardTable::zeros(3, 2, 1));
        let fam = TaskFamily::from_tasks(vec![chain]).unwrap();
        let data = gen_dataset(&fam, &[StochasticPolicy::uniform(3, 2, 1)], 20, &mut rng_from_seed(0)).unwrap();
        for h in 0..3 {
            assert!(data.step(0, h).iter().all(|tr| tr.state == tr.next_state));
        }
    }

    #[test]
    fn c_r_is_at_least_one() {
        let fam = gen_task_family(5, 2, 3, 2, 2, &mut rng_from_seed(0)).unwrap();
        let class = gen_model_class(&fam, &ClassSpec::default(), &mut rng_from_seed(1)).unwrap();
        let c = measure_c_r(&class, 20, &mut rng_from_seed(2)).unwrap();
        assert!((1.0..=10.0).contains(&c), "{c}");
    }
}
