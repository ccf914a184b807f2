//! Finite-horizon tabular MDPs whose transitions factor through a rank-d
//! representation, plus exact dynamic programming over them.
//!
//! Steps are zero-based internally: `h = 0..H`. Value tables carry an extra
//! terminal row `h = H` that is identically zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{check_index, Error, Result};

/// Negative inner-product mass at or above this is clamped to zero.
pub const NEGATIVE_MASS_TOL: f64 = 1e-12;
/// Tolerance on a transition row summing to one.
pub const DISTRIBUTION_TOL: f64 = 1e-9;
/// Tolerance for the feature and embedding norm bounds.
pub const NORM_TOL: f64 = 1e-9;
/// Number of random test functions in the embedding normalization battery.
pub const BATTERY_RANDOM_DRAWS: usize = 64;
const BATTERY_SEED: u64 = 0x6d75_5f6e_6f72_6d00;

/// Feature table `phi[h][s][a]`, each entry a d-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize, dim: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            dim,
            data: vec![0.0; horizon * num_states * num_actions * dim],
        }
    }

    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut table = Self::zeros(horizon, num_states, num_actions, dim);
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let v = f(h, s, a);
                    assert_eq!(v.len(), dim, "feature vector length");
                    table.get_mut(h, s, a).copy_from_slice(&v);
                }
            }
        }
        table
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn offset(&self, h: usize, s: usize, a: usize) -> usize {
        ((h * self.num_states + s) * self.num_actions + a) * self.dim
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let o = self.offset(h, s, a);
        &self.data[o..o + self.dim]
    }

    pub fn get_mut(&mut self, h: usize, s: usize, a: usize) -> &mut [f64] {
        let o = self.offset(h, s, a);
        &mut self.data[o..o + self.dim]
    }

    /// Copies step `h` of `other` into step `h` of `self`.
    pub fn copy_step_from(&mut self, h: usize, other: &FeatureTable) {
        let len = self.num_states * self.num_actions * self.dim;
        let o = h * len;
        self.data[o..o + len].copy_from_slice(&other.data[o..o + len]);
    }

    pub fn max_norm(&self) -> f64 {
        self.data
            .chunks(self.dim.max(1))
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Embedding table `mu[h][s']`, each entry a d-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    horizon: usize,
    num_states: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(horizon: usize, num_states: usize, dim: usize) -> Self {
        Self {
            horizon,
            num_states,
            dim,
            data: vec![0.0; horizon * num_states * dim],
        }
    }

    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut table = Self::zeros(horizon, num_states, dim);
        for h in 0..horizon {
            for s in 0..num_states {
                let v = f(h, s);
                assert_eq!(v.len(), dim, "embedding vector length");
                table.get_mut(h, s).copy_from_slice(&v);
            }
        }
        table
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, h: usize, s_next: usize) -> &[f64] {
        let o = (h * self.num_states + s_next) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn get_mut(&mut self, h: usize, s_next: usize) -> &mut [f64] {
        let o = (h * self.num_states + s_next) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn copy_step_from(&mut self, h: usize, other: &EmbeddingTable) {
        let len = self.num_states * self.dim;
        let o = h * len;
        self.data[o..o + len].copy_from_slice(&other.data[o..o + len]);
    }
}

/// Per-step reward `r[h][s][a]`. Entries may be negative when a planner is
/// handed a penalized reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl RewardTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self::constant(horizon, num_states, num_actions, 0.0)
    }

    pub fn constant(horizon: usize, num_states: usize, num_actions: usize, value: f64) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            data: vec![value; horizon * num_states * num_actions],
        }
    }

    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(horizon * num_states * num_actions);
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    data.push(f(h, s, a));
                }
            }
        }
        Self {
            horizon,
            num_states,
            num_actions,
            data,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.data[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn set(&mut self, h: usize, s: usize, a: usize, value: f64) {
        self.data[(h * self.num_states + s) * self.num_actions + a] = value;
    }

    /// Elementwise `self - other`.
    pub fn minus(&self, other: &RewardTable) -> RewardTable {
        assert_eq!(self.data.len(), other.data.len());
        RewardTable {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Dense transition kernel `P[h][s][a][s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl Kernel {
    /// Builds a kernel from explicit rows, validating each as a distribution.
    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        mut row: impl FnMut(usize, usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(horizon * num_states * num_actions * num_states);
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let r = row(h, s, a);
                    if r.len() != num_states {
                        return Err(Error::DimensionMismatch(format!(
                            "kernel row has {} entries, expected {num_states}",
                            r.len()
                        )));
                    }
                    check_distribution(&r, DISTRIBUTION_TOL)
                        .map_err(|e| Error::InvalidModel(format!("row (h={h},s={s},a={a}): {e}")))?;
                    data.extend_from_slice(&r);
                }
            }
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            data,
        })
    }

    /// `P_h(s'|s,a) = <phi_h(s,a), mu_h(s')>` with the negative-mass clamp.
    pub fn from_factors(phi: &FeatureTable, mu: &EmbeddingTable) -> Result<Self> {
        if phi.horizon != mu.horizon || phi.num_states != mu.num_states || phi.dim != mu.dim {
            return Err(Error::DimensionMismatch(
                "feature and embedding tables disagree on H, S or d".into(),
            ));
        }
        let (hn, sn, kn) = (phi.horizon, phi.num_states, phi.num_actions);
        let mut data = Vec::with_capacity(hn * sn * kn * sn);
        for h in 0..hn {
            for s in 0..sn {
                for a in 0..kn {
                    let row = factored_row(phi, mu, h, s, a)
                        .map_err(|e| Error::InvalidModel(format!("row (h={h},s={s},a={a}): {e}")))?;
                    data.extend_from_slice(&row);
                }
            }
        }
        Ok(Self {
            horizon: hn,
            num_states: sn,
            num_actions: kn,
            data,
        })
    }

    /// Convex combination `sum_i w_i P_i`.
    pub fn mixture(weights: &[f64], kernels: &[&Kernel]) -> Result<Self> {
        if weights.len() != kernels.len() || kernels.is_empty() {
            return Err(Error::DimensionMismatch("mixture weights vs kernels".into()));
        }
        let first = kernels[0];
        let mut data = vec![0.0; first.data.len()];
        for (w, k) in weights.iter().zip(kernels) {
            if k.data.len() != data.len() {
                return Err(Error::DimensionMismatch("mixture kernels differ in shape".into()));
            }
            for (d, p) in data.iter_mut().zip(&k.data) {
                *d += w * p;
            }
        }
        Ok(Self {
            data,
            ..first.clone()
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let o = ((h * self.num_states + s) * self.num_actions + a) * self.num_states;
        &self.data[o..o + self.num_states]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(P_h f)(s,a)`.
    pub fn expect(&self, h: usize, s: usize, a: usize, f: &[f64]) -> f64 {
        self.row(h, s, a).iter().zip(f).map(|(p, v)| p * v).sum()
    }

    /// Largest total-variation distance between matching rows at step `h`.
    pub fn max_tv_at_step(&self, other: &Kernel, h: usize) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                worst = worst.max(tv_unchecked(self.row(h, s, a), other.row(h, s, a)));
            }
        }
        worst
    }

    pub fn max_tv(&self, other: &Kernel) -> f64 {
        (0..self.horizon)
            .map(|h| self.max_tv_at_step(other, h))
            .fold(0.0, f64::max)
    }

    fn same_shape(&self, reward: &RewardTable) -> Result<()> {
        if reward.horizon != self.horizon
            || reward.num_states != self.num_states
            || reward.num_actions != self.num_actions
        {
            return Err(Error::DimensionMismatch("reward table vs kernel".into()));
        }
        Ok(())
    }
}

fn factored_row(
    phi: &FeatureTable,
    mu: &EmbeddingTable,
    h: usize,
    s: usize,
    a: usize,
) -> std::result::Result<Vec<f64>, String> {
    let f = phi.get(h, s, a);
    let mut row: Vec<f64> = (0..mu.num_states)
        .map(|sp| f.iter().zip(mu.get(h, sp)).map(|(x, y)| x * y).sum())
        .collect();
    let mut clamped = false;
    for p in row.iter_mut() {
        if *p < -NEGATIVE_MASS_TOL {
            return Err(format!("negative transition mass {p:e}"));
        }
        if *p < 0.0 {
            *p = 0.0;
            clamped = true;
        }
    }
    let total: f64 = row.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(format!("transition mass sums to {total}"));
    }
    if clamped && total > 0.0 {
        row.iter_mut().for_each(|p| *p /= total);
    }
    Ok(row)
}

fn check_distribution(p: &[f64], tol: f64) -> std::result::Result<(), String> {
    if let Some(bad) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(format!("entry {bad} is not a probability"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(format!("entries sum to {total}"));
    }
    Ok(())
}

/// Where episodes start. The default is a fixed state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum InitialDist {
    Point(usize),
    Distribution(Vec<f64>),
}

impl InitialDist {
    pub fn probs(&self, num_states: usize) -> Vec<f64> {
        match self {
            InitialDist::Point(s) => {
                let mut p = vec![0.0; num_states];
                p[*s] = 1.0;
                p
            }
            InitialDist::Distribution(p) => p.clone(),
        }
    }

    pub fn sample(&self, u: f64) -> usize {
        match self {
            InitialDist::Point(s) => *s,
            InitialDist::Distribution(p) => sample_index(p, u),
        }
    }

    fn validate(&self, num_states: usize) -> Result<()> {
        match self {
            InitialDist::Point(s) => check_index("initial state", *s, num_states),
            InitialDist::Distribution(p) => {
                if p.len() != num_states {
                    return Err(Error::DimensionMismatch("initial distribution length".into()));
                }
                check_distribution(p, DISTRIBUTION_TOL).map_err(Error::InvalidModel)
            }
        }
    }
}

/// Inverse-CDF draw from a probability vector given `u ~ U[0,1)`.
pub fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the accumulated mass: take the last supported index.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// A violated invariant, reported rather than raised so batteries can count them.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantViolation {
    pub invariant: &'static str,
    pub detail: String,
}

/// Finite-horizon MDP with `P_h(s'|s,a) = <phi_h(s,a), mu_h(s')>`.
#[derive(Debug, Clone)]
pub struct TabularLowRankMdp {
    phi: FeatureTable,
    mu: EmbeddingTable,
    reward: RewardTable,
    initial: InitialDist,
    kernel: Kernel,
}

impl TabularLowRankMdp {
    /// Validates every invariant and materializes the kernel.
    pub fn new(
        phi: FeatureTable,
        mu: EmbeddingTable,
        reward: RewardTable,
        initial: InitialDist,
    ) -> Result<Self> {
        if phi.horizon == 0 || phi.num_states == 0 || phi.num_actions == 0 || phi.dim == 0 {
            return Err(Error::InvalidArgument("S, K, H and d must be positive".into()));
        }
        if reward.horizon != phi.horizon
            || reward.num_states != phi.num_states
            || reward.num_actions != phi.num_actions
        {
            return Err(Error::DimensionMismatch("reward table vs features".into()));
        }
        initial.validate(phi.num_states)?;
        let violations = validate_factors(&phi, &mu, Some(&reward));
        if let Some(v) = violations.first() {
            return Err(Error::InvalidModel(format!(
                "{} ({} violations): {}",
                v.invariant,
                violations.len(),
                v.detail
            )));
        }
        let kernel = Kernel::from_factors(&phi, &mu)?;
        Ok(Self {
            phi,
            mu,
            reward,
            initial,
            kernel,
        })
    }

    pub fn num_states(&self) -> usize {
        self.phi.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.phi.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.phi.horizon
    }
    pub fn rank(&self) -> usize {
        self.phi.dim
    }
    pub fn phi(&self) -> &FeatureTable {
        &self.phi
    }
    pub fn mu(&self) -> &EmbeddingTable {
        &self.mu
    }
    pub fn reward(&self) -> &RewardTable {
        &self.reward
    }
    pub fn initial(&self) -> &InitialDist {
        &self.initial
    }
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Same dynamics, different reward.
    pub fn with_reward(&self, reward: RewardTable) -> Result<Self> {
        Self::new(self.phi.clone(), self.mu.clone(), reward, self.initial.clone())
    }

    /// Exact value of `policy` from the initial distribution under the MDP's own reward.
    pub fn policy_value(&self, policy: &dyn Policy) -> Result<f64> {
        Ok(evaluate_policy(&self.kernel, &self.reward, policy)?.value(&self.initial))
    }
}

/// Runs the full invariant battery on raw factors; an empty result means valid.
pub fn validate_factors(
    phi: &FeatureTable,
    mu: &EmbeddingTable,
    reward: Option<&RewardTable>,
) -> Vec<InvariantViolation> {
    let mut out = Vec::new();
    if phi.horizon != mu.horizon || phi.num_states != mu.num_states || phi.dim != mu.dim {
        out.push(InvariantViolation {
            invariant: "shape",
            detail: "feature and embedding tables disagree on H, S or d".into(),
        });
        return out;
    }
    let (hn, sn, kn, d) = (phi.horizon, phi.num_states, phi.num_actions, phi.dim);

    for h in 0..hn {
        for s in 0..sn {
            for a in 0..kn {
                let f = phi.get(h, s, a);
                let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm <= 1.0 + NORM_TOL) {
                    out.push(InvariantViolation {
                        invariant: "feature_norm",
                        detail: format!("|phi(h={h},s={s},a={a})| = {norm}"),
                    });
                }
                let raw: Vec<f64> = (0..sn)
                    .map(|sp| f.iter().zip(mu.get(h, sp)).map(|(x, y)| x * y).sum())
                    .collect();
                let total: f64 = raw.iter().sum();
                let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
                if !(min >= -NEGATIVE_MASS_TOL) || !((total - 1.0).abs() <= DISTRIBUTION_TOL) {
                    out.push(InvariantViolation {
                        invariant: "distribution",
                        detail: format!("row (h={h},s={s},a={a}) sums to {total}, min {min}"),
                    });
                }
            }
        }
    }

    let bound = (d as f64).sqrt() + NORM_TOL;
    for (name, g) in normalization_battery(sn) {
        for h in 0..hn {
            let mut acc = vec![0.0; d];
            for (sp, gs) in g.iter().enumerate() {
                for (x, m) in acc.iter_mut().zip(mu.get(h, sp)) {
                    *x += gs * m;
                }
            }
            let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm <= bound) {
                out.push(InvariantViolation {
                    invariant: "embedding_norm",
                    detail: format!("|sum g mu_h| = {norm} > sqrt(d) at h={h}, g={name}"),
                });
            }
        }
    }

    if let Some(r) = reward {
        if let Some(x) = r.data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            out.push(InvariantViolation {
                invariant: "reward_range",
                detail: format!("reward entry {x} outside [0,1]"),
            });
        }
    }
    out
}

/// Test functions `g: S -> [0,1]`: all-ones, every indicator, and seeded uniform draws.
pub fn normalization_battery(num_states: usize) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![("ones".to_string(), vec![1.0; num_states])];
    for s in 0..num_states {
        let mut e = vec![0.0; num_states];
        e[s] = 1.0;
        out.push((format!("e{s}"), e));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BATTERY_SEED);
    for i in 0..BATTERY_RANDOM_DRAWS {
        out.push((
            format!("uniform{i}"),
            (0..num_states).map(|_| rng.random::<f64>()).collect(),
        ));
    }
    out
}

/// Action rule over `[H][S]`. Sampling takes an explicit uniform draw so
/// both policy kinds consume randomness identically.
pub trait Policy: Send + Sync {
    fn horizon(&self) -> usize;
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn prob(&self, h: usize, s: usize, a: usize) -> f64;
    fn sample_action(&self, h: usize, s: usize, u: f64) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: Vec<usize>,
    ) -> Result<Self> {
        if actions.len() != horizon * num_states {
            return Err(Error::DimensionMismatch("policy table size".into()));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= num_actions) {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                limit: num_actions,
            });
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            actions,
        })
    }

    pub fn constant(horizon: usize, num_states: usize, num_actions: usize, action: usize) -> Result<Self> {
        Self::new(horizon, num_states, num_actions, vec![action; horizon * num_states])
    }

    pub fn action(&self, h: usize, s: usize) -> usize {
        self.actions[h * self.num_states + s]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

impl Policy for DeterministicPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn num_states(&self) -> usize {
        self.num_states
    }
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        if self.action(h, s) == a {
            1.0
        } else {
            0.0
        }
    }
    fn sample_action(&self, h: usize, s: usize, _u: f64) -> usize {
        self.action(h, s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != horizon * num_states * num_actions {
            return Err(Error::DimensionMismatch("policy table size".into()));
        }
        for (i, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, DISTRIBUTION_TOL).map_err(|e| {
                Error::InvalidArgument(format!(
                    "policy row (h={},s={}): {e}",
                    i / num_states,
                    i % num_states
                ))
            })?;
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let o = (h * self.num_states + s) * self.num_actions;
        &self.probs[o..o + self.num_actions]
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl Policy for StochasticPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn num_states(&self) -> usize {
        self.num_states
    }
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.row(h, s)[a]
    }
    fn sample_action(&self, h: usize, s: usize, u: f64) -> usize {
        sample_index(self.row(h, s), u)
    }
}

fn check_policy_shape(kernel: &Kernel, policy: &dyn Policy) -> Result<()> {
    if policy.horizon() != kernel.horizon
        || policy.num_states() != kernel.num_states
        || policy.num_actions() != kernel.num_actions
    {
        return Err(Error::DimensionMismatch(format!(
            "policy is [{}][{}]x{} but MDP is H={} S={} K={}",
            policy.horizon(),
            policy.num_states(),
            policy.num_actions(),
            kernel.horizon,
            kernel.num_states,
            kernel.num_actions
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub h: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

/// `V[h][s]` for `h = 0..=H` and `Q[h][s][a]` for `h = 0..H`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    v: Vec<f64>,
    q: Vec<f64>,
}

impl ValueTable {
    fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            v: vec![0.0; (horizon + 1) * num_states],
            q: vec![0.0; horizon * num_states * num_actions],
        }
    }

    /// Builds a table from raw `V` (`(H+1) x S`) and `Q` (`H x S x K`) rows.
    pub fn from_parts(horizon: usize, num_states: usize, num_actions: usize, v: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if v.len() != (horizon + 1) * num_states || q.len() != horizon * num_states * num_actions {
            return Err(Error::DimensionMismatch("value table sizes".into()));
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            v,
            q,
        })
    }

    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.num_states + s]
    }

    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn v_row(&self, h: usize) -> &[f64] {
        &self.v[h * self.num_states..(h + 1) * self.num_states]
    }

    /// `E_{s ~ init}[V_1(s)]`.
    pub fn value(&self, initial: &InitialDist) -> f64 {
        match initial {
            InitialDist::Point(s) => self.v(0, *s),
            InitialDist::Distribution(p) => p.iter().enumerate().map(|(s, w)| w * self.v(0, s)).sum(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// State-action occupancy `d_h(s,a)` for `h = 0..H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    data: Vec<f64>,
}

impl Occupancy {
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.data[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn state_marginal(&self, h: usize) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| (0..self.num_actions).map(|a| self.get(h, s, a)).sum())
            .collect()
    }

    pub fn step_slice(&self, h: usize) -> &[f64] {
        let len = self.num_states * self.num_actions;
        &self.data[h * len..(h + 1) * len]
    }

    /// `sum_h sum_{s,a} d_h(s,a) f_h(s,a)`.
    pub fn integrate(&self, f: &RewardTable) -> f64 {
        self.data.iter().zip(&f.data).map(|(d, r)| d * r).sum()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// Recomputes `<phi_h(s,a), mu_h(.)>` for one row, clamping tiny negative mass.
pub fn transition_distribution(
    mdp: &TabularLowRankMdp,
    h: usize,
    s: usize,
    a: usize,
) -> Result<Vec<f64>> {
    check_index("step", h, mdp.horizon())?;
    check_index("state", s, mdp.num_states())?;
    check_index("action", a, mdp.num_actions())?;
    factored_row(&mdp.phi, &mdp.mu, h, s, a).map_err(Error::InvalidModel)
}

/// Half the L1 distance.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "tv_distance on lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(tv_unchecked(p, q))
}

pub(crate) fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Draws one episode under the MDP's own kernel and reward.
pub fn sample_episode<R: Rng + ?Sized>(
    mdp: &TabularLowRankMdp,
    policy: &dyn Policy,
    rng: &mut R,
) -> Result<Trajectory> {
    sample_from_kernel(&mdp.kernel, &mdp.reward, &mdp.initial, policy, rng)
}

/// Each step consumes exactly two uniforms (action, then next state).
pub fn sample_from_kernel<R: Rng + ?Sized>(
    kernel: &Kernel,
    reward: &RewardTable,
    initial: &InitialDist,
    policy: &dyn Policy,
    rng: &mut R,
) -> Result<Trajectory> {
    check_policy_shape(kernel, policy)?;
    kernel.same_shape(reward)?;
    let mut s = match initial {
        InitialDist::Point(s) => *s,
        other => other.sample(rng.random()),
    };
    let mut steps = Vec::with_capacity(kernel.horizon);
    for h in 0..kernel.horizon {
        let a = policy.sample_action(h, s, rng.random());
        let next = sample_index(kernel.row(h, s, a), rng.random());
        steps.push(Step {
            h,
            state: s,
            action: a,
            reward: reward.get(h, s, a),
            next_state: next,
        });
        s = next;
    }
    Ok(Trajectory { steps })
}

fn backup_q(kernel: &Kernel, reward: &RewardTable, table: &mut ValueTable, h: usize) {
    let (sn, kn) = (kernel.num_states, kernel.num_actions);
    let next: Vec<f64> = table.v_row(h + 1).to_vec();
    for s in 0..sn {
        for a in 0..kn {
            table.q[(h * sn + s) * kn + a] = reward.get(h, s, a) + kernel.expect(h, s, a, &next);
        }
    }
}

fn check_inputs(kernel: &Kernel, reward: &RewardTable) -> Result<()> {
    kernel.same_shape(reward)?;
    if !reward.is_finite() || !kernel.is_finite() {
        return Err(Error::Numeric("non-finite entry in kernel or reward".into()));
    }
    Ok(())
}

/// Exact backward evaluation of `policy` under `(kernel, reward)`.
pub fn evaluate_policy(kernel: &Kernel, reward: &RewardTable, policy: &dyn Policy) -> Result<ValueTable> {
    check_inputs(kernel, reward)?;
    check_policy_shape(kernel, policy)?;
    let (hn, sn, kn) = (kernel.horizon, kernel.num_states, kernel.num_actions);
    let mut table = ValueTable::zeros(hn, sn, kn);
    for h in (0..hn).rev() {
        backup_q(kernel, reward, &mut table, h);
        for s in 0..sn {
            let v = (0..kn).map(|a| policy.prob(h, s, a) * table.q(h, s, a)).sum();
            table.v[h * sn + s] = v;
        }
    }
    Ok(table)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.unwrap_or((0, f64::NEG_INFINITY))
}

/// Backward induction; ties go to the lowest action index.
pub fn optimal_plan(kernel: &Kernel, reward: &RewardTable) -> Result<(DeterministicPolicy, ValueTable)> {
    check_inputs(kernel, reward)?;
    let (hn, sn, kn) = (kernel.horizon, kernel.num_states, kernel.num_actions);
    let mut table = ValueTable::zeros(hn, sn, kn);
    let mut actions = vec![0usize; hn * sn];
    for h in (0..hn).rev() {
        backup_q(kernel, reward, &mut table, h);
        for s in 0..sn {
            let (a, _) = argmax_lowest((0..kn).map(|a| table.q(h, s, a)));
            actions[h * sn + s] = a;
        }
        // Value through the same policy-weighted sum evaluate_policy uses, so
        // re-evaluating the greedy policy reproduces this table bit for bit.
        for s in 0..sn {
            let chosen = actions[h * sn + s];
            let v = (0..kn)
                .map(|a| if a == chosen { 1.0 } else { 0.0 } * table.q(h, s, a))
                .sum();
            table.v[h * sn + s] = v;
        }
    }
    Ok((DeterministicPolicy::new(hn, sn, kn, actions)?, table))
}

/// Forward recursion from the initial distribution.
pub fn occupancy_measures(kernel: &Kernel, initial: &InitialDist, policy: &dyn Policy) -> Result<Occupancy> {
    check_policy_shape(kernel, policy)?;
    initial.validate(kernel.num_states)?;
    let (hn, sn, kn) = (kernel.horizon, kernel.num_states, kernel.num_actions);
    let mut data = vec![0.0; hn * sn * kn];
    let mut state = initial.probs(sn);
    for h in 0..hn {
        let mut next = vec![0.0; sn];
        for s in 0..sn {
            if state[s] == 0.0 {
                continue;
            }
            for a in 0..kn {
                let m = state[s] * policy.prob(h, s, a);
                data[(h * sn + s) * kn + a] = m;
                if m != 0.0 {
                    for (n, p) in next.iter_mut().zip(kernel.row(h, s, a)) {
                        *n += m * p;
                    }
                }
            }
        }
        state = next;
    }
    Ok(Occupancy {
        horizon: hn,
        num_states: sn,
        num_actions: kn,
        data,
    })
}

/// Both sides of the two-MDP value-difference identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationLemmaSides {
    /// `V_{P1,r1} - V_{P2,r2}` at the initial distribution.
    pub lhs: f64,
    /// Expansion under occupancy of `P2`, continuation values of `P1`.
    pub rhs_under_second: f64,
    /// Expansion under occupancy of `P1`, continuation values of `P2`.
    pub rhs_under_first: f64,
}

pub fn simulation_lemma_sides(
    p1: &Kernel,
    r1: &RewardTable,
    p2: &Kernel,
    r2: &RewardTable,
    initial: &InitialDist,
    policy: &dyn Policy,
) -> Result<SimulationLemmaSides> {
    if p1.data.len() != p2.data.len() || p1.horizon != p2.horizon {
        return Err(Error::DimensionMismatch("kernels differ in shape".into()));
    }
    let v1 = evaluate_policy(p1, r1, policy)?;
    let v2 = evaluate_policy(p2, r2, policy)?;
    let lhs = v1.value(initial) - v2.value(initial);

    let expansion = |occ: &Occupancy, cont: &ValueTable| -> f64 {
        let (hn, sn, kn) = (p1.horizon, p1.num_states, p1.num_actions);
        let mut total = 0.0;
        for h in 0..hn {
            let next = cont.v_row(h + 1);
            for s in 0..sn {
                for a in 0..kn {
                    let d = occ.get(h, s, a);
                    if d == 0.0 {
                        continue;
                    }
                    let gap = p1.expect(h, s, a, next) - p2.expect(h, s, a, next);
                    total += d * (r1.get(h, s, a) - r2.get(h, s, a) + gap);
                }
            }
        }
        total
    };
    let occ2 = occupancy_measures(p2, initial, policy)?;
    let occ1 = occupancy_measures(p1, initial, policy)?;
    Ok(SimulationLemmaSides {
        lhs,
        rhs_under_second: expansion(&occ2, &v1),
        rhs_under_first: expansion(&occ1, &v2),
    })
}

/// Hand-checkable MDPs used across the test suites and the CLI.
pub mod fixtures {
    use super::*;

    /// S=2, K=1, d=2, `phi(s,a) = e_s`, `mu(s') = e_{s'}`: every state is absorbing.
    pub fn identity_chain(horizon: usize, reward: RewardTable) -> TabularLowRankMdp {
        let phi = FeatureTable::from_fn(horizon, 2, 1, 2, |_, s, _| unit(2, s));
        let mu = EmbeddingTable::from_fn(horizon, 2, 2, |_, s| unit(2, s));
        TabularLowRankMdp::new(phi, mu, reward, InitialDist::Point(0)).expect("identity chain")
    }

    /// Identity dynamics with `num_actions` actions; `a` never changes the state.
    pub fn identity_chain_with_actions(horizon: usize, num_actions: usize, reward: RewardTable) -> TabularLowRankMdp {
        let phi = FeatureTable::from_fn(horizon, 2, num_actions, 2, |_, s, _| unit(2, s));
        let mu = EmbeddingTable::from_fn(horizon, 2, 2, |_, s| unit(2, s));
        TabularLowRankMdp::new(phi, mu, reward, InitialDist::Point(0)).expect("identity chain")
    }

    /// d=1, `phi = 1`, `mu(s') = 1/S`: every row is uniform.
    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> TabularLowRankMdp {
        let phi = FeatureTable::from_fn(horizon, num_states, num_actions, 1, |_, _, _| vec![1.0]);
        let mu = EmbeddingTable::from_fn(horizon, num_states, 1, |_, _| vec![1.0 / num_states as f64]);
        let reward = RewardTable::zeros(horizon, num_states, num_actions);
        TabularLowRankMdp::new(phi, mu, reward, InitialDist::Point(0)).expect("uniform fixture")
    }

    /// Deterministic ring with one-hot features (`d = S K`): action 0 stays,
    /// action 1 advances to `s + 1 mod S`. Reward 1 for staying in the last state.
    pub fn ring(horizon: usize, num_states: usize) -> TabularLowRankMdp {
        let kn = 2;
        let d = num_states * kn;
        let phi = FeatureTable::from_fn(horizon, num_states, kn, d, |_, s, a| unit(d, s * kn + a));
        let next = |s: usize, a: usize| if a == 0 { s } else { (s + 1) % num_states };
        let mu = EmbeddingTable::from_fn(horizon, num_states, d, |_, sp| {
            (0..d).map(|j| if next(j / kn, j % kn) == sp { 1.0 } else { 0.0 }).collect()
        });
        let last = num_states - 1;
        let reward = RewardTable::from_fn(horizon, num_states, kn, |_, s, a| if s == last && a == 0 { 1.0 } else { 0.0 });
        TabularLowRankMdp::new(phi, mu, reward, InitialDist::Point(0)).expect("ring fixture")
    }

    pub fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        e
    }
}
