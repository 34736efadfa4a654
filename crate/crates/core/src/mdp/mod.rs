//! Tabular Markov control processes and the exact solvers built on them.
//!
//! States and actions are dense integer ids. The transition kernel is kept
//! as a dense `(s, a, s')` tensor plus a sparse successor list per `(s, a)`
//! row, which is what the solvers and samplers actually iterate over.

mod grid;

pub use grid::{build_gridworld, Action, Cell, GridSpec, Gridworld, ACTIONS};

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

/// Row-sum tolerance for every probability vector in this crate.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Sup-norm distance to the Bellman fixed point guaranteed by [`value_iteration`].
pub const VALUE_ITERATION_TOL: f64 = 1e-10;

const VALUE_ITERATION_MAX_ITERS: usize = 1_000_000;

/// Actions whose backed-up value is within this distance of the best one are
/// treated as tied; the lowest index wins.
const GREEDY_TIE_TOL: f64 = 1e-12;

pub type StateId = usize;
pub type ActionId = usize;

/// A per-state reward (or any per-state scalar field).
pub type RewardVector = Vec<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flat `(s * n_actions + a) * n_states + s'`.
    transition: Vec<f64>,
    rho: Vec<f64>,
    successors: Vec<Vec<(StateId, f64)>>,
}

fn check_distribution(values: &[f64], what: &str) -> Result<()> {
    if let Some(bad) = values.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::config(format!("{what} has invalid entry {bad}")));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::config(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, transition: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::config("an MDP needs at least one state and one action"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::shape(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if rho.len() != n_states {
            return Err(Error::shape(format!(
                "initial distribution has {} entries, expected {n_states}",
                rho.len()
            )));
        }
        let mut successors = Vec::with_capacity(n_states * n_actions);
        for (row_index, row) in transition.chunks(n_states).enumerate() {
            let (s, a) = (row_index / n_actions, row_index % n_actions);
            check_distribution(row, &format!("transition row (s={s}, a={a})"))?;
            successors.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(next, p)| (next, *p))
                    .collect(),
            );
        }
        check_distribution(&rho, "initial distribution")?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            rho,
            successors,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn prob(&self, s: StateId, a: ActionId, next: StateId) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    /// The dense `P(·|s, a)` row.
    pub fn row(&self, s: StateId, a: ActionId) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Non-zero entries of `P(·|s, a)` in increasing state order.
    pub fn successors(&self, s: StateId, a: ActionId) -> &[(StateId, f64)] {
        &self.successors[s * self.n_actions + a]
    }

    /// `Σ_{s'} P(s'|s,a) values[s']`.
    pub fn expected(&self, s: StateId, a: ActionId, values: &[f64]) -> f64 {
        self.successors(s, a).iter().map(|&(next, p)| p * values[next]).sum()
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: StateId, a: ActionId, rng: &mut R) -> StateId {
        sample_sparse(self.successors(s, a), rng)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> StateId {
        sample_dense(&self.rho, rng)
    }
}

fn sample_sparse<R: Rng + ?Sized>(entries: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(index, p) in entries {
        acc += p;
        if u < acc {
            return index;
        }
    }
    // Rounding left `acc` a hair below 1.
    entries.last().map(|&(index, _)| index).expect("empty distribution")
}

fn sample_dense<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (index, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = index;
            if u < acc {
                return index;
            }
        }
    }
    last_positive
}

/// Action probabilities indexed `(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::shape(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    pub fn deterministic(actions: &[ActionId], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::config(format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    /// Mixes `self` with the uniform policy: `(1 - epsilon) * self + epsilon * uniform`.
    pub fn with_exploration(&self, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!("exploration rate {epsilon} outside [0, 1]")));
        }
        let uniform = epsilon / self.n_actions as f64;
        let probs = self.probs.iter().map(|p| (1.0 - epsilon) * p + uniform).collect();
        Ok(Self { probs, ..self.clone() })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: StateId, a: ActionId) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// The highest-probability action of each state, lowest index on ties.
    pub fn greedy_actions(&self) -> Vec<ActionId> {
        (0..self.n_states)
            .map(|s| {
                let row = self.row(s);
                let mut best = 0;
                for (a, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: StateId, rng: &mut R) -> ActionId {
        sample_dense(self.row(s), rng)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// Greedy action and its backed-up value `r(s) + γ Σ P V` at state `s`.
fn greedy_backup(mdp: &TabularMdp, reward: &[f64], gamma: f64, values: &[f64], s: StateId) -> (ActionId, f64) {
    let q: Vec<f64> = (0..mdp.n_actions()).map(|a| mdp.expected(s, a, values)).collect();
    let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let action = q.iter().position(|&v| v >= best - GREEDY_TIE_TOL).unwrap_or(0);
    (action, reward[s] + gamma * best)
}

/// One Bellman-optimality backup of `values`.
pub fn bellman_optimality_backup(mdp: &TabularMdp, reward: &[f64], gamma: f64, values: &[f64]) -> Vec<f64> {
    (0..mdp.n_states())
        .map(|s| greedy_backup(mdp, reward, gamma, values, s).1)
        .collect()
}

/// Optimal values and a deterministic greedy policy for a state reward.
///
/// Iterates until the sup-norm step is small enough that the returned values
/// are within [`VALUE_ITERATION_TOL`] of the fixed point
/// `V(s) = r(s) + γ max_a Σ P(s'|s,a) V(s')`.
pub fn value_iteration(mdp: &TabularMdp, reward: &[f64], gamma: f64) -> Result<(RewardVector, Policy)> {
    check_gamma(gamma)?;
    if reward.len() != mdp.n_states() {
        return Err(Error::shape(format!(
            "reward has {} entries, MDP has {} states",
            reward.len(),
            mdp.n_states()
        )));
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::config("reward contains non-finite entries"));
    }
    // ‖V_k − V*‖ ≤ γ/(1−γ)·‖V_k − V_{k−1}‖
    let step_tol = if gamma == 0.0 {
        f64::INFINITY
    } else {
        (VALUE_ITERATION_TOL * (1.0 - gamma) / gamma).max(f64::EPSILON)
    };
    let scale = reward.iter().fold(1.0f64, |m, r| m.max(r.abs())) / (1.0 - gamma);
    let mut values = reward.to_vec();
    let mut residual = f64::INFINITY;
    for _ in 0..VALUE_ITERATION_MAX_ITERS {
        let next = bellman_optimality_backup(mdp, reward, gamma, &values);
        residual = sup_distance(&next, &values);
        values = next;
        // Below this the step is pure rounding noise.
        if residual <= step_tol || residual <= 4.0 * f64::EPSILON * scale {
            let actions: Vec<ActionId> = (0..mdp.n_states())
                .map(|s| greedy_backup(mdp, reward, gamma, &values, s).0)
                .collect();
            return Ok((values, Policy::deterministic(&actions, mdp.n_actions())?));
        }
    }
    Err(Error::NonConvergence {
        operation: "value iteration",
        iterations: VALUE_ITERATION_MAX_ITERS,
        residual,
    })
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// State-to-state kernel `P_π[s, s'] = Σ_a π(a|s) P(s'|s, a)`.
pub fn policy_transition_matrix(mdp: &TabularMdp, policy: &Policy) -> Result<DMatrix<f64>> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(Error::shape(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let n = mdp.n_states();
    let mut kernel = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for &(next, p) in mdp.successors(s, a) {
                kernel[(s, next)] += pa * p;
            }
        }
    }
    Ok(kernel)
}

/// Samples `horizon + 1` states of the chain induced by `policy`, starting at `s0`.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &Policy,
    s0: StateId,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<StateId>> {
    if s0 >= mdp.n_states() {
        return Err(Error::config(format!("start state {s0} out of range")));
    }
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(Error::shape("policy does not match MDP"));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut s = s0;
    states.push(s);
    for _ in 0..horizon {
        let a = policy.sample(s, rng);
        s = mdp.sample_next(s, a, rng);
        states.push(s);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    /// Two states, three actions: stay, go to 1, go to 0.
    fn two_state_chain() -> TabularMdp {
        #[rustfmt::skip]
        let transition = vec![
            1.0, 0.0,  0.0, 1.0,  1.0, 0.0,
            0.0, 1.0,  0.0, 1.0,  1.0, 0.0,
        ];
        TabularMdp::new(2, 3, transition, vec![0.5, 0.5]).unwrap()
    }

    fn random_mdp(n: usize, na: usize, seed: u64) -> TabularMdp {
        let mut rng = seeded_rng(seed);
        let mut transition = Vec::new();
        for _ in 0..n * na {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            transition.extend(raw.iter().map(|x| x / total));
        }
        // Renormalise against rounding so rows pass the 1e-12 check.
        for row in transition.chunks_mut(n) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
        TabularMdp::new(n, na, transition, vec![1.0 / n as f64; n]).unwrap()
    }

    fn random_policy(n: usize, na: usize, seed: u64) -> Policy {
        let mut rng = seeded_rng(seed);
        let mut probs = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..na).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|x| x / total));
        }
        Policy::new(n, na, probs).unwrap()
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let err = TabularMdp::new(1, 1, vec![0.9], vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = TabularMdp::new(2, 1, vec![1.5, -0.5, 0.0, 1.0], vec![1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = TabularMdp::new(1, 1, vec![1.0], vec![0.5]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn value_iteration_zero_discount_returns_reward() {
        let mdp = two_state_chain();
        let (values, _) = value_iteration(&mdp, &[0.25, -3.0], 0.0).unwrap();
        assert_eq!(values, vec![0.25, -3.0]);
    }

    #[test]
    fn value_iteration_chain_geometric_series() {
        let mdp = two_state_chain();
        let (values, policy) = value_iteration(&mdp, &[0.0, 1.0], 0.9).unwrap();
        assert!((values[1] - 10.0).abs() < 1e-10);
        assert!((values[0] - 9.0).abs() < 1e-10);
        // From 0, action 1 moves right; at 1, actions 0 and 1 tie and 0 wins.
        assert_eq!(policy.greedy_actions(), vec![1, 0]);
    }

    #[test]
    fn value_iteration_rejects_bad_discount() {
        let mdp = two_state_chain();
        assert!(value_iteration(&mdp, &[0.0, 1.0], 1.0).is_err());
        assert!(value_iteration(&mdp, &[0.0, 1.0], -0.1).is_err());
        assert!(value_iteration(&mdp, &[0.0], 0.5).is_err());
    }

    #[test]
    fn value_iteration_fixed_point_and_greedy_consistency_on_random_mdps() {
        for seed in 0..5 {
            let mdp = random_mdp(12, 4, seed);
            let mut rng = seeded_rng(100 + seed);
            let reward: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let (values, policy) = value_iteration(&mdp, &reward, 0.95).unwrap();
            let backed = bellman_optimality_backup(&mdp, &reward, 0.95, &values);
            assert!(sup_distance(&backed, &values) < 1e-9);
            for s in 0..12 {
                let a = policy.greedy_actions()[s];
                let greedy = reward[s] + 0.95 * mdp.expected(s, a, &values);
                assert!((greedy - backed[s]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn policy_kernel_matches_triple_loop() {
        let (n, na) = (9, 3);
        let mdp = random_mdp(n, na, 7);
        let policy = random_policy(n, na, 8);
        let kernel = policy_transition_matrix(&mdp, &policy).unwrap();
        for s in 0..n {
            for next in 0..n {
                let mut naive = 0.0;
                for a in 0..na {
                    naive += policy.prob(s, a) * mdp.prob(s, a, next);
                }
                assert!((kernel[(s, next)] - naive).abs() < 1e-14);
            }
            let total: f64 = kernel.row(s).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_kernel_is_mixture_of_action_rows() {
        let mdp = two_state_chain();
        let kernel = policy_transition_matrix(&mdp, &Policy::uniform(2, 3)).unwrap();
        assert!((kernel[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((kernel[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((kernel[(1, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((kernel[(1, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn policy_kernel_shape_mismatch() {
        let mdp = two_state_chain();
        assert!(policy_transition_matrix(&mdp, &Policy::uniform(3, 3)).is_err());
    }

    #[test]
    fn rollout_basics() {
        let mdp = two_state_chain();
        let go_right = Policy::deterministic(&[1, 1], 3).unwrap();
        let mut rng = seeded_rng(0);
        assert_eq!(rollout(&mdp, &go_right, 0, 0, &mut rng).unwrap(), vec![0]);
        assert_eq!(rollout(&mdp, &go_right, 0, 3, &mut rng).unwrap(), vec![0, 1, 1, 1]);
        assert!(rollout(&mdp, &go_right, 2, 3, &mut rng).is_err());
    }

    #[test]
    fn rollout_is_deterministic_given_seed() {
        let mdp = random_mdp(6, 2, 3);
        let policy = random_policy(6, 2, 4);
        let a = rollout(&mdp, &policy, 0, 200, &mut seeded_rng(11)).unwrap();
        let b = rollout(&mdp, &policy, 0, 200, &mut seeded_rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_frequencies_match_kernel() {
        let (n, na) = (4, 2);
        let mdp = random_mdp(n, na, 21);
        let policy = random_policy(n, na, 22);
        let kernel = policy_transition_matrix(&mdp, &policy).unwrap();
        let states = rollout(&mdp, &policy, 0, 100_000, &mut seeded_rng(23)).unwrap();
        let mut counts = vec![vec![0usize; n]; n];
        for pair in states.windows(2) {
            counts[pair[0]][pair[1]] += 1;
        }
        for s in 0..n {
            let visits: usize = counts[s].iter().sum();
            assert!(visits > 1000);
            for next in 0..n {
                let p = kernel[(s, next)];
                let freq = counts[s][next] as f64 / visits as f64;
                let se = (p * (1.0 - p) / visits as f64).sqrt();
                assert!((freq - p).abs() <= 3.0 * se + 1e-12, "s={s} s'={next}: {freq} vs {p}");
            }
        }
    }
}
