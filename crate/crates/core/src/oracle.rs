//! Exact ICVFs for goal-reaching intents.
//!
//! For a goal `g` the intent reward is `r_g(s) = 1(s = g)`. The optimal
//! policy for `r_g` induces a kernel `P_g`, and the ICVF slice for that
//! intent is the successor matrix `M_g = (I − γ P_g)⁻¹`:
//! `V(s, s₊, g) = M_g[s, s₊]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};
use crate::linalg::solve_dense;
use crate::mdp::{policy_transition_matrix, value_iteration, Policy, RewardVector, StateId, TabularMdp};

/// Residual bound enforced on every successor-matrix solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-9;

/// `M = (I − γ P)⁻¹` for a row-stochastic `P`.
pub fn successor_matrix(kernel: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if kernel.nrows() != kernel.ncols() {
        return Err(Error::Shape(format!(
            "transition matrix is {}x{}",
            kernel.nrows(),
            kernel.ncols()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    let n = kernel.nrows();
    let identity = DMatrix::<f64>::identity(n, n);
    let system = &identity - kernel * gamma;
    let solution = solve_dense(system.clone(), &identity)?;
    let residual = (&system * &solution - &identity).amax();
    if residual.is_nan() || residual >= SOLVE_RESIDUAL_TOL {
        return Err(Error::Numerical(format!(
            "successor solve residual {residual:e} exceeds {SOLVE_RESIDUAL_TOL:e}"
        )));
    }
    Ok(solution)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleIcvf {
    gamma: f64,
    intents: Vec<StateId>,
    policies: Vec<Policy>,
    optimal_values: Vec<RewardVector>,
    matrices: Vec<DMatrix<f64>>,
}

/// Builds the exact ICVF for a list of goal states.
pub fn oracle_icvf(mdp: &TabularMdp, goals: &[StateId], gamma: f64) -> Result<OracleIcvf> {
    let n = mdp.n_states();
    if let Some(bad) = goals.iter().find(|&&g| g >= n) {
        return Err(Error::Config(format!("goal {bad} out of range for {n} states")));
    }
    let mut policies = Vec::with_capacity(goals.len());
    let mut optimal_values = Vec::with_capacity(goals.len());
    let mut matrices = Vec::with_capacity(goals.len());
    for &goal in goals {
        let mut reward = vec![0.0; n];
        reward[goal] = 1.0;
        let (values, policy) = value_iteration(mdp, &reward, gamma)?;
        let kernel = policy_transition_matrix(mdp, &policy)?;
        matrices.push(successor_matrix(&kernel, gamma)?);
        policies.push(policy);
        optimal_values.push(values);
    }
    Ok(OracleIcvf {
        gamma,
        intents: goals.to_vec(),
        policies,
        optimal_values,
        matrices,
    })
}

impl OracleIcvf {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows())
    }

    pub fn intents(&self) -> &[StateId] {
        &self.intents
    }

    pub fn intent_index(&self, goal: StateId) -> Option<usize> {
        self.intents.iter().position(|&g| g == goal)
    }

    /// `M_z` for the intent at `index`.
    pub fn matrix(&self, index: usize) -> &DMatrix<f64> {
        &self.matrices[index]
    }

    pub fn matrix_mut(&mut self, index: usize) -> &mut DMatrix<f64> {
        &mut self.matrices[index]
    }

    pub fn policy(&self, index: usize) -> &Policy {
        &self.policies[index]
    }

    /// Value-iteration optimum for the intent's indicator reward.
    pub fn optimal_values(&self, index: usize) -> &[f64] {
        &self.optimal_values[index]
    }

    pub fn value(&self, s: StateId, s_plus: StateId, index: usize) -> f64 {
        self.matrices[index][(s, s_plus)]
    }
}

/// `V_r^z(s) = Σ_{s₊} r(s₊) V(s, s₊, z)`, i.e. `M_z r`.
pub fn oracle_value_of_reward(oracle: &OracleIcvf, reward: &[f64], intent_index: usize) -> Result<RewardVector> {
    let m = oracle
        .matrices
        .get(intent_index)
        .ok_or_else(|| Error::Config(format!("intent index {intent_index} out of range")))?;
    if reward.len() != m.ncols() {
        return Err(Error::Shape(format!(
            "reward has {} entries, oracle has {} states",
            reward.len(),
            m.ncols()
        )));
    }
    Ok((m * DVector::from_column_slice(reward)).as_slice().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Monte Carlo estimate of `V(s₀, s₊)` as `1/(1−γ) · P(s_T = s₊)` with
/// `T ~ Geom(1−γ)` counted from 0.
pub fn mc_visitation_estimate<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &Policy,
    s0: StateId,
    s_plus: StateId,
    gamma: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("need at least one Monte Carlo sample".into()));
    }
    if s0 >= mdp.n_states() || s_plus >= mdp.n_states() {
        return Err(Error::Config("state out of range".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    let horizon = Geometric::new(1.0 - gamma).map_err(|e| Error::Config(e.to_string()))?;
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let t = horizon.sample(rng);
        let mut s = s0;
        for _ in 0..t {
            let a = policy.sample(s, rng);
            s = mdp.sample_next(s, a, rng);
        }
        hits += usize::from(s == s_plus);
    }
    let n = n_samples as f64;
    let p = hits as f64 / n;
    let scale = 1.0 / (1.0 - gamma);
    let std_error = if n_samples > 1 {
        // Sample standard deviation of a Bernoulli mean.
        (p * (1.0 - p) * n / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean: scale * p,
        std_error: scale * std_error,
        n_samples,
    })
}

/// Largest violation of `V(s,s₊,z) = 1(s=s₊) + γ Σ_{s'} P_z(s'|s) V(s',s₊,z)`.
pub fn bellman_residual(oracle: &OracleIcvf, mdp: &TabularMdp, intent_index: usize) -> Result<f64> {
    let m = oracle
        .matrices
        .get(intent_index)
        .ok_or_else(|| Error::Config(format!("intent index {intent_index} out of range")))?;
    if m.nrows() != mdp.n_states() {
        return Err(Error::Shape("oracle and MDP disagree on the state count".into()));
    }
    let kernel = policy_transition_matrix(mdp, &oracle.policies[intent_index])?;
    let n = mdp.n_states();
    let backed = DMatrix::<f64>::identity(n, n) + kernel * m * oracle.gamma;
    Ok((m - backed).amax())
}

/// The `α`-expectile of a finite distribution: the `v` balancing
/// `α Σ p (y − v)₊ = (1 − α) Σ p (v − y)₊`.
pub fn expectile(values: &[f64], probs: &[f64], alpha: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .copied()
        .zip(probs.iter().copied())
        .filter(|p| p.1 > 0.0)
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut lo_mass, mut lo_sum) = (0.0, 0.0);
    let (mut hi_mass, mut hi_sum) = pairs.iter().fold((0.0, 0.0), |(m, s), &(y, p)| (m + p, s + p * y));
    for (k, &(y, p)) in pairs.iter().enumerate() {
        lo_mass += p;
        lo_sum += p * y;
        hi_mass -= p;
        hi_sum -= p * y;
        let v = (alpha * hi_sum + (1.0 - alpha) * lo_sum) / (alpha * hi_mass + (1.0 - alpha) * lo_mass);
        let upper = pairs.get(k + 1).map_or(f64::INFINITY, |q| q.0);
        if v <= upper {
            return v.max(y);
        }
    }
    pairs.last().map_or(0.0, |q| q.0)
}

const EXPECTILE_MAX_ITERS: usize = 1_000_000;

/// Fixed point of `v(s) = expectile_α { r(s) + γ v(s') : s' ~ P̂(· | s) }` over
/// empirical transitions `(s, s', weight)`. States without outgoing
/// transitions keep value 0.
pub fn expectile_fixed_point(
    n_states: usize,
    transitions: &[(StateId, StateId, f64)],
    reward: &[f64],
    gamma: f64,
    alpha: f64,
) -> Result<RewardVector> {
    if reward.len() != n_states {
        return Err(Error::Shape("reward length differs from state count".into()));
    }
    if !(0.0..1.0).contains(&gamma) || !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "need gamma, alpha in [0, 1), got {gamma}, {alpha}"
        )));
    }
    let mut out: Vec<Vec<(StateId, f64)>> = vec![Vec::new(); n_states];
    for &(s, s_next, w) in transitions {
        if s >= n_states || s_next >= n_states {
            return Err(Error::Shape(format!("transition ({s}, {s_next}) out of range")));
        }
        out[s].push((s_next, w));
    }
    let scale = reward.iter().fold(0.0f64, |m, r| m.max(r.abs())) / (1.0 - gamma);
    let tol = (1e-13 * scale).max(f64::MIN_POSITIVE);
    let mut values = vec![0.0; n_states];
    let mut targets = Vec::new();
    let mut probs = Vec::new();
    let mut change = f64::INFINITY;
    for _ in 0..EXPECTILE_MAX_ITERS {
        change = 0.0;
        let previous = values.clone();
        for s in 0..n_states {
            if out[s].is_empty() {
                continue;
            }
            targets.clear();
            probs.clear();
            for &(s_next, w) in &out[s] {
                targets.push(reward[s] + gamma * previous[s_next]);
                probs.push(w);
            }
            let v = expectile(&targets, &probs, alpha);
            change = change.max((v - values[s]).abs());
            values[s] = v;
        }
        if change <= tol * (1.0 - gamma) {
            return Ok(values);
        }
    }
    Err(Error::NonConvergence {
        operation: "expectile fixed point",
        iterations: EXPECTILE_MAX_ITERS,
        residual: change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_gridworld, GridSpec, Gridworld};
    use crate::seeded_rng;

    fn chain_kernel() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0])
    }

    /// Truncated power series `Σ_{t ≤ T} γᵗ Pᵗ`.
    fn power_series(kernel: &DMatrix<f64>, gamma: f64, terms: usize) -> DMatrix<f64> {
        let n = kernel.nrows();
        let mut total = DMatrix::zeros(n, n);
        let mut term = DMatrix::<f64>::identity(n, n);
        for _ in 0..=terms {
            total += &term;
            term = &term * kernel * gamma;
        }
        total
    }

    #[test]
    fn successor_of_self_loops_is_scaled_identity() {
        let m = successor_matrix(&DMatrix::identity(4, 4), 0.9).unwrap();
        assert!((m - DMatrix::<f64>::identity(4, 4) * 10.0).amax() < 1e-12);
    }

    #[test]
    fn successor_zero_discount_is_identity() {
        let m = successor_matrix(&chain_kernel(), 0.0).unwrap();
        assert_eq!(m, DMatrix::identity(2, 2));
    }

    #[test]
    fn successor_chain_matches_power_series() {
        let m = successor_matrix(&chain_kernel(), 0.9).unwrap();
        let series = power_series(&chain_kernel(), 0.9, 500);
        assert!((&m - &series).amax() < 1e-8);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 9.0, 0.0, 10.0]);
        assert!((m - expected).amax() < 1e-8);
    }

    #[test]
    fn successor_rejects_bad_inputs() {
        assert!(successor_matrix(&DMatrix::identity(2, 3), 0.5).is_err());
        assert!(successor_matrix(&DMatrix::identity(2, 2), 1.0).is_err());
    }

    #[test]
    fn oracle_goal_self_value_and_zero_discount() {
        let world = Gridworld::open_room();
        let oracle = oracle_icvf(world.mdp(), &[7], 0.9).unwrap();
        assert!((oracle.value(7, 7, 0) - 10.0).abs() < 1e-10);
        let flat = oracle_icvf(world.mdp(), &[3, 12], 0.0).unwrap();
        for i in 0..2 {
            assert!((flat.matrix(i) - DMatrix::<f64>::identity(25, 25)).amax() < 1e-15);
        }
    }

    #[test]
    fn oracle_goal_column_is_discounted_distance() {
        let world = Gridworld::open_room();
        let goal = world.state_at(4, 4).unwrap();
        let oracle = oracle_icvf(world.mdp(), &[goal], 0.9).unwrap();
        for s in 0..25 {
            let (r, c) = world.coords(s);
            let dist = (4 - r) + (4 - c);
            let expected = 0.9f64.powi(dist as i32) / 0.1;
            assert!((oracle.value(s, goal, 0) - expected).abs() < 1e-9, "state {s}");
        }
    }

    #[test]
    fn oracle_matrix_invariants() {
        let world = Gridworld::four_rooms();
        let goals = [0, 17, 52, 103];
        let gamma = 0.95;
        let oracle = oracle_icvf(world.mdp(), &goals, gamma).unwrap();
        let cap = 1.0 / (1.0 - gamma);
        for i in 0..goals.len() {
            let m = oracle.matrix(i);
            for s in 0..m.nrows() {
                let row_sum: f64 = m.row(s).iter().sum();
                assert!(((1.0 - gamma) * row_sum - 1.0).abs() < 1e-8);
                assert!(m[(s, s)] >= 1.0 - 1e-10);
                for &x in m.row(s).iter() {
                    assert!((-1e-10..=cap + 1e-10).contains(&x));
                }
            }
        }
    }

    #[test]
    fn value_of_reward_identities() {
        let world = Gridworld::open_room();
        let gamma = 0.9;
        let oracle = oracle_icvf(world.mdp(), &[3, 18], gamma).unwrap();
        for (i, &goal) in [3usize, 18].iter().enumerate() {
            let mut indicator = vec![0.0; 25];
            indicator[goal] = 1.0;
            let v = oracle_value_of_reward(&oracle, &indicator, i).unwrap();
            let (vi, _) = value_iteration(world.mdp(), &indicator, gamma).unwrap();
            assert!(v.iter().zip(&vi).all(|(a, b)| (a - b).abs() < 1e-8));
            let zero = oracle_value_of_reward(&oracle, &[0.0; 25], i).unwrap();
            assert!(zero.iter().all(|&x| x == 0.0));
            let ones = oracle_value_of_reward(&oracle, &[1.0; 25], i).unwrap();
            assert!(ones.iter().all(|&x| (x - 10.0).abs() < 1e-8));
        }
        assert!(oracle_value_of_reward(&oracle, &[1.0; 3], 0).is_err());
        assert!(oracle_value_of_reward(&oracle, &[1.0; 25], 2).is_err());
    }

    #[test]
    fn value_of_reward_is_linear() {
        let world = Gridworld::open_room();
        let oracle = oracle_icvf(world.mdp(), &[11], 0.9).unwrap();
        let mut rng = seeded_rng(4);
        let r1: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        let r2: Vec<f64> = (0..25).map(|_| rng.random::<f64>() - 0.5).collect();
        let (a, b) = (1.7, -0.3);
        let mixed: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| a * x + b * y).collect();
        let lhs = oracle_value_of_reward(&oracle, &mixed, 0).unwrap();
        let o1 = oracle_value_of_reward(&oracle, &r1, 0).unwrap();
        let o2 = oracle_value_of_reward(&oracle, &r2, 0).unwrap();
        for s in 0..25 {
            assert!((lhs[s] - (a * o1[s] + b * o2[s])).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_zero_discount_is_exact_indicator() {
        let world = Gridworld::open_room();
        let policy = Policy::uniform(25, 5);
        let hit = mc_visitation_estimate(world.mdp(), &policy, 4, 4, 0.0, 100, &mut seeded_rng(0)).unwrap();
        assert_eq!(hit.mean, 1.0);
        assert_eq!(hit.std_error, 0.0);
        let miss = mc_visitation_estimate(world.mdp(), &policy, 4, 5, 0.0, 100, &mut seeded_rng(0)).unwrap();
        assert_eq!(miss.mean, 0.0);
    }

    #[test]
    fn mc_absorbing_state() {
        let world = build_gridworld(&GridSpec::from_rows(&["."], 0.0).unwrap()).unwrap();
        let est =
            mc_visitation_estimate(world.mdp(), &Policy::uniform(1, 5), 0, 0, 0.9, 500, &mut seeded_rng(2)).unwrap();
        assert!((est.mean - 10.0).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn mc_agrees_with_matrix_solve() {
        let world = Gridworld::open_room();
        let gamma = 0.9;
        let oracle = oracle_icvf(world.mdp(), &[6, 20], gamma).unwrap();
        let mut rng = seeded_rng(77);
        for _ in 0..6 {
            let i = rng.random_range(0..2);
            let s0 = rng.random_range(0..25);
            let s_plus = rng.random_range(0..25);
            let est =
                mc_visitation_estimate(world.mdp(), oracle.policy(i), s0, s_plus, gamma, 100_000, &mut rng).unwrap();
            let exact = oracle.value(s0, s_plus, i);
            assert!(
                (est.mean - exact).abs() <= 4.0 * est.std_error + 1e-12,
                "({s0},{s_plus},{i}): {} ± {} vs {exact}",
                est.mean,
                est.std_error
            );
        }
    }

    #[test]
    fn bellman_residual_exact_and_perturbed() {
        let world = build_gridworld(&GridSpec::from_rows(&[".."], 0.0).unwrap()).unwrap();
        let gamma = 0.9;
        let mut oracle = oracle_icvf(world.mdp(), &[0, 1], gamma).unwrap();
        for i in 0..2 {
            assert!(bellman_residual(&oracle, world.mdp(), i).unwrap() < 1e-10);
        }
        oracle.matrix_mut(1)[(0, 1)] += 0.1;
        assert!(bellman_residual(&oracle, world.mdp(), 1).unwrap() >= 0.1 * (1.0 - gamma));
    }
}
