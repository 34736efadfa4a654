//! Downstream use of a learned representation: linear probes, the
//! value-approximation bound, frozen-feature expectile TD, and CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::PassiveDataset;
use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::mdp::{Gridworld, StateId};
use crate::model::{expectile_weight, IcvfModel, Model, MultilinearIcvf};
use crate::oracle::{oracle_value_of_reward, OracleIcvf};

/// Largest tolerated violation of the bound; anything below is a bug.
pub const SLACK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub theta: DVector<f64>,
    pub mse: f64,
}

/// Least-squares linear read-out of `targets` from `features` (rows are states).
pub fn linear_probe(features: &DMatrix<f64>, targets: &[f64]) -> Result<ProbeFit> {
    if features.nrows() == 0 {
        return Err(Error::shape("probe needs at least one state"));
    }
    let y = DVector::from_column_slice(targets);
    let theta = least_squares(features, &y)?;
    let mse = probe_mse(features, &theta, targets);
    Ok(ProbeFit { theta, mse })
}

/// Mean squared residual of `features · theta` against `targets`.
pub fn probe_mse(features: &DMatrix<f64>, theta: &DVector<f64>, targets: &[f64]) -> f64 {
    let pred = features * theta;
    pred.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / targets.len() as f64
}

/// `n_states × d` matrix of independent standard normal entries.
pub fn random_gaussian_features<R: Rng + ?Sized>(n_states: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let entries: Vec<f64> = (0..n_states * d).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(n_states, d, &entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonReport {
    /// `Σ_{s,s₊} (oracle − model)²`, one per oracle intent.
    pub per_intent: Vec<f64>,
    pub max: f64,
}

pub fn measure_epsilon<M: IcvfModel + ?Sized>(model: &M, oracle: &OracleIcvf) -> Result<EpsilonReport> {
    if model.n_states() != oracle.n_states() {
        return Err(Error::shape(format!(
            "model has {} states, oracle has {}",
            model.n_states(),
            oracle.n_states()
        )));
    }
    let per_intent: Vec<f64> = oracle
        .intents()
        .iter()
        .enumerate()
        .map(|(i, &g)| (oracle.matrix(i) - model.value_matrix(g)).iter().map(|x| x * x).sum())
        .collect();
    let max = per_intent.iter().copied().fold(0.0, f64::max);
    Ok(EpsilonReport { per_intent, max })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlackRecord {
    pub reward_index: usize,
    pub goal: StateId,
    pub epsilon: f64,
    /// `Σ_s (V_r^z(s) − φ(s)ᵀ θ)²` with `θ = T(z) ψ(r)`.
    pub lhs: f64,
    /// `ε_z · Σ r²`.
    pub rhs: f64,
    pub slack: f64,
}

/// Both sides of the bound for every (reward, oracle intent) pair.
pub fn proposition1_slacks(
    model: &MultilinearIcvf,
    oracle: &OracleIcvf,
    rewards: &[Vec<f64>],
) -> Result<Vec<SlackRecord>> {
    let eps = measure_epsilon(model, oracle)?;
    let features = model.features();
    let mut records = Vec::with_capacity(rewards.len() * oracle.intents().len());
    for (reward_index, reward) in rewards.iter().enumerate() {
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numerical(format!("reward {reward_index} is not finite")));
        }
        let norm2: f64 = reward.iter().map(|r| r * r).sum();
        for (i, &goal) in oracle.intents().iter().enumerate() {
            let exact = oracle_value_of_reward(oracle, reward, i)?;
            let theta = model.reward_head(&model.intent_of_goal(goal), reward);
            let approx = &features * DVector::from_column_slice(&theta);
            let lhs: f64 = exact.iter().zip(approx.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            let rhs = eps.per_intent[i] * norm2;
            records.push(SlackRecord {
                reward_index,
                goal,
                epsilon: eps.per_intent[i],
                lhs,
                rhs,
                slack: rhs - lhs,
            });
        }
    }
    Ok(records)
}

/// [`proposition1_slacks`], failing if any slack is below `−SLACK_TOL`.
pub fn proposition1_check(
    model: &MultilinearIcvf,
    oracle: &OracleIcvf,
    rewards: &[Vec<f64>],
) -> Result<Vec<SlackRecord>> {
    let records = proposition1_slacks(model, oracle, rewards)?;
    if let Some(bad) = records.iter().find(|r| r.slack < -SLACK_TOL) {
        return Err(Error::Numerical(format!(
            "bound violated for reward {} at goal {}: lhs {:e} > rhs {:e}",
            bad.reward_index, bad.goal, bad.lhs, bad.rhs
        )));
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    Indicator,
    Dense,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Indicator => "indicator",
            RewardKind::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReward {
    pub kind: RewardKind,
    pub reward: Vec<f64>,
}

/// Indicators of distinct uniformly drawn states (repeating only when there are
/// more indicators than states), then dense rewards uniform on `[0, 1)`.
pub fn random_probe_rewards<R: Rng + ?Sized>(
    n_states: usize,
    n_indicator: usize,
    n_dense: usize,
    rng: &mut R,
) -> Vec<ProbeReward> {
    let mut out = Vec::with_capacity(n_indicator + n_dense);
    let spots: Vec<StateId> = if n_indicator <= n_states {
        index::sample(rng, n_states, n_indicator).into_vec()
    } else {
        (0..n_indicator).map(|_| rng.random_range(0..n_states)).collect()
    };
    for spot in spots {
        let mut reward = vec![0.0; n_states];
        reward[spot] = 1.0;
        out.push(ProbeReward {
            kind: RewardKind::Indicator,
            reward,
        });
    }
    for _ in 0..n_dense {
        out.push(ProbeReward {
            kind: RewardKind::Dense,
            reward: (0..n_states).map(|_| rng.random::<f64>()).collect(),
        });
    }
    out
}

/// One row of the probe report.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub task_id: String,
    pub kind: RewardKind,
    pub d: usize,
    pub probe_mse: f64,
    pub epsilon: f64,
    pub bound_rhs: f64,
    /// Only defined for multilinear models.
    pub slack: Option<f64>,
}

/// Probe every (intent, reward) task: regress `φ` onto `V_r^z` and evaluate the bound.
pub fn probe_report(model: &Model, oracle: &OracleIcvf, rewards: &[ProbeReward]) -> Result<Vec<ProbeRecord>> {
    let plain: Vec<Vec<f64>> = rewards.iter().map(|r| r.reward.clone()).collect();
    let slacks = match model.as_multilinear() {
        Some(m) => Some(proposition1_slacks(m, oracle, &plain)?),
        None => None,
    };
    let eps = measure_epsilon(model, oracle)?;
    let features = model.features();
    let n_intents = oracle.intents().len();
    let mut records = Vec::with_capacity(n_intents * rewards.len());
    for (i, &goal) in oracle.intents().iter().enumerate() {
        for (k, probe) in rewards.iter().enumerate() {
            let target = oracle_value_of_reward(oracle, &probe.reward, i)?;
            let fit = linear_probe(&features, &target)?;
            let norm2: f64 = probe.reward.iter().map(|r| r * r).sum();
            records.push(ProbeRecord {
                task_id: format!("g{goal}-r{k}"),
                kind: probe.kind,
                d: model.dim(),
                probe_mse: fit.mse,
                epsilon: eps.per_intent[i],
                bound_rhs: eps.per_intent[i] * norm2,
                slack: slacks.as_ref().map(|s| s[k * n_intents + i].slack),
            });
        }
    }
    Ok(records)
}

pub const PROBE_CSV_HEADER: &str = "task_id,kind,d,probe_mse,epsilon,bound_rhs,slack";

pub fn probe_csv(records: &[ProbeRecord]) -> String {
    let mut out = String::from(PROBE_CSV_HEADER);
    out.push('\n');
    for r in records {
        let slack = r.slack.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.task_id,
            r.kind.name(),
            r.d,
            r.probe_mse,
            r.epsilon,
            r.bound_rhs,
            slack
        )
        .expect("write to string");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownstreamConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub n_iters: usize,
    /// `‖θ‖∞` above this counts as divergence.
    pub theta_cap: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha: 0.9,
            learning_rate: 1.0,
            n_iters: 5_000,
            theta_cap: 1e6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamFit {
    pub theta: DVector<f64>,
    pub values: Vec<f64>,
    /// Against the supplied reference values.
    pub mse: f64,
}

/// Distinct `(s, r(s), s')` transitions with their empirical frequency.
pub fn annotate_rewards(dataset: &PassiveDataset, reward: &[f64]) -> Result<Vec<(StateId, f64, StateId, f64)>> {
    if reward.len() != dataset.n_states() {
        return Err(Error::shape(format!(
            "reward has {} entries, dataset has {} states",
            reward.len(),
            dataset.n_states()
        )));
    }
    Ok(dataset
        .transition_frequencies()
        .into_iter()
        .map(|(s, s_next, f)| (s, reward[s], s_next, f))
        .collect())
}

/// Expectile TD on a linear head over frozen features.
///
/// Full-batch: every step uses the whole dataset, equivalently its distinct
/// transitions weighted by frequency, with the bootstrap taken at the
/// previous iterate.
pub fn downstream_linear_td(
    dataset: &PassiveDataset,
    features: &DMatrix<f64>,
    reward: &[f64],
    reference: &[f64],
    cfg: &DownstreamConfig,
) -> Result<DownstreamFit> {
    let n = dataset.n_states();
    if features.nrows() != n || reference.len() != n {
        return Err(Error::shape(
            "features, reference values and dataset disagree on n_states",
        ));
    }
    let transitions = annotate_rewards(dataset, reward)?;
    let d = features.ncols();
    let rows: Vec<Vec<f64>> = (0..n).map(|s| features.row(s).iter().copied().collect()).collect();
    let mut theta = vec![0.0; d];
    let mut values = vec![0.0; n];
    let mut grad = vec![0.0; d];
    for step in 0..cfg.n_iters {
        for (s, v) in values.iter_mut().enumerate() {
            *v = rows[s].iter().zip(&theta).map(|(a, b)| a * b).sum();
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &(s, r, s_next, freq) in &transitions {
            let err = values[s] - r - cfg.gamma * values[s_next];
            let c = 2.0 * freq * expectile_weight(cfg.alpha, -err) * err;
            for (g, x) in grad.iter_mut().zip(&rows[s]) {
                *g += c * x;
            }
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.learning_rate * g;
        }
        let norm = theta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !norm.is_finite() || norm > cfg.theta_cap {
            return Err(Error::Divergence {
                step,
                message: format!("downstream head norm {norm:e} exceeds cap {:e}", cfg.theta_cap),
            });
        }
    }
    for (s, v) in values.iter_mut().enumerate() {
        *v = rows[s].iter().zip(&theta).map(|(a, b)| a * b).sum();
    }
    let mse = values.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    Ok(DownstreamFit {
        theta: DVector::from_vec(theta),
        values,
        mse,
    })
}

/// Fraction of transitions whose model advantage agrees in sign class with the oracle's.
///
/// The oracle calls a transition consistent with the goal when its advantage
/// is within `1e-9` of zero and inconsistent otherwise. The model is judged
/// on the same split with the margin set to half the smallest oracle gap.
pub fn advantage_sign_agreement(
    model: &MultilinearIcvf,
    oracle: &OracleIcvf,
    intent_index: usize,
    transitions: &[(StateId, StateId)],
) -> Result<f64> {
    if transitions.is_empty() {
        return Err(Error::config("no transitions to compare"));
    }
    let goal = oracle.intents()[intent_index];
    let values = oracle.optimal_values(intent_index);
    let gamma = oracle.gamma();
    let exact: Vec<f64> = transitions
        .iter()
        .map(|&(s, s_next)| f64::from(u8::from(s == goal)) + gamma * values[s_next] - values[s])
        .collect();
    let smallest_gap = exact
        .iter()
        .filter(|a| **a < -1e-9)
        .fold(f64::INFINITY, |m, a| m.min(-a));
    let margin = if smallest_gap.is_finite() {
        0.5 * smallest_gap
    } else {
        1e-9
    };
    let agree = transitions
        .iter()
        .zip(&exact)
        .filter(|(&(s, s_next), &a)| {
            let learned = model.advantage(s, s_next, goal, gamma);
            (a < -1e-9) == (learned < -margin)
        })
        .count();
    Ok(agree as f64 / transitions.len() as f64)
}

/// Writes `V(s, ·, z_goal)` and `V(·, goal, z_goal)` over the grid into `dir`.
pub fn heatmap_report<M: IcvfModel + ?Sized>(
    model: &M,
    world: &Gridworld,
    s: StateId,
    goal: StateId,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let n = world.n_states();
    if model.n_states() != n || s >= n || goal >= n || !model.supports_goal(goal) {
        return Err(Error::config(format!(
            "state {s} or goal {goal} not valid for this model and world"
        )));
    }
    let matrix = model.value_matrix(goal);
    let mut visitation = String::from("s_plus_id,row,col,value\n");
    let mut self_value = String::from("state_id,row,col,value\n");
    for x in 0..n {
        let (row, col) = world.coords(x);
        writeln!(visitation, "{x},{row},{col},{}", matrix[(s, x)]).expect("write to string");
        writeln!(self_value, "{x},{row},{col},{}", matrix[(x, goal)]).expect("write to string");
    }
    fs::create_dir_all(dir)?;
    let visitation_path = dir.join(format!("visitation_s{s}_g{goal}.csv"));
    let self_value_path = dir.join(format!("self_value_g{goal}.csv"));
    fs::write(&visitation_path, visitation)?;
    fs::write(&self_value_path, self_value)?;
    Ok((visitation_path, self_value_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Policy;
    use crate::model::{exact_embed_from_oracle, DEFAULT_EMBED_CAP};
    use crate::oracle::oracle_icvf;
    use crate::{data::collect_passive, seeded_rng};

    #[test]
    fn identity_features_fit_anything() {
        let fit = linear_probe(&DMatrix::identity(4, 4), &[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert!(fit.mse < 1e-16);
    }

    #[test]
    fn span_targets_fit_exactly() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let fit = linear_probe(&x, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!(fit.mse < 1e-16);
        assert!((fit.theta[0] - 1.0).abs() < 1e-8 && (fit.theta[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn duplicated_column_gives_min_norm() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let fit = linear_probe(&x, &[2.0, 4.0, 6.0]).unwrap();
        assert!((fit.theta[0] - 1.0).abs() < 1e-6 && (fit.theta[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exact_embedding_has_zero_slack() {
        let world = Gridworld::open_room();
        let goals = [0, 7, 24];
        let oracle = oracle_icvf(world.mdp(), &goals, 0.9).unwrap();
        let model = exact_embed_from_oracle(&oracle, DEFAULT_EMBED_CAP).unwrap();
        let eps = measure_epsilon(&model, &oracle).unwrap();
        assert!(eps.max < 1e-16);
        let mut rng = seeded_rng(1);
        let rewards: Vec<Vec<f64>> = random_probe_rewards(25, 3, 2, &mut rng)
            .into_iter()
            .map(|r| r.reward)
            .collect();
        for rec in proposition1_check(&model, &oracle, &rewards).unwrap() {
            assert!(rec.lhs < 1e-10 && rec.slack.abs() < 1e-10);
        }
    }

    #[test]
    fn perturbed_entry_adds_delta_squared() {
        let world = Gridworld::open_room();
        let oracle = oracle_icvf(world.mdp(), &[3], 0.9).unwrap();
        let mut model = exact_embed_from_oracle(&oracle, DEFAULT_EMBED_CAP).unwrap();
        let delta = 0.125;
        model.core_slice_mut(3)[2 * 25 + 9] += delta;
        let eps = measure_epsilon(&model, &oracle).unwrap();
        assert!((eps.max - delta * delta).abs() < 1e-15);
    }

    #[test]
    fn random_probe_reward_shapes() {
        let rewards = random_probe_rewards(9, 10, 5, &mut seeded_rng(2));
        assert_eq!(rewards.len(), 15);
        for r in &rewards[..10] {
            assert_eq!(r.kind, RewardKind::Indicator);
            assert_eq!(r.reward.iter().sum::<f64>(), 1.0);
        }
        assert!(rewards[10..].iter().all(|r| r.kind == RewardKind::Dense));
    }

    #[test]
    fn zero_reward_downstream_stays_zero() {
        let world = Gridworld::open_room();
        let data = collect_passive(world.mdp(), &Policy::uniform(25, 5), 10, 20, &mut seeded_rng(3)).unwrap();
        let fit = downstream_linear_td(
            &data,
            &DMatrix::identity(25, 25),
            &[0.0; 25],
            &[0.0; 25],
            &DownstreamConfig::default(),
        )
        .unwrap();
        assert!(fit.theta.iter().all(|&t| t == 0.0));
        assert_eq!(fit.mse, 0.0);
    }

    #[test]
    fn downstream_divergence_is_reported() {
        let world = Gridworld::open_room();
        let data = collect_passive(world.mdp(), &Policy::uniform(25, 5), 10, 20, &mut seeded_rng(3)).unwrap();
        let cfg = DownstreamConfig {
            learning_rate: 1e4,
            ..DownstreamConfig::default()
        };
        let err = downstream_linear_td(&data, &DMatrix::identity(25, 25), &[1.0; 25], &[0.0; 25], &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn oracle_heatmaps() {
        let world = Gridworld::open_room();
        let oracle = oracle_icvf(world.mdp(), &[12], 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (visit, selfv) = heatmap_report(&oracle, &world, 0, 12, dir.path()).unwrap();
        let total: f64 = fs::read_to_string(visit)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 10.0).abs() < 1e-6);
        let text = fs::read_to_string(selfv).unwrap();
        for (line, v) in text.lines().skip(1).zip(oracle.optimal_values(0)) {
            let got: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!((got - v).abs() < 1e-8);
        }
        assert!(heatmap_report(&oracle, &world, 0, 11, dir.path()).is_err());
    }
}
