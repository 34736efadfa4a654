//! Passive datasets: observation-only trajectories, the sampler that feeds
//! training, and the line-oriented dataset file.
//!
//! File layout:
//!
//! ```text
//! icvf-data v1 n_states=<N>
//! 0 1 2 2 3
//! 4 4 3
//! ```
//!
//! One trajectory per line as space-separated decimal state ids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};
use crate::mdp::{rollout, Policy, StateId, TabularMdp};

const DATA_MAGIC: &str = "icvf-data v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassiveDataset {
    n_states: usize,
    trajectories: Vec<Vec<StateId>>,
    /// `(trajectory, position)` for every consecutive pair.
    pairs: Vec<(u32, u32)>,
    /// `(trajectory, position)` for every stored state.
    positions: Vec<(u32, u32)>,
}

impl PassiveDataset {
    pub fn new(n_states: usize, trajectories: Vec<Vec<StateId>>) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::config("dataset needs at least one state"));
        }
        if trajectories.is_empty() {
            return Err(Error::config("dataset has no trajectories"));
        }
        let mut pairs = Vec::new();
        let mut positions = Vec::new();
        for (i, traj) in trajectories.iter().enumerate() {
            if traj.len() < 2 {
                return Err(Error::config(format!("trajectory {i} has fewer than two states")));
            }
            if let Some(bad) = traj.iter().find(|&&s| s >= n_states) {
                return Err(Error::config(format!("trajectory {i} has state {bad} >= {n_states}")));
            }
            positions.extend((0..traj.len()).map(|t| (i as u32, t as u32)));
            pairs.extend((0..traj.len() - 1).map(|t| (i as u32, t as u32)));
        }
        Ok(Self {
            n_states,
            trajectories,
            pairs,
            positions,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn trajectories(&self) -> &[Vec<StateId>] {
        &self.trajectories
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Every consecutive `(s, s')` pair, trajectory order.
    pub fn transitions(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.trajectories
            .iter()
            .flat_map(|traj| traj.windows(2).map(|w| (w[0], w[1])))
    }

    /// Distinct `(s, s')` pairs with their share of all pairs, sorted by pair.
    pub fn transition_frequencies(&self) -> Vec<(StateId, StateId, f64)> {
        let mut counts: BTreeMap<(StateId, StateId), usize> = BTreeMap::new();
        for pair in self.transitions() {
            *counts.entry(pair).or_default() += 1;
        }
        let total = self.n_pairs() as f64;
        counts
            .into_iter()
            .map(|((s, s_next), c)| (s, s_next, c as f64 / total))
            .collect()
    }

    /// Occurrence count of each state.
    pub fn state_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_states];
        for &s in self.trajectories.iter().flatten() {
            counts[s] += 1;
        }
        counts
    }

    fn state(&self, (traj, pos): (u32, u32)) -> StateId {
        self.trajectories[traj as usize][pos as usize]
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{DATA_MAGIC} n_states={}\n", self.n_states);
        for traj in &self.trajectories {
            for (i, s) in traj.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(1, "empty dataset file"))?;
        let n_text = header
            .strip_prefix(DATA_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("n_states="))
            .ok_or_else(|| Error::format(1, format!("expected header `{DATA_MAGIC} n_states=<N>`")))?;
        let n_states: usize = n_text
            .parse()
            .map_err(|_| Error::format(1, format!("invalid state count `{n_text}`")))?;
        if n_states == 0 {
            return Err(Error::format(1, "state count must be positive"));
        }
        let mut trajectories = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let traj = line
                .split_ascii_whitespace()
                .map(|tok| {
                    let s: StateId = tok
                        .parse()
                        .map_err(|_| Error::format(line_no, format!("invalid state id `{tok}`")))?;
                    if s >= n_states {
                        return Err(Error::format(line_no, format!("state id {s} >= n_states={n_states}")));
                    }
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            if traj.len() < 2 {
                return Err(Error::format(line_no, "trajectory must contain at least two states"));
            }
            trajectories.push(traj);
        }
        if trajectories.is_empty() {
            return Err(Error::format(2, "dataset has no trajectories"));
        }
        Self::new(n_states, trajectories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Rolls out `n_trajectories` episodes of `horizon` steps from `ρ`, keeping
/// only the visited states.
pub fn collect_passive<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    behavior: &Policy,
    n_trajectories: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<PassiveDataset> {
    if horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    if n_trajectories == 0 {
        return Err(Error::config("need at least one trajectory"));
    }
    let trajectories = (0..n_trajectories)
        .map(|_| {
            let s0 = mdp.sample_initial(rng);
            rollout(mdp, behavior, s0, horizon, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    PassiveDataset::new(mdp.n_states(), trajectories)
}

/// Where intents `s_z` come from.
#[derive(Clone, Debug, PartialEq)]
pub enum IntentSource {
    /// Same future/uniform mixture as outcomes, drawn independently.
    Dataset,
    /// Uniform over a fixed goal list.
    Goals(Vec<StateId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub gamma: f64,
    pub p_future: f64,
    pub batch_size: usize,
    pub intents: IntentSource,
}

/// One training minibatch: transition, outcome, and intent goal per row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub s: Vec<StateId>,
    pub s_next: Vec<StateId>,
    pub s_plus: Vec<StateId>,
    pub goal: Vec<StateId>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn push(&mut self, s: StateId, s_next: StateId, s_plus: StateId, goal: StateId) {
        self.s.push(s);
        self.s_next.push(s_next);
        self.s_plus.push(s_plus);
        self.goal.push(goal);
    }
}

/// Draws transitions uniformly, then an outcome and an intent for each.
///
/// With probability `p_future` an outcome is the state `k` steps after `s` in
/// the same trajectory, `k ≥ 1` geometric with success `1 − γ`, clipped to
/// the trajectory end; otherwise it is uniform over all stored states.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &PassiveDataset, rng: &mut R, cfg: &SamplerConfig) -> Result<Batch> {
    if !(0.0..=1.0).contains(&cfg.p_future) {
        return Err(Error::config(format!("p_future {} outside [0, 1]", cfg.p_future)));
    }
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(Error::config(format!("discount {} outside [0, 1)", cfg.gamma)));
    }
    if let IntentSource::Goals(goals) = &cfg.intents {
        if goals.is_empty() {
            return Err(Error::config("intent goal set is empty"));
        }
        if let Some(bad) = goals.iter().find(|&&g| g >= dataset.n_states) {
            return Err(Error::config(format!("intent goal {bad} out of range")));
        }
    }
    let offset = Geometric::new(1.0 - cfg.gamma).map_err(|e| Error::config(e.to_string()))?;
    let draw_outcome = |rng: &mut R, traj: u32, pos: u32| -> StateId {
        if rng.random::<f64>() < cfg.p_future {
            let states = &dataset.trajectories[traj as usize];
            let k = 1 + offset.sample(rng);
            let t = (pos as u64).saturating_add(k).min(states.len() as u64 - 1);
            states[t as usize]
        } else {
            dataset.state(dataset.positions[rng.random_range(0..dataset.positions.len())])
        }
    };
    let mut batch = Batch {
        s: Vec::with_capacity(cfg.batch_size),
        s_next: Vec::with_capacity(cfg.batch_size),
        s_plus: Vec::with_capacity(cfg.batch_size),
        goal: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let (traj, pos) = dataset.pairs[rng.random_range(0..dataset.pairs.len())];
        let states = &dataset.trajectories[traj as usize];
        let s_plus = draw_outcome(rng, traj, pos);
        let goal = match &cfg.intents {
            IntentSource::Dataset => draw_outcome(rng, traj, pos),
            IntentSource::Goals(goals) => goals[rng.random_range(0..goals.len())],
        };
        batch.push(states[pos as usize], states[pos as usize + 1], s_plus, goal);
    }
    Ok(batch)
}
