//! Learnable ICVF models.
//!
//! [`MultilinearIcvf`] is the model proper: `V(s, s₊, z) = φ(s)ᵀ T(z) ψ(s₊)`
//! with `T(z) = Σ_k z_k T_k`. Two ablation baselines share its training
//! interface: the single-intent variant (multilinear with one fixed global
//! intent) and [`MonolithicIcvf`], a black-box head over `φ(s)`.

mod checkpoint;
mod monolithic;
mod multilinear;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use monolithic::{MonolithicGradients, MonolithicIcvf};
pub use multilinear::{exact_embed_from_oracle, MultilinearGradients, MultilinearIcvf, DEFAULT_EMBED_CAP};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mdp::StateId;
use crate::oracle::OracleIcvf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Multilinear,
    Monolithic,
    SingleIntent,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Multilinear, ModelKind::Monolithic, ModelKind::SingleIntent];

    /// Code stored in checkpoints.
    pub fn code(self) -> u64 {
        match self {
            ModelKind::Multilinear => 0,
            ModelKind::Monolithic => 1,
            ModelKind::SingleIntent => 2,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Multilinear => "multilinear",
            ModelKind::Monolithic => "monolithic",
            ModelKind::SingleIntent => "single-intent",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

/// Read access shared by learned models and the exact oracle.
pub trait IcvfModel {
    fn n_states(&self) -> usize;

    /// Whether `goal` can be used as an intent.
    fn supports_goal(&self, goal: StateId) -> bool {
        goal < self.n_states()
    }

    /// `V(s, s₊, z_goal)`.
    fn goal_value(&self, s: StateId, s_plus: StateId, goal: StateId) -> f64;

    /// `V(s, s_z, z)`, the model's estimate of the optimal goal value.
    fn self_value(&self, s: StateId, goal: StateId) -> f64 {
        self.goal_value(s, goal, goal)
    }

    /// The full `(s, s₊)` slice for one intent.
    fn value_matrix(&self, goal: StateId) -> DMatrix<f64> {
        let n = self.n_states();
        DMatrix::from_fn(n, n, |s, s_plus| self.goal_value(s, s_plus, goal))
    }
}

impl IcvfModel for OracleIcvf {
    fn n_states(&self) -> usize {
        OracleIcvf::n_states(self)
    }

    fn supports_goal(&self, goal: StateId) -> bool {
        self.intent_index(goal).is_some()
    }

    /// Panics if `goal` is not one of the oracle's intents.
    fn goal_value(&self, s: StateId, s_plus: StateId, goal: StateId) -> f64 {
        let index = self.intent_index(goal).expect("goal is not an oracle intent");
        self.value(s, s_plus, index)
    }

    fn value_matrix(&self, goal: StateId) -> DMatrix<f64> {
        self.matrix(self.intent_index(goal).expect("goal is not an oracle intent"))
            .clone()
    }
}

/// Every parameter tensor as a flat slice, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Largest absolute entry-wise difference to `other`.
    fn sup_distance(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn same_shapes<A: Parameters + ?Sized, B: Parameters + ?Sized>(a: &A, b: &B) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.len() == y.len())
}

/// `params ← params − lr · grads`.
pub fn apply_gradients<P: Parameters, G: Parameters>(params: &mut P, grads: &G, learning_rate: f64) -> Result<()> {
    if !same_shapes(params, grads) {
        return Err(Error::Shape("gradient shapes do not match parameters".into()));
    }
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (x, dx) in p.iter_mut().zip(g) {
            *x -= learning_rate * dx;
        }
    }
    Ok(())
}

/// `target ← (1 − λ) target + λ online`, parameter by parameter.
pub fn polyak_update<P: Parameters>(target: &mut P, online: &P, lam: f64) -> Result<()> {
    if !same_shapes(target, online) {
        return Err(Error::Shape("target and online parameters differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Config(format!("polyak rate {lam} outside [0, 1]")));
    }
    for (t, o) in target.tensors_mut().into_iter().zip(online.tensors()) {
        if lam == 1.0 {
            t.copy_from_slice(o);
            continue;
        }
        for (x, y) in t.iter_mut().zip(o) {
            *x += lam * (y - *x);
        }
    }
    Ok(())
}

/// Loss settings shared by every model kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    /// Embed intents with the online `ψ` (gradient flows into it) instead of the target copy.
    pub intent_from_online: bool,
    /// Compute the advantage with online parameters instead of the target copy.
    pub advantage_from_online: bool,
}

impl LossConfig {
    pub fn new(gamma: f64, alpha: f64) -> Self {
        Self {
            gamma,
            alpha,
            intent_from_online: false,
            advantage_from_online: false,
        }
    }
}

/// Expectile weight `|α − 1(A < 0)|`.
pub fn expectile_weight(alpha: f64, advantage: f64) -> f64 {
    if advantage < 0.0 {
        (alpha - 1.0).abs()
    } else {
        alpha
    }
}

fn indicator(a: StateId, b: StateId) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

/// Any trainable model.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Multilinear(MultilinearIcvf),
    Monolithic(MonolithicIcvf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gradients {
    Multilinear(MultilinearGradients),
    Monolithic(MonolithicGradients),
}

impl Parameters for Gradients {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Gradients::Multilinear(g) => g.tensors(),
            Gradients::Monolithic(g) => g.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Gradients::Multilinear(g) => g.tensors_mut(),
            Gradients::Monolithic(g) => g.tensors_mut(),
        }
    }
}

impl Model {
    /// Freshly initialised model of the given kind.
    pub fn init<R: Rng + ?Sized>(kind: ModelKind, n_states: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if n_states == 0 || dim == 0 {
            return Err(Error::Config(
                "model needs at least one state and one latent dimension".into(),
            ));
        }
        Ok(match kind {
            ModelKind::Multilinear => Model::Multilinear(MultilinearIcvf::init(n_states, dim, false, rng)),
            ModelKind::SingleIntent => Model::Multilinear(MultilinearIcvf::init(n_states, dim, true, rng)),
            ModelKind::Monolithic => Model::Monolithic(MonolithicIcvf::init(n_states, dim, rng)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Multilinear(m) if m.is_single_intent() => ModelKind::SingleIntent,
            Model::Multilinear(_) => ModelKind::Multilinear,
            Model::Monolithic(_) => ModelKind::Monolithic,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Multilinear(m) => m.dim(),
            Model::Monolithic(m) => m.dim(),
        }
    }

    /// The state representation `φ`, one row per state.
    pub fn features(&self) -> DMatrix<f64> {
        match self {
            Model::Multilinear(m) => m.features(),
            Model::Monolithic(m) => m.features(),
        }
    }

    pub fn as_multilinear(&self) -> Option<&MultilinearIcvf> {
        match self {
            Model::Multilinear(m) => Some(m),
            Model::Monolithic(_) => None,
        }
    }

    pub fn loss_and_gradients(&self, target: &Model, batch: &Batch, cfg: &LossConfig) -> Result<(f64, Gradients)> {
        match (self, target) {
            (Model::Multilinear(online), Model::Multilinear(target)) => {
                let (loss, g) = online.loss_and_gradients(target, batch, cfg)?;
                Ok((loss, Gradients::Multilinear(g)))
            }
            (Model::Monolithic(online), Model::Monolithic(target)) => {
                let (loss, g) = online.loss_and_gradients(target, batch, cfg)?;
                Ok((loss, Gradients::Monolithic(g)))
            }
            _ => Err(Error::Shape("online and target models are of different kinds".into())),
        }
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Model::Multilinear(m) => m.tensors(),
            Model::Monolithic(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Multilinear(m) => m.tensors_mut(),
            Model::Monolithic(m) => m.tensors_mut(),
        }
    }
}

impl IcvfModel for Model {
    fn n_states(&self) -> usize {
        match self {
            Model::Multilinear(m) => m.n_states(),
            Model::Monolithic(m) => m.n_states(),
        }
    }

    fn goal_value(&self, s: StateId, s_plus: StateId, goal: StateId) -> f64 {
        match self {
            Model::Multilinear(m) => m.goal_value(s, s_plus, goal),
            Model::Monolithic(m) => m.goal_value(s, s_plus, goal),
        }
    }

    fn value_matrix(&self, goal: StateId) -> DMatrix<f64> {
        match self {
            Model::Multilinear(m) => m.value_matrix(goal),
            Model::Monolithic(m) => m.value_matrix(goal),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub n_checked: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDifference {
    pub step: f64,
    /// Entries sampled from every parameter tensor.
    pub coords_per_tensor: usize,
    /// Keeps near-zero partials from dominating the relative error.
    pub floor: f64,
}

/// Compares analytic gradients with central differences of the loss.
pub fn gradient_check<R: Rng + ?Sized>(
    online: &Model,
    target: &Model,
    batch: &Batch,
    cfg: &LossConfig,
    fd: &FiniteDifference,
    rng: &mut R,
) -> Result<GradientCheck> {
    let FiniteDifference {
        step,
        coords_per_tensor,
        floor,
    } = *fd;
    let (_, grads) = online.loss_and_gradients(target, batch, cfg)?;
    let sizes: Vec<usize> = online.tensors().iter().map(|t| t.len()).collect();
    let mut probe = online.clone();
    let mut max_rel_err: f64 = 0.0;
    let mut n_checked = 0;
    for (t, &len) in sizes.iter().enumerate() {
        for _ in 0..coords_per_tensor.min(len) {
            let i = rng.random_range(0..len);
            let original = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = original + step;
            let (up, _) = probe.loss_and_gradients(target, batch, cfg)?;
            probe.tensors_mut()[t][i] = original - step;
            let (down, _) = probe.loss_and_gradients(target, batch, cfg)?;
            probe.tensors_mut()[t][i] = original;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.tensors()[t][i];
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            max_rel_err = max_rel_err.max((analytic - numeric).abs() / scale);
            n_checked += 1;
        }
    }
    Ok(GradientCheck { max_rel_err, n_checked })
}
