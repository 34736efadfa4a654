use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{expectile_weight, indicator, IcvfModel, LossConfig, Parameters};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mdp::StateId;

/// Black-box baseline: `V(s, s₊, g) = Σ_j E[s₊, g, j] · tanh(W φ(s) + b)_j`.
///
/// Same `φ` table as the multilinear model, but the head entangles outcome and
/// intent in one unstructured tensor, so no linear outcome/intent structure
/// is imposed.
#[derive(Clone, Debug, PartialEq)]
pub struct MonolithicIcvf {
    n_states: usize,
    dim: usize,
    phi: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    head: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonolithicGradients {
    pub phi: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub head: Vec<f64>,
}

impl Parameters for MonolithicGradients {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.phi, &self.w, &self.b, &self.head]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.phi, &mut self.w, &mut self.b, &mut self.head]
    }
}

impl Parameters for MonolithicIcvf {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.phi, &self.w, &self.b, &self.head]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.phi, &mut self.w, &mut self.b, &mut self.head]
    }
}

impl MonolithicIcvf {
    /// Gaussian `φ` (scale `1/√d`) and `W` (unit scale); zero bias and head.
    pub fn init<R: Rng + ?Sized>(n_states: usize, dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let phi = (0..n_states * dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w = (0..dim * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            n_states,
            dim,
            phi,
            w,
            b: vec![0.0; dim],
            head: vec![0.0; n_states * n_states * dim],
        }
    }

    pub fn from_parts(
        n_states: usize,
        dim: usize,
        phi: Vec<f64>,
        w: Vec<f64>,
        b: Vec<f64>,
        head: Vec<f64>,
    ) -> Result<Self> {
        if phi.len() != n_states * dim
            || w.len() != dim * dim
            || b.len() != dim
            || head.len() != n_states * n_states * dim
        {
            return Err(Error::Shape(format!(
                "monolithic parameters do not match n_states={n_states}, d={dim}"
            )));
        }
        let model = Self {
            n_states,
            dim,
            phi,
            w,
            b,
            head,
        };
        if !model.all_finite() {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    pub fn phi_row(&self, s: StateId) -> &[f64] {
        &self.phi[s * self.dim..(s + 1) * self.dim]
    }

    fn head_row(&self, s_plus: StateId, goal: StateId) -> &[f64] {
        let start = (s_plus * self.n_states + goal) * self.dim;
        &self.head[start..start + self.dim]
    }

    /// `tanh(W φ(s) + b)`.
    pub fn hidden(&self, s: StateId) -> Vec<f64> {
        let phi = self.phi_row(s);
        self.w
            .chunks_exact(self.dim)
            .zip(&self.b)
            .map(|(row, bj)| (row.iter().zip(phi).map(|(a, x)| a * x).sum::<f64>() + bj).tanh())
            .collect()
    }

    fn value_from_hidden(&self, hidden: &[f64], s_plus: StateId, goal: StateId) -> f64 {
        hidden.iter().zip(self.head_row(s_plus, goal)).map(|(h, e)| h * e).sum()
    }

    pub fn features(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_states, self.dim, &self.phi)
    }

    /// Expectile TD loss and gradients with respect to the online parameters.
    pub fn loss_and_gradients(
        &self,
        target: &Self,
        batch: &Batch,
        cfg: &LossConfig,
    ) -> Result<(f64, MonolithicGradients)> {
        let (n, d) = (self.n_states, self.dim);
        if target.n_states != n || target.dim != d {
            return Err(Error::Shape("online and target models differ in shape".into()));
        }
        let bs = batch.len();
        if bs == 0 || batch.s_next.len() != bs || batch.s_plus.len() != bs || batch.goal.len() != bs {
            return Err(Error::Shape("batch arrays are empty or of unequal length".into()));
        }
        let in_range = |ids: &[StateId]| ids.iter().all(|&x| x < n);
        if !(in_range(&batch.s) && in_range(&batch.s_next) && in_range(&batch.s_plus) && in_range(&batch.goal)) {
            return Err(Error::Shape("batch contains out-of-range state ids".into()));
        }
        let hidden_cache = |m: &Self| -> Vec<Option<Vec<f64>>> { vec![None; m.n_states] };
        let mut online_hidden = hidden_cache(self);
        let mut target_hidden = hidden_cache(target);
        fn cached<'a>(cache: &'a mut [Option<Vec<f64>>], m: &MonolithicIcvf, s: StateId) -> &'a [f64] {
            cache[s].get_or_insert_with(|| m.hidden(s))
        }

        let mut grads = MonolithicGradients {
            phi: vec![0.0; n * d],
            w: vec![0.0; d * d],
            b: vec![0.0; d],
            head: vec![0.0; n * n * d],
        };
        let mut pre_grad = vec![0.0; d];
        let mut loss = 0.0;
        for i in 0..bs {
            let (s, s_next, s_plus, g) = (batch.s[i], batch.s_next[i], batch.s_plus[i], batch.goal[i]);
            let adv = if cfg.advantage_from_online {
                let next = self.value_from_hidden(cached(&mut online_hidden, self, s_next), g, g);
                let here = self.value_from_hidden(cached(&mut online_hidden, self, s), g, g);
                indicator(s, g) + cfg.gamma * next - here
            } else {
                let next = target.value_from_hidden(cached(&mut target_hidden, target, s_next), g, g);
                let here = target.value_from_hidden(cached(&mut target_hidden, target, s), g, g);
                indicator(s, g) + cfg.gamma * next - here
            };
            let weight = expectile_weight(cfg.alpha, adv);
            let next_value = target.value_from_hidden(cached(&mut target_hidden, target, s_next), s_plus, g);
            let td_target = indicator(s, s_plus) + cfg.gamma * next_value;
            let h = cached(&mut online_hidden, self, s).to_vec();
            let err = self.value_from_hidden(&h, s_plus, g) - td_target;
            loss += weight * err * err;

            let c = 2.0 * weight * err / bs as f64;
            if c == 0.0 {
                continue;
            }
            let start = (s_plus * n + g) * d;
            let head_row = self.head_row(s_plus, g);
            for j in 0..d {
                grads.head[start + j] += c * h[j];
                pre_grad[j] = c * head_row[j] * (1.0 - h[j] * h[j]);
                grads.b[j] += pre_grad[j];
            }
            let phi_s = self.phi_row(s);
            for (j, &pg) in pre_grad.iter().enumerate() {
                let w_row = &self.w[j * d..(j + 1) * d];
                let gw_row = &mut grads.w[j * d..(j + 1) * d];
                for k in 0..d {
                    gw_row[k] += pg * phi_s[k];
                    grads.phi[s * d + k] += pg * w_row[k];
                }
            }
        }
        loss /= bs as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        Ok((loss, grads))
    }
}

impl IcvfModel for MonolithicIcvf {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn goal_value(&self, s: StateId, s_plus: StateId, goal: StateId) -> f64 {
        self.value_from_hidden(&self.hidden(s), s_plus, goal)
    }

    fn value_matrix(&self, goal: StateId) -> DMatrix<f64> {
        let n = self.n_states;
        let hidden: Vec<Vec<f64>> = (0..n).map(|s| self.hidden(s)).collect();
        DMatrix::from_fn(n, n, |s, s_plus| self.value_from_hidden(&hidden[s], s_plus, goal))
    }
}
