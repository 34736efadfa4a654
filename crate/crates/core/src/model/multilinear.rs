use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVectorView};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{expectile_weight, indicator, IcvfModel, LossConfig, Parameters};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mdp::StateId;
use crate::oracle::OracleIcvf;

/// Largest `n_states³` accepted by [`exact_embed_from_oracle`].
pub const DEFAULT_EMBED_CAP: usize = 1 << 27;

/// `V(s, s₊, z) = φ(s)ᵀ T(z) ψ(s₊)` with `T(z)[i, j] = Σ_k z_k T[k, i, j]`.
///
/// `φ` and `ψ` are `n_states × d` tables; the core `T` is `d × d × d`,
/// row-major in `(k, i, j)`. In single-intent mode every goal maps to the same
/// fixed latent intent, so the model can only represent one policy's futures.
#[derive(Clone, Debug, PartialEq)]
pub struct MultilinearIcvf {
    n_states: usize,
    dim: usize,
    single_intent: bool,
    phi: Vec<f64>,
    psi: Vec<f64>,
    tcore: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultilinearGradients {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub tcore: Vec<f64>,
}

impl Parameters for MultilinearGradients {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.phi, &self.psi, &self.tcore]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.phi, &mut self.psi, &mut self.tcore]
    }
}

impl Parameters for MultilinearIcvf {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.phi, &self.psi, &self.tcore]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.phi, &mut self.psi, &mut self.tcore]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = M x` for a row-major `d × d` matrix.
fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(d)) {
        *o = dot(row, x);
    }
}

/// `out = Mᵀ x` for a row-major `d × d` matrix.
fn matvec_t(m: &[f64], x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (xi, row) in x.iter().zip(m.chunks_exact(out.len())) {
        for (o, mij) in out.iter_mut().zip(row) {
            *o += xi * mij;
        }
    }
}

impl MultilinearIcvf {
    /// Zero-mean Gaussian `φ`, `ψ` entries with scale `1/√d`; each core slice `I/d`.
    pub fn init<R: Rng + ?Sized>(n_states: usize, dim: usize, single_intent: bool, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut gaussian =
            |len: usize| -> Vec<f64> { (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
        let phi = gaussian(n_states * dim);
        let psi = gaussian(n_states * dim);
        let mut tcore = vec![0.0; dim * dim * dim];
        for k in 0..dim {
            for i in 0..dim {
                tcore[(k * dim + i) * dim + i] = 1.0 / dim as f64;
            }
        }
        Self {
            n_states,
            dim,
            single_intent,
            phi,
            psi,
            tcore,
        }
    }

    pub fn from_parts(
        n_states: usize,
        dim: usize,
        single_intent: bool,
        phi: Vec<f64>,
        psi: Vec<f64>,
        tcore: Vec<f64>,
    ) -> Result<Self> {
        if phi.len() != n_states * dim || psi.len() != n_states * dim || tcore.len() != dim * dim * dim {
            return Err(Error::Shape(format!(
                "multilinear parameters do not match n_states={n_states}, d={dim}"
            )));
        }
        let model = Self {
            n_states,
            dim,
            single_intent,
            phi,
            psi,
            tcore,
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

    pub fn is_single_intent(&self) -> bool {
        self.single_intent
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn tcore(&self) -> &[f64] {
        &self.tcore
    }

    pub fn phi_row(&self, s: StateId) -> &[f64] {
        &self.phi[s * self.dim..(s + 1) * self.dim]
    }

    pub fn psi_row(&self, s: StateId) -> &[f64] {
        &self.psi[s * self.dim..(s + 1) * self.dim]
    }

    pub fn phi_row_mut(&mut self, s: StateId) -> &mut [f64] {
        &mut self.phi[s * self.dim..(s + 1) * self.dim]
    }

    pub fn psi_row_mut(&mut self, s: StateId) -> &mut [f64] {
        &mut self.psi[s * self.dim..(s + 1) * self.dim]
    }

    /// Core slice `T_k` as a row-major `d × d` block.
    pub fn core_slice_mut(&mut self, k: usize) -> &mut [f64] {
        let d2 = self.dim * self.dim;
        &mut self.tcore[k * d2..(k + 1) * d2]
    }

    /// The fixed latent intent used in single-intent mode.
    pub fn global_intent(&self) -> Vec<f64> {
        vec![1.0 / (self.dim as f64).sqrt(); self.dim]
    }

    /// Latent intent `z = ψ(s_z)` of a goal state.
    pub fn intent_of_goal(&self, goal: StateId) -> Vec<f64> {
        if self.single_intent {
            self.global_intent()
        } else {
            self.psi_row(goal).to_vec()
        }
    }

    /// `T(z)` as a row-major `d × d` block.
    pub fn intent_matrix(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let core = DMatrixView::from_slice(&self.tcore, d * d, d);
        (core * DVectorView::from_slice(z, d)).as_slice().to_vec()
    }

    /// `T(z_g)` for several intents at once, one `d²` column per intent.
    fn intent_matrices(&self, intents: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dim;
        DMatrixView::from_slice(&self.tcore, d * d, d) * intents
    }

    /// `φ(s)ᵀ T(z) ψ(s₊)`.
    pub fn value(&self, s: StateId, s_plus: StateId, z: &[f64]) -> f64 {
        let t = self.intent_matrix(z);
        let mut tpsi = vec![0.0; self.dim];
        matvec(&t, self.psi_row(s_plus), &mut tpsi);
        dot(self.phi_row(s), &tpsi)
    }

    /// `ψ(r) = Σ_{s₊} r(s₊) ψ(s₊)`.
    pub fn outcome_embedding(&self, reward: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (s_plus, &r) in reward.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.psi_row(s_plus)) {
                *o += r * p;
            }
        }
        out
    }

    /// `θ_r^z = T(z) ψ(r)`, the linear head that reads `V_r^z` off `φ`.
    pub fn reward_head(&self, z: &[f64], reward: &[f64]) -> Vec<f64> {
        let t = self.intent_matrix(z);
        let mut theta = vec![0.0; self.dim];
        matvec(&t, &self.outcome_embedding(reward), &mut theta);
        theta
    }

    /// `φ(s)ᵀ T(z) ψ(r)`.
    pub fn value_of_reward(&self, s: StateId, z: &[f64], reward: &[f64]) -> f64 {
        dot(self.phi_row(s), &self.reward_head(z, reward))
    }

    /// `r_z(s) + γ V(s', z, z) − V(s, z, z)` with this model's parameters.
    pub fn advantage(&self, s: StateId, s_next: StateId, goal: StateId, gamma: f64) -> f64 {
        indicator(s, goal) + gamma * self.self_value(s_next, goal) - self.self_value(s, goal)
    }

    pub fn features(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_states, self.dim, &self.phi)
    }

    /// Expectile TD loss and its exact gradients with respect to the online
    /// parameters (`self`). The TD target and the advantage weight are data.
    pub fn loss_and_gradients(
        &self,
        target: &Self,
        batch: &Batch,
        cfg: &LossConfig,
    ) -> Result<(f64, MultilinearGradients)> {
        let (n, d) = (self.n_states, self.dim);
        if target.n_states != n || target.dim != d || target.single_intent != self.single_intent {
            return Err(Error::Shape("online and target models differ in shape".into()));
        }
        let b = batch.len();
        if b == 0 || batch.s_next.len() != b || batch.s_plus.len() != b || batch.goal.len() != b {
            return Err(Error::Shape("batch arrays are empty or of unequal length".into()));
        }
        let in_range = |ids: &[StateId]| ids.iter().all(|&x| x < n);
        if !(in_range(&batch.s) && in_range(&batch.s_next) && in_range(&batch.s_plus) && in_range(&batch.goal)) {
            return Err(Error::Shape("batch contains out-of-range state ids".into()));
        }

        // Group samples by intent so each T(z) is formed once.
        let mut group_of_goal = vec![usize::MAX; n];
        let mut group_goals = Vec::new();
        let mut sample_group = Vec::with_capacity(b);
        for &g in &batch.goal {
            let key = if self.single_intent { 0 } else { g };
            if group_of_goal[key] == usize::MAX {
                group_of_goal[key] = group_goals.len();
                group_goals.push(g);
            }
            sample_group.push(group_of_goal[key]);
        }
        let n_groups = group_goals.len();
        let online_embeds = cfg.intent_from_online && !self.single_intent;
        let z_target = DMatrix::from_fn(d, n_groups, |k, gi| target.intent_of_goal(group_goals[gi])[k]);
        let z_online = if online_embeds {
            DMatrix::from_fn(d, n_groups, |k, gi| self.intent_of_goal(group_goals[gi])[k])
        } else {
            z_target.clone()
        };
        let t_online = self.intent_matrices(&z_online);
        let t_target = target.intent_matrices(&z_target);

        // Self-value direction u_g = T_adv(z_g) ψ_adv(g), so V(x, g, g) = φ_adv(x)·u_g.
        let adv_model = if cfg.advantage_from_online { self } else { target };
        let adv_t = if cfg.advantage_from_online {
            &t_online
        } else {
            &t_target
        };
        let mut adv_dirs = vec![0.0; n_groups * d];
        for (gi, &g) in group_goals.iter().enumerate() {
            matvec(
                adv_t.column(gi).as_slice(),
                adv_model.psi_row(g),
                &mut adv_dirs[gi * d..(gi + 1) * d],
            );
        }

        let mut grads = MultilinearGradients {
            phi: vec![0.0; n * d],
            psi: vec![0.0; n * d],
            tcore: vec![0.0; d * d * d],
        };
        let mut outer = DMatrix::<f64>::zeros(d * d, n_groups);
        let mut t_psi = vec![0.0; d];
        let mut t_psi_target = vec![0.0; d];
        let mut t_phi = vec![0.0; d];
        let mut loss = 0.0;
        #[allow(clippy::needless_range_loop)]
        for i in 0..b {
            let (s, s_next, s_plus, g) = (batch.s[i], batch.s_next[i], batch.s_plus[i], batch.goal[i]);
            let gi = sample_group[i];
            let weight = if self.single_intent {
                0.5
            } else {
                let u = &adv_dirs[gi * d..(gi + 1) * d];
                let adv =
                    indicator(s, g) + cfg.gamma * dot(adv_model.phi_row(s_next), u) - dot(adv_model.phi_row(s), u);
                expectile_weight(cfg.alpha, adv)
            };
            let t_on = t_online.column(gi);
            let t_on = t_on.as_slice();
            matvec(t_on, self.psi_row(s_plus), &mut t_psi);
            let value = dot(self.phi_row(s), &t_psi);
            matvec(
                t_target.column(gi).as_slice(),
                target.psi_row(s_plus),
                &mut t_psi_target,
            );
            let td_target = indicator(s, s_plus) + cfg.gamma * dot(target.phi_row(s_next), &t_psi_target);
            let err = value - td_target;
            loss += weight * err * err;

            let c = 2.0 * weight * err / b as f64;
            if c == 0.0 {
                continue;
            }
            for (gp, tp) in grads.phi[s * d..(s + 1) * d].iter_mut().zip(&t_psi) {
                *gp += c * tp;
            }
            matvec_t(t_on, self.phi_row(s), &mut t_phi);
            for (gp, tp) in grads.psi[s_plus * d..(s_plus + 1) * d].iter_mut().zip(&t_phi) {
                *gp += c * tp;
            }
            let phi_s = self.phi_row(s);
            let psi_sp = self.psi_row(s_plus);
            let mut col = outer.column_mut(gi);
            let col = col.as_mut_slice();
            for (row, &pi) in col.chunks_exact_mut(d).zip(phi_s) {
                let cp = c * pi;
                for (o, &pj) in row.iter_mut().zip(psi_sp) {
                    *o += cp * pj;
                }
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }

        // ∂/∂T[k] = Σ_g z_g[k] · Σ_{i∈g} c_i φ(s_i) ψ(s₊,i)ᵀ
        DMatrixViewMut::from_slice(&mut grads.tcore, d * d, d).gemm(1.0, &outer, &z_online.transpose(), 0.0);
        if online_embeds {
            // z_g = ψ(g): ∂V/∂z_k = φᵀ T_k ψ.
            let core = DMatrixView::from_slice(&self.tcore, d * d, d);
            let dz = core.transpose() * &outer;
            for (gi, &g) in group_goals.iter().enumerate() {
                for (gp, dzk) in grads.psi[g * d..(g + 1) * d].iter_mut().zip(dz.column(gi).iter()) {
                    *gp += dzk;
                }
            }
        }
        Ok((loss, grads))
    }
}

impl IcvfModel for MultilinearIcvf {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn goal_value(&self, s: StateId, s_plus: StateId, goal: StateId) -> f64 {
        self.value(s, s_plus, &self.intent_of_goal(goal))
    }

    fn value_matrix(&self, goal: StateId) -> DMatrix<f64> {
        let d = self.dim;
        let t = self.intent_matrix(&self.intent_of_goal(goal));
        let t = DMatrix::from_row_slice(d, d, &t);
        let phi = self.features();
        let psi = DMatrix::from_row_slice(self.n_states, d, &self.psi);
        phi * t * psi.transpose()
    }
}

/// One-hot embedding of an exact ICVF: `φ = ψ = I`, `T(e_g) = M_g`.
///
/// Core slices of states that are not oracle intents stay zero.
pub fn exact_embed_from_oracle(oracle: &OracleIcvf, max_core_entries: usize) -> Result<MultilinearIcvf> {
    let n = oracle.n_states();
    let entries = n.checked_pow(3).unwrap_or(usize::MAX);
    if entries > max_core_entries {
        return Err(Error::Config(format!(
            "exact embedding needs {entries} core entries, cap is {max_core_entries}"
        )));
    }
    let identity = DMatrix::<f64>::identity(n, n);
    let eye: Vec<f64> = identity.transpose().as_slice().to_vec();
    let mut model = MultilinearIcvf::from_parts(n, n, false, eye.clone(), eye, vec![0.0; entries])?;
    for (index, &goal) in oracle.intents().iter().enumerate() {
        let m = oracle.matrix(index);
        let slice = model.core_slice_mut(goal);
        for s in 0..n {
            for s_plus in 0..n {
                slice[s * n + s_plus] = m[(s, s_plus)];
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_gridworld, GridSpec, Gridworld};
    use crate::model::{polyak_update, Model, ModelKind};
    use crate::oracle::oracle_icvf;
    use crate::seeded_rng;

    fn summed_value_of_reward(model: &MultilinearIcvf, s: StateId, z: &[f64], reward: &[f64]) -> f64 {
        reward
            .iter()
            .enumerate()
            .map(|(s_plus, &r)| r * model.value(s, s_plus, z))
            .sum()
    }

    fn random_model(n: usize, d: usize, seed: u64) -> MultilinearIcvf {
        let mut rng = seeded_rng(seed);
        let mut model = MultilinearIcvf::init(n, d, false, &mut rng);
        for x in model.tcore.iter_mut() {
            *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        model
    }

    #[test]
    fn zero_intent_gives_zero_value() {
        let model = random_model(6, 4, 1);
        assert_eq!(model.value(2, 3, &[0.0; 4]), 0.0);
    }

    #[test]
    fn value_is_linear_in_each_argument() {
        let model = random_model(6, 5, 2);
        let mut rng = seeded_rng(3);
        let z1: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
        let z2: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
        let (a, b) = (0.7, -1.9);
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
        let lhs = model.value(1, 4, &mix);
        let rhs = a * model.value(1, 4, &z1) + b * model.value(1, 4, &z2);
        assert!((lhs - rhs).abs() < 1e-12);

        let mut doubled = model.clone();
        doubled.phi_row_mut(1).iter_mut().for_each(|x| *x *= 2.0);
        assert!((doubled.value(1, 4, &z1) - 2.0 * model.value(1, 4, &z1)).abs() < 1e-12);

        // Superposition in ψ: replace ψ(4) by ψ(4) + ψ(5).
        let mut summed = model.clone();
        let extra = model.psi_row(5).to_vec();
        summed.psi_row_mut(4).iter_mut().zip(&extra).for_each(|(x, e)| *x += e);
        let lhs = summed.value(1, 4, &z1);
        let rhs = model.value(1, 4, &z1) + model.value(1, 5, &z1);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn intent_of_goal_reads_psi() {
        let mut model = random_model(4, 3, 4);
        assert_eq!(model.intent_of_goal(2), model.intent_of_goal(2));
        model.psi_row_mut(2).iter_mut().for_each(|x| *x = 0.0);
        assert!(model.intent_of_goal(2).iter().all(|&x| x == 0.0));
        for s in 0..4 {
            for s_plus in 0..4 {
                assert_eq!(model.goal_value(s, s_plus, 2), 0.0);
            }
        }
    }

    #[test]
    fn zero_core_gives_zero_self_value() {
        let mut model = random_model(4, 3, 5);
        model.tcore.iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(model.self_value(1, 2), 0.0);
    }

    #[test]
    fn value_matrix_matches_pointwise_values() {
        let model = random_model(7, 4, 6);
        let m = model.value_matrix(3);
        for s in 0..7 {
            for s_plus in 0..7 {
                assert!((m[(s, s_plus)] - model.goal_value(s, s_plus, 3)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reward_embedding_matches_summed_values() {
        let model = random_model(6, 4, 7);
        let mut rng = seeded_rng(8);
        let reward: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.3).collect();
        let z = model.intent_of_goal(1);
        for s in 0..6 {
            let via_embedding = model.value_of_reward(s, &z, &reward);
            let summed = summed_value_of_reward(&model, s, &z, &reward);
            assert!((via_embedding - summed).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_embedding_reproduces_oracle() {
        let world = Gridworld::open_room();
        let goals: Vec<usize> = (0..25).step_by(3).collect();
        let oracle = oracle_icvf(world.mdp(), &goals, 0.9).unwrap();
        let model = exact_embed_from_oracle(&oracle, DEFAULT_EMBED_CAP).unwrap();
        for (i, &g) in goals.iter().enumerate() {
            let e = model.intent_of_goal(g);
            assert!(e.iter().enumerate().all(|(k, &x)| x == if k == g { 1.0 } else { 0.0 }));
            for s in 0..25 {
                for s_plus in 0..25 {
                    assert!((model.goal_value(s, s_plus, g) - oracle.value(s, s_plus, i)).abs() < 1e-10);
                }
                assert!((model.self_value(s, g) - oracle.optimal_values(i)[s]).abs() < 1e-8);
            }
        }
        assert!(exact_embed_from_oracle(&oracle, 100).is_err());
    }

    #[test]
    fn exact_embedding_chain_value() {
        let world = build_gridworld(&GridSpec::from_rows(&[".."], 0.0).unwrap()).unwrap();
        let oracle = oracle_icvf(world.mdp(), &[0, 1], 0.9).unwrap();
        let model = exact_embed_from_oracle(&oracle, DEFAULT_EMBED_CAP).unwrap();
        assert!((model.value(0, 1, &[0.0, 1.0]) - 9.0).abs() < 1e-10);
    }

    #[test]
    fn advantage_on_exact_embedding() {
        let world = Gridworld::open_room();
        let goal = world.state_at(4, 4).unwrap();
        let gamma = 0.9;
        let oracle = oracle_icvf(world.mdp(), &[goal], gamma).unwrap();
        let model = exact_embed_from_oracle(&oracle, DEFAULT_EMBED_CAP).unwrap();
        let s = world.state_at(2, 2).unwrap();
        let toward = world.state_at(2, 3).unwrap();
        let away = world.state_at(2, 1).unwrap();
        assert!(model.advantage(s, toward, goal, gamma).abs() < 1e-8);
        assert!(model.advantage(s, away, goal, gamma) < -1e-3);
        // Staying put off-goal: (γ − 1) V(s, g, g).
        let stay = model.advantage(s, s, goal, gamma);
        assert!((stay - (gamma - 1.0) * model.self_value(s, goal)).abs() < 1e-12);
        assert!(stay <= 0.0);
    }

    #[test]
    fn polyak_rates() {
        let mut rng = seeded_rng(0);
        let online = Model::init(ModelKind::Multilinear, 5, 3, &mut rng).unwrap();
        let start = Model::init(ModelKind::Multilinear, 5, 3, &mut rng).unwrap();
        let mut target = start.clone();
        polyak_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target, start);
        polyak_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
        let wrong = Model::init(ModelKind::Multilinear, 5, 4, &mut rng).unwrap();
        assert!(polyak_update(&mut target, &wrong, 0.5).is_err());
    }
}
