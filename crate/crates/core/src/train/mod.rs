//! Expectile TD training against a polyak-averaged target copy, with periodic
//! evaluation against exact oracles.

mod ablation;
mod config;

pub use ablation::{parse_variants, run_ablation, AblationRow, AblationTable, Variant, ABLATION_CSV_HEADER, D_SWEEP};
pub use config::{IntentSet, ParamSource, TrainConfig, CONFIG_KEYS};

use std::fmt::Write as _;

use rand::seq::index;

use crate::data::{sample_batch, Batch, IntentSource, PassiveDataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::mdp::{StateId, TabularMdp};
use crate::model::{apply_gradients, polyak_update, IcvfModel, Model, Parameters};
use crate::oracle::{oracle_icvf, OracleIcvf};
use crate::probe::linear_probe;
use crate::{derived_rng, SeededRng};

const INIT_STREAM: u64 = 0;
const GOAL_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

/// Fit of a model against the oracle over the evaluation goals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// `max |V̂(s, s₊, g) − V(s, s₊, g)|` over goals and state pairs.
    pub sup_icvf_err: f64,
    /// Mean over goals and state pairs of the squared ICVF error.
    pub icvf_fit_mse: f64,
    /// Mean over goals of `mean_s |V̂(s, g, g) − V*_g(s)|`.
    pub self_value_err: f64,
    /// Per-goal `max_s |V̂(s, g, g) − V*_g(s)|` divided by the range of `V*_g`.
    pub self_value_rel_sup: f64,
    /// Mean over goals of the least-squares probe error from `φ` to `V*_g`.
    pub probe_mse: f64,
}

/// Evaluation per goal as well as aggregated.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalEvaluation {
    pub goal: StateId,
    pub sup_icvf_err: f64,
    pub icvf_fit_mse: f64,
    pub self_value_err: f64,
    pub self_value_rel_sup: f64,
    pub probe_mse: f64,
}

pub fn evaluate_goals(model: &Model, oracle: &OracleIcvf) -> Result<Vec<GoalEvaluation>> {
    let n = oracle.n_states();
    if model.n_states() != n {
        return Err(Error::shape(format!(
            "model has {} states, oracle has {n}",
            model.n_states()
        )));
    }
    let features = model.features();
    let mut out = Vec::with_capacity(oracle.intents().len());
    for (i, &goal) in oracle.intents().iter().enumerate() {
        let diff = model.value_matrix(goal) - oracle.matrix(i);
        let optimum = oracle.optimal_values(i);
        let self_errs: Vec<f64> = (0..n)
            .map(|s| (diff[(s, goal)] + oracle.value(s, goal, i) - optimum[s]).abs())
            .collect();
        let range = optimum.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - optimum.iter().copied().fold(f64::INFINITY, f64::min);
        let self_sup = self_errs.iter().copied().fold(0.0, f64::max);
        out.push(GoalEvaluation {
            goal,
            sup_icvf_err: diff.amax(),
            icvf_fit_mse: diff.norm_squared() / (n * n) as f64,
            self_value_err: self_errs.iter().sum::<f64>() / n as f64,
            self_value_rel_sup: if range > 0.0 { self_sup / range } else { self_sup },
            probe_mse: linear_probe(&features, optimum)?.mse,
        });
    }
    Ok(out)
}

pub fn evaluate(model: &Model, oracle: &OracleIcvf) -> Result<Evaluation> {
    let goals = evaluate_goals(model, oracle)?;
    let k = goals.len() as f64;
    let mean = |f: fn(&GoalEvaluation) -> f64| goals.iter().map(f).sum::<f64>() / k;
    Ok(Evaluation {
        sup_icvf_err: goals.iter().map(|g| g.sup_icvf_err).fold(0.0, f64::max),
        icvf_fit_mse: mean(|g| g.icvf_fit_mse),
        self_value_err: mean(|g| g.self_value_err),
        self_value_rel_sup: goals.iter().map(|g| g.self_value_rel_sup).fold(0.0, f64::max),
        probe_mse: mean(|g| g.probe_mse),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub eval: Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    /// Evaluation of the freshly initialised model.
    pub initial: Option<Evaluation>,
    pub records: Vec<MetricsRecord>,
}

pub const METRICS_CSV_HEADER: &str = "step,loss,sup_icvf_err,self_value_err,probe_mse";

impl TrainMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.loss, r.eval.sup_icvf_err, r.eval.self_value_err, r.eval.probe_mse
            )
            .expect("write to string");
        }
        out
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Goals the run is evaluated on: distinct states drawn uniformly from the seed.
pub fn eval_goals(n_states: usize, cfg: &TrainConfig) -> Vec<StateId> {
    let mut rng = derived_rng(cfg.seed, GOAL_STREAM);
    let k = cfg.n_eval_goals.min(n_states);
    index::sample(&mut rng, n_states, k).into_vec()
}

/// A trained model with its target copy and metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub model: Model,
    pub target: Model,
    pub metrics: TrainMetrics,
    pub eval_goals: Vec<StateId>,
    pub oracle: OracleIcvf,
}

/// One gradient step on the online model followed by the polyak update.
pub fn train_step(online: &mut Model, target: &mut Model, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let (loss, grads) = online.loss_and_gradients(target, batch, &cfg.loss_config())?;
    apply_gradients(online, &grads, cfg.learning_rate)?;
    polyak_update(target, online, cfg.polyak)?;
    Ok(loss)
}

fn describe_batch(batch: &Batch) -> String {
    let rows: Vec<String> = (0..batch.len().min(8))
        .map(|i| {
            format!(
                "({},{},{},{})",
                batch.s[i], batch.s_next[i], batch.s_plus[i], batch.goal[i]
            )
        })
        .collect();
    format!("first rows (s,s',s+,g) {}", rows.join(" "))
}

/// Online and target models initialised identically from the run seed.
pub fn init_models(n_states: usize, cfg: &TrainConfig) -> Result<(Model, Model)> {
    let mut rng: SeededRng = derived_rng(cfg.seed, INIT_STREAM);
    let online = Model::init(cfg.model_kind, n_states, cfg.d, &mut rng)?;
    Ok((online.clone(), online))
}

pub fn train(dataset: &PassiveDataset, mdp_for_eval: &TabularMdp, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let n = dataset.n_states();
    if mdp_for_eval.n_states() != n {
        return Err(Error::shape(format!(
            "dataset has {n} states, evaluation world has {}",
            mdp_for_eval.n_states()
        )));
    }
    let goals = eval_goals(n, cfg);
    let sampler = SamplerConfig {
        gamma: cfg.gamma,
        p_future: cfg.p_future,
        batch_size: cfg.batch_size,
        intents: match cfg.intent_set {
            IntentSet::Dataset => IntentSource::Dataset,
            IntentSet::EvalGoals => IntentSource::Goals(goals.clone()),
        },
    };
    let (mut online, mut target) = init_models(n, cfg)?;
    let mut rng = derived_rng(cfg.seed, BATCH_STREAM);
    let oracle = oracle_icvf(mdp_for_eval, &goals, cfg.gamma)?;
    let mut metrics = TrainMetrics {
        initial: Some(evaluate(&online, &oracle)?),
        records: Vec::new(),
    };
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for step in 1..=cfg.n_steps {
        let batch = sample_batch(dataset, &mut rng, &sampler)?;
        let loss = match train_step(&mut online, &mut target, &batch, cfg) {
            Ok(loss) => loss,
            Err(Error::Numerical(message)) => {
                return Err(Error::Divergence {
                    step,
                    message: format!("{message}; {}", describe_batch(&batch)),
                })
            }
            Err(e) => return Err(e),
        };
        if !online.all_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("non-finite parameters; {}", describe_batch(&batch)),
            });
        }
        loss_sum += loss;
        loss_count += 1;
        if step % cfg.eval_every == 0 || step == cfg.n_steps {
            metrics.records.push(MetricsRecord {
                step,
                loss: loss_sum / loss_count as f64,
                eval: evaluate(&online, &oracle)?,
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainRun {
        model: online,
        target,
        metrics,
        eval_goals: goals,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collect_passive;
    use crate::mdp::{Gridworld, Policy};
    use crate::model::ModelKind;
    use crate::seeded_rng;

    fn small_setup() -> (Gridworld, PassiveDataset) {
        let world = Gridworld::open_room();
        let data = collect_passive(world.mdp(), &Policy::uniform(25, 5), 20, 30, &mut seeded_rng(5)).unwrap();
        (world, data)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            gamma: 0.9,
            n_steps: 25,
            eval_every: 10,
            batch_size: 32,
            d: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn records_at_multiples_and_end() {
        let (world, data) = small_setup();
        let run = train(&data, world.mdp(), &quick_cfg()).unwrap();
        let steps: Vec<usize> = run.metrics.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
        assert!(run.metrics.initial.is_some());
        assert_eq!(run.metrics.to_csv().lines().count(), 4);
    }

    #[test]
    fn one_step_one_row() {
        let (world, data) = small_setup();
        let cfg = TrainConfig {
            n_steps: 1,
            ..quick_cfg()
        };
        assert_eq!(train(&data, world.mdp(), &cfg).unwrap().metrics.records.len(), 1);
    }

    #[test]
    fn zero_learning_rate_freezes_online() {
        let (world, data) = small_setup();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg()
        };
        let run = train(&data, world.mdp(), &cfg).unwrap();
        let (fresh, _) = init_models(25, &cfg).unwrap();
        assert_eq!(run.model, fresh);
        assert_eq!(run.target, fresh);
    }

    #[test]
    fn goals_are_distinct_and_seeded() {
        let cfg = quick_cfg();
        let goals = eval_goals(25, &cfg);
        assert_eq!(goals.len(), 10);
        let mut sorted = goals.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert_eq!(goals, eval_goals(25, &cfg));
        assert_eq!(eval_goals(3, &cfg).len(), 3);
    }

    #[test]
    fn mismatched_world_is_rejected() {
        let (_, data) = small_setup();
        assert!(train(&data, Gridworld::four_rooms().mdp(), &quick_cfg()).is_err());
    }

    #[test]
    fn every_kind_trains() {
        let (world, data) = small_setup();
        for kind in ModelKind::ALL {
            let cfg = TrainConfig {
                model_kind: kind,
                ..quick_cfg()
            };
            let run = train(&data, world.mdp(), &cfg).unwrap();
            assert_eq!(run.model.kind(), kind);
            assert!(run.metrics.last().unwrap().eval.sup_icvf_err.is_finite());
        }
    }

    #[test]
    fn divergence_reports_step() {
        let (world, data) = small_setup();
        let cfg = TrainConfig {
            learning_rate: 1e6,
            ..quick_cfg()
        };
        match train(&data, world.mdp(), &cfg) {
            Err(Error::Divergence { step, message }) => {
                assert!(step >= 1);
                assert!(!message.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
