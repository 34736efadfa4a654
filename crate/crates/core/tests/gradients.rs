use icvf_core::data::{collect_passive, sample_batch, IntentSource, SamplerConfig};
use icvf_core::mdp::{Gridworld, Policy};
use icvf_core::model::{gradient_check, FiniteDifference, LossConfig, Model, ModelKind, Parameters};
use icvf_core::seeded_rng;
use rand::Rng;

const FD: FiniteDifference = FiniteDifference {
    step: 1e-5,
    coords_per_tensor: 40,
    floor: 1e-6,
};

fn jitter(model: &mut Model, scale: f64, rng: &mut impl Rng) {
    for t in model.tensors_mut() {
        for x in t.iter_mut() {
            *x += scale * (rng.random::<f64>() - 0.5);
        }
    }
}

fn check(kind: ModelKind, seed: u64, cfg: LossConfig) -> f64 {
    let world = Gridworld::open_room();
    let mut rng = seeded_rng(seed);
    let data = collect_passive(world.mdp(), &Policy::uniform(25, 5), 8, 25, &mut rng).unwrap();
    let sampler = SamplerConfig {
        gamma: cfg.gamma,
        p_future: 0.7,
        batch_size: 48,
        intents: IntentSource::Dataset,
    };
    let batch = sample_batch(&data, &mut rng, &sampler).unwrap();
    let mut online = Model::init(kind, 25, 6, &mut rng).unwrap();
    jitter(&mut online, 0.6, &mut rng);
    let mut target = online.clone();
    jitter(&mut target, 0.2, &mut rng);
    gradient_check(&online, &target, &batch, &cfg, &FD, &mut rng)
        .unwrap()
        .max_rel_err
}

fn flag_grid() -> Vec<LossConfig> {
    let mut out = Vec::new();
    for intent_from_online in [false, true] {
        for advantage_from_online in [false, true] {
            out.push(LossConfig {
                gamma: 0.9,
                alpha: 0.9,
                intent_from_online,
                advantage_from_online,
            });
        }
    }
    out
}

#[test]
fn multilinear_gradients_match_central_differences() {
    for seed in 0..5 {
        for cfg in flag_grid() {
            let err = check(ModelKind::Multilinear, seed, cfg);
            assert!(err < 1e-4, "seed {seed}, {cfg:?}: rel err {err:e}");
        }
    }
}

#[test]
fn single_intent_gradients_match_central_differences() {
    for seed in 0..3 {
        let err = check(ModelKind::SingleIntent, seed, LossConfig::new(0.9, 0.9));
        assert!(err < 1e-4, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn monolithic_gradients_match_central_differences() {
    for seed in 0..3 {
        for cfg in flag_grid() {
            let err = check(ModelKind::Monolithic, seed, cfg);
            assert!(err < 1e-4, "seed {seed}, {cfg:?}: rel err {err:e}");
        }
    }
}

#[test]
fn gradient_step_lowers_loss_on_same_batch() {
    let world = Gridworld::open_room();
    let mut rng = seeded_rng(11);
    let data = collect_passive(world.mdp(), &Policy::uniform(25, 5), 8, 25, &mut rng).unwrap();
    let sampler = SamplerConfig {
        gamma: 0.9,
        p_future: 0.7,
        batch_size: 64,
        intents: IntentSource::Dataset,
    };
    let batch = sample_batch(&data, &mut rng, &sampler).unwrap();
    let cfg = LossConfig::new(0.9, 0.9);
    for kind in ModelKind::ALL {
        let mut online = Model::init(kind, 25, 6, &mut rng).unwrap();
        jitter(&mut online, 0.4, &mut rng);
        let target = online.clone();
        let (before, grads) = online.loss_and_gradients(&target, &batch, &cfg).unwrap();
        icvf_core::model::apply_gradients(&mut online, &grads, 1e-4).unwrap();
        let (after, _) = online.loss_and_gradients(&target, &batch, &cfg).unwrap();
        assert!(after < before, "{kind}: {after} >= {before}");
    }
}
