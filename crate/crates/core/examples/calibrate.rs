use std::time::Instant;

use icvf_core::data::collect_passive;
use icvf_core::mdp::{Gridworld, Policy};
use icvf_core::seeded_rng;
use icvf_core::train::{evaluate_goals, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let world = Gridworld::bundled(&std::env::var("WORLD").unwrap_or("open5".into())).unwrap();
    let n = world.n_states();
    let data = collect_passive(world.mdp(), &Policy::uniform(n, world.mdp().n_actions()), 200, 50, &mut seeded_rng(0)).unwrap();
    let mut cfg = TrainConfig {
        gamma: 0.9,
        d: 16,
        n_steps: 200_000,
        eval_every: 20_000,
        ..TrainConfig::default()
    };
    for a in &args {
        let (k, v) = a.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    let t = Instant::now();
    let run = train(&data, world.mdp(), &cfg).unwrap();
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    println!("initial {:?}", run.metrics.initial);
    print!("{}", run.metrics.to_csv());
    let freq = data.transition_frequencies();
    for (i, g) in evaluate_goals(&run.model, &run.oracle).unwrap().into_iter().enumerate() {
        let mut r = vec![0.0; n];
        r[g.goal] = 1.0;
        let fp = icvf_core::oracle::expectile_fixed_point(n, &freq, &r, cfg.gamma, cfg.alpha).unwrap();
        let opt = run.oracle.optimal_values(i);
        let range = opt.iter().cloned().fold(f64::MIN, f64::max) - opt.iter().cloned().fold(f64::MAX, f64::min);
        let fp_err = fp.iter().zip(opt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / range;
        print!("fp_rel {:.4} ", fp_err);
        println!(
            "goal {:2} rel_sup {:.4} self_err {:.4} sup {:.4} probe {:.5}",
            g.goal, g.self_value_rel_sup, g.self_value_err, g.sup_icvf_err, g.probe_mse
        );
    }
}
