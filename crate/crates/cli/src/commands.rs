use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use icvf_core::data::{collect_passive, PassiveDataset};
use icvf_core::mdp::{build_gridworld, value_iteration, GridSpec, Gridworld, Policy, StateId};
use icvf_core::model::{exact_embed_from_oracle, read_checkpoint, write_checkpoint, Model, DEFAULT_EMBED_CAP};
use icvf_core::oracle::oracle_icvf;
use icvf_core::probe::{
    advantage_sign_agreement, heatmap_report, probe_csv, probe_report, proposition1_slacks, random_probe_rewards,
    SLACK_TOL,
};
use icvf_core::train::{eval_goals, evaluate, parse_variants, run_ablation, train as run_training, TrainConfig};
use icvf_core::{derived_rng, seeded_rng, Error};
use rand::seq::index;

use crate::manifest::{beside, Manifest};
use crate::{AblateArgs, CollectArgs, EmbedArgs, EvalArgs, TrainArgs, WorldArgs};

const GOAL_POLICY_GAMMA: f64 = 0.99;
const PROBE_REWARD_STREAM: u64 = 11;
const RANDOM_GOAL_STREAM: u64 = 12;
const N_INDICATOR_PROBES: usize = 10;
const N_DENSE_PROBES: usize = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Format { .. } | Error::Io(_) => 3,
            Error::NonConvergence { .. } | Error::Numerical(_) | Error::Divergence { .. } => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn in_file(path: &Path, e: Error) -> CliError {
    let mut err = CliError::from(e);
    err.message = format!("{}: {}", path.display(), err.message);
    err
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

/// A bundled world by name, or a map file.
fn load_world(spec: &str, manifest: &mut Manifest) -> Result<Gridworld, CliError> {
    if let Some(name) = spec.strip_prefix("bundled:") {
        manifest.setting("world", spec);
        return Gridworld::bundled(name).ok_or_else(|| CliError::usage(format!("no bundled world `{name}`")));
    }
    let path = Path::new(spec);
    let grid = GridSpec::parse(&read_text(path)?).map_err(|e| in_file(path, e))?;
    manifest.input(path);
    build_gridworld(&grid).map_err(|e| in_file(path, e))
}

/// Config file or defaults; any problem with the file is a usage error.
fn load_config(path: Option<&Path>, manifest: &mut Manifest) -> Result<TrainConfig, CliError> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let cfg = TrainConfig::parse(&read_text(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    manifest.input(path);
    Ok(cfg)
}

fn load_dataset(path: &Path, manifest: &mut Manifest) -> Result<PassiveDataset, CliError> {
    let data = PassiveDataset::parse(&read_text(path)?).map_err(|e| in_file(path, e))?;
    manifest.input(path);
    Ok(data)
}

fn load_model(path: &Path, manifest: &mut Manifest) -> Result<Model, CliError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    let model = read_checkpoint(bytes.as_slice()).map_err(|e| in_file(path, e))?;
    manifest.input(path);
    Ok(model)
}

fn record_config(manifest: &mut Manifest, cfg: &TrainConfig) {
    for key in icvf_core::train::CONFIG_KEYS {
        manifest.setting(key, cfg.get(key).expect("listed key"));
    }
}

/// `all`, `random:<k>`, or comma-separated ids.
fn parse_goals(spec: &str, n_states: usize, seed: u64) -> Result<Vec<StateId>, CliError> {
    let goals: Vec<StateId> = if spec == "all" {
        (0..n_states).collect()
    } else if let Some(k) = spec.strip_prefix("random:") {
        let k: usize = k
            .parse()
            .map_err(|_| CliError::usage(format!("bad goal count in `{spec}`")))?;
        if k == 0 || k > n_states {
            return Err(CliError::usage(format!("cannot draw {k} goals from {n_states} states")));
        }
        index::sample(&mut derived_rng(seed, RANDOM_GOAL_STREAM), n_states, k).into_vec()
    } else {
        spec.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("bad goal id `{t}`")))
            })
            .collect::<Result<_, _>>()?
    };
    if goals.is_empty() {
        return Err(CliError::usage("goal list is empty"));
    }
    if let Some(bad) = goals.iter().find(|&&g| g >= n_states) {
        return Err(CliError::usage(format!(
            "goal {bad} out of range for {n_states} states"
        )));
    }
    let mut sorted = goals.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != goals.len() {
        return Err(CliError::usage("goal list has duplicates"));
    }
    Ok(goals)
}

fn parse_policy(spec: &str, world: &Gridworld) -> Result<Policy, CliError> {
    let n = world.n_states();
    let n_actions = world.mdp().n_actions();
    if spec == "uniform" {
        return Ok(Policy::uniform(n, n_actions));
    }
    let parts: Vec<&str> = spec.split(':').collect();
    let ["goal", goal, eps] = parts.as_slice() else {
        return Err(CliError::usage(format!("unknown policy `{spec}`")));
    };
    let goal: StateId = goal
        .parse()
        .map_err(|_| CliError::usage(format!("bad goal in `{spec}`")))?;
    let eps: f64 = eps
        .parse()
        .map_err(|_| CliError::usage(format!("bad epsilon in `{spec}`")))?;
    if goal >= n {
        return Err(CliError::usage(format!("goal {goal} out of range for {n} states")));
    }
    let mut reward = vec![0.0; n];
    reward[goal] = 1.0;
    let (_, greedy) = value_iteration(world.mdp(), &reward, GOAL_POLICY_GAMMA)?;
    Ok(greedy.with_exploration(eps)?)
}

pub fn world(args: WorldArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("world");
    let source = load_world(&args.world, &mut manifest)?;
    let spec = match args.slip {
        Some(slip) => {
            manifest.setting("slip", slip);
            let rows: Vec<String> = source
                .spec()
                .to_map_string()
                .lines()
                .skip(1)
                .map(str::to_string)
                .collect();
            GridSpec::from_rows(&rows, slip)?
        }
        None => source.spec().clone(),
    };
    let world = build_gridworld(&spec)?;
    write_bytes(&args.out, spec.to_map_string())?;
    manifest.output(&args.out);
    manifest.write(&beside(&args.out))?;
    println!(
        "n_states={} doors={} size={}x{}",
        world.n_states(),
        world.doors().len(),
        spec.height(),
        spec.width()
    );
    Ok(())
}

pub fn collect(args: CollectArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("collect");
    let world = load_world(&args.world, &mut manifest)?;
    let policy = parse_policy(&args.policy, &world)?;
    let data = collect_passive(world.mdp(), &policy, args.n, args.horizon, &mut seeded_rng(args.seed))?;
    manifest.setting("policy", &args.policy);
    manifest.setting("n", args.n);
    manifest.setting("horizon", args.horizon);
    manifest.setting("seed", args.seed);
    write_bytes(&args.out, data.to_text())?;
    manifest.output(&args.out);
    manifest.write(&beside(&args.out))?;
    println!("n_states={} n_pairs={}", data.n_states(), data.n_pairs());
    Ok(())
}

fn config_for_run(config: Option<&Path>, seed: Option<u64>, manifest: &mut Manifest) -> Result<TrainConfig, CliError> {
    let mut cfg = load_config(config, manifest)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    record_config(manifest, &cfg);
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("train");
    let cfg = config_for_run(args.config.as_deref(), args.seed, &mut manifest)?;
    let data = load_dataset(&args.dataset, &mut manifest)?;
    let world = load_world(&args.world, &mut manifest)?;
    if world.n_states() != data.n_states() {
        return Err(CliError::usage(format!(
            "dataset has {} states but the world has {}",
            data.n_states(),
            world.n_states()
        )));
    }
    let run = run_training(&data, world.mdp(), &cfg)?;
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &run.model)?;
    write_bytes(&args.out, &bytes)?;
    let metrics_path = args.metrics.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".metrics.csv");
        args.out.with_file_name(name)
    });
    write_bytes(&metrics_path, run.metrics.to_csv())?;
    manifest.output(&args.out);
    manifest.output(&metrics_path);
    manifest.write(&beside(&args.out))?;
    let initial = run.metrics.initial.expect("train records an initial evaluation");
    let last = run.metrics.last().expect("train records at least one row");
    println!(
        "initial sup_icvf_err={} final sup_icvf_err={} self_value_err={} probe_mse={}",
        initial.sup_icvf_err, last.eval.sup_icvf_err, last.eval.self_value_err, last.eval.probe_mse
    );
    Ok(())
}

pub fn embed(args: EmbedArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("embed");
    let cfg = config_for_run(args.config.as_deref(), None, &mut manifest)?;
    let world = load_world(&args.world, &mut manifest)?;
    let goals = parse_goals(args.goals.as_deref().unwrap_or("all"), world.n_states(), args.seed)?;
    manifest.setting("goals", format_ids(&goals));
    let oracle = oracle_icvf(world.mdp(), &goals, cfg.gamma)?;
    let model = Model::Multilinear(exact_embed_from_oracle(&oracle, DEFAULT_EMBED_CAP)?);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model)?;
    write_bytes(&args.out, &bytes)?;
    manifest.output(&args.out);
    manifest.write(&beside(&args.out))?;
    println!("n_states={} intents={}", world.n_states(), goals.len());
    Ok(())
}

fn format_ids(ids: &[StateId]) -> String {
    ids.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",")
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("eval");
    let model = load_model(&args.checkpoint, &mut manifest)?;
    let world = load_world(&args.world, &mut manifest)?;
    let cfg = config_for_run(args.config.as_deref(), None, &mut manifest)?;
    let n = world.n_states();
    if icvf_core::model::IcvfModel::n_states(&model) != n {
        return Err(CliError::usage(format!(
            "checkpoint has {} states but the world has {n}",
            icvf_core::model::IcvfModel::n_states(&model)
        )));
    }
    if args.from >= n {
        return Err(CliError::usage(format!("start state {} out of range", args.from)));
    }
    let goals = match &args.goals {
        Some(spec) => parse_goals(spec, n, args.seed)?,
        None => eval_goals(n, &cfg),
    };
    manifest.setting("goals", format_ids(&goals));
    manifest.setting("probe_seed", args.seed);
    manifest.setting("from", args.from);

    let oracle = oracle_icvf(world.mdp(), &goals, cfg.gamma)?;
    let probes = random_probe_rewards(
        n,
        N_INDICATOR_PROBES,
        N_DENSE_PROBES,
        &mut derived_rng(args.seed, PROBE_REWARD_STREAM),
    );
    let out = &args.out;
    let report_path = out.join("probe_report.csv");
    write_bytes(&report_path, probe_csv(&probe_report(&model, &oracle, &probes)?))?;
    manifest.output(&report_path);

    let mut worst_slack = f64::INFINITY;
    if let Some(m) = model.as_multilinear() {
        let rewards: Vec<Vec<f64>> = probes.iter().map(|p| p.reward.clone()).collect();
        let slacks = proposition1_slacks(m, &oracle, &rewards)?;
        let mut table = String::from("reward_index,kind,goal,epsilon,lhs,rhs,slack\n");
        for r in &slacks {
            worst_slack = worst_slack.min(r.slack);
            writeln!(
                table,
                "{},{},{},{},{},{},{}",
                r.reward_index,
                probes[r.reward_index].kind.name(),
                r.goal,
                r.epsilon,
                r.lhs,
                r.rhs,
                r.slack
            )
            .expect("write to string");
        }
        let slack_path = out.join("proposition1.csv");
        write_bytes(&slack_path, table)?;
        manifest.output(&slack_path);

        let mut transitions = Vec::new();
        for s in 0..n {
            for a in 0..world.mdp().n_actions() {
                for &(s_next, _) in world.mdp().successors(s, a) {
                    if s_next != s && !transitions.contains(&(s, s_next)) {
                        transitions.push((s, s_next));
                    }
                }
            }
        }
        let mut agreement = String::from("goal,advantage_sign_agreement\n");
        for (i, &g) in goals.iter().enumerate() {
            let a = advantage_sign_agreement(m, &oracle, i, &transitions)?;
            writeln!(agreement, "{g},{a}").expect("write to string");
        }
        let agreement_path = out.join("advantage_agreement.csv");
        write_bytes(&agreement_path, agreement)?;
        manifest.output(&agreement_path);
    }

    let features = model.features();
    let mut phi = String::from("state_id");
    for k in 0..features.ncols() {
        write!(phi, ",phi_{k}").expect("write to string");
    }
    phi.push('\n');
    for s in 0..features.nrows() {
        write!(phi, "{s}").expect("write to string");
        for x in features.row(s).iter() {
            write!(phi, ",{x}").expect("write to string");
        }
        phi.push('\n');
    }
    let phi_path = out.join("phi.csv");
    write_bytes(&phi_path, phi)?;
    manifest.output(&phi_path);

    let heat_dir = out.join("heatmaps");
    for &g in &goals {
        let (visit, self_value) = heatmap_report(&model, &world, args.from, g, &heat_dir)?;
        manifest.output(&visit);
        manifest.output(&self_value);
    }
    let summary = evaluate(&model, &oracle)?;
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "kind={} d={} goals={} probes={} sup_icvf_err={} self_value_err={} probe_mse={}",
        model.kind(),
        model.dim(),
        goals.len(),
        probes.len(),
        summary.sup_icvf_err,
        summary.self_value_err,
        summary.probe_mse
    );
    if worst_slack.is_finite() {
        println!("min_slack={worst_slack}");
        if worst_slack < -SLACK_TOL {
            return Err(CliError {
                code: 4,
                message: format!("approximation bound violated: slack {worst_slack:e}"),
            });
        }
    }
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut manifest = Manifest::new("ablate");
    let cfg = config_for_run(args.config.as_deref(), args.seed, &mut manifest)?;
    let variants = parse_variants(&args.variants)?;
    manifest.setting("variants", &args.variants);
    let data = load_dataset(&args.dataset, &mut manifest)?;
    let world = load_world(&args.world, &mut manifest)?;
    if world.n_states() != data.n_states() {
        return Err(CliError::usage(format!(
            "dataset has {} states but the world has {}",
            data.n_states(),
            world.n_states()
        )));
    }
    let table = run_ablation(&data, world.mdp(), &cfg, &variants)?;
    write_bytes(&args.out, table.to_csv())?;
    let note = table.directional_note();
    let mut notes_name = args.out.file_name().unwrap_or_default().to_os_string();
    notes_name.push(".notes.txt");
    let notes_path: PathBuf = args.out.with_file_name(notes_name);
    write_bytes(&notes_path, format!("{note}\n"))?;
    manifest.output(&args.out);
    manifest.output(&notes_path);
    manifest.write(&beside(&args.out))?;
    println!("rows={}", table.rows.len());
    println!("{note}");
    Ok(())
}
