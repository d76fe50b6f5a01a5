use std::path::{Path, PathBuf};

use scop::data::write_file_atomic;
use scop::knockoff::{decode_knockoff_cache, encode_knockoff_cache, fit_knockoff_model, generate_knockoff_dataset, swap_moment_test, DEFAULT_RIDGE};
use scop::nn::count_params_flops;
use scop::pipeline::{
    append_metrics, decode_network, decode_state, encode_network, encode_plan, encode_state, evaluate,
    load_data, planted_diagnostic, read_metrics, ArtifactStore, DataConfig, DatasetName, ExperimentConfig,
    PlantedConfig, Prepared, Runner, Staged, TrainConfig,
};
use scop::pruning::reduction_summary;
use scop::report::{emit_feature_histograms, metrics_table};
use serde_json::json;

use crate::args::{
    Command, Common, DatasetArg, Preset, DiagnoseArgs, EvalArgs, FinetuneArgs, KnockoffArgs, PruneArgs, PruneOverrides,
    ReportArgs, RunArgs, SelectArgs, SelectionOverrides, StageArgs, TrainOverrides,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] scop::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(a) => pretrain(a),
        Command::Knockoff(a) => knockoff(a),
        Command::Select(a) => select(a),
        Command::Prune(a) => prune(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a, false),
        Command::Ablate(a) => run(a, true),
        Command::Diagnose(a) => diagnose(a),
        Command::Report(a) => report(a),
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn resolve(common: &Common, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    init_logging(common.verbose);
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => match common.preset {
            Preset::Default => ExperimentConfig::mnist_default(0),
            Preset::Quick => ExperimentConfig::mnist_quick(0),
        },
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(arch) = &common.arch {
        config.arch = arch.clone();
    }
    if let Some(d) = common.dataset {
        config.dataset.name = match d {
            DatasetArg::Mnist => DatasetName::Mnist,
            DatasetArg::Cifar10 => DatasetName::Cifar10,
            DatasetArg::Synthetic => DatasetName::Synthetic,
        };
    }
    let DataConfig {
        dir,
        train_limit,
        test_limit,
        ..
    } = &mut config.dataset;
    if common.data_dir.is_some() {
        dir.clone_from(&common.data_dir);
    }
    if common.train_limit.is_some() {
        *train_limit = common.train_limit;
    }
    if common.test_limit.is_some() {
        *test_limit = common.test_limit;
    }
    edit(&mut config);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    eprintln!("resolved config: {}", serde_json::to_string(&config).expect("configs serialize"));
    Ok(config)
}

fn apply_train(t: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(e) = o.epochs {
        t.epochs = e;
    }
    if let Some(lr) = o.lr {
        t.lr = lr;
    }
    if let Some(b) = o.batch {
        t.batch = b;
    }
}

fn apply_selection(c: &mut ExperimentConfig, o: &SelectionOverrides) {
    let s = &mut c.selection;
    if let Some(m) = o.control {
        s.control = m;
    }
    if let Some(b) = o.bias {
        s.bias = b.is_on();
    }
    if let Some(e) = o.selection_epochs {
        s.epochs = e;
    }
    if let Some(lr) = o.selection_lr {
        s.lr = lr;
    }
    if o.examples.is_some() {
        s.examples = o.examples;
    }
}

fn apply_prune(c: &mut ExperimentConfig, o: &PruneOverrides) {
    if let Some(r) = o.rate {
        c.prune.rate = r;
    }
    if let Some(k) = o.criterion {
        c.prune.criterion = k;
    }
}

/// True when `out` exists and the stage should be skipped.
fn skip_existing(out: &Path, force: bool) -> bool {
    if out.exists() && !force {
        eprintln!("{} exists; skipping (use --force to recompute)", out.display());
        return true;
    }
    false
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file_atomic(path, bytes)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn data_for(config: &ExperimentConfig) -> Result<Prepared> {
    Ok(load_data(&config.dataset, config.seed)?)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("JSON values serialize"));
}

fn pretrain(a: StageArgs) -> Result<()> {
    let config = resolve(&a.common, |c| apply_train(&mut c.pretrain, &a.train))?;
    if skip_existing(&a.out, a.common.force) {
        return Ok(());
    }
    let data = data_for(&config)?;
    let runner = Runner::new(config, None, true)?;
    let net = runner.pretrain(&data)?;
    write(&a.out, &encode_network(&net.value))?;
    print_json(&json!({"stage": "pretrain", "test_accuracy": evaluate(&net.value, &data.test, 500)?, "hash": net.artifact.hash}));
    Ok(())
}

fn knockoff(a: KnockoffArgs) -> Result<()> {
    let config = resolve(&a.common, |c| {
        if a.examples.is_some() {
            c.selection.examples = a.examples;
        }
        if let Some(r) = a.ridge {
            c.knockoff.ridge = r;
        }
    })?;
    if skip_existing(&a.out, a.common.force) {
        return Ok(());
    }
    let data = data_for(&config)?;
    let runner = Runner::new(config, None, true)?;
    let set = runner.selection_set(&data)?;
    let k = runner.knockoffs(&data, &set)?;
    write(&a.out, &encode_knockoff_cache(&k.value))?;
    print_json(&json!({"stage": "knockoff", "examples": set.len(), "hash": k.artifact.hash}));
    Ok(())
}

fn load_net(path: &Path) -> Result<Staged<scop::nn::Network>> {
    Ok(Staged::load(path, "network", decode_network)?)
}

fn select(a: SelectArgs) -> Result<()> {
    let config = resolve(&a.common, |c| apply_selection(c, &a.selection))?;
    if skip_existing(&a.out, a.common.force) {
        return Ok(());
    }
    let net = load_net(&a.net)?;
    let knock = a
        .knockoffs
        .as_deref()
        .map(|p| Staged::load(p, "knockoff", decode_knockoff_cache))
        .transpose()?;
    let data = data_for(&config)?;
    let runner = Runner::new(config, None, true)?;
    let set = runner.selection_set(&data)?;
    let state = runner.select(&net, &set, knock.as_ref())?;
    write(&a.out, &encode_state(&state.value))?;
    print_json(&json!({
        "stage": "select",
        "max_constraint_violation": state.value.constraint_violation(),
        "hash": state.artifact.hash,
    }));
    Ok(())
}

fn prune(a: PruneArgs) -> Result<()> {
    let config = resolve(&a.common, |c| apply_prune(c, &a.prune))?;
    if skip_existing(&a.out, a.common.force) {
        return Ok(());
    }
    let net = load_net(&a.net)?;
    let state = a.selection.as_deref().map(|p| Staged::load(p, "select", decode_state)).transpose()?;
    let runner = Runner::new(config, None, true)?;
    let plan = runner.plan(&net, state.as_ref())?;
    let pruned = runner.prune(&net, &plan)?;
    let plan_out = a.plan_out.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".plan.json");
        PathBuf::from(p)
    });
    write(&plan_out, &encode_plan(&plan.value))?;
    write(&a.out, &encode_network(&pruned.value))?;
    let summary = reduction_summary(&net.value, &pruned.value)?;
    print_json(&json!({"stage": "prune", "reduction": summary, "hash": pruned.artifact.hash}));
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let config = resolve(&a.common, |c| apply_train(&mut c.finetune, &a.train))?;
    if skip_existing(&a.out, a.common.force) {
        return Ok(());
    }
    let net = load_net(&a.net)?;
    let data = data_for(&config)?;
    let runner = Runner::new(config, None, true)?;
    let tuned = runner.finetune(&net, &data)?;
    write(&a.out, &encode_network(&tuned.value))?;
    print_json(&json!({"stage": "finetune", "test_accuracy": evaluate(&tuned.value, &data.test, 500)?, "hash": tuned.artifact.hash}));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let config = resolve(&a.common, |_| {})?;
    let net = load_net(&a.net)?;
    let data = data_for(&config)?;
    let counts = count_params_flops(&net.value)?;
    print_json(&json!({
        "test_accuracy": evaluate(&net.value, &data.test, 500)?,
        "params": counts.params,
        "macs": counts.macs,
        "hash": net.artifact.hash,
    }));
    Ok(())
}

fn run(a: RunArgs, ablate: bool) -> Result<()> {
    let config = resolve(&a.common, |c| {
        apply_selection(c, &a.selection);
        apply_prune(c, &a.prune);
        if let Some(e) = a.pretrain_epochs {
            c.pretrain.epochs = e;
        }
        if let Some(e) = a.finetune_epochs {
            c.finetune.epochs = e;
        }
    })?;
    let store = ArtifactStore::open(a.out_dir.join("artifacts"))?;
    let data = data_for(&config)?;
    let runner = Runner::new(config, Some(&store), a.common.force)?;
    let records = if ablate {
        runner.ablate(&data)?
    } else {
        vec![runner.run(&data)?.record]
    };
    let metrics = a.out_dir.join("metrics.jsonl");
    for r in &records {
        append_metrics(&metrics, r)?;
        println!("{}", serde_json::to_string(r).expect("records serialize"));
    }
    eprintln!("appended {} record(s) to {}", records.len(), metrics.display());
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    init_logging(a.verbose);
    let config = PlantedConfig {
        selection_epochs: a.selection_epochs,
        examples: a.examples,
        ..Default::default()
    };
    if a.examples == 0 || a.seeds == 0 {
        return Err(CliError::Usage("--examples and --seeds must be positive".into()));
    }
    eprintln!("resolved config: {}", serde_json::to_string(&config).expect("configs serialize"));
    let mut lines = Vec::new();
    for &mode in &a.control {
        let mut precisions = Vec::new();
        for seed in a.seed..a.seed + a.seeds {
            let o = planted_diagnostic(seed, mode, &config)?;
            precisions.push(o.precision);
            lines.push(serde_json::to_string(&json!({"kind": "planted", "outcome": o})).expect("serializes"));
        }
        lines.push(
            serde_json::to_string(&json!({"kind": "planted-summary", "mode": mode, "median_precision": median(precisions)}))
                .expect("serializes"),
        );
    }
    for seed in a.seed..a.seed + a.seeds {
        let planted = scop::data::make_planted_dataset(seed, a.examples, config.signal_dim, config.noise_dim)?;
        let d = planted.signal_mask.len();
        let flat = planted.dataset.images.reshape(&[planted.dataset.len(), d])?;
        let model = fit_knockoff_model(&flat, DEFAULT_RIDGE)?;
        let knock = generate_knockoff_dataset(&model, &planted.dataset, seed, None)?.images.reshape(&[planted.dataset.len(), d])?;
        let full: Vec<usize> = (0..d).collect();
        let single = (0..d)
            .map(|j| swap_moment_test(&flat, &knock, &[j]))
            .collect::<scop::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0f64, f64::max);
        lines.push(
            serde_json::to_string(&json!({
                "kind": "swap",
                "seed": seed,
                "full_swap": swap_moment_test(&flat, &knock, &full)?,
                "worst_single_swap": single,
                "joint_min_eigenvalue": model.joint_min_eigenvalue(),
            }))
            .expect("serializes"),
        );
    }
    for l in &lines {
        println!("{l}");
    }
    if let Some(out) = &a.out {
        let mut text = lines.join("\n");
        text.push('\n');
        write(out, text.as_bytes())?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    if a.metrics.is_none() && a.net.is_none() {
        return Err(CliError::Usage("report needs --metrics and/or --net with --knockoffs".into()));
    }
    if let Some(m) = &a.metrics {
        init_logging(a.common.verbose);
        print!("{}", metrics_table(&read_metrics(m)?));
    }
    let Some(net_path) = &a.net else { return Ok(()) };
    let Some(k_path) = &a.knockoffs else {
        return Err(CliError::Usage("--net needs --knockoffs for feature histograms".into()));
    };
    let config = resolve(&a.common, |_| {})?;
    let net = load_net(net_path)?;
    let knock = decode_knockoff_cache(&scop::data::read_file(k_path)?)?;
    let data = data_for(&config)?;
    let runner = Runner::new(config, None, true)?;
    let set = runner.selection_set(&data)?;
    if set.images.shape() != knock.shape() {
        return Err(CliError::Usage(format!(
            "knockoff cache has shape {:?} but the selection set has {:?}",
            knock.shape(),
            set.images.shape()
        )));
    }
    let n = a.histogram_examples.clamp(1, set.len());
    let idx: Vec<usize> = (0..n).collect();
    let real = set.images.select_rows(&idx)?;
    let k = knock.select_rows(&idx)?;
    let layers = if a.layers.is_empty() {
        net.value.prunable_layers().iter().map(|p| p.mix_point).collect()
    } else {
        a.layers.clone()
    };
    for (path, h) in emit_feature_histograms(&net.value, &real, &k, &layers, &a.out_dir)? {
        print_json(&json!({"layer": h.layer, "csv": path.display().to_string(), "tv_distance": h.tv_distance()}));
    }
    Ok(())
}
