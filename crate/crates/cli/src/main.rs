//! `pcq`: one executable for the whole workflow. Synthesizes embedding
//! files, trains and evaluates prototype-quantized classifiers, runs the
//! ablation grids, and exports 2-D projections.
//!
//! Every run writes a manifest next to its outputs: the fully resolved
//! configuration, a digest of each input file, and the tool version. Outputs
//! are deterministic, so re-running a manifest's command reproduces them
//! byte-for-byte. `--dry-run` prints the resolved configuration and touches
//! nothing.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use pcq_core::datasim::{generate_dataset, read_embeddings, write_embeddings, DatasetSpec};
use pcq_core::diffcore::DenseMatrix;
use pcq_core::evalkit::{
    evaluate, fewshot_curve, gradient_suite, loss_ablation, project_2d, projection_csv,
    projection_svg, prompt_ablation, result_to_json, rows_to_csv, strategy_compare,
    temperature_sweep, HarnessResult,
};
use pcq_core::model::{forward, LossSelect, ModelParams};
use pcq_core::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "pcq", version, about = "Prototype-quantized embedding classification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled unit-norm embedding file
    GenData(GenDataArgs),
    /// Train on an embedding file; write a checkpoint and a report
    Train(TrainArgs),
    /// Evaluate a checkpoint against an embedding file
    Eval(EvalArgs),
    /// Train one model per (temperature, seed) cell and tabulate
    SweepTemperature(SweepTemperatureArgs),
    /// Toggle the auxiliary loss weights across a seeded grid
    AblateLoss(GridArgs),
    /// Compare the three prototype strategies across a seeded grid
    AblateStrategy(GridArgs),
    /// Compare prompt designs across a seeded grid
    AblatePrompt(GridArgs),
    /// Sweep the shot count on a generated dataset
    Fewshot(FewshotArgs),
    /// Project checkpoint prototypes and data features to 2-D CSV/SVG
    Project(ProjectArgs),
    /// Check every loss gradient against central differences
    Gradcheck(GradcheckArgs),
}

/// Training configuration sources, lowest to highest precedence: built-in
/// defaults, `--config` JSON with flat TrainConfig keys, then these flags.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON config file; unknown keys are rejected
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Prompt length per class
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// prompts_only | prompts+adapter | prompts+adapter+fusion | all
    #[arg(long)]
    trainable_scope: Option<String>,
    /// prompted | centroid | codebook
    #[arg(long)]
    prototype_strategy: Option<String>,
    /// quantized_token | prototype_set
    #[arg(long)]
    kv_mode: Option<String>,
    #[arg(long)]
    eval_noise: Option<bool>,
    #[arg(long)]
    straight_through: Option<bool>,
    #[arg(long)]
    prompts_trainable: Option<bool>,
    #[arg(long)]
    adapter_enabled: Option<bool>,
    /// both | features_only | prototypes_only
    #[arg(long)]
    comp_grad: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => serde_json::from_str::<TrainConfig>(&fs::read_to_string(path)?)?,
            None => TrainConfig::default_desk(),
        };
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.base_lr {
            config.base_lr = v;
        }
        if let Some(v) = self.warmup_epochs {
            config.warmup_epochs = v;
        }
        if let Some(v) = self.weight_decay {
            config.weight_decay = v;
        }
        if let Some(v) = self.tau {
            config.tau = v;
        }
        if let Some(v) = self.lambda1 {
            config.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            config.lambda2 = v;
        }
        if let Some(v) = self.m {
            config.m = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.trainable_scope {
            config.trainable_scope = v.parse()?;
        }
        if let Some(v) = &self.prototype_strategy {
            config.prototype_strategy = v.parse()?;
        }
        if let Some(v) = &self.kv_mode {
            config.kv_mode = v.parse()?;
        }
        if let Some(v) = self.eval_noise {
            config.eval_noise = v;
        }
        if let Some(v) = self.straight_through {
            config.straight_through = v;
        }
        if let Some(v) = self.prompts_trainable {
            config.prompts_trainable = v;
        }
        if let Some(v) = self.adapter_enabled {
            config.adapter_enabled = v;
        }
        if let Some(v) = &self.comp_grad {
            config.comp_grad = v.parse()?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    per_class: usize,
    /// Angular noise std around each class mean, radians
    #[arg(long, default_value_t = 0.35)]
    spread: f64,
    /// Minimum pairwise angle between class means, radians
    #[arg(long, default_value_t = 0.6)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output embedding file; its manifest lands at <out>.manifest.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Labeled embedding file
    #[arg(long)]
    data: PathBuf,
    /// Output directory: checkpoint, report.json, manifest.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled embedding file
    #[arg(long)]
    data: PathBuf,
    /// Output directory: report.json, manifest.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training samples per class; the rest of the file becomes the test set
    #[arg(long, default_value_t = 4)]
    shots: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Parallel cells; 0 means one per core. PCQ_WORKERS sets the default.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SweepTemperatureArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,3,1,0.5,0.3,0.1")]
    taus: Vec<f64>,
}

#[derive(Args)]
struct FewshotArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0.35)]
    spread: f64,
    #[arg(long, default_value_t = 0.6)]
    separation: f64,
    /// Seed for the generated dataset, separate from the training seeds
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    shot_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ProjectArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled embedding file to project alongside the prototypes
    #[arg(long)]
    data: PathBuf,
    /// Output directory: projection.csv, projection.svg, manifest.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Output directory: gradcheck.json, manifest.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

#[derive(serde::Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    resolved_config: serde_json::Value,
    /// Input path -> SHA-256 of its bytes. Directories list each file.
    inputs: BTreeMap<String, String>,
    output_dir: String,
}

fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

fn digest_inputs(paths: &[&Path]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for path in paths {
        if path.is_dir() {
            let mut stack = vec![path.to_path_buf()];
            while let Some(dir) = stack.pop() {
                for entry in fs::read_dir(&dir)? {
                    let p = entry?.path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        out.insert(p.display().to_string(), file_digest(&p)?);
                    }
                }
            }
        } else {
            out.insert(path.display().to_string(), file_digest(path)?);
        }
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    resolved_config: serde_json::Value,
    inputs: &[&Path],
) -> CliResult<()> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        resolved_config,
        inputs: digest_inputs(inputs)?,
        output_dir: dir.display().to_string(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn print_dry_run(resolved: &serde_json::Value) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(resolved)?);
    Ok(())
}

fn resolve_workers(flag: Option<usize>) -> CliResult<usize> {
    if let Some(w) = flag {
        return Ok(w);
    }
    match std::env::var("PCQ_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("PCQ_WORKERS must be an integer, got {v:?}").into()),
        Err(_) => Ok(0),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult<()> {
    let spec = DatasetSpec {
        k: a.classes,
        d: a.dim,
        n_per_class: a.per_class,
        intra_spread: a.spread,
        inter_separation: a.separation,
        seed: a.seed,
    };
    let resolved = serde_json::to_value(spec)?;
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let data = generate_dataset(&spec)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_embeddings(&a.out, &data)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: "gen-data".into(),
        resolved_config: resolved,
        inputs: BTreeMap::new(),
        output_dir: a
            .out
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .display()
            .to_string(),
    };
    let manifest_path = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    write_json(&manifest_path, &manifest)?;
    println!(
        "wrote {} rows x {} dims, {} classes -> {}",
        data.n(),
        data.d(),
        data.k(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let config = a.config.resolve()?;
    let resolved = serde_json::to_value(&config)?;
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let data = read_embeddings(&a.data)?;
    let state = train(&config, &data)?;
    fs::create_dir_all(&a.out)?;
    save_checkpoint(&state, &a.out)?;
    let report = evaluate(&state.params, &config, &data)?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut inputs: Vec<&Path> = vec![&a.data];
    if let Some(c) = &a.config.config {
        inputs.push(c);
    }
    write_manifest(&a.out, "train", resolved, &inputs)?;
    println!(
        "trained {} epochs, final loss {:.6}, train-file accuracy {:.4}",
        config.epochs,
        state.history.last().map_or(f64::NAN, |h| h.total),
        report.accuracy
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let resolved = serde_json::to_value(&state.config)?;
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let data = read_embeddings(&a.data)?;
    let report = evaluate(&state.params, &state.config, &data)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_manifest(&a.out, "eval", resolved, &[&a.checkpoint, &a.data])?;
    println!(
        "accuracy {:.4}, assignment accuracy {}",
        report.accuracy,
        report
            .paa
            .map_or("undefined".to_string(), |p| format!("{p:.4}"))
    );
    Ok(())
}

/// Shared tail of the grid commands: write rows.csv, result.json, and the
/// manifest, then print the per-variant mean accuracies.
fn finish_grid(
    a: &GridArgs,
    command: &str,
    resolved: serde_json::Value,
    result: &HarnessResult,
) -> CliResult<()> {
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("rows.csv"), rows_to_csv(&result.rows))?;
    fs::write(a.out.join("result.json"), result_to_json(result)?)?;
    let mut inputs: Vec<&Path> = vec![&a.data];
    if let Some(c) = &a.config.config {
        inputs.push(c);
    }
    write_manifest(&a.out, command, resolved, &inputs)?;
    for s in &result.summaries {
        println!(
            "{:24} mean accuracy {}  ({} runs, {} failed)",
            s.variant,
            s.mean_accuracy
                .map_or("n/a".to_string(), |m| format!("{m:.4}")),
            s.runs,
            s.failures
        );
    }
    Ok(())
}

fn grid_resolved(a: &GridArgs, config: &TrainConfig, extra: serde_json::Value) -> CliResult<serde_json::Value> {
    let mut resolved = serde_json::json!({
        "train": config,
        "shots": a.shots,
        "seeds": a.seeds,
        "workers": resolve_workers(a.workers)?,
    });
    if let serde_json::Value::Object(extra_map) = extra {
        let map = resolved.as_object_mut().expect("object literal");
        for (key, value) in extra_map {
            map.insert(key, value);
        }
    }
    Ok(resolved)
}

fn cmd_sweep_temperature(a: SweepTemperatureArgs) -> CliResult<()> {
    let config = a.grid.config.resolve()?;
    let resolved = grid_resolved(&a.grid, &config, serde_json::json!({ "taus": a.taus }))?;
    if a.grid.dry_run {
        return print_dry_run(&resolved);
    }
    let data = read_embeddings(&a.grid.data)?;
    let workers = resolve_workers(a.grid.workers)?;
    let result = temperature_sweep(&config, &a.taus, &data, &a.grid.seeds, a.grid.shots, workers)?;
    finish_grid(&a.grid, "sweep-temperature", resolved, &result)
}

fn cmd_ablate_loss(a: GridArgs) -> CliResult<()> {
    let config = a.config.resolve()?;
    let resolved = grid_resolved(&a, &config, serde_json::json!({}))?;
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let data = read_embeddings(&a.data)?;
    let workers = resolve_workers(a.workers)?;
    let result = loss_ablation(&config, &data, &a.seeds, a.shots, workers)?;
    finish_grid(&a, "ablate-loss", resolved, &result)
}

fn cmd_ablate_strategy(a: GridArgs) -> CliResult<()> {
    let config = a.config.resolve()?;
    let resolved = grid_resolved(&a, &config, serde_json::json!({}))?;
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let data = read_embeddings(&a.data)?;
    let workers = resolve_workers(a.workers)?;
    let result = strategy_compare(&config, &data, &a.seeds, a.shots, workers)?;
    finish_grid(&a, "ablate-strategy", resolved, &result)
}

fn cmd_ablate_prompt(a: GridArgs) -> CliResult<()> {
    let config = a.config.resolve()?;
    let resolved = grid_resolved(&a, &config, serde_json::json!({}))?;
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let data = read_embeddings(&a.data)?;
    let workers = resolve_workers(a.workers)?;
    let result = prompt_ablation(&config, &data, &a.seeds, a.shots, workers)?;
    finish_grid(&a, "ablate-prompt", resolved, &result)
}

fn cmd_fewshot(a: FewshotArgs) -> CliResult<()> {
    let config = a.config.resolve()?;
    let spec = DatasetSpec {
        k: a.classes,
        d: a.dim,
        n_per_class: a.per_class,
        intra_spread: a.spread,
        inter_separation: a.separation,
        seed: a.data_seed,
    };
    let workers = resolve_workers(a.workers)?;
    let resolved = serde_json::json!({
        "train": config,
        "dataset": spec,
        "shot_grid": a.shot_grid,
        "seeds": a.seeds,
        "workers": workers,
    });
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let result = fewshot_curve(&config, &spec, &a.shot_grid, &a.seeds, workers)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("rows.csv"), rows_to_csv(&result.rows))?;
    fs::write(a.out.join("result.json"), result_to_json(&result)?)?;
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(c) = &a.config.config {
        inputs.push(c);
    }
    write_manifest(&a.out, "fewshot", resolved, &inputs)?;
    for s in &result.summaries {
        println!(
            "{:10} mean accuracy {}  ({} runs, {} failed)",
            s.variant,
            s.mean_accuracy
                .map_or("n/a".to_string(), |m| format!("{m:.4}")),
            s.runs,
            s.failures
        );
    }
    Ok(())
}

fn cmd_project(a: ProjectArgs) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let resolved = serde_json::to_value(&state.config)?;
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let data = read_embeddings(&a.data)?;
    let config = &state.config;
    let out = forward(
        &state.params,
        config,
        &data.features,
        &data.labels,
        None,
        false,
        LossSelect::Total,
    )?;
    let trained = state.params.prototypes(config)?.vectors;
    // Initial prototypes are reproducible from the seed; the centroid
    // strategy recomputes them from this data file instead of the original
    // training split.
    let init = ModelParams::init(config, state.k, state.d, Some(&data))?
        .prototypes(config)?
        .vectors;
    let n = data.n();
    let k = state.k;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n + 2 * k);
    let mut labels: Vec<u16> = Vec::with_capacity(n + 2 * k);
    let mut phases: Vec<String> = Vec::with_capacity(n + 2 * k);
    for i in 0..n {
        rows.push(out.fused.row(i).to_vec());
        labels.push(data.labels[i]);
        phases.push("sample".into());
    }
    for c in 0..k {
        rows.push(init.row(c).to_vec());
        labels.push((c + 1) as u16);
        phases.push("init".into());
    }
    for c in 0..k {
        rows.push(trained.row(c).to_vec());
        labels.push((c + 1) as u16);
        phases.push("prototype".into());
    }
    let stacked = DenseMatrix::from_rows(&rows)?;
    let coords = project_2d(&stacked)?;
    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("projection.csv"),
        projection_csv(&coords, &labels, &phases)?,
    )?;
    fs::write(
        a.out.join("projection.svg"),
        projection_svg(&coords, &labels, &phases)?,
    )?;
    write_manifest(&a.out, "project", resolved, &[&a.checkpoint, &a.data])?;
    println!(
        "projected {n} samples and {k} prototypes (init + trained) -> {}",
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let resolved = serde_json::json!({ "tolerance": 1e-4 });
    if a.dry_run {
        return print_dry_run(&resolved);
    }
    let entries = gradient_suite()?;
    let mut per_loss: BTreeMap<&str, f64> = BTreeMap::new();
    for e in &entries {
        let slot = per_loss.entry(e.loss.as_str()).or_insert(f64::NEG_INFINITY);
        *slot = slot.max(e.max_rel_err);
    }
    for (loss, err) in &per_loss {
        println!("{loss:6} max relative error {err:.3e}");
    }
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("gradcheck.json"), &entries)?;
    write_manifest(&a.out, "gradcheck", resolved, &[])?;
    let worst = per_loss.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if worst >= 1e-4 {
        return Err(format!("max relative error {worst:.3e} exceeds 1e-4").into());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepTemperature(a) => cmd_sweep_temperature(a),
        Command::AblateLoss(a) => cmd_ablate_loss(a),
        Command::AblateStrategy(a) => cmd_ablate_strategy(a),
        Command::AblatePrompt(a) => cmd_ablate_prompt(a),
        Command::Fewshot(a) => cmd_fewshot(a),
        Command::Project(a) => cmd_project(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive as parse "errors" but are not
            // usage mistakes.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
