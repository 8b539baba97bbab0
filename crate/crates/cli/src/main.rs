//! `pop` — command-line surface for the continual-learning workbench.
//!
//! Four subcommands chain into a reproducible pipeline:
//!
//! ```text
//! pop gen       # synthesize the class pools          -> dataset.pop
//! pop pretrain  # fit and freeze the backbone         -> backbone.ckpt
//! pop cil       # run the class-incremental protocol  -> metrics/<run_id>.csv
//! pop report    # aggregate AA across seeds           -> metrics/report/*.csv
//! ```
//!
//! Configuration is a flat `key = value` file (see [`settings::KEYS`]);
//! command-line flags override file values, and every run writes its
//! fully-resolved settings back out as a manifest that `--config` can
//! replay verbatim. Unknown keys are rejected.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/checkpoint error,
//! 3 internal invariant violation.

mod report;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pop_core::data::{self, Benchmark};
use pop_core::driver::{config_hash, run_sequence, task_specs, ContinualState, RunConfig};
use pop_core::scalar::Precision;
use pop_core::vit::{BackboneConfig, PretrainConfig, Vit};
use pop_core::{checkpoint, PopError, Scalar};

use settings::{run_hash_keys, Settings, GEN_KEYS, PRETRAIN_KEYS};

// ── errors and exit codes ────────────────────────────────────────────

/// A command failure, split by exit code: data errors (2) are missing or
/// conflicting artifacts on disk; core errors map by kind — bad flag or
/// config values are usage errors (1), while protocol or numeric
/// violations escalate to 3 because they indicate a bug, not a user
/// mistake.
enum CliError {
    Data(String),
    Core(PopError),
}

type CliResult<T> = std::result::Result<T, CliError>;

impl From<PopError> for CliError {
    fn from(e: PopError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Core(e) => match e {
                PopError::Config(_) | PopError::InvalidArgument(_) => 1,
                PopError::Format(_) | PopError::Io(_) => 2,
                PopError::ShapeMismatch { .. } | PopError::Protocol(_) | PopError::NonFinite(_) => {
                    3
                }
            },
        }
    }
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

// ── command line ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "pop",
    version,
    about = "Prompt-based continual learning: data generation, pretraining, \
             class-incremental runs, and reporting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark (pretraining + continual pools)
    Gen(GenArgs),
    /// Pretrain a backbone on the pretraining pool and freeze it
    Pretrain(PretrainArgs),
    /// Run the class-incremental protocol from a frozen backbone
    Cil(CilArgs),
    /// Aggregate run metrics into summary tables and plot data
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Flat `key = value` config file; flags override file values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset path (key: dataset)
    #[arg(long, value_name = "PATH")]
    out: Option<String>,
    /// Generation seed (key: data_seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Regenerate even if the output already exists
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input dataset path (key: dataset)
    #[arg(long, value_name = "PATH")]
    dataset: Option<String>,
    /// Output checkpoint path (key: backbone)
    #[arg(long, value_name = "PATH")]
    out: Option<String>,
    /// Pretraining epochs; 0 saves a randomly initialized frozen backbone
    #[arg(long)]
    epochs: Option<usize>,
    /// Pretraining seed (key: pretrain_seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision: f32 or f64
    #[arg(long)]
    precision: Option<String>,
    /// Retrain even if a checkpoint from different settings exists
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CilArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input dataset path (key: dataset)
    #[arg(long, value_name = "PATH")]
    dataset: Option<String>,
    /// Frozen backbone checkpoint (key: backbone)
    #[arg(long, value_name = "PATH")]
    backbone: Option<String>,
    /// Output directory for metrics, manifests, and final checkpoints
    /// (default: $POP_METRICS_DIR, then ./metrics)
    #[arg(long, value_name = "DIR")]
    metrics_dir: Option<String>,
    /// Number of tasks the continual classes split into
    #[arg(long)]
    tasks: Option<usize>,
    /// Feature fusion: ff-cat | mean-of-all | max-pool | pop-only | mean-and-cat
    #[arg(long, value_name = "METHOD")]
    fusion: Option<String>,
    /// Prompt rows trained per task; 0 disables task prompts
    #[arg(long, value_name = "M")]
    prompts_per_task: Option<usize>,
    /// Rows in the continually trained prompt set
    #[arg(long)]
    pop_rows: Option<usize>,
    /// Replay buffer capacity; 0 disables rehearsal
    #[arg(long)]
    buffer: Option<usize>,
    /// Training samples kept per class; 0 uses every sample
    #[arg(long, value_name = "K")]
    kshot: Option<usize>,
    /// Train on replayed buffer samples only
    #[arg(long)]
    buffer_only: bool,
    /// Inject prompts at the input layer only
    #[arg(long, conflicts_with = "dpt")]
    spt: bool,
    /// Re-inject fresh prompt rows at every layer
    #[arg(long)]
    dpt: bool,
    /// Training epochs per task
    #[arg(long)]
    epochs: Option<usize>,
    /// Class-balanced tuning epochs per task
    #[arg(long)]
    tuning_epochs: Option<usize>,
    /// Task-prediction loss weight
    #[arg(long)]
    lambda_task: Option<f64>,
    /// Auxiliary-head loss weight
    #[arg(long)]
    lambda_aux: Option<f64>,
    /// Comma-separated seeds; one run per seed
    #[arg(long, value_name = "LIST")]
    seeds: Option<String>,
    /// Numeric precision: f32 or f64
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics directory (default: $POP_METRICS_DIR, then ./metrics)
    #[arg(value_name = "DIR")]
    dir: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; only real parse
            // failures are usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Cil(a) => cmd_cil(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

// ── shared plumbing ──────────────────────────────────────────────────

fn ov<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

/// Config file (or defaults) with flag overrides applied on top.
fn resolve(config: &ConfigArg, overrides: &[(&str, Option<String>)]) -> CliResult<Settings> {
    let mut s = match &config.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    for (key, value) in overrides {
        if let Some(v) = value {
            s.set(key, v)?;
        }
    }
    Ok(s)
}

/// Flag, then config key, then POP_METRICS_DIR, then ./metrics. The
/// resolved value is written back so manifests capture it.
fn resolve_metrics_dir(flag: &Option<String>, s: &mut Settings) -> CliResult<String> {
    let dir = if let Some(d) = flag {
        d.clone()
    } else if !s.get("metrics_dir").is_empty() {
        s.get("metrics_dir").to_string()
    } else {
        metrics_dir_fallback()
    };
    s.set("metrics_dir", &dir)?;
    Ok(dir)
}

fn metrics_dir_fallback() -> String {
    match std::env::var("POP_METRICS_DIR") {
        Ok(dir) if !dir.is_empty() => dir,
        _ => "metrics".to_string(),
    }
}

fn ensure_parent_dir(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| {
                data_err(format!("cannot create directory {}: {e}", dir.display()))
            })?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))
}

/// Path of the manifest that rides along with an artifact.
fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    artifact.with_file_name(name)
}

/// Load the dataset named by the settings and insist its stored spec
/// matches them, so a run's manifest fully pins the data it saw.
fn load_dataset(s: &Settings) -> CliResult<Benchmark> {
    let spec = s.dataset_spec()?;
    let path = Path::new(s.get("dataset"));
    let bench = data::load(path)
        .map_err(|e| data_err(format!("cannot load dataset {}: {e}", path.display())))?;
    if bench.spec != spec {
        return Err(data_err(format!(
            "dataset {} was generated from different settings; regenerate it or align the config",
            path.display()
        )));
    }
    Ok(bench)
}

// ── gen ──────────────────────────────────────────────────────────────

fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let s = resolve(
        &args.config,
        &[("dataset", ov(&args.out)), ("data_seed", ov(&args.seed))],
    )?;
    let spec = s.dataset_spec()?;
    let out = PathBuf::from(s.get("dataset"));
    if out.exists() && !args.force {
        return Err(data_err(format!(
            "{} already exists (pass --force to regenerate)",
            out.display()
        )));
    }

    let bench = data::generate(&spec)?;
    ensure_parent_dir(&out)?;
    data::save(&bench, &out)?;

    let hash = config_hash(&s.subset_json(GEN_KEYS));
    let derived = vec![
        ("config_hash", hash.clone()),
        ("pretrain_train_images", bench.pretrain.train.len().to_string()),
        ("pretrain_test_images", bench.pretrain.test.len().to_string()),
        ("cl_train_images", bench.cl.train.len().to_string()),
        ("cl_test_images", bench.cl.test.len().to_string()),
    ];
    let mpath = manifest_path(&out);
    write_file(&mpath, &s.manifest(&derived))?;

    println!("wrote {} (config hash {hash})", out.display());
    println!(
        "  pretraining pool: {} classes, {} train + {} test images",
        spec.pretrain_classes,
        bench.pretrain.train.len(),
        bench.pretrain.test.len()
    );
    println!(
        "  continual pool: {} classes, {} train + {} test images",
        spec.cl_classes,
        bench.cl.train.len(),
        bench.cl.test.len()
    );
    println!("  manifest: {}", mpath.display());
    Ok(())
}

// ── pretrain ─────────────────────────────────────────────────────────

fn cmd_pretrain(args: &PretrainArgs) -> CliResult<()> {
    let s = resolve(
        &args.config,
        &[
            ("dataset", ov(&args.dataset)),
            ("backbone", ov(&args.out)),
            ("pretrain_epochs", ov(&args.epochs)),
            ("pretrain_seed", ov(&args.seed)),
            ("precision", ov(&args.precision)),
        ],
    )?;
    let cfg = s.backbone_config()?;
    let pcfg = s.pretrain_config()?;
    let precision = s.precision()?;
    let seed = s.u64_of("pretrain_seed")?;
    let hash = config_hash(&s.subset_json(PRETRAIN_KEYS));
    let out = PathBuf::from(s.get("backbone"));

    if out.exists() && !args.force {
        let (_, meta) = checkpoint::read_meta(&out)
            .map_err(|e| data_err(format!("cannot read existing {}: {e}", out.display())))?;
        let have = meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("");
        if have == hash {
            println!("backbone up to date: {} (config hash {hash})", out.display());
            return Ok(());
        }
        return Err(data_err(format!(
            "{} was trained under config hash {have}, but the current settings hash to {hash} \
             (pass --force to retrain)",
            out.display()
        )));
    }

    let bench = load_dataset(&s)?;
    let accuracy = match precision {
        Precision::F32 => pretrain_to::<f32>(&out, &cfg, &pcfg, &bench, seed, &hash)?,
        Precision::F64 => pretrain_to::<f64>(&out, &cfg, &pcfg, &bench, seed, &hash)?,
    };

    let derived = vec![
        ("config_hash", hash.clone()),
        ("holdout_accuracy", format!("{accuracy}")),
    ];
    let mpath = manifest_path(&out);
    write_file(&mpath, &s.manifest(&derived))?;

    println!("wrote backbone checkpoint {} (config hash {hash})", out.display());
    println!("  epochs: {}, holdout accuracy: {accuracy:.4}", pcfg.epochs);
    println!("  manifest: {}", mpath.display());
    Ok(())
}

fn pretrain_to<T: Scalar>(
    out: &Path,
    cfg: &BackboneConfig,
    pcfg: &PretrainConfig,
    bench: &Benchmark,
    seed: u64,
    hash: &str,
) -> CliResult<f64> {
    let (store, rep) = pop_core::vit::pretrain_backbone::<T>(cfg, pcfg, bench, seed)?;
    for (epoch, loss) in rep.epoch_loss.iter().enumerate() {
        println!("  epoch {epoch}: mean loss {loss:.4}");
    }
    let meta = serde_json::json!({
        "kind": "backbone",
        "config_hash": hash,
        "backbone": cfg,
        "pretrain": pcfg,
        "seed": seed,
        "classes": rep.classes,
        "holdout_accuracy": rep.holdout_accuracy,
    });
    ensure_parent_dir(out)?;
    checkpoint::save(out, &meta, &store, None)?;
    Ok(rep.holdout_accuracy)
}

// ── cil ──────────────────────────────────────────────────────────────

fn cmd_cil(args: &CilArgs) -> CliResult<()> {
    let mut overrides = vec![
        ("dataset", ov(&args.dataset)),
        ("backbone", ov(&args.backbone)),
        ("tasks", ov(&args.tasks)),
        ("fusion", args.fusion.clone()),
        ("prompt_rows", ov(&args.prompts_per_task)),
        ("pop_rows", ov(&args.pop_rows)),
        ("buffer", ov(&args.buffer)),
        ("kshot", ov(&args.kshot)),
        ("epochs", ov(&args.epochs)),
        ("tuning_epochs", ov(&args.tuning_epochs)),
        ("lambda_task", ov(&args.lambda_task)),
        ("lambda_aux", ov(&args.lambda_aux)),
        ("seeds", args.seeds.clone()),
        ("precision", args.precision.clone()),
    ];
    if args.buffer_only {
        overrides.push(("buffer_only", Some("true".into())));
    }
    if args.spt {
        overrides.push(("mode", Some("spt".into())));
    }
    if args.dpt {
        overrides.push(("mode", Some("dpt".into())));
    }
    let mut s = resolve(&args.config, &overrides)?;
    let dir = PathBuf::from(resolve_metrics_dir(&args.metrics_dir, &mut s)?);

    let run_cfg = s.run_config()?;
    let bb_cfg = s.backbone_config()?;
    let tasks = s.usize_of("tasks")?;
    let seeds = s.seeds()?;
    let precision = s.precision()?;

    // the backbone checkpoint must exist, hold the requested precision,
    // and descend from exactly these pretraining settings
    let bb_path = PathBuf::from(s.get("backbone"));
    let (dtype, meta) = checkpoint::read_meta(&bb_path).map_err(|e| {
        data_err(format!(
            "cannot read backbone checkpoint {}: {e} (run `pop pretrain` first)",
            bb_path.display()
        ))
    })?;
    if dtype != precision.dtype() {
        return Err(data_err(format!(
            "backbone {} stores {dtype:?} parameters but precision = {precision} was requested",
            bb_path.display()
        )));
    }
    let backbone_hash = meta
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    let expected = config_hash(&s.subset_json(PRETRAIN_KEYS));
    if backbone_hash != expected {
        return Err(data_err(format!(
            "backbone {} was pretrained under config hash {backbone_hash}, but these settings \
             expect {expected}; point `backbone` at a matching checkpoint or align the config",
            bb_path.display()
        )));
    }

    let bench = load_dataset(&s)?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| data_err(format!("cannot create {}: {e}", dir.display())))?;

    let ctx = CilContext {
        settings: &s,
        bench: &bench,
        run_cfg: &run_cfg,
        bb_cfg: &bb_cfg,
        tasks,
        seeds: &seeds,
        dir: &dir,
        hash: config_hash(&s.subset_json(&run_hash_keys())),
        backbone_hash,
        bb_path: &bb_path,
    };
    let aas = match precision {
        Precision::F32 => cil_runs::<f32>(&ctx)?,
        Precision::F64 => cil_runs::<f64>(&ctx)?,
    };
    if aas.len() > 1 {
        let mean = aas.iter().sum::<f64>() / aas.len() as f64;
        println!("mean AA over {} seeds: {mean:.4}", aas.len());
    }
    Ok(())
}

struct CilContext<'a> {
    settings: &'a Settings,
    bench: &'a Benchmark,
    run_cfg: &'a RunConfig,
    bb_cfg: &'a BackboneConfig,
    tasks: usize,
    seeds: &'a [u64],
    dir: &'a Path,
    /// Hash over every run-defining config key; seeds of one config
    /// share it and the report groups runs by it.
    hash: String,
    backbone_hash: String,
    bb_path: &'a Path,
}

fn cil_runs<T: Scalar>(ctx: &CilContext) -> CliResult<Vec<f64>> {
    let (_, base_store) = checkpoint::load::<T>(ctx.bb_path)?;
    let specs = task_specs(ctx.bench, ctx.tasks)?;
    let mut aas = Vec::new();

    for &seed in ctx.seeds {
        let run_id = format!("{}-s{seed}", ctx.hash);
        let vit = Vit::new(ctx.bb_cfg.clone())?;
        let mut state = ContinualState::new(vit, base_store.clone(), ctx.run_cfg.clone(), seed)?;
        let feature_dim = state.prompts.fused_dim(ctx.run_cfg.fusion, ctx.tasks);

        // replayable manifest for exactly this run, written before
        // training so an interrupted run still documents itself
        let mut one = ctx.settings.clone();
        one.set("seeds", &seed.to_string())?;
        let mut derived = vec![
            ("run_id", run_id.clone()),
            ("config_hash", ctx.hash.clone()),
            ("backbone_hash", ctx.backbone_hash.clone()),
            ("feature_dim", feature_dim.to_string()),
        ];
        let mpath = ctx.dir.join(format!("{run_id}.manifest"));
        write_file(&mpath, &one.manifest(&derived))?;

        let mut log = run_sequence(&mut state, &specs)?;
        log.config_hash = ctx.hash.clone();
        log.run_id = run_id.clone();

        let csv_path = ctx.dir.join(format!("{run_id}.csv"));
        write_file(&csv_path, &log.to_csv())?;

        let aa = log.average_accuracy();
        derived.push(("average_accuracy", format!("{aa}")));
        write_file(&mpath, &one.manifest(&derived))?;

        let meta = serde_json::json!({
            "kind": "cil-final",
            "run_id": run_id,
            "config_hash": ctx.hash,
            "backbone_hash": ctx.backbone_hash,
            "seed": seed,
            "tasks": ctx.tasks,
            "average_accuracy": aa,
        });
        checkpoint::save(&ctx.dir.join(format!("{run_id}.ckpt")), &meta, &state.store, None)?;

        println!("seed {seed} -> {}", csv_path.display());
        for (t, a) in log.cumulative.iter().enumerate() {
            println!("  after task {}: accuracy {a:.4}", t + 1);
        }
        println!("  AA = {aa:.4}");
        aas.push(aa);
    }
    Ok(aas)
}

// ── report ───────────────────────────────────────────────────────────

fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let dir = PathBuf::from(args.dir.clone().unwrap_or_else(metrics_dir_fallback));
    let records = report::collect(&dir)?;
    if records.is_empty() {
        return Err(data_err(format!(
            "no runs found in {} (expected <run_id>.csv + <run_id>.manifest pairs)",
            dir.display()
        )));
    }

    let groups = report::group_by_config(&records);
    println!(
        "{:<12}  {:<12}  {:<4}  {:>2}  {:>6}  {:>5}  {:>4}  AA",
        "config", "fusion", "mode", "m", "buffer", "kshot", "runs"
    );
    for g in &groups {
        println!(
            "{:<12}  {:<12}  {:<4}  {:>2}  {:>6}  {:>5}  {:>4}  {:.4} ± {:.4}",
            g.hash, g.fusion, g.mode, g.prompt_rows, g.buffer, g.kshot, g.seeds.len(), g.mean, g.std
        );
    }

    let outdir = dir.join("report");
    std::fs::create_dir_all(&outdir)
        .map_err(|e| data_err(format!("cannot create {}: {e}", outdir.display())))?;
    write_file(&outdir.join("summary.csv"), &report::summary_csv(&groups))?;
    write_file(
        &outdir.join("fusion_vs_aa.csv"),
        &report::key_csv("fusion", &report::fusion_rows(&records)),
    )?;
    write_file(
        &outdir.join("prompts_vs_aa.csv"),
        &report::key_csv("prompt_rows", &report::numeric_rows(&records, |r| r.prompt_rows)),
    )?;
    write_file(
        &outdir.join("buffer_vs_aa.csv"),
        &report::key_csv("buffer", &report::numeric_rows(&records, |r| r.buffer)),
    )?;
    write_file(
        &outdir.join("kshot_vs_aa.csv"),
        &report::key_csv("kshot", &report::numeric_rows(&records, |r| r.kshot)),
    )?;
    println!(
        "wrote {} summaries for {} runs to {}",
        groups.len(),
        records.len(),
        outdir.display()
    );
    Ok(())
}
