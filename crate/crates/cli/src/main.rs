use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seqcomp::analyzer::SweepTable;
use seqcomp::compression::{desk_patches, Algorithm, DEFAULT_DROPOUTS};
use seqcomp::cost::{CostModel, DEFAULT_L_BASE};
use seqcomp::experiment::{self, AnalyzeOptions, RunConfig, Seeds, DEFAULT_SAMPLES};
use seqcomp::schedule::{derive_schedule, AccelSchedule};

#[derive(Parser)]
#[command(name = "seqcomp", version, about = "Sequence-compression accelerated self-supervised ViT pretraining")]
struct Cli {
    /// Worker threads; 1 gives byte-reproducible runs.
    #[arg(long, global = true, env = "SEQCOMP_THREADS")]
    threads: Option<usize>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain under a sample-cost budget.
    Pretrain(PretrainArgs),
    /// Sweep compression strategies over checkpoints (bias, variance, CA-MSE).
    Analyze(AnalyzeArgs),
    /// Derive an acceleration schedule from a sweep CSV.
    Schedule(ScheduleArgs),
    /// NN and linear-probe accuracy of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Line charts from CSVs or a cost heatmap.
    Plot(PlotArgs),
    /// Per-sample cost for given sequence lengths.
    Cost(CostArgs),
    /// Print the default configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set model.depth=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Seed for all random streams (global, data, model derived from it).
    #[arg(long, env = "SEQCOMP_SEED")]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::from_one(s);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    source: ConfigSource,

    /// Budget in sample-cost units.
    #[arg(long)]
    budget: Option<f64>,

    /// Constant strategy literal, e.g. q12k12:dq20:dk64.
    #[arg(long, conflicts_with = "schedule")]
    strategy: Option<String>,

    /// auto:<sweep.csv>, @<schedule file>, or comma-separated progress:strategy entries.
    #[arg(long)]
    schedule: Option<String>,

    /// Budget constant used with auto: schedules.
    #[arg(long)]
    budget_const: Option<f64>,

    #[arg(long)]
    output: Option<PathBuf>,

    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint directories.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,

    /// Run directory; every stage checkpoint in it is analyzed.
    #[arg(long)]
    run: Option<PathBuf>,

    /// Patch sizes (default: base, 1.5x base, 2x base).
    #[arg(long, value_delimiter = ',')]
    patches: Option<Vec<usize>>,

    #[arg(long, value_delimiter = ',')]
    dropouts: Option<Vec<f64>>,

    /// Size of the fixed sample set.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,

    /// Sub-batch size of the variance estimator.
    #[arg(short = 'k', long, default_value_t = 1)]
    k: usize,

    /// Samples per loss evaluation (default: the run's batch size).
    #[arg(long)]
    batch_size: Option<usize>,

    /// Cost units per update (default: one uncompressed batch).
    #[arg(long)]
    budget_const: Option<f64>,

    #[arg(long, env = "SEQCOMP_SEED", default_value_t = 0)]
    seed: u64,

    /// Output directory for sweep.csv and heatmaps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    sweep: PathBuf,

    /// Recompute CA-MSE for this budget constant instead of the sweep's.
    #[arg(long)]
    budget_const: Option<f64>,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// CSV to append the result row to.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Curves,
    Cost,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, value_enum, default_value_t = PlotKind::Curves)]
    kind: PlotKind,

    /// Input CSV as LABEL=PATH or PATH (label from the parent directory).
    #[arg(long = "csv")]
    csvs: Vec<String>,

    #[arg(long, default_value = "spent_units")]
    x: String,

    #[arg(long, default_value = "nn_acc")]
    y: String,

    #[arg(long)]
    title: Option<String>,

    /// Configuration for cost heatmaps.
    #[command(flatten)]
    source: ConfigSource,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, value_parser = parse_algorithm, default_value = "moco")]
    algorithm: Algorithm,

    /// Query sequence lengths (class token included).
    #[arg(long, value_delimiter = ',', required = true)]
    lq: Vec<usize>,

    /// Key sequence length (class token included).
    #[arg(long)]
    lk: usize,

    /// Small crops per sample and their length (distillation).
    #[arg(long, default_value_t = 0)]
    k_small: usize,

    #[arg(long, default_value_t = 0)]
    ls: usize,

    #[arg(long, default_value_t = DEFAULT_L_BASE)]
    l_base: usize,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse::<Algorithm>().map_err(|e| e.to_string())
}

fn resolve_schedule(spec: &str, cfg: &RunConfig, budget_const: Option<f64>) -> Result<AccelSchedule> {
    if let Some(csv) = spec.strip_prefix("auto:") {
        let table = SweepTable::read_csv(Path::new(csv))?;
        Ok(derive_schedule(&table, budget_const)?)
    } else if let Some(file) = spec.strip_prefix('@') {
        let text = std::fs::read_to_string(file).with_context(|| format!("reading schedule {file}"))?;
        Ok(AccelSchedule::parse_file(&text, &cfg.model)?)
    } else {
        let entries: Vec<&str> = spec.split(',').collect();
        Ok(AccelSchedule::from_entries(&entries, &cfg.model)?)
    }
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut cfg = args.source.load()?;
    if let Some(b) = args.budget {
        cfg.budget = b;
    }
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = &args.strategy {
        cfg.schedule = vec![format!("0:{s}")];
    }
    if let Some(spec) = &args.schedule {
        cfg.schedule = resolve_schedule(spec, &cfg, args.budget_const)?.to_entries();
    }
    cfg.validate()?;
    let summary = experiment::pretrain(&cfg, args.resume)?;
    println!("steps {} spent_units {} output {}", summary.steps, summary.spent, summary.output_dir.display());
    if let Some(last) = summary.evals.last() {
        println!("final nn_acc {:.4} lp_acc {:.4}", last.nn_acc, last.lp_acc);
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut checkpoints = args.checkpoints.clone();
    if let Some(run) = &args.run {
        let dir = run.join(experiment::CHECKPOINT_DIR);
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        found.sort();
        checkpoints.extend(found);
    }
    if checkpoints.is_empty() {
        bail!("give --checkpoint or --run");
    }
    let opts = AnalyzeOptions {
        checkpoints,
        patches: args.patches.clone(),
        dropouts: args.dropouts.clone().unwrap_or_else(|| DEFAULT_DROPOUTS.to_vec()),
        samples: args.samples,
        k: args.k,
        batch_size: args.batch_size,
        budget_const: args.budget_const,
        seed: args.seed,
        out_dir: Some(args.out.clone()),
    };
    let out = experiment::analyze(&opts)?;
    println!("{} sweep rows over {} stage(s)", out.table.rows.len(), out.table.stages().len());
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn schedule(args: &ScheduleArgs) -> Result<()> {
    let table = SweepTable::read_csv(&args.sweep)?;
    let sched = experiment::write_schedule(&table, args.budget_const, &args.out)?;
    println!("{sched}");
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let row = experiment::evaluate_checkpoint(&args.checkpoint, args.csv.as_deref())?;
    println!("{}", experiment::EVAL_HEADER);
    println!("{}", row.csv_line());
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<()> {
    let body = match args.kind {
        PlotKind::Curves => {
            if args.csvs.is_empty() {
                bail!("give at least one --csv");
            }
            let inputs: Vec<(String, PathBuf)> = args
                .csvs
                .iter()
                .map(|s| match s.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(s);
                        let label = p.parent().and_then(|d| d.file_name()).map_or_else(|| s.clone(), |n| n.to_string_lossy().into_owned());
                        (label, p)
                    }
                })
                .collect();
            let refs: Vec<(String, &Path)> = inputs.iter().map(|(l, p)| (l.clone(), p.as_path())).collect();
            let title = args.title.clone().unwrap_or_else(|| format!("{} vs {}", args.y, args.x));
            experiment::plot_csvs(&refs, &args.x, &args.y, &title)?
        }
        PlotKind::Cost => {
            let cfg = args.source.load()?;
            experiment::cost_heatmap(cfg.algorithm, &cfg.model, &cfg.cost_model()?, &desk_patches(&cfg.model), &DEFAULT_DROPOUTS)?
        }
    };
    std::fs::write(&args.out, body).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cost(args: &CostArgs) -> Result<()> {
    let model = CostModel::new(args.l_base)?;
    println!("algorithm,l_q,l_k,k_small,l_small,cost");
    for &lq in &args.lq {
        let c = model.sample_cost(args.algorithm, lq, args.lk, args.k_small, args.ls)?;
        println!("{},{lq},{},{},{},{c:.4}", args.algorithm, args.lk, args.k_small, args.ls);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Analyze(a) => analyze(a),
        Command::Schedule(a) => schedule(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plot(a) => plot(a),
        Command::Cost(a) => cost(a),
        Command::Config(a) => {
            print!("{}", a.source.load()?.to_toml()?);
            Ok(())
        }
    }
}
