//! Gradient-error sweeps over checkpoints and schedule files derived from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::svg;
use crate::analyzer::{Analyzer, ModelState, SampleSet, SweepTable};
use crate::compression::{grid_tokens, strategy_grid, desk_patches, Algorithm, DEFAULT_DROPOUTS};
use crate::error::{Error, Result};
use crate::schedule::{derive_schedule, stage_argmins, AccelSchedule};
use crate::vit::checkpoint::Checkpoint;
use crate::vit::{Encoder, ViTParams};

/// Settings of `analyze`; `None` fields fall back to the run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOptions {
    pub checkpoints: Vec<PathBuf>,
    pub patches: Option<Vec<usize>>,
    pub dropouts: Vec<f64>,
    pub samples: usize,
    /// Sub-batch size of the variance estimator.
    pub k: usize,
    /// Samples per loss evaluation.
    pub batch_size: Option<usize>,
    pub budget_const: Option<f64>,
    pub seed: u64,
    /// Where `sweep.csv` and the heatmaps go.
    pub out_dir: Option<PathBuf>,
}

/// Size of the fixed sample set the reference gradient is averaged over.
pub const DEFAULT_SAMPLES: usize = 2048;

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            patches: None,
            dropouts: DEFAULT_DROPOUTS.to_vec(),
            samples: DEFAULT_SAMPLES,
            k: 1,
            batch_size: None,
            budget_const: None,
            seed: 0,
            out_dir: None,
        }
    }
}

pub struct AnalysisOutput {
    pub table: SweepTable,
    pub config: RunConfig,
    pub files: Vec<PathBuf>,
}

/// Run configuration, stage fraction and model state stored in a checkpoint.
pub fn load_model_state(dir: &Path) -> Result<(RunConfig, f64, ModelState<f32>)> {
    let ck = Checkpoint::<f32>::load(dir)?;
    let cfg: RunConfig = serde_json::from_value(ck.config.clone())?;
    let stage = ck.state.get("stage").and_then(|v| v.as_f64()).ok_or_else(|| Error::invalid(format!("{} has no stage", dir.display())))?;
    let template = ViTParams::<f32>::init(&cfg.model, ck.has_prefix("query.predictor"), 0)?;
    let query = ck.params("query", &template)?;
    let key = if ck.has_prefix("key") { Some(ck.params("key", &template.without_predictor())?) } else { None };
    let center = ck.get("center").cloned();
    Ok((cfg, stage, ModelState { query, key, center }))
}

/// Sweeps the strategy grid over every checkpoint and writes `sweep.csv` plus
/// three heatmaps per stage.
pub fn analyze(opts: &AnalyzeOptions) -> Result<AnalysisOutput> {
    if opts.checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints to analyze"));
    }
    let mut states = Vec::new();
    let mut config: Option<RunConfig> = None;
    for dir in &opts.checkpoints {
        let (cfg, stage, state) = load_model_state(dir)?;
        if let Some(c) = &config {
            if c.model != cfg.model || c.algorithm != cfg.algorithm {
                return Err(Error::Config(format!("{} belongs to a different model or algorithm", dir.display())));
            }
        }
        config.get_or_insert(cfg);
        states.push((100.0 * stage, Some(state)));
    }
    let cfg = config.expect("at least one checkpoint");
    let patches = opts.patches.clone().unwrap_or_else(|| desk_patches(&cfg.model));
    let grid = strategy_grid(cfg.algorithm, &cfg.model, &patches, &opts.dropouts)?;
    let (train, _) = cfg.datasets()?;
    let k_small = cfg.small_crops();
    let samples = SampleSet::from_dataset(&train, opts.samples, opts.seed, &cfg.augment, k_small, cfg.cost.small_side)?;
    let encoder = Encoder::<f32>::new(cfg.model.clone())?;
    let analyzer = Analyzer { encoder: &encoder, algorithm: cfg.algorithm, loss: cfg.loss.clone(), batch_size: opts.batch_size.unwrap_or(cfg.batch_size).min(opts.samples) };
    let table = analyzer.sweep(&states, &grid, &samples, opts.k, &cfg.cost_model()?, opts.budget_const, cfg.cost.small_side)?;

    let mut files = Vec::new();
    if let Some(out) = &opts.out_dir {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let csv = out.join("sweep.csv");
        table.write_csv(&csv)?;
        files.push(csv);
        for stage in table.stages() {
            for (name, body) in heatmap_panels(&table, stage, cfg.algorithm, cfg.model.image_side, &opts.dropouts) {
                let path = out.join(format!("heatmap-{name}-{:03}.svg", stage.round() as u32));
                std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
                files.push(path);
            }
        }
    }
    Ok(AnalysisOutput { table, config: cfg, files })
}

/// Nominal dropout ratio closest to the kept fraction of a view.
fn nominal_dropout(keep: usize, patch: usize, side: usize, dropouts: &[f64]) -> f64 {
    let actual = 1.0 - keep as f64 / grid_tokens(side, patch) as f64;
    dropouts.iter().copied().min_by(|a, b| (a - actual).abs().total_cmp(&(b - actual).abs())).unwrap_or(actual)
}

/// CA-MSE, squared-bias and cost-adjusted-variance heatmaps of one stage:
/// rows are dropout ratios, columns patch sizes.
pub fn heatmap_panels(table: &SweepTable, stage: f64, algorithm: Algorithm, side: usize, dropouts: &[f64]) -> Vec<(&'static str, String)> {
    let rows: Vec<_> = table.at_stage(stage).collect();
    let mut patches: Vec<usize> = rows.iter().map(|r| r.q_patch).collect();
    patches.sort_unstable();
    patches.dedup();
    let mut ds: Vec<f64> = rows.iter().map(|r| nominal_dropout(r.dq_keep, r.q_patch, side, dropouts)).collect();
    ds.sort_by(f64::total_cmp);
    ds.dedup();
    let row_labels: Vec<String> = ds.iter().map(|d| format!("{d}")).collect();
    let col_labels: Vec<String> = patches.iter().map(|p| p.to_string()).collect();
    let panel = |name: &'static str, f: &dyn Fn(&crate::analyzer::SweepRow) -> f64| {
        let mut values = vec![vec![None; patches.len()]; ds.len()];
        for r in &rows {
            let ri = ds.iter().position(|&d| d == nominal_dropout(r.dq_keep, r.q_patch, side, dropouts)).expect("row bucket");
            let ci = patches.iter().position(|&p| p == r.q_patch).expect("column bucket");
            values[ri][ci] = Some(f(r));
        }
        let title = format!("{algorithm} {name} at {stage}% of training");
        (name, svg::heatmap(&title, "dropout ratio", "patch size", &row_labels, &col_labels, &values))
    };
    vec![panel("ca_mse", &|r| r.ca_mse), panel("bias_sq", &|r| r.bias_sq), panel("ca_var", &|r| r.ca_var)]
}

/// Derives the schedule and writes it with a per-stage summary as comments.
pub fn write_schedule(table: &SweepTable, budget_const: Option<f64>, path: &Path) -> Result<AccelSchedule> {
    let sched = derive_schedule(table, budget_const)?;
    let picks = stage_argmins(table, budget_const)?;
    if picks.len() < 2 {
        log::warn!("sweep covers {} stage(s); the schedule is constant", picks.len());
    }
    let mut text = String::from("# acceleration schedule: progress:strategy, switching at each entry\n");
    for (stage, row) in picks {
        let score = budget_const.map_or(row.ca_mse, |b| row.ca_mse_at(b));
        let _ = writeln!(text, "# stage {stage}%: {} (cost {:.3}, ca_mse {score:.4e}, bias_sq {:.4e})", row.strategy(), row.cost, row.bias_sq);
    }
    for e in sched.to_entries() {
        text.push_str(&e);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(sched)
}
