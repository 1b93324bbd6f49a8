//! Pretraining runs, gradient sweeps, schedule derivation, evaluation and
//! figures, as used by the command-line tool.

mod analysis;
mod config;
mod manifest;
mod plot;
pub mod svg;
mod train;

use std::path::Path;

pub use analysis::{analyze, heatmap_panels, load_model_state, write_schedule, AnalyzeOptions, AnalysisOutput, DEFAULT_SAMPLES};
pub use config::{CostConfig, DataConfig, DataKind, EmaConfig, EvalConfig, OptimConfig, RunConfig, Seeds};
pub use manifest::{RunManifest, CONFIG_FILE, MANIFEST_FILE, PROTOCOL};
pub use plot::{cost_heatmap, plot_csvs, read_columns};
pub use train::{
    checkpoint_path, latest_checkpoint, pretrain, stage_dir_name, RunSummary, TrainState, CHECKPOINT_DIR, EVAL_FILE, EVAL_HEADER,
    METRICS_FILE, METRICS_HEADER,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::probes::{extract_features, linear_probe, nn_accuracy};
use crate::vit::checkpoint::Checkpoint;
use crate::vit::{Encoder, ViTParams};

/// One evaluation of frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub spent_units: f64,
    pub nn_acc: f64,
    pub lp_acc: f64,
    pub lp_converged: bool,
}

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.spent_units, self.nn_acc, self.lp_acc)
    }
}

/// NN and linear-probe accuracy of `params` on the test split, with the train
/// split as reference bank and probe training set.
pub fn evaluate_params(encoder: &Encoder<f32>, params: &ViTParams<f32>, train: &Dataset, test: &Dataset, reg: f64, step: u64, spent: f64) -> Result<EvalRow> {
    let train_bank = extract_features(encoder, params, train)?;
    let test_bank = extract_features(encoder, params, test)?;
    let nn_acc = nn_accuracy(&train_bank, &test_bank, false)?;
    let lp = linear_probe(&train_bank, &test_bank, reg)?;
    if !lp.converged {
        log::warn!("linear probe stopped after {} iterations with gradient norm {:.3e}", lp.iterations, lp.grad_norm);
    }
    Ok(EvalRow { step, spent_units: spent, nn_acc, lp_acc: lp.accuracy, lp_converged: lp.converged })
}

/// Evaluates a checkpoint on the dataset of its run configuration and
/// appends the row to `csv` (created with a header if absent).
pub fn evaluate_checkpoint(dir: &Path, csv: Option<&Path>) -> Result<EvalRow> {
    let ck = Checkpoint::<f32>::load(dir)?;
    let cfg: RunConfig = serde_json::from_value(ck.config.clone())?;
    let encoder = Encoder::<f32>::new(cfg.model.clone())?;
    let template = ViTParams::<f32>::init(&cfg.model, ck.has_prefix("query.predictor"), 0)?;
    let params = ck.params("query", &template)?;
    let (train, test) = cfg.datasets()?;
    let row = evaluate_params(&encoder, &params, &train, &test, cfg.eval.reg, ck.step, ck.spent)?;
    if let Some(path) = csv {
        let mut text = if path.exists() { std::fs::read_to_string(path).map_err(|e| Error::io(path, e))? } else { format!("{EVAL_HEADER}\n") };
        text.push_str(&row.csv_line());
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(row)
}
