//! Budget-controlled pretraining with stage checkpoints and resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use super::config::RunConfig;
use super::manifest::RunManifest;
use super::{evaluate_params, EvalRow};
use crate::compression::{apply_strategy, Algorithm, CompressedPair};
use crate::cost::BudgetLedger;
use crate::data::{make_batches, make_small_crops, Batch, Dataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objectives::{assemble_step, update_center, StepParams};
use crate::optim::AdamW;
use crate::rng::{self, tag};
use crate::vit::checkpoint::Checkpoint;
use crate::vit::{ema_update, Encoder, ViTParams};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_HEADER: &str = "step,spent_units,batch_cost,loss,lr,strategy";
pub const EVAL_HEADER: &str = "step,spent_units,nn_acc,lp_acc";

/// Directory name of the checkpoint for budget fraction `stage`.
pub fn stage_dir_name(stage: f64) -> String {
    format!("stage-{:03}", (stage * 100.0).round() as u32)
}

pub fn checkpoint_path(run_dir: &Path, stage: f64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(stage_dir_name(stage))
}

/// Mutable state of a run; everything needed to continue it bit-exactly.
pub struct TrainState {
    pub query: ViTParams<f32>,
    pub key: Option<ViTParams<f32>>,
    pub center: Option<Tensor<f32>>,
    pub adam: AdamW<f32>,
    pub ledger: BudgetLedger,
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    /// Index into the configured stages of the next checkpoint.
    pub next_stage: usize,
    /// Rows written to the evaluation CSV.
    pub eval_rows: usize,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let query = ViTParams::<f32>::init(&cfg.model, cfg.algorithm == Algorithm::Moco, cfg.seeds.model)?;
        let key = cfg.algorithm.uses_momentum_encoder().then(|| query.without_predictor());
        let center = (cfg.algorithm == Algorithm::Dino).then(|| Tensor::zeros([cfg.model.rep_dim]));
        let adam = AdamW::new(&query, cfg.optim.adamw.clone());
        Ok(Self {
            query,
            key,
            center,
            adam,
            ledger: BudgetLedger::new(cfg.budget)?,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            next_stage: 0,
            eval_rows: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig, stage: f64) -> Result<Checkpoint<f32>> {
        let state = json!({
            "stage": stage,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "next_stage": self.next_stage,
            "eval_rows": self.eval_rows,
            "adam_steps": self.adam.steps,
            "ledger": serde_json::to_value(&self.ledger)?,
        });
        let mut ck = Checkpoint::new(self.step, self.ledger.spent, serde_json::to_value(cfg)?, state);
        ck.push_params("query", &self.query);
        if let Some(k) = &self.key {
            ck.push_params("key", k);
        }
        if let Some(c) = &self.center {
            ck.push("center", c);
        }
        ck.push_params("adam.m", &self.adam.m);
        ck.push_params("adam.v", &self.adam.v);
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint<f32>) -> Result<Self> {
        let mut s = Self::init(cfg)?;
        let field = |k: &str| ck.state.get(k).cloned().ok_or_else(|| Error::invalid(format!("checkpoint state lacks '{k}'")));
        let num = |k: &str| field(k).and_then(|v| v.as_u64().ok_or_else(|| Error::invalid(format!("checkpoint state '{k}' is not an integer"))));
        s.query = ck.params("query", &s.query)?;
        if let Some(k) = &s.key {
            s.key = Some(ck.params("key", k)?);
        }
        if s.center.is_some() {
            s.center = Some(ck.get("center").cloned().ok_or_else(|| Error::invalid("checkpoint lacks the distillation center"))?);
        }
        s.adam.m = ck.params("adam.m", &s.adam.m)?;
        s.adam.v = ck.params("adam.v", &s.adam.v)?;
        s.adam.steps = num("adam_steps")?;
        s.ledger = serde_json::from_value(field("ledger")?)?;
        s.step = ck.step;
        s.epoch = num("epoch")?;
        s.batch_in_epoch = num("batch_in_epoch")? as usize;
        s.next_stage = num("next_stage")? as usize;
        s.eval_rows = num("eval_rows")? as usize;
        Ok(s)
    }
}

/// Outcome of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub spent: f64,
    pub evals: Vec<EvalRow>,
    pub output_dir: PathBuf,
}

fn epoch_seed(cfg: &RunConfig, epoch: u64) -> u64 {
    rng::derive_seed(&[cfg.seeds.data, tag::EPOCH, epoch])
}

/// Endless batch stream, resumable at `(epoch, batch_in_epoch)`.
struct BatchStream<'a> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    epoch: u64,
    pos: usize,
    batches: crate::data::Batches<'a>,
}

impl<'a> BatchStream<'a> {
    fn new(cfg: &'a RunConfig, data: &'a Dataset, epoch: u64, pos: usize) -> Result<Self> {
        let mut batches = make_batches(data, cfg.batch_size, epoch_seed(cfg, epoch), &cfg.augment)?;
        if batches.len() == 0 {
            return Err(Error::Config(format!("training set of {} samples holds no batch of {}", data.len(), cfg.batch_size)));
        }
        for _ in 0..pos {
            batches.next();
        }
        Ok(Self { cfg, data, epoch, pos, batches })
    }

    /// Next batch and the epoch it belongs to.
    fn next(&mut self) -> Result<(Batch, u64, u64)> {
        if let Some(b) = self.batches.next() {
            self.pos += 1;
            let seed = epoch_seed(self.cfg, self.epoch);
            return Ok((b, self.epoch, seed));
        }
        *self = Self::new(self.cfg, self.data, self.epoch + 1, 0)?;
        self.next()
    }
}

fn truncate_lines(path: &Path, keep: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text.lines().take(keep).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Latest checkpoint of a run directory, by stage.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::vit::checkpoint::MANIFEST_FILE).is_file())
        .collect();
    found.sort();
    found.pop()
}

/// Trains until the budget cannot pay for another batch.
///
/// With `resume`, continues from the latest checkpoint in the output
/// directory; the CSVs are cut back to that point, so an interrupted and
/// resumed run writes the same bytes as an uninterrupted one.
pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(&out, e))?;
    let (train, test) = cfg.datasets()?;
    let encoder = Encoder::<f32>::new(cfg.model.clone())?;
    let cost_model = cfg.cost_model()?;
    let schedule = cfg.accel_schedule()?;
    let lr_sched = cfg.lr_schedule();
    let k_small = cfg.small_crops();
    let small_side = cfg.cost.small_side;
    let started = Instant::now();

    let metrics_path = out.join(METRICS_FILE);
    let eval_path = out.join(EVAL_FILE);
    let mut manifest = RunManifest::new(cfg, &train, &test)?;

    let resumed = if resume { latest_checkpoint(&out) } else { None };
    let mut st = match &resumed {
        Some(dir) => {
            let ck = Checkpoint::<f32>::load(dir)?;
            let saved: RunConfig = serde_json::from_value(ck.config.clone())?;
            if saved != *cfg {
                return Err(Error::Config(format!("{} was written with a different configuration", dir.display())));
            }
            log::info!("resuming from {} at step {}", dir.display(), ck.step);
            let st = TrainState::from_checkpoint(cfg, &ck)?;
            truncate_lines(&metrics_path, 1 + st.step as usize)?;
            truncate_lines(&eval_path, 1 + st.eval_rows)?;
            manifest.resumed_from = Some(dir.clone());
            st
        }
        None => {
            fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
            fs::write(&eval_path, format!("{EVAL_HEADER}\n")).map_err(|e| Error::io(&eval_path, e))?;
            TrainState::init(cfg)?
        }
    };
    manifest.write(&out)?;

    let first_cost = cfg.batch_size as f64 * cost_model.strategy_cost(cfg.algorithm, &schedule.strategy_at(0.0), &cfg.model, k_small, small_side)?;
    if first_cost > cfg.budget {
        return Err(Error::Config(format!("budget {} cannot pay for one batch of cost {first_cost}", cfg.budget)));
    }

    let mut evals = Vec::new();
    let mut stream = BatchStream::new(cfg, &train, st.epoch, st.batch_in_epoch)?;
    let checkpoint = |st: &mut TrainState, evals: &mut Vec<EvalRow>, stage: f64| -> Result<()> {
        if cfg.eval.at_checkpoints {
            let row = evaluate_params(&encoder, &st.query, &train, &test, cfg.eval.reg, st.step, st.ledger.spent)?;
            append_line(&eval_path, &row.csv_line())?;
            st.eval_rows += 1;
            evals.push(row);
        }
        st.next_stage += 1;
        let dir = checkpoint_path(&out, stage);
        st.to_checkpoint(cfg, stage)?.save(&dir)?;
        log::info!("checkpoint {} at step {} ({:.1}% of budget)", dir.display(), st.step, 100.0 * st.ledger.progress());
        Ok(())
    };

    loop {
        while st.next_stage < cfg.stages.len() && st.ledger.progress() + 1e-12 >= cfg.stages[st.next_stage] {
            let stage = cfg.stages[st.next_stage];
            checkpoint(&mut st, &mut evals, stage)?;
        }
        let strategy = schedule.strategy_at(st.ledger.progress());
        let sample_cost = cost_model.strategy_cost(cfg.algorithm, &strategy, &cfg.model, k_small, small_side)?;
        let costs = vec![sample_cost; cfg.batch_size];
        if !st.ledger.can_afford(sample_cost * cfg.batch_size as f64) {
            break;
        }
        let lr = lr_sched.lr_at(st.ledger.spent.min(lr_sched.i_max))?;
        let (batch, epoch, eseed) = stream.next()?;
        let pairs: Vec<CompressedPair> = batch
            .pairs
            .iter()
            .zip(&batch.indices)
            .enumerate()
            .map(|(j, (p, &idx))| {
                let small = make_small_crops(&train.images[idx], crate::data::aug_seed(eseed, idx), k_small, small_side, &cfg.augment);
                let seed = rng::derive_seed(&[cfg.seeds.global, tag::STEP, st.step, j as u64]);
                apply_strategy(&p.x_q, &p.x_k, &small, &strategy, cfg.algorithm, &cfg.model, seed)
            })
            .collect::<Result<_>>()?;
        let params = StepParams { query: &st.query, key: st.key.as_ref(), center: st.center.as_ref() };
        let outp = assemble_step(&encoder, cfg.algorithm, &cfg.loss, &params, &pairs, false)?;
        if !outp.loss.is_finite() {
            return Err(Error::Diverged(st.step));
        }
        st.adam.step(&mut st.query, &outp.grad, lr)?;
        let charged = st.ledger.charge("train", &costs)?;
        if let Some(key) = &mut st.key {
            ema_update(key, &st.query, cfg.ema.momentum_at(st.ledger.progress()))?;
        }
        if let (Some(c), Some(m)) = (&mut st.center, &outp.teacher_mean) {
            update_center(c, m, cfg.loss.center_momentum)?;
        }
        st.step += 1;
        st.epoch = epoch;
        st.batch_in_epoch = stream.pos;
        append_line(&metrics_path, &format!("{},{},{},{},{},{}", st.step, st.ledger.spent, charged, outp.loss, lr, strategy))?;
        log::debug!("step {} loss {:.4} lr {:.3e} spent {:.1}", st.step, outp.loss, lr, st.ledger.spent);
    }
    // Stages the budget could not reach exactly are written with the final state.
    while st.next_stage < cfg.stages.len() {
        let stage = cfg.stages[st.next_stage];
        checkpoint(&mut st, &mut evals, stage)?;
    }

    manifest.finish(started.elapsed().as_secs_f64(), st.step, st.ledger.spent);
    manifest.write(&out)?;
    Ok(RunSummary { steps: st.step, spent: st.ledger.spent, evals, output_dir: out })
}
