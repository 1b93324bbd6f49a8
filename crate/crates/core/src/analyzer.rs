//! Bias, variance and cost-adjusted MSE of compressed gradient estimates.
//!
//! For a strategy `c`, per-sample gradients `g_i^c` are computed on a fixed
//! sample set with fixed augmentations. Their mean `ḡ^c` is compared to the
//! uncompressed reference `G`; the per-sample variance is estimated from
//! sub-batch means. All reported scores are divided by `‖G‖²`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::{apply_strategy, Algorithm, CompressedPair, CompressionStrategy};
use crate::cost::CostModel;
use crate::data::{aug_seed, make_small_crops, make_views, AugmentConfig, Dataset, Image, ViewPair};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::objectives::{assemble_step, LossConfig, StepParams};
use crate::rng::{self, tag};
use crate::vit::{Encoder, ViTParams};

/// Fixed augmented inputs reused by every strategy at a checkpoint.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub pairs: Vec<ViewPair>,
    /// Small crops per sample (distillation only).
    pub small: Vec<Vec<Image>>,
    /// Per-sample dropout seeds.
    pub drop_seeds: Vec<u64>,
}

impl SampleSet {
    /// `n` samples drawn by cycling through a seeded permutation of the
    /// dataset; repeated images receive fresh augmentations.
    pub fn from_dataset(ds: &Dataset, n: usize, seed: u64, aug: &AugmentConfig, k_small: usize, small_side: usize) -> Result<Self> {
        if ds.is_empty() || n == 0 {
            return Err(Error::invalid("sample set must not be empty"));
        }
        let order = crate::data::batch_indices(ds.len(), ds.len(), rng::derive_seed(&[seed, tag::ANALYSIS]))?.remove(0);
        let mut pairs = Vec::with_capacity(n);
        let mut small = Vec::with_capacity(n);
        let mut drop_seeds = Vec::with_capacity(n);
        for i in 0..n {
            let img = &ds.images[order[i % order.len()]];
            let s = aug_seed(rng::derive_seed(&[seed, tag::ANALYSIS, 1]), i);
            pairs.push(make_views(img, s, aug));
            small.push(make_small_crops(img, s, k_small, small_side, aug));
            drop_seeds.push(rng::derive_seed(&[seed, tag::ANALYSIS, 2, i as u64]));
        }
        Ok(Self { pairs, small, drop_seeds })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Copy holding only the samples in `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            small: indices.iter().map(|&i| self.small[i].clone()).collect(),
            drop_seeds: indices.iter().map(|&i| self.drop_seeds[i]).collect(),
        }
    }
}

/// Parameters of one checkpoint under analysis.
#[derive(Clone, Debug)]
pub struct ModelState<F: Real> {
    pub query: ViTParams<F>,
    pub key: Option<ViTParams<F>>,
    pub center: Option<Tensor<F>>,
}

/// Fixed settings of a gradient analysis.
pub struct Analyzer<'e, F: Real> {
    pub encoder: &'e Encoder<F>,
    pub algorithm: Algorithm,
    pub loss: LossConfig,
    /// Samples per loss evaluation (source of in-batch negatives).
    pub batch_size: usize,
}

/// Gradient statistics of one (checkpoint, strategy) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    /// `ḡ^c`, flattened in canonical parameter order.
    pub mean_grad: Vec<f64>,
    /// Trace of the per-sample gradient covariance.
    pub var: f64,
    /// `‖G − ḡ^c‖²`.
    pub bias_sq: f64,
    /// `‖G‖²`.
    pub ref_norm_sq: f64,
    pub n_samples: usize,
    pub subbatch: usize,
}

/// `(bias² + cost/budget·var) / ‖G‖²`.
pub fn ca_mse(stats: &GradStats, cost: f64, budget_const: f64) -> f64 {
    (stats.bias_sq + cost / budget_const * stats.var) / stats.ref_norm_sq
}

fn flatten<F: Real>(p: &ViTParams<F>, out: &mut Vec<f64>) {
    out.clear();
    for t in p.slots() {
        out.extend(t.data().iter().map(|v| v.as_f64()));
    }
}

impl<F: Real> Analyzer<'_, F> {
    fn compress(&self, samples: &SampleSet, range: std::ops::Range<usize>, strategy: &CompressionStrategy) -> Result<Vec<CompressedPair>> {
        let cfg = self.encoder.config();
        range
            .map(|i| {
                let p = &samples.pairs[i];
                apply_strategy(&p.x_q, &p.x_k, &samples.small[i], strategy, self.algorithm, cfg, samples.drop_seeds[i])
            })
            .collect()
    }

    /// Visits the per-sample gradients `g_i^c` in sample order.
    ///
    /// Samples are evaluated in consecutive chunks of `batch_size`; a final
    /// short chunk must still hold at least two samples.
    pub fn for_each_sample_gradient(
        &self,
        state: &ModelState<F>,
        strategy: &CompressionStrategy,
        samples: &SampleSet,
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::invalid("empty sample set"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("analysis batch size must be at least 2"));
        }
        let params = StepParams { query: &state.query, key: state.key.as_ref(), center: state.center.as_ref() };
        let mut flat = Vec::new();
        let mut start = 0;
        while start < samples.len() {
            let end = (start + self.batch_size).min(samples.len());
            let batch = self.compress(samples, start..end, strategy)?;
            let out = assemble_step(self.encoder, self.algorithm, &self.loss, &params, &batch, true)?;
            for (j, g) in out.per_sample.expect("per-sample gradients requested").iter().enumerate() {
                flatten(g, &mut flat);
                visit(start + j, &flat);
            }
            start = end;
        }
        Ok(())
    }

    /// All per-sample gradients, for small sets.
    pub fn per_sample_gradients(&self, state: &ModelState<F>, strategy: &CompressionStrategy, samples: &SampleSet) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        self.for_each_sample_gradient(state, strategy, samples, |_, g| out.push(g.to_vec()))?;
        Ok(out)
    }

    /// Mean uncompressed per-sample gradient `G`.
    pub fn reference_gradient(&self, state: &ModelState<F>, samples: &SampleSet) -> Result<Vec<f64>> {
        let identity = CompressionStrategy::identity(self.encoder.config());
        let mut sum: Vec<f64> = Vec::new();
        self.for_each_sample_gradient(state, &identity, samples, |_, g| accumulate(&mut sum, g))?;
        let n = samples.len() as f64;
        sum.iter_mut().for_each(|v| *v /= n);
        Ok(sum)
    }

    /// Mean gradient, sub-batch variance estimate and bias against `reference`.
    pub fn strategy_stats(&self, state: &ModelState<F>, strategy: &CompressionStrategy, samples: &SampleSet, k: usize, reference: &[f64]) -> Result<GradStats> {
        let n = samples.len();
        if k == 0 || k > n {
            return Err(Error::invalid(format!("sub-batch size {k} outside [1, {n}]")));
        }
        if !n.is_multiple_of(k) {
            return Err(Error::invalid(format!("sample count {n} not divisible by sub-batch size {k}")));
        }
        let mut acc = SubBatchVariance::new(k);
        self.for_each_sample_gradient(state, strategy, samples, |_, g| acc.push(g))?;
        let (mean_grad, var) = acc.finish()?;
        if mean_grad.len() != reference.len() {
            return Err(Error::shape("strategy_stats", format!("{} gradient entries vs reference {}", mean_grad.len(), reference.len())));
        }
        let bias_sq = mean_grad.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
        let ref_norm_sq: f64 = reference.iter().map(|v| v * v).sum();
        if ref_norm_sq <= 0.0 {
            return Err(Error::ZeroNorm("reference gradient"));
        }
        Ok(GradStats { mean_grad, var, bias_sq, ref_norm_sq, n_samples: n, subbatch: k })
    }

    /// Stats of every strategy at every available checkpoint.
    ///
    /// Stages whose checkpoint is missing are skipped with a warning. A
    /// non-positive `budget_const` selects the cost of one uncompressed batch.
    #[allow(clippy::too_many_arguments)]
    pub fn sweep(
        &self,
        checkpoints: &[(f64, Option<ModelState<F>>)],
        grid: &[CompressionStrategy],
        samples: &SampleSet,
        k: usize,
        cost_model: &CostModel,
        budget_const: Option<f64>,
        small_side: usize,
    ) -> Result<SweepTable> {
        let cfg = self.encoder.config();
        let n_small = samples.small.first().map_or(0, |s| s.len());
        let identity = CompressionStrategy::identity(cfg);
        let budget = match budget_const {
            Some(b) if b > 0.0 => b,
            Some(b) => return Err(Error::invalid(format!("budget_const {b} must be positive"))),
            None => self.batch_size as f64 * cost_model.strategy_cost(self.algorithm, &identity, cfg, n_small, small_side)?,
        };
        let mut grid = grid.to_vec();
        if !grid.contains(&identity) {
            grid.insert(0, identity);
        }
        let mut rows = Vec::new();
        for (stage, state) in checkpoints {
            let Some(state) = state else {
                log::warn!("no checkpoint for stage {stage}%, skipping");
                continue;
            };
            let reference = self.reference_gradient(state, samples)?;
            for s in &grid {
                let stats = self.strategy_stats(state, s, samples, k, &reference)?;
                let cost = cost_model.strategy_cost(self.algorithm, s, cfg, n_small, small_side)?;
                log::info!("stage {stage}% {s}: bias {:.3e} var {:.3e}", stats.bias_sq / stats.ref_norm_sq, stats.var / stats.ref_norm_sq);
                rows.push(SweepRow::from_stats(*stage, s, cost, &stats, budget));
            }
        }
        Ok(SweepTable { rows })
    }
}

fn accumulate(sum: &mut Vec<f64>, g: &[f64]) {
    if sum.is_empty() {
        sum.resize(g.len(), 0.0);
    }
    for (s, v) in sum.iter_mut().zip(g) {
        *s += v;
    }
}

/// Streaming estimate of the per-sample variance trace from means of
/// consecutive sub-batches of size `K`:
/// `K · Σ_j ‖m_j − m̄‖² / (J − 1) · (n − 1) / n` over `J = n / K` sub-batches.
///
/// With `K = 1` this is the population variance `Σ_i ‖g_i − ḡ‖² / n`, so
/// `mean_i ‖g_i − G‖² = ‖ḡ − G‖² + var` holds exactly; for `K > 1` it has the
/// same expectation.
#[derive(Clone, Debug)]
pub struct SubBatchVariance {
    k: usize,
    pending: Vec<f64>,
    in_pending: usize,
    mean: Vec<f64>,
    m2: f64,
    count: usize,
    samples: usize,
}

impl SubBatchVariance {
    pub fn new(k: usize) -> Self {
        Self { k: k.max(1), pending: Vec::new(), in_pending: 0, mean: Vec::new(), m2: 0.0, count: 0, samples: 0 }
    }

    pub fn push(&mut self, g: &[f64]) {
        accumulate(&mut self.pending, g);
        self.in_pending += 1;
        self.samples += 1;
        if self.in_pending == self.k {
            let inv = 1.0 / self.k as f64;
            self.pending.iter_mut().for_each(|v| *v *= inv);
            self.count += 1;
            if self.mean.is_empty() {
                self.mean = vec![0.0; self.pending.len()];
            }
            // Welford update with the scalar sum of per-coordinate M2 terms.
            let c = self.count as f64;
            let mut m2 = 0.0;
            for (m, &x) in self.mean.iter_mut().zip(&self.pending) {
                let delta = x - *m;
                *m += delta / c;
                m2 += delta * (x - *m);
            }
            self.m2 += m2;
            self.pending.iter_mut().for_each(|v| *v = 0.0);
            self.in_pending = 0;
        }
    }

    /// `(mean gradient, variance trace)`.
    pub fn finish(self) -> Result<(Vec<f64>, f64)> {
        if self.in_pending != 0 {
            return Err(Error::invalid(format!("{} samples do not fill the last sub-batch of {}", self.in_pending, self.k)));
        }
        if self.count == 0 {
            return Err(Error::invalid("no samples"));
        }
        let n = self.samples as f64;
        let var = if self.count < 2 {
            0.0
        } else {
            self.k as f64 * self.m2 / (self.count - 1) as f64 * (n - 1.0) / n
        };
        Ok((self.mean, var.max(0.0)))
    }
}

/// One (stage, strategy) cell; scores divided by `‖G‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stage_pct: f64,
    pub q_patch: usize,
    pub k_patch: usize,
    pub dq_keep: usize,
    pub dk_keep: usize,
    pub cost: f64,
    pub bias_sq: f64,
    /// `cost/budget · var`.
    pub ca_var: f64,
    pub ca_mse: f64,
    /// Per-sample variance trace, so scores can be recomputed for another budget.
    pub var: f64,
    pub budget_const: f64,
}

impl SweepRow {
    pub fn from_stats(stage_pct: f64, s: &CompressionStrategy, cost: f64, stats: &GradStats, budget_const: f64) -> Self {
        let norm = stats.ref_norm_sq;
        Self {
            stage_pct,
            q_patch: s.q_patch,
            k_patch: s.k_patch,
            dq_keep: s.q_keep,
            dk_keep: s.k_keep,
            cost,
            bias_sq: stats.bias_sq / norm,
            ca_var: cost / budget_const * stats.var / norm,
            ca_mse: ca_mse(stats, cost, budget_const),
            var: stats.var / norm,
            budget_const,
        }
    }

    pub fn strategy(&self) -> CompressionStrategy {
        CompressionStrategy { q_patch: self.q_patch, k_patch: self.k_patch, q_keep: self.dq_keep, k_keep: self.dk_keep, compress_small_crops: false }
    }

    /// CA-MSE under a different budget constant.
    pub fn ca_mse_at(&self, budget_const: f64) -> f64 {
        self.bias_sq + self.cost / budget_const * self.var
    }
}

/// Rows of a strategy sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Distinct stages in ascending order.
    pub fn stages(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.rows.iter().map(|r| r.stage_pct).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }

    pub fn at_stage(&self, stage_pct: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.stage_pct == stage_pct)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_io(path, e))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Reads a sweep CSV. The `var` and `budget_const` columns are optional.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            stage_pct: f64,
            q_patch: usize,
            k_patch: usize,
            dq_keep: usize,
            dk_keep: usize,
            cost: f64,
            bias_sq: f64,
            ca_var: f64,
            ca_mse: f64,
            var: Option<f64>,
            budget_const: Option<f64>,
        }
        let parse_err = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        for col in ["stage_pct", "q_patch", "k_patch", "dq_keep", "dk_keep", "cost", "bias_sq", "ca_var", "ca_mse"] {
            if !headers.iter().any(|h| h == col) {
                return Err(parse_err(1, format!("missing column '{col}'")));
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let raw: Raw = rec.deserialize(Some(&headers)).map_err(|e| parse_err(line, e.to_string()))?;
            let finite = [raw.stage_pct, raw.cost, raw.bias_sq, raw.ca_var, raw.ca_mse].iter().all(|v| v.is_finite());
            if !finite || raw.cost <= 0.0 || raw.bias_sq < 0.0 || raw.ca_var < 0.0 || raw.ca_mse < 0.0 {
                return Err(parse_err(line, "values must be finite, costs positive and scores non-negative".into()));
            }
            if raw.q_patch == 0 || raw.k_patch == 0 || raw.dq_keep == 0 || raw.dk_keep == 0 {
                return Err(parse_err(line, "patch sizes and keep counts must be positive".into()));
            }
            let budget_const = raw.budget_const.unwrap_or(f64::NAN);
            let var = raw.var.unwrap_or_else(|| if budget_const.is_finite() { raw.ca_var * budget_const / raw.cost } else { f64::NAN });
            rows.push(SweepRow {
                stage_pct: raw.stage_pct,
                q_patch: raw.q_patch,
                k_patch: raw.k_patch,
                dq_keep: raw.dq_keep,
                dk_keep: raw.dk_keep,
                cost: raw.cost,
                bias_sq: raw.bias_sq,
                ca_var: raw.ca_var,
                ca_mse: raw.ca_mse,
                var,
                budget_const,
            });
        }
        Ok(Self { rows })
    }
}

fn csv_to_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subbatch_k1_is_population_variance() {
        let g = [vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 4.0], vec![6.0, 2.0]];
        let mut acc = SubBatchVariance::new(1);
        g.iter().for_each(|v| acc.push(v));
        let (mean, var) = acc.finish().unwrap();
        assert_eq!(mean, vec![3.0, 2.0]);
        let direct: f64 = g.iter().map(|v| (v[0] - 3.0).powi(2) + (v[1] - 2.0).powi(2)).sum::<f64>() / 4.0;
        assert!((var - direct).abs() < 1e-12);
    }

    #[test]
    fn subbatch_requires_full_groups() {
        let mut acc = SubBatchVariance::new(2);
        acc.push(&[1.0]);
        assert!(acc.finish().is_err());
    }

    #[test]
    fn identical_samples_have_zero_variance() {
        let mut acc = SubBatchVariance::new(2);
        for _ in 0..8 {
            acc.push(&[0.5, -1.0, 2.0]);
        }
        assert_eq!(acc.finish().unwrap().1, 0.0);
    }

    #[test]
    fn ca_mse_formula() {
        let s = GradStats { mean_grad: vec![], var: 2.0, bias_sq: 1.0, ref_norm_sq: 4.0, n_samples: 1, subbatch: 1 };
        assert!((ca_mse(&s, 1.0, 2.0) - 0.5).abs() < 1e-15);
        assert!((ca_mse(&s, 1.0, 1e300) - 0.25).abs() < 1e-15);
        let zero = GradStats { var: 0.0, bias_sq: 0.0, ..s };
        assert_eq!(ca_mse(&zero, 3.0, 1.0), 0.0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let row = SweepRow {
            stage_pct: 25.0,
            q_patch: 8,
            k_patch: 8,
            dq_keep: 32,
            dk_keep: 64,
            cost: 2.5,
            bias_sq: 0.125,
            ca_var: 0.01,
            ca_mse: 0.135,
            var: 0.4,
            budget_const: 100.0,
        };
        let t = SweepTable { rows: vec![row] };
        let text = t.to_csv_string().unwrap();
        assert!(text.starts_with("stage_pct,q_patch,k_patch,dq_keep,dk_keep,cost,bias_sq,ca_var,ca_mse"));
        assert_eq!(SweepTable::parse_csv(&text, "t").unwrap(), t);
        let bad = format!("{text}25,8,8,x,64,2.5,0.1,0.1,0.2,0.1,100\n");
        match SweepTable::parse_csv(&bad, "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
