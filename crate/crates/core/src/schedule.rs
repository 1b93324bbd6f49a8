//! Acceleration schedules derived from sweeps, and learning-rate schedules.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analyzer::{SweepRow, SweepTable};
use crate::compression::CompressionStrategy;
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

/// Piecewise-constant map from training progress to a strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelSchedule {
    breakpoints: Vec<(f64, CompressionStrategy)>,
}

impl AccelSchedule {
    pub fn new(breakpoints: Vec<(f64, CompressionStrategy)>) -> Result<Self> {
        match breakpoints.first() {
            None => return Err(Error::invalid("schedule needs at least one breakpoint")),
            Some((p, _)) if *p != 0.0 => return Err(Error::invalid(format!("first breakpoint must be at 0, got {p}"))),
            _ => {}
        }
        if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        if breakpoints.iter().any(|(p, _)| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("breakpoints must lie in [0, 1]"));
        }
        Ok(Self { breakpoints })
    }

    pub fn constant(strategy: CompressionStrategy) -> Self {
        Self { breakpoints: vec![(0.0, strategy)] }
    }

    pub fn breakpoints(&self) -> &[(f64, CompressionStrategy)] {
        &self.breakpoints
    }

    /// Strategy of the last breakpoint at or before `progress`.
    pub fn strategy_at(&self, progress: f64) -> CompressionStrategy {
        let p = progress.clamp(0.0, 1.0);
        self.breakpoints.iter().take_while(|(b, _)| *b <= p).last().unwrap_or(&self.breakpoints[0]).1
    }

    /// One `progress:literal` entry per breakpoint.
    pub fn to_entries(&self) -> Vec<String> {
        self.breakpoints.iter().map(|(p, s)| format!("{p}:{s}")).collect()
    }

    pub fn from_entries<S: AsRef<str>>(entries: &[S], cfg: &ViTConfig) -> Result<Self> {
        let bps = entries
            .iter()
            .map(|e| {
                let e = e.as_ref().trim();
                let (p, lit) = e.split_once(':').ok_or_else(|| Error::invalid(format!("schedule entry '{e}' lacks 'progress:'")))?;
                let p: f64 = p.trim().parse().map_err(|_| Error::invalid(format!("bad progress in schedule entry '{e}'")))?;
                Ok((p, CompressionStrategy::parse(lit, cfg)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bps)
    }

    /// Reads a schedule file: one entry per line, `#` starts a comment.
    pub fn parse_file(text: &str, cfg: &ViTConfig) -> Result<Self> {
        let entries: Vec<&str> =
            text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()).collect();
        Self::from_entries(&entries, cfg)
    }
}

impl fmt::Display for AccelSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_entries().join(","))
    }
}

/// Relative tolerance under which two CA-MSE scores count as tied.
const TIE_RTOL: f64 = 1e-12;

fn closer_to_identity(a: &SweepRow, b: &SweepRow) -> Ordering {
    (a.q_patch + a.k_patch).cmp(&(b.q_patch + b.k_patch)).then((b.dq_keep + b.dk_keep).cmp(&(a.dq_keep + a.dk_keep)))
}

/// Per-stage argmin of CA-MSE as `(stage_pct, row)`, ties broken toward
/// lower cost and then toward the identity (smaller patches, more kept tokens).
///
/// With `budget_const` set, scores are recomputed from the variance column
/// for that budget; otherwise the table's `ca_mse` is used.
pub fn stage_argmins(sweep: &SweepTable, budget_const: Option<f64>) -> Result<Vec<(f64, &SweepRow)>> {
    if sweep.rows.is_empty() {
        return Err(Error::invalid("empty sweep table"));
    }
    if let Some(b) = budget_const {
        if !(b > 0.0) {
            return Err(Error::invalid(format!("budget_const {b} must be positive")));
        }
        if sweep.rows.iter().any(|r| !r.var.is_finite()) {
            return Err(Error::invalid("sweep table lacks the variance column needed to change the budget"));
        }
    }
    let score = |r: &SweepRow| budget_const.map_or(r.ca_mse, |b| r.ca_mse_at(b));
    Ok(sweep
        .stages()
        .into_iter()
        .map(|stage| {
            let best = sweep
                .at_stage(stage)
                .min_by(|a, b| {
                    let (sa, sb) = (score(a), score(b));
                    if (sa - sb).abs() <= TIE_RTOL * sa.abs().max(sb.abs()) {
                        a.cost.total_cmp(&b.cost).then_with(|| closer_to_identity(a, b))
                    } else {
                        sa.total_cmp(&sb)
                    }
                })
                .expect("stage has rows");
            (stage, best)
        })
        .collect())
}

/// Schedule switching to each stage's argmin at that stage's fraction of
/// training; the earliest stage is pinned to progress 0 and repeated
/// strategies are merged.
pub fn derive_schedule(sweep: &SweepTable, budget_const: Option<f64>) -> Result<AccelSchedule> {
    let mut bps: Vec<(f64, CompressionStrategy)> = Vec::new();
    for (i, (stage, row)) in stage_argmins(sweep, budget_const)?.into_iter().enumerate() {
        let s = row.strategy();
        if bps.last().is_some_and(|(_, prev)| *prev == s) {
            continue;
        }
        bps.push((if i == 0 { 0.0 } else { stage / 100.0 }, s));
    }
    AccelSchedule::new(bps)
}

/// Learning-rate decay after warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrMode {
    Poly,
    Cosine,
}

/// Linear warmup then polynomial or cosine decay. Positions may be steps or
/// budget units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    /// Base learning rate for a batch of 256.
    pub blr: f64,
    pub batch_size: usize,
    pub i_warmup: f64,
    pub i_max: f64,
    pub alpha: f64,
    pub mode: LrMode,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.blr > 0.0 && self.alpha > 0.0 && self.batch_size > 0) {
            return Err(Error::Config("blr, alpha and batch_size must be positive".into()));
        }
        if !(0.0 <= self.i_warmup && self.i_warmup < self.i_max) {
            return Err(Error::Config(format!("need 0 <= i_warmup ({}) < i_max ({})", self.i_warmup, self.i_max)));
        }
        Ok(())
    }

    /// `blr · batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.blr * self.batch_size as f64 / 256.0
    }

    pub fn lr_at(&self, i_cur: f64) -> Result<f64> {
        self.validate()?;
        if !(0.0..=self.i_max).contains(&i_cur) {
            return Err(Error::invalid(format!("position {i_cur} outside [0, {}]", self.i_max)));
        }
        let peak = self.peak_lr();
        if i_cur < self.i_warmup {
            return Ok(peak * i_cur / self.i_warmup);
        }
        let t = (i_cur - self.i_warmup) / (self.i_max - self.i_warmup);
        Ok(match self.mode {
            LrMode::Poly => peak * (1.0 - t.powf(self.alpha)),
            LrMode::Cosine => peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(q: usize, keep: usize) -> CompressionStrategy {
        CompressionStrategy { q_patch: q, k_patch: q, q_keep: keep, k_keep: 64, compress_small_crops: false }
    }

    #[test]
    fn boundary_convention() {
        let sched = AccelSchedule::new(vec![(0.0, s(8, 10)), (0.5, s(8, 64))]).unwrap();
        assert_eq!(sched.strategy_at(0.0), s(8, 10));
        assert_eq!(sched.strategy_at(0.49), s(8, 10));
        assert_eq!(sched.strategy_at(0.5), s(8, 64));
        assert_eq!(sched.strategy_at(1.0), s(8, 64));
    }

    #[test]
    fn invalid_breakpoints() {
        assert!(AccelSchedule::new(vec![]).is_err());
        assert!(AccelSchedule::new(vec![(0.1, s(8, 1))]).is_err());
        assert!(AccelSchedule::new(vec![(0.0, s(8, 1)), (0.0, s(8, 2))]).is_err());
    }

    #[test]
    fn entries_round_trip() {
        let cfg = ViTConfig::default();
        let sched = AccelSchedule::new(vec![(0.0, s(16, 4)), (0.25, s(12, 12)), (0.75, CompressionStrategy::identity(&cfg))]).unwrap();
        let entries = sched.to_entries();
        assert_eq!(entries[1], "0.25:q12k12:dq12:dk64");
        let back = AccelSchedule::parse_file(&format!("# header\n{}\n", entries.join("\n")), &cfg);
        // key keep 64 is invalid at patch 12 (grid 5x5)
        assert!(back.is_err());
        let sched = AccelSchedule::new(vec![(0.0, CompressionStrategy::identity(&cfg))]).unwrap();
        assert_eq!(AccelSchedule::from_entries(&sched.to_entries(), &cfg).unwrap(), sched);
    }

    #[test]
    fn lr_endpoints() {
        let lr = LrSchedule { blr: 1.5e-4, batch_size: 256, i_warmup: 10.0, i_max: 110.0, alpha: 2.0, mode: LrMode::Poly };
        assert_eq!(lr.lr_at(10.0).unwrap(), 1.5e-4);
        assert_eq!(lr.lr_at(110.0).unwrap(), 0.0);
        assert!((lr.lr_at(60.0).unwrap() - 0.75 * 1.5e-4).abs() < 1e-18);
        assert_eq!(lr.lr_at(0.0).unwrap(), 0.0);
        assert!(lr.lr_at(111.0).is_err());
    }
}
