//! Figures regenerated from CSV files.

use std::path::Path;

use super::svg::{self, Series};
use crate::compression::{Algorithm, CompressionStrategy};
use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

/// Reads two numeric columns of a headered CSV.
pub fn read_columns(path: &Path, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::invalid(format!("{} has no column '{name}'", path.display())))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                msg: format!("column {} is not a number", headers.get(j).unwrap_or("?")),
            })
        };
        out.push((num(xi)?, num(yi)?));
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{} has no data rows", path.display())));
    }
    Ok(out)
}

/// Line chart of `y` against `x` with one series per `(label, csv)`.
pub fn plot_csvs(inputs: &[(String, &Path)], x: &str, y: &str, title: &str) -> Result<String> {
    if inputs.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let series = inputs
        .iter()
        .map(|(label, path)| Ok(Series { label: label.clone(), points: read_columns(path, x, y)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(svg::line_chart(title, x, y, &series))
}

/// Per-sample cost over the patch-size by dropout grid.
pub fn cost_heatmap(algorithm: Algorithm, cfg: &ViTConfig, cost: &CostModel, patches: &[usize], dropouts: &[f64]) -> Result<String> {
    let mut values = vec![vec![None; patches.len()]; dropouts.len()];
    for (ri, &d) in dropouts.iter().enumerate() {
        for (ci, &p) in patches.iter().enumerate() {
            let d_k = if algorithm.uses_momentum_encoder() { 0.0 } else { d };
            if let Ok(s) = CompressionStrategy::from_dropout(cfg, p, p, d, d_k) {
                values[ri][ci] = Some(cost.strategy_cost(algorithm, &s, cfg, 0, 0)?);
            }
        }
    }
    let rows: Vec<String> = dropouts.iter().map(|d| format!("{d}")).collect();
    let cols: Vec<String> = patches.iter().map(|p| p.to_string()).collect();
    Ok(svg::heatmap(&format!("{algorithm} sample cost"), "dropout ratio", "patch size", &rows, &cols, &values))
}
