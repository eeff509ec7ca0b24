//! Detection and repair metrics against a corruption record.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionRecord;
use crate::data::{Cell, FeatureKind, MixedTable, Standardization, TableSchema};
use crate::repair::Simplexes;
use crate::scoring::ScoreReport;
use crate::{Error, Result};

/// Step-interpolated average precision: `Σ_k (R_k − R_{k−1})·P_k` over
/// descending score thresholds, equal scores forming a single threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Metric("average precision needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// `Σ(t − r)² / Σ t²` for standardized truths `t` and repairs `r`.
pub fn smse(truth: &[f64], repaired: &[f64]) -> Result<f64> {
    if truth.len() != repaired.len() {
        return Err(Error::dim("repaired values", truth.len(), repaired.len()));
    }
    if truth.is_empty() {
        return Err(Error::Metric("SMSE needs at least one corrupted cell".into()));
    }
    let denom: f64 = truth.iter().map(|t| t * t).sum();
    if denom == 0.0 {
        return Err(Error::Metric("SMSE is undefined: every truth equals the feature mean".into()));
    }
    let num: f64 = truth.iter().zip(repaired).map(|(t, r)| (t - r).powi(2)).sum();
    Ok(num / denom)
}

/// Half the mean squared distance between one-hot truths and simplexes.
pub fn brier(truth: &[usize], simplexes: &[&[f64]]) -> Result<f64> {
    if truth.len() != simplexes.len() {
        return Err(Error::dim("simplexes", truth.len(), simplexes.len()));
    }
    if truth.is_empty() {
        return Err(Error::Metric("Brier score needs at least one cell".into()));
    }
    let mut total = 0.0;
    for (&t, p) in truth.iter().zip(simplexes) {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0 + 1e-12).contains(v)) {
            return Err(Error::Metric(format!("invalid simplex {p:?}")));
        }
        if t >= p.len() {
            return Err(Error::Metric(format!("category {t} outside a simplex of size {}", p.len())));
        }
        total += p
            .iter()
            .enumerate()
            .map(|(c, &v)| (if c == t { 1.0 } else { 0.0 } - v).powi(2))
            .sum::<f64>();
    }
    Ok(total / (2.0 * truth.len() as f64))
}

/// A repaired table and its categorical simplexes.
#[derive(Debug, Clone, Copy)]
pub struct RepairInput<'a> {
    /// Repaired values in original units.
    pub table: &'a MixedTable,
    pub simplexes: &'a Simplexes,
    pub method: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub seed: u64,
    pub row_fraction: f64,
    pub feature_fraction: f64,
    pub noise: String,
    pub n_rows: usize,
    pub n_features: usize,
    pub n_corrupted_cells: usize,
    pub n_corrupted_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature: String,
    pub kind: String,
    pub n_corrupted: usize,
    pub cell_avpr: Option<f64>,
    pub smse: Option<f64>,
    pub brier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: ScenarioInfo,
    pub score_rule: Option<String>,
    pub repair_method: Option<String>,
    pub row_avpr: Option<f64>,
    /// Mean cell AVPR over features with at least one corrupted cell.
    pub macro_cell_avpr: Option<f64>,
    pub macro_cell_avpr_real: Option<f64>,
    pub macro_cell_avpr_categorical: Option<f64>,
    pub mean_smse_real: Option<f64>,
    pub mean_brier_categorical: Option<f64>,
    /// Features left out of the averages because nothing was corrupted.
    pub features_without_corruption: usize,
    pub features: Vec<FeatureReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// `metric,feature,value` rows; aggregate metrics use an empty feature.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["metric", "feature", "value"])?;
        let mut put = |metric: &str, feature: &str, v: Option<f64>| -> Result<()> {
            if let Some(v) = v {
                wtr.write_record([metric, feature, &v.to_string()])?;
            }
            Ok(())
        };
        put("row_avpr", "", self.row_avpr)?;
        put("macro_cell_avpr", "", self.macro_cell_avpr)?;
        put("macro_cell_avpr_real", "", self.macro_cell_avpr_real)?;
        put("macro_cell_avpr_categorical", "", self.macro_cell_avpr_categorical)?;
        put("mean_smse_real", "", self.mean_smse_real)?;
        put("mean_brier_categorical", "", self.mean_brier_categorical)?;
        for f in &self.features {
            put("cell_avpr", &f.feature, f.cell_avpr)?;
            put("smse", &f.feature, f.smse)?;
            put("brier", &f.feature, f.brier)?;
        }
        drop(put);
        wtr.flush()?;
        Ok(())
    }
}

/// Scores and/or repairs a scenario. `stats` are the dirty table's
/// statistics; SMSE is computed in those standardized units.
pub fn evaluate(
    schema: &TableSchema,
    record: &CorruptionRecord,
    stats: &Standardization,
    scores: Option<&ScoreReport>,
    repair: Option<RepairInput<'_>>,
) -> Result<EvalReport> {
    let (n_rows, n_cols) = (record.n_rows(), record.n_cols());
    if n_cols != schema.len() || stats.stats.len() != n_cols {
        return Err(Error::SchemaMismatch(format!(
            "record has {n_cols} features, schema {}, statistics {}",
            schema.len(),
            stats.stats.len()
        )));
    }
    if let Some(s) = scores {
        if s.cells.dim() != (n_rows, n_cols) {
            return Err(Error::SchemaMismatch(format!(
                "scores cover {:?} cells, record {:?}",
                s.cells.dim(),
                (n_rows, n_cols)
            )));
        }
    }
    if let Some(r) = &repair {
        schema.ensure_matches(r.table.schema())?;
        if r.table.n_rows() != n_rows || r.simplexes.len() != n_cols {
            return Err(Error::SchemaMismatch("repaired table does not match the record's shape".into()));
        }
    }

    let row_labels = record.row_labels();
    let n_corrupted_rows = row_labels.iter().filter(|&&l| l).count();
    let row_avpr = match scores {
        Some(s) if n_corrupted_rows > 0 => Some(average_precision(&s.rows, &row_labels)?),
        _ => None,
    };

    let mut features = Vec::with_capacity(n_cols);
    for (d, spec) in schema.features().iter().enumerate() {
        let labels: Vec<bool> = record.mask.column(d).to_vec();
        let truths: Vec<(usize, Cell)> = record
            .originals
            .iter()
            .filter(|&&(_, fd, _)| fd == d)
            .map(|&(n, _, c)| (n, c))
            .collect();
        let n_corrupted = truths.len();
        let cell_avpr = match scores {
            Some(s) if n_corrupted > 0 => Some(average_precision(&s.cells.column(d).to_vec(), &labels)?),
            _ => None,
        };
        let (mut smse_d, mut brier_d) = (None, None);
        if let (Some(r), true) = (&repair, n_corrupted > 0) {
            match &spec.kind {
                FeatureKind::Real => {
                    let t: Vec<f64> = truths.iter().map(|&(_, c)| stats.forward(d, c.as_real().expect("real"))).collect();
                    let x: Vec<f64> = truths
                        .iter()
                        .map(|&(n, _)| stats.forward(d, r.table.get(n, d).as_real().expect("real")))
                        .collect();
                    smse_d = Some(
                        smse(&t, &x).map_err(|e| Error::Metric(format!("feature {:?}: {e}", spec.name)))?,
                    );
                }
                FeatureKind::Categorical { .. } => {
                    let m = r.simplexes[d]
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("no simplexes for feature {:?}", spec.name)))?;
                    let t: Vec<usize> = truths.iter().map(|&(_, c)| c.as_cat().expect("categorical")).collect();
                    let p: Vec<&[f64]> = truths.iter().map(|&(n, _)| m.row(n).to_slice().expect("row-major")).collect();
                    brier_d = Some(brier(&t, &p)?);
                }
            }
        }
        features.push(FeatureReport {
            feature: spec.name.clone(),
            kind: if spec.is_real() { "real" } else { "categorical" }.into(),
            n_corrupted,
            cell_avpr,
            smse: smse_d,
            brier: brier_d,
        });
    }

    let avpr_of = |want: Option<bool>| {
        mean(
            features
                .iter()
                .filter(|f| want.is_none_or(|real| (f.kind == "real") == real))
                .filter_map(|f| f.cell_avpr),
        )
    };
    Ok(EvalReport {
        scenario: ScenarioInfo {
            seed: record.seed,
            row_fraction: record.row_fraction,
            feature_fraction: record.feature_fraction,
            noise: record.noise.clone(),
            n_rows,
            n_features: n_cols,
            n_corrupted_cells: record.n_cells(),
            n_corrupted_rows,
        },
        score_rule: scores.map(|s| s.rule.to_string()),
        repair_method: repair.map(|r| r.method.to_string()),
        row_avpr,
        macro_cell_avpr: avpr_of(None),
        macro_cell_avpr_real: avpr_of(Some(true)),
        macro_cell_avpr_categorical: avpr_of(Some(false)),
        mean_smse_real: mean(features.iter().filter_map(|f| f.smse)),
        mean_brier_categorical: mean(features.iter().filter_map(|f| f.brier)),
        features_without_corruption: features.iter().filter(|f| f.n_corrupted == 0).count(),
        features,
    })
}
