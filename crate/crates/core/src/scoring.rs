//! Cell and row outlier scores.
//!
//! Two rules are available: `nll` scores a cell by its negative clean
//! log-likelihood under a posterior sample, `pi` by the negative log
//! probability that the cell is clean. Row scores are sums of cell scores.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, MixedTable, TableSchema};
use crate::generative::{neg_log_pi, objective, Gate};
use crate::nn::{softplus, SeededRng};
use crate::training::{ModelKind, RvaeModel};
use crate::{Error, Result};

/// Rows handled together; chunk boundaries never depend on the thread count.
pub const CHUNK_ROWS: usize = 256;

/// Column label used for row-level scores in score files.
pub const ROW_LABEL: &str = "__row__";

/// Runs `f` over fixed row chunks, on `threads` workers when `threads > 1`,
/// and returns the per-chunk results in row order.
pub(crate) fn map_chunks<T, F>(n_rows: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    let ranges: Vec<Range<usize>> = (0..n_rows)
        .step_by(CHUNK_ROWS)
        .map(|s| s..(s + CHUNK_ROWS).min(n_rows))
        .collect();
    if threads <= 1 {
        return ranges.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    pool.install(|| ranges.into_par_iter().map(&f).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreRule {
    Nll,
    Pi,
}

impl fmt::Display for ScoreRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreRule::Nll => "nll",
            ScoreRule::Pi => "pi",
        })
    }
}

impl FromStr for ScoreRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(ScoreRule::Nll),
            "pi" => Ok(ScoreRule::Pi),
            other => Err(Error::InvalidConfig(format!("unknown score rule {other:?} (expected nll or pi)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub rule: ScoreRule,
    /// `N × D` cell scores; higher means more likely an outlier.
    pub cells: Array2<f64>,
    /// Per-row sums of the cell scores.
    pub rows: Vec<f64>,
}

impl ScoreReport {
    pub fn from_cells(rule: ScoreRule, cells: Array2<f64>) -> Result<Self> {
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cell scores".into()));
        }
        let rows = cells.rows().into_iter().map(|r| r.sum()).collect();
        Ok(ScoreReport { rule, cells, rows })
    }

    /// Long CSV: `row_id,feature,rule,score`, each row's cells followed by
    /// its row score under the feature name `__row__`.
    pub fn write_csv<W: Write>(&self, schema: &TableSchema, writer: W) -> Result<()> {
        if self.cells.ncols() != schema.len() {
            return Err(Error::dim("score columns", schema.len(), self.cells.ncols()));
        }
        let rule = self.rule.to_string();
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["row_id", "feature", "rule", "score"])?;
        for (n, row) in self.cells.rows().into_iter().enumerate() {
            let id = n.to_string();
            for (d, v) in row.iter().enumerate() {
                wtr.write_record([id.as_str(), schema.feature(d).name.as_str(), rule.as_str(), &v.to_string()])?;
            }
            wtr.write_record([id.as_str(), ROW_LABEL, rule.as_str(), &self.rows[n].to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, schema: &TableSchema) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
        let mut row_scores: Vec<Option<f64>> = Vec::new();
        let mut rule: Option<ScoreRule> = None;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let err = |column: &str, message: String| Error::Cell {
                row: i + 1,
                column: column.into(),
                message,
            };
            if rec.len() != 4 {
                return Err(err("", format!("expected 4 fields, found {}", rec.len())));
            }
            let n: usize = rec[0].trim().parse().map_err(|_| err("row_id", format!("bad row id {:?}", &rec[0])))?;
            let r: ScoreRule = rec[2].trim().parse().map_err(|e: Error| err("rule", e.to_string()))?;
            if *rule.get_or_insert(r) != r {
                return Err(err("rule", "score file mixes rules".into()));
            }
            let v: f64 = rec[3].trim().parse().map_err(|_| err("score", format!("bad score {:?}", &rec[3])))?;
            if n >= cells.len() {
                cells.resize(n + 1, vec![None; schema.len()]);
                row_scores.resize(n + 1, None);
            }
            let feature = rec[1].trim();
            if feature == ROW_LABEL {
                row_scores[n] = Some(v);
            } else {
                let d = schema
                    .index_of(feature)
                    .ok_or_else(|| Error::SchemaMismatch(format!("score file names unknown feature {feature:?}")))?;
                cells[n][d] = Some(v);
            }
        }
        let n_rows = cells.len();
        if n_rows == 0 {
            return Err(Error::Data("score file has no rows".into()));
        }
        let mut matrix = Array2::zeros((n_rows, schema.len()));
        for (n, row) in cells.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                matrix[(n, d)] = v.ok_or_else(|| {
                    Error::Data(format!("score file lacks row {n}, feature {:?}", schema.feature(d).name))
                })?;
            }
        }
        let rows = row_scores
            .into_iter()
            .enumerate()
            .map(|(n, v)| v.ok_or_else(|| Error::Data(format!("score file lacks the row score of row {n}"))))
            .collect::<Result<Vec<f64>>>()?;
        Ok(ScoreReport {
            rule: rule.expect("at least one record"),
            cells: matrix,
            rows,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreOptions {
    pub seed: u64,
    /// Posterior samples averaged per row.
    pub mc_samples: usize,
    pub threads: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            seed: 0,
            mc_samples: 1,
            threads: 1,
        }
    }
}

/// One random stream per table row, so draws never depend on chunking.
pub(crate) fn row_streams(seed: u64, rows: Range<usize>) -> Vec<SeededRng> {
    rows.map(|n| SeededRng::with_stream(seed, n as u64)).collect()
}

/// Scores every cell of `table` (raw, or standardized with the model's
/// statistics).
pub fn score(model: &RvaeModel, table: &MixedTable, rule: ScoreRule, opts: &ScoreOptions) -> Result<ScoreReport> {
    if rule == ScoreRule::Pi && model.kind() == ModelKind::Vae {
        return Err(Error::PiRuleUnavailable(
            "the pi rule needs a robust model; this checkpoint is a plain vae".into(),
        ));
    }
    if opts.mc_samples == 0 {
        return Err(Error::InvalidConfig("mc_samples must be at least 1".into()));
    }
    let table = model.prepare(table)?;
    let net = &model.network;
    let comps = model.components();
    let alpha = model.config.alpha;
    let latent = net.latent_dim();
    let d = table.n_cols();

    let chunks = map_chunks(table.n_rows(), opts.threads, |range| {
        let rows: Vec<&[Cell]> = range.clone().map(|n| table.row(n)).collect();
        let b = rows.len();
        if rule == ScoreRule::Pi && model.kind() == ModelKind::RvaeAvi {
            let tau = net.pi_encoder.as_ref().expect("validated amortized model");
            let u = tau.predict(net.encode(&rows, None).view())?;
            return Ok(u.mapv(|u| softplus(-u)));
        }
        let mut rngs = row_streams(opts.seed, range);
        let mut acc = Array2::<f64>::zeros((b, d));
        for _ in 0..opts.mc_samples {
            let eps = Array2::from_shape_fn((b, latent), |(n, _)| rngs[n].standard_normal());
            let obj = objective(net, &comps, &rows, eps.view(), Gate::Ungated, false)?;
            match rule {
                ScoreRule::Nll => acc -= &obj.log_lik_clean,
                ScoreRule::Pi => acc += &(&obj.log_lik_clean - &obj.log_lik_outlier),
            }
        }
        acc /= opts.mc_samples as f64;
        if rule == ScoreRule::Pi {
            acc.mapv_inplace(|r| neg_log_pi(r, alpha));
        }
        Ok(acc)
    })?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let cells = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
    ScoreReport::from_cells(rule, cells)
}

/// Cell gate probabilities: the closed-form update for coordinate models, τ
/// for amortized ones, from one posterior sample per row.
pub fn cell_pi(model: &RvaeModel, table: &MixedTable, seed: u64, threads: usize) -> Result<Array2<f64>> {
    let opts = ScoreOptions {
        seed,
        mc_samples: 1,
        threads,
    };
    Ok(score(model, table, ScoreRule::Pi, &opts)?.cells.mapv(|s| (-s).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;
    use crate::training::{train, TrainConfig};

    fn table() -> MixedTable {
        let schema = TableSchema::new(vec![
            FeatureSpec::real("x"),
            FeatureSpec::categorical("c", ["a", "b", "c"]),
            FeatureSpec::real("y"),
        ])
        .unwrap();
        let mut rng = SeededRng::new(3);
        let rows = (0..300)
            .map(|_| {
                let h = rng.standard_normal();
                vec![Cell::Real(h), Cell::Cat(usize::from(h > 0.0)), Cell::Real(h * 2.0 + 0.1 * rng.standard_normal())]
            })
            .collect();
        MixedTable::new(schema, rows).unwrap()
    }

    fn model(kind: ModelKind) -> (RvaeModel, MixedTable) {
        let raw = table();
        let cfg = TrainConfig {
            kind,
            epochs: 2,
            batch_size: 50,
            hidden_dim: 12,
            latent_dim: 2,
            embedding_dim: 3,
            ..TrainConfig::default()
        };
        (train(&raw.standardize().unwrap(), &cfg).unwrap().0, raw)
    }

    #[test]
    fn pi_rule_reference_values() {
        // π̂ = 0.5 on both cells gives 2 ln 2
        let r = -crate::nn::logit(0.95);
        let cells = ndarray::array![[neg_log_pi(r, 0.95), neg_log_pi(r, 0.95)], [0.0, 0.0]];
        let rep = ScoreReport::from_cells(ScoreRule::Pi, cells).unwrap();
        assert!((rep.rows[0] - 1.386_294_361_119_890_6).abs() < 1e-12);
        assert_eq!(rep.rows[1], 0.0);
    }

    #[test]
    fn rule_on_plain_vae_is_an_error() {
        let (m, raw) = model(ModelKind::Vae);
        assert!(matches!(
            score(&m, &raw, ScoreRule::Pi, &ScoreOptions::default()),
            Err(Error::PiRuleUnavailable(_))
        ));
        assert!(score(&m, &raw, ScoreRule::Nll, &ScoreOptions::default()).is_ok());
    }

    #[test]
    fn rows_sum_cells_and_threads_do_not_matter() {
        for kind in [ModelKind::RvaeCvi, ModelKind::RvaeAvi] {
            let (m, raw) = model(kind);
            for rule in [ScoreRule::Nll, ScoreRule::Pi] {
                let one = score(&m, &raw, rule, &ScoreOptions::default()).unwrap();
                let many = score(&m, &raw, rule, &ScoreOptions { threads: 3, ..ScoreOptions::default() }).unwrap();
                assert_eq!(one, many);
                for (n, row) in one.cells.rows().into_iter().enumerate() {
                    assert!((row.sum() - one.rows[n]).abs() < 1e-12);
                }
                if rule == ScoreRule::Pi {
                    assert!(one.cells.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn standardized_input_matches_raw_input() {
        let (m, raw) = model(ModelKind::RvaeCvi);
        let std = m.prepare(&raw).unwrap();
        let opts = ScoreOptions::default();
        assert_eq!(score(&m, &raw, ScoreRule::Nll, &opts).unwrap(), score(&m, &std, ScoreRule::Nll, &opts).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let (m, raw) = model(ModelKind::RvaeCvi);
        let rep = score(&m, &raw, ScoreRule::Pi, &ScoreOptions::default()).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(raw.schema(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row_id,feature,rule,score\n0,x,pi,"));
        assert!(text.contains(",__row__,pi,"));
        assert_eq!(ScoreReport::read_csv(buf.as_slice(), raw.schema()).unwrap(), rep);
    }

    #[test]
    fn shared_offset_leaves_pi_unchanged() {
        // π̂ depends on the log-likelihoods only through their difference
        for (lp, lp0) in [(-1.0, -3.0), (-10.0, -2.5), (0.3, 0.1)] {
            for c in [-7.0, 0.5, 12.0] {
                let a = crate::generative::pi_update(lp - lp0, 0.9);
                let b = crate::generative::pi_update((lp + c) - (lp0 + c), 0.9);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
