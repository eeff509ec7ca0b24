//! Seeded cell-level noise injection with ground truth.
//!
//! A scenario first picks a fraction of rows, then corrupts a fixed number of
//! randomly chosen features inside each picked row. Real cells get additive
//! noise scaled by the feature's standard deviation; categorical cells are
//! replaced by a draw from the tempered marginal that excludes the clean
//! category.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{population_moments, Cell, FeatureKind, MixedTable, TableSchema};
use crate::nn::SeededRng;
use crate::{Error, Result};

/// Default fraction of features corrupted inside a selected row.
pub const DEFAULT_FEATURE_FRACTION: f64 = 0.2;

/// Additive noise process for real features. Every `k` multiplies the
/// feature's standard deviation and gives the distribution's scale parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RealNoise {
    Gaussian { mu: f64, k: f64 },
    /// Scale is the Laplace diversity `b` (std = √2·b).
    Laplace { mu: f64, k: f64 },
    /// `ζ = exp(N(mu, k·σ̂))`.
    LogNormal { mu: f64, k: f64 },
    /// Two Gaussian components `(mu, k, weight)`.
    GaussMix { components: [(f64, f64, f64); 2] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub real: RealNoise,
    /// Temperature of the categorical replacement distribution, in `[0, 1)`.
    pub beta: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let check_k = |k: f64| k > 0.0 && k.is_finite();
        match self.real {
            RealNoise::Gaussian { mu, k } | RealNoise::Laplace { mu, k } | RealNoise::LogNormal { mu, k } => {
                if !check_k(k) || !mu.is_finite() {
                    return bad(format!("noise scale must be positive and finite, got k={k}, mu={mu}"));
                }
            }
            RealNoise::GaussMix { components } => {
                for (mu, k, w) in components {
                    if !check_k(k) || !mu.is_finite() || !(0.0..=1.0).contains(&w) {
                        return bad(format!("invalid mixture component (mu={mu}, k={k}, w={w})"));
                    }
                }
                let total = components[0].2 + components[1].2;
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("mixture weights must sum to 1, got {total}"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("categorical temperature must lie in [0, 1), got {}", self.beta));
        }
        Ok(())
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let with_mu = |name: &str, mu: f64, k: f64| {
            if mu == 0.0 {
                format!("{name}:{k}")
            } else {
                format!("{name}:{k}@{mu}")
            }
        };
        let real = match self.real {
            RealNoise::Gaussian { mu, k } => with_mu("gauss", mu, k),
            RealNoise::Laplace { mu, k } => with_mu("laplace", mu, k),
            RealNoise::LogNormal { mu, k } => with_mu("lognorm", mu, k),
            RealNoise::GaussMix { components: [a, b] } => {
                format!("gmix:{},{},{},{},{},{}", a.0, a.1, a.2, b.0, b.1, b.2)
            }
        };
        write!(f, "{real},cat:{}", self.beta)
    }
}

/// Parses `gauss:K | laplace:K | lognorm:K | gmix:M1,K1,W1,M2,K2,W2`,
/// optionally followed by `,cat:BETA` (default 0). `K@MU` sets a non-zero
/// location for the single-distribution processes.
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("noise spec {text:?}: {m}"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("{s:?} is not a number")));

        // group comma-separated tokens under the most recent `name:` prefix
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for token in text.split(',') {
            let token = token.trim();
            match token.split_once(':') {
                Some((name, value)) => groups.push((name.trim().to_ascii_lowercase(), vec![value.to_string()])),
                None => match groups.last_mut() {
                    Some((_, values)) => values.push(token.to_string()),
                    None => return Err(bad("expected name:value".into())),
                },
            }
        }

        let mut real = None;
        let mut beta = None;
        for (name, values) in groups {
            let single = |values: &[String]| -> Result<(f64, f64)> {
                if values.len() != 1 {
                    return Err(bad(format!("{name} takes one value")));
                }
                match values[0].split_once('@') {
                    Some((k, mu)) => Ok((num(mu)?, num(k)?)),
                    None => Ok((0.0, num(&values[0])?)),
                }
            };
            let parsed = match name.as_str() {
                "cat" => {
                    if beta.is_some() {
                        return Err(bad("cat given twice".into()));
                    }
                    if values.len() != 1 {
                        return Err(bad("cat takes one value".into()));
                    }
                    beta = Some(num(&values[0])?);
                    continue;
                }
                "gauss" => single(&values).map(|(mu, k)| RealNoise::Gaussian { mu, k })?,
                "laplace" => single(&values).map(|(mu, k)| RealNoise::Laplace { mu, k })?,
                "lognorm" => single(&values).map(|(mu, k)| RealNoise::LogNormal { mu, k })?,
                "gmix" => {
                    if values.len() != 6 {
                        return Err(bad("gmix takes six values M1,K1,W1,M2,K2,W2".into()));
                    }
                    let v: Vec<f64> = values.iter().map(|s| num(s)).collect::<Result<_>>()?;
                    RealNoise::GaussMix {
                        components: [(v[0], v[1], v[2]), (v[3], v[4], v[5])],
                    }
                }
                other => return Err(bad(format!("unknown process {other:?}"))),
            };
            if real.replace(parsed).is_some() {
                return Err(bad("more than one real-valued process".into()));
            }
        }
        let spec = NoiseSpec {
            real: real.ok_or_else(|| bad("missing real-valued process".into()))?,
            beta: beta.unwrap_or(0.0),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn round_half_up(x: f64) -> usize {
    // guard against products like 0.05 * 1000 landing a hair below the half
    (x + 0.5 + 1e-9).floor() as usize
}

/// Number of rows and per-row features [`select_cells`] corrupts.
pub fn selection_counts(n_rows: usize, n_cols: usize, row_frac: f64, feat_frac: f64) -> Result<(usize, usize)> {
    if !(row_frac > 0.0) {
        return Err(Error::InvalidConfig("row fraction must be positive".into()));
    }
    if row_frac > 1.0 {
        return Err(Error::InvalidConfig(format!("row fraction must be at most 1, got {row_frac}")));
    }
    if !(feat_frac > 0.0 && feat_frac <= 1.0) {
        return Err(Error::InvalidConfig(format!("feature fraction must lie in (0, 1], got {feat_frac}")));
    }
    let rows = round_half_up(row_frac * n_rows as f64).min(n_rows);
    let feats = round_half_up(feat_frac * n_cols as f64).clamp(1, n_cols.max(1));
    Ok((rows, feats))
}

/// Picks `round(row_frac·N)` distinct rows and, independently in each, a
/// fresh set of `round(feat_frac·D)` distinct features (at least one).
pub fn select_cells(
    n_rows: usize,
    n_cols: usize,
    row_frac: f64,
    feat_frac: f64,
    rng: &mut SeededRng,
) -> Result<Array2<bool>> {
    let (rows, feats) = selection_counts(n_rows, n_cols, row_frac, feat_frac)?;
    let mut mask = Array2::from_elem((n_rows, n_cols), false);
    let mut chosen = sample(rng, n_rows, rows).into_vec();
    chosen.sort_unstable();
    for n in chosen {
        for d in sample(rng, n_cols, feats) {
            mask[(n, d)] = true;
        }
    }
    Ok(mask)
}

fn laplace(rng: &mut SeededRng, scale: f64) -> f64 {
    loop {
        let u = rng.uniform() - 0.5;
        if u != -0.5 {
            return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Returns `value + ζ` with `ζ` drawn from `noise` at scale `k·sigma`.
pub fn corrupt_real(value: f64, noise: &RealNoise, sigma: f64, rng: &mut SeededRng) -> f64 {
    let zeta = match *noise {
        RealNoise::Gaussian { mu, k } => mu + k * sigma * rng.standard_normal(),
        RealNoise::Laplace { mu, k } => mu + laplace(rng, k * sigma),
        RealNoise::LogNormal { mu, k } => (mu + k * sigma * rng.standard_normal()).exp(),
        RealNoise::GaussMix { components } => {
            let (mu, k, _) = components[rng.categorical(&[components[0].2, components[1].2])];
            mu + k * sigma * rng.standard_normal()
        }
    };
    value + zeta
}

/// Replacement probabilities `∝ p_c^β` over categories other than `clean`.
pub fn tempered_distribution(clean: usize, beta: f64, marginal: &[f64]) -> Result<Vec<f64>> {
    if marginal.len() < 2 || clean >= marginal.len() {
        return Err(Error::Corruption(format!(
            "need at least two categories and a valid clean index, got {} categories and index {clean}",
            marginal.len()
        )));
    }
    // powf(0, 0) = 1, so β = 0 is uniform over the other categories
    let mut w: Vec<f64> = marginal
        .iter()
        .enumerate()
        .map(|(c, &p)| if c == clean { 0.0 } else { p.powf(beta) })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Corruption("all other categories have zero marginal mass".into()));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Draws a category different from `clean` from the tempered marginal.
pub fn corrupt_categorical(clean: usize, beta: f64, marginal: &[f64], rng: &mut SeededRng) -> Result<usize> {
    Ok(rng.categorical(&tempered_distribution(clean, beta, marginal)?))
}

/// Ground truth of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub mask: Array2<bool>,
    /// `(row, feature, clean cell)` for every masked cell, row-major order.
    pub originals: Vec<(usize, usize, Cell)>,
    pub row_fraction: f64,
    pub feature_fraction: f64,
    pub seed: u64,
    /// Canonical text of the noise spec.
    pub noise: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    seed: u64,
    row_fraction: f64,
    feature_fraction: f64,
    noise: String,
    n_rows: usize,
    n_cols: usize,
    n_cells: usize,
}

impl CorruptionRecord {
    pub fn n_rows(&self) -> usize {
        self.mask.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.mask.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.originals.len()
    }

    pub fn is_corrupted(&self, n: usize, d: usize) -> bool {
        self.mask[(n, d)]
    }

    /// Row labels: true when the row holds at least one corrupted cell.
    pub fn row_labels(&self) -> Vec<bool> {
        self.mask.rows().into_iter().map(|r| r.iter().any(|&b| b)).collect()
    }

    /// Writes the clean values back into a copy of `dirty`.
    pub fn restore(&self, dirty: &MixedTable) -> Result<MixedTable> {
        if (dirty.n_rows(), dirty.n_cols()) != self.mask.dim() {
            return Err(Error::dim("table cells", self.mask.len(), dirty.n_rows() * dirty.n_cols()));
        }
        let mut clean = dirty.clone();
        for &(n, d, cell) in &self.originals {
            clean.set(n, d, cell)?;
        }
        Ok(clean)
    }

    /// One JSON header line, then CSV `row,column,original_value`.
    pub fn write<W: Write>(&self, schema: &TableSchema, mut writer: W) -> Result<()> {
        let header = RecordHeader {
            seed: self.seed,
            row_fraction: self.row_fraction,
            feature_fraction: self.feature_fraction,
            noise: self.noise.clone(),
            n_rows: self.n_rows(),
            n_cols: self.n_cols(),
            n_cells: self.n_cells(),
        };
        writeln!(writer, "{}", serde_json::to_string(&header)?)?;
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["row", "column", "original_value"])?;
        for &(n, d, cell) in &self.originals {
            let spec = schema.feature(d);
            wtr.write_record([n.to_string(), spec.name.clone(), cell.render(spec)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R, schema: &TableSchema) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: RecordHeader = serde_json::from_str(line.trim())
            .map_err(|e| Error::Data(format!("corruption record header: {e}")))?;
        if header.n_cols != schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "record covers {} features, schema has {}",
                header.n_cols,
                schema.len()
            )));
        }
        let mut mask = Array2::from_elem((header.n_rows, header.n_cols), false);
        let mut originals = Vec::with_capacity(header.n_cells);
        let mut rdr = csv::Reader::from_reader(reader);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let cell_err = |column: &str, message: String| Error::Cell {
                row: i + 1,
                column: column.to_string(),
                message,
            };
            if rec.len() != 3 {
                return Err(cell_err("", format!("expected 3 fields, found {}", rec.len())));
            }
            let n: usize = rec[0].trim().parse().map_err(|_| cell_err("row", format!("bad row index {:?}", &rec[0])))?;
            let d = schema
                .index_of(rec[1].trim())
                .ok_or_else(|| Error::SchemaMismatch(format!("record names unknown column {:?}", &rec[1])))?;
            if n >= header.n_rows {
                return Err(cell_err("row", format!("row index {n} out of range")));
            }
            let cell = Cell::parse(&rec[2], schema.feature(d)).map_err(|m| cell_err("original_value", m))?;
            if mask[(n, d)] {
                return Err(cell_err("row", format!("cell ({n}, {:?}) listed twice", &rec[1])));
            }
            mask[(n, d)] = true;
            originals.push((n, d, cell));
        }
        if originals.len() != header.n_cells {
            return Err(Error::Data(format!(
                "record header announces {} cells, file lists {}",
                header.n_cells,
                originals.len()
            )));
        }
        originals.sort_by_key(|&(n, d, _)| (n, d));
        Ok(CorruptionRecord {
            mask,
            originals,
            row_fraction: header.row_fraction,
            feature_fraction: header.feature_fraction,
            seed: header.seed,
            noise: header.noise,
        })
    }

    pub fn save(&self, schema: &TableSchema, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(schema, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(schema: &TableSchema, path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::fs::File::open(path)?, schema)
    }
}

/// Corrupts a raw (unstandardized) table. Returns the dirty table and the
/// record of every replaced cell.
pub fn make_scenario(
    table: &MixedTable,
    row_frac: f64,
    feat_frac: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<(MixedTable, CorruptionRecord)> {
    noise.validate()?;
    if table.is_standardized() {
        return Err(Error::Data("corruption is applied to raw values, not a standardized table".into()));
    }
    let (n_rows, n_cols) = (table.n_rows(), table.n_cols());
    let mut record = CorruptionRecord {
        mask: Array2::from_elem((n_rows, n_cols), false),
        originals: Vec::new(),
        row_fraction: row_frac,
        feature_fraction: feat_frac,
        seed,
        noise: noise.to_string(),
    };
    if row_frac == 0.0 {
        return Ok((table.clone(), record));
    }
    record.mask = select_cells(n_rows, n_cols, row_frac, feat_frac, &mut SeededRng::with_stream(seed, 0))?;

    let schema = table.schema();
    let mut sigma = vec![0.0; n_cols];
    let mut marginals = vec![Vec::new(); n_cols];
    for (d, spec) in schema.features().iter().enumerate() {
        if !record.mask.column(d).iter().any(|&b| b) {
            continue;
        }
        match &spec.kind {
            FeatureKind::Real => {
                let (_, std) = population_moments(&table.real_column(d));
                if !(std > 0.0) {
                    return Err(Error::Corruption(format!(
                        "real feature {:?} is constant, noise scale would be zero",
                        spec.name
                    )));
                }
                sigma[d] = std;
            }
            FeatureKind::Categorical { categories } => {
                let mut counts = vec![0.0; categories.len()];
                for c in table.cat_column(d) {
                    counts[c] += 1.0;
                }
                counts.iter_mut().for_each(|v| *v /= n_rows as f64);
                marginals[d] = counts;
            }
        }
    }

    let mut dirty = table.clone();
    for n in 0..n_rows {
        if !record.mask.row(n).iter().any(|&b| b) {
            continue;
        }
        // one stream per row keeps draws independent of other rows
        let mut rng = SeededRng::with_stream(seed, n as u64 + 1);
        for d in 0..n_cols {
            if !record.mask[(n, d)] {
                continue;
            }
            let clean = table.get(n, d);
            let corrupted = match clean {
                Cell::Real(v) => Cell::Real(corrupt_real(v, &noise.real, sigma[d], &mut rng)),
                Cell::Cat(c) => Cell::Cat(
                    corrupt_categorical(c, noise.beta, &marginals[d], &mut rng).map_err(|e| {
                        Error::Corruption(format!("feature {:?}: {e}", schema.feature(d).name))
                    })?,
                ),
            };
            dirty.set(n, d, corrupted)?;
            record.originals.push((n, d, clean));
        }
    }
    Ok((dirty, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;
    use proptest::prelude::*;

    fn table(n: usize, d_real: usize, seed: u64) -> MixedTable {
        let mut features: Vec<FeatureSpec> = (0..d_real).map(|i| FeatureSpec::real(format!("r{i}"))).collect();
        features.push(FeatureSpec::categorical("c", ["a", "b", "c"]));
        let schema = TableSchema::new(features).unwrap();
        let mut rng = SeededRng::new(seed);
        let rows = (0..n)
            .map(|_| {
                let mut r: Vec<Cell> = (0..d_real).map(|_| Cell::Real(rng.standard_normal() * 3.0 + 1.0)).collect();
                r.push(Cell::Cat(rng.categorical(&[0.6, 0.3, 0.1])));
                r
            })
            .collect();
        MixedTable::new(schema, rows).unwrap()
    }

    #[test]
    fn spec_grammar() {
        let s: NoiseSpec = "gauss:5,cat:0".parse().unwrap();
        assert_eq!(s.real, RealNoise::Gaussian { mu: 0.0, k: 5.0 });
        assert_eq!(s.beta, 0.0);
        let s: NoiseSpec = "gmix:0,1,0.3,2,4,0.7,cat:0.5".parse().unwrap();
        assert_eq!(
            s.real,
            RealNoise::GaussMix {
                components: [(0.0, 1.0, 0.3), (2.0, 4.0, 0.7)]
            }
        );
        assert_eq!(s.beta, 0.5);
        assert_eq!("laplace:4".parse::<NoiseSpec>().unwrap().beta, 0.0);
        assert_eq!("cat:0.2,lognorm:1@0.5".parse::<NoiseSpec>().unwrap().real, RealNoise::LogNormal { mu: 0.5, k: 1.0 });
        for bad in ["", "gauss", "gauss:0", "gauss:-1", "cat:0", "gauss:1,laplace:2", "gauss:1,cat:1", "gmix:0,1,0.3,2,4", "gmix:0,1,0.3,2,4,0.6", "foo:1", "gauss:x"] {
            assert!(bad.parse::<NoiseSpec>().is_err(), "{bad}");
        }
        for text in ["gauss:5,cat:0", "gmix:0,1,0.3,2,4,0.7,cat:0.5", "lognorm:1@-0.5,cat:0.25"] {
            let s: NoiseSpec = text.parse().unwrap();
            assert_eq!(s.to_string(), text);
            assert_eq!(s.to_string().parse::<NoiseSpec>().unwrap(), s);
        }
    }

    #[test]
    fn selection_accounting() {
        let mask = select_cells(1000, 10, 0.05, 0.2, &mut SeededRng::new(1)).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 100);
        let rows = mask.rows().into_iter().filter(|r| r.iter().any(|&b| b)).count();
        assert_eq!(rows, 50);
        for r in mask.rows() {
            let c = r.iter().filter(|&&b| b).count();
            assert!(c == 0 || c == 2);
        }
        let all = select_cells(7, 3, 1.0, 1.0, &mut SeededRng::new(1)).unwrap();
        assert!(all.iter().all(|&b| b));
        assert_eq!(mask, select_cells(1000, 10, 0.05, 0.2, &mut SeededRng::new(1)).unwrap());
    }

    #[test]
    fn selection_errors_and_minimum() {
        let rng = &mut SeededRng::new(0);
        assert_eq!(
            select_cells(10, 3, 0.0, 0.2, rng).unwrap_err().to_string(),
            "invalid configuration: row fraction must be positive"
        );
        assert!(select_cells(10, 3, 1.5, 0.2, rng).is_err());
        assert!(select_cells(10, 3, 0.5, 0.0, rng).is_err());
        // 0.2 × 2 rounds to 0; one feature per row is still corrupted
        assert_eq!(selection_counts(10, 2, 0.5, 0.2).unwrap(), (5, 1));
    }

    #[test]
    fn gaussian_noise_moments() {
        let mut rng = SeededRng::new(3);
        let noise = RealNoise::Gaussian { mu: 0.0, k: 5.0 };
        let draws: Vec<f64> = (0..100_000).map(|_| corrupt_real(10.0, &noise, 0.7, &mut rng) - 10.0).collect();
        let (_, std) = population_moments(&draws);
        assert!((std / 3.5 - 1.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn laplace_noise_moments() {
        let mut rng = SeededRng::new(4);
        let noise = RealNoise::Laplace { mu: 0.0, k: 4.0 };
        let draws: Vec<f64> = (0..100_000).map(|_| corrupt_real(0.0, &noise, 1.5, &mut rng)).collect();
        let (mean, std) = population_moments(&draws);
        assert!((std / (2f64.sqrt() * 6.0) - 1.0).abs() < 0.03, "{std}");
        assert!(mean.abs() < 0.1);
    }

    #[test]
    fn noise_is_a_shift() {
        for noise in [
            RealNoise::Gaussian { mu: 1.0, k: 2.0 },
            RealNoise::LogNormal { mu: 0.0, k: 0.5 },
            RealNoise::GaussMix {
                components: [(-3.0, 1.0, 0.5), (3.0, 1.0, 0.5)],
            },
        ] {
            let a = corrupt_real(0.0, &noise, 1.0, &mut SeededRng::new(9));
            let b = corrupt_real(100.0, &noise, 1.0, &mut SeededRng::new(9));
            assert!(((b - 100.0) - a).abs() < 1e-12);
        }
        // log-normal noise is strictly positive
        let mut rng = SeededRng::new(2);
        assert!((0..1000).all(|_| corrupt_real(0.0, &RealNoise::LogNormal { mu: 0.0, k: 1.0 }, 1.0, &mut rng) > 0.0));
    }

    #[test]
    fn tempered_values() {
        let p = tempered_distribution(0, 0.5, &[0.7, 0.2, 0.1]).unwrap();
        let (a, b) = (0.2f64.sqrt(), 0.1f64.sqrt());
        assert!((p[1] - a / (a + b)).abs() < 1e-12);
        assert!((p[1] - 0.585_786_437_626_905).abs() < 1e-9);
        assert!((p[2] - 0.414_213_562_373_095).abs() < 1e-9);
        assert_eq!(p[0], 0.0);
        let u = tempered_distribution(1, 0.0, &[0.9, 0.1, 0.0, 0.0]).unwrap();
        assert_eq!(u, vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!(tempered_distribution(0, 0.5, &[1.0, 0.0]).is_err());
        let mut rng = SeededRng::new(5);
        assert!((0..500).all(|_| corrupt_categorical(2, 0.3, &[0.2, 0.2, 0.6], &mut rng).unwrap() != 2));
    }

    #[test]
    fn scenario_round_trip() {
        let clean = table(200, 4, 8);
        let spec: NoiseSpec = "gauss:5,cat:0".parse().unwrap();
        let (dirty, rec) = make_scenario(&clean, 0.1, 0.2, &spec, 42).unwrap();
        assert_eq!(rec.n_cells(), 20);
        for n in 0..200 {
            for d in 0..5 {
                assert_eq!(dirty.get(n, d) != clean.get(n, d), rec.is_corrupted(n, d));
            }
        }
        assert_eq!(rec.restore(&dirty).unwrap(), clean);
        let (dirty2, rec2) = make_scenario(&clean, 0.1, 0.2, &spec, 42).unwrap();
        assert_eq!((dirty2, rec2.clone()), (dirty.clone(), rec.clone()));

        let mut buf = Vec::new();
        rec.write(clean.schema(), &mut buf).unwrap();
        let back = CorruptionRecord::read(buf.as_slice(), clean.schema()).unwrap();
        assert_eq!(back, rec);

        let (same, empty) = make_scenario(&clean, 0.0, 0.2, &spec, 42).unwrap();
        assert_eq!(same, clean);
        assert_eq!(empty.n_cells(), 0);
        assert!(make_scenario(&clean.standardize().unwrap(), 0.1, 0.2, &spec, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn scenario_invariants(seed in 0u64..1000, row_frac in 0.01f64..1.0, d_real in 1usize..6, n in 5usize..80) {
            let clean = table(n, d_real, seed);
            let spec: NoiseSpec = "laplace:3,cat:0.5".parse().unwrap();
            let (dirty, rec) = make_scenario(&clean, row_frac, 0.2, &spec, seed).unwrap();
            let (rows, feats) = selection_counts(n, d_real + 1, row_frac, 0.2).unwrap();
            prop_assert_eq!(rec.n_cells(), rows * feats);
            for i in 0..n {
                for d in 0..=d_real {
                    prop_assert_eq!(dirty.get(i, d) != clean.get(i, d), rec.is_corrupted(i, d));
                }
            }
            prop_assert_eq!(rec.restore(&dirty).unwrap(), clean);
        }
    }
}
