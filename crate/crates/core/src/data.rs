//! Schema, mixed-type table storage, standardization and categorical
//! encodings (learned embeddings for model input, one-hot for metrics).

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::nn::{ParamView, ParamViewMut, Parameters, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Real,
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn real(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Real,
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self.kind, FeatureKind::Real)
    }

    /// Number of categories, `None` for real features.
    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Real => None,
            FeatureKind::Categorical { categories } => Some(categories.len()),
        }
    }

    pub fn categories(&self) -> &[String] {
        match &self.kind {
            FeatureKind::Real => &[],
            FeatureKind::Categorical { categories } => categories,
        }
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories().iter().position(|c| c == label)
    }
}

/// Ordered feature list. Serialized as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableSchema {
    features: Vec<FeatureSpec>,
}

impl TableSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let schema = TableSchema { features };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::InvalidSchema("schema has no features".into()));
        }
        let mut names = HashSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate feature name {:?}", f.name)));
            }
            if let FeatureKind::Categorical { categories } = &f.kind {
                if categories.len() < 2 {
                    return Err(Error::InvalidSchema(format!(
                        "categorical feature {:?} needs at least 2 categories",
                        f.name
                    )));
                }
                let unique: HashSet<&String> = categories.iter().collect();
                if unique.len() != categories.len() {
                    return Err(Error::InvalidSchema(format!("feature {:?} has duplicate category labels", f.name)));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let schema: TableSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature(&self, d: usize) -> &FeatureSpec {
        &self.features[d]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn real_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&d| self.features[d].is_real()).collect()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&d| !self.features[d].is_real()).collect()
    }

    /// Width of the encoder input: one column per real feature, `embedding_dim`
    /// per categorical feature.
    pub fn encoded_width(&self, embedding_dim: usize) -> usize {
        self.features
            .iter()
            .map(|f| if f.is_real() { 1 } else { embedding_dim })
            .sum()
    }

    /// Describes the first difference against `other`, if any.
    pub fn mismatch(&self, other: &TableSchema) -> Option<String> {
        if self.len() != other.len() {
            return Some(format!("expected {} features, found {}", self.len(), other.len()));
        }
        for (d, (a, b)) in self.features.iter().zip(&other.features).enumerate() {
            if a.name != b.name {
                return Some(format!("feature {d}: expected {:?}, found {:?}", a.name, b.name));
            }
            if a.kind != b.kind {
                return Some(format!("feature {:?}: type or category labels differ", a.name));
            }
        }
        None
    }

    pub fn ensure_matches(&self, other: &TableSchema) -> Result<()> {
        match self.mismatch(other) {
            Some(msg) => Err(Error::SchemaMismatch(msg)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Real(f64),
    Cat(usize),
}

impl Cell {
    pub fn as_real(self) -> Option<f64> {
        match self {
            Cell::Real(v) => Some(v),
            Cell::Cat(_) => None,
        }
    }

    pub fn as_cat(self) -> Option<usize> {
        match self {
            Cell::Cat(c) => Some(c),
            Cell::Real(_) => None,
        }
    }

    /// Text form used in CSV output: shortest round-trip decimal for reals,
    /// the category label for categoricals.
    pub fn render(self, spec: &FeatureSpec) -> String {
        match self {
            Cell::Real(v) => format!("{v}"),
            Cell::Cat(c) => spec.categories()[c].clone(),
        }
    }

    pub fn parse(text: &str, spec: &FeatureSpec) -> std::result::Result<Cell, String> {
        let text = text.trim();
        if text.is_empty() {
            return Err("missing value".into());
        }
        match &spec.kind {
            FeatureKind::Real => match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Cell::Real(v)),
                Ok(_) => Err(format!("non-finite value {text:?}")),
                Err(_) => Err(format!("non-numeric value {text:?}")),
            },
            FeatureKind::Categorical { .. } => spec
                .category_index(text)
                .map(Cell::Cat)
                .ok_or_else(|| format!("unknown category {text:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-feature affine statistics; `None` entries are categorical features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub stats: Vec<Option<FeatureStats>>,
}

impl Standardization {
    pub fn forward(&self, d: usize, value: f64) -> f64 {
        match self.stats[d] {
            Some(s) => (value - s.mean) / s.std,
            None => value,
        }
    }

    pub fn inverse(&self, d: usize, value: f64) -> f64 {
        match self.stats[d] {
            Some(s) => value * s.std + s.mean,
            None => value,
        }
    }
}

/// `N × D` table of mixed cells, stored row-major.
///
/// `standardization` is `Some` once real columns have been transformed; the
/// statistics are kept so repairs can be mapped back to original units.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTable {
    schema: TableSchema,
    n_rows: usize,
    cells: Vec<Cell>,
    standardization: Option<Standardization>,
}

impl MixedTable {
    pub fn new(schema: TableSchema, rows: Vec<Vec<Cell>>) -> Result<Self> {
        let n_rows = rows.len();
        let d = schema.len();
        let mut cells = Vec::with_capacity(n_rows * d);
        for (n, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(Error::Cell {
                    row: n + 1,
                    column: String::new(),
                    message: format!("expected {d} cells, found {}", row.len()),
                });
            }
            cells.extend(row);
        }
        let table = MixedTable {
            schema,
            n_rows,
            cells,
            standardization: None,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        for n in 0..self.n_rows {
            for (d, spec) in self.schema.features().iter().enumerate() {
                let ok = match (self.get(n, d), &spec.kind) {
                    (Cell::Real(v), FeatureKind::Real) => v.is_finite(),
                    (Cell::Cat(c), FeatureKind::Categorical { categories }) => c < categories.len(),
                    _ => false,
                };
                if !ok {
                    return Err(Error::Cell {
                        row: n + 1,
                        column: spec.name.clone(),
                        message: format!("invalid cell {:?}", self.get(n, d)),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn get(&self, n: usize, d: usize) -> Cell {
        self.cells[n * self.schema.len() + d]
    }

    /// Overwrites one cell; the value must be valid for the feature.
    pub fn set(&mut self, n: usize, d: usize, cell: Cell) -> Result<()> {
        let spec = self.schema.feature(d);
        let ok = match (cell, &spec.kind) {
            (Cell::Real(v), FeatureKind::Real) => v.is_finite(),
            (Cell::Cat(c), FeatureKind::Categorical { categories }) => c < categories.len(),
            _ => false,
        };
        if !ok {
            return Err(Error::Cell {
                row: n + 1,
                column: spec.name.clone(),
                message: format!("invalid cell {cell:?}"),
            });
        }
        let width = self.schema.len();
        self.cells[n * width + d] = cell;
        Ok(())
    }

    pub fn row(&self, n: usize) -> &[Cell] {
        let d = self.schema.len();
        &self.cells[n * d..(n + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Cell]> {
        self.cells.chunks(self.schema.len().max(1))
    }

    pub fn real_column(&self, d: usize) -> Vec<f64> {
        (0..self.n_rows).filter_map(|n| self.get(n, d).as_real()).collect()
    }

    pub fn cat_column(&self, d: usize) -> Vec<usize> {
        (0..self.n_rows).filter_map(|n| self.get(n, d).as_cat()).collect()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    /// Population (1/N) mean and standard deviation of every real column.
    pub fn compute_stats(&self) -> Result<Standardization> {
        if self.n_rows == 0 {
            return Err(Error::Data("no rows".into()));
        }
        let mut stats = Vec::with_capacity(self.n_cols());
        for (d, spec) in self.schema.features().iter().enumerate() {
            if !spec.is_real() {
                stats.push(None);
                continue;
            }
            let col = self.real_column(d);
            let (mean, std) = population_moments(&col);
            if !(std > 0.0) {
                return Err(Error::Data(format!("real feature {:?} is constant", spec.name)));
            }
            stats.push(Some(FeatureStats { mean, std }));
        }
        Ok(Standardization { stats })
    }

    /// Standardizes real columns with this table's own statistics. A table
    /// that already carries statistics is returned unchanged.
    pub fn standardize(&self) -> Result<MixedTable> {
        if self.is_standardized() {
            return Ok(self.clone());
        }
        let stats = self.compute_stats()?;
        self.standardize_with(&stats)
    }

    /// Standardizes raw values with externally supplied statistics (e.g. the
    /// ones stored in a trained model).
    pub fn standardize_with(&self, stats: &Standardization) -> Result<MixedTable> {
        if self.is_standardized() {
            return Err(Error::Data("table is already standardized".into()));
        }
        if stats.stats.len() != self.n_cols() {
            return Err(Error::dim("standardization statistics", self.n_cols(), stats.stats.len()));
        }
        let mut out = self.clone();
        for n in 0..self.n_rows {
            for d in 0..self.n_cols() {
                if let (Cell::Real(v), Some(_)) = (self.get(n, d), stats.stats[d]) {
                    out.cells[n * self.n_cols() + d] = Cell::Real(stats.forward(d, v));
                }
            }
        }
        out.standardization = Some(stats.clone());
        Ok(out)
    }

    /// Maps real columns back to original units and drops the statistics.
    pub fn destandardize(&self) -> MixedTable {
        let mut out = self.clone();
        if let Some(stats) = &self.standardization {
            for n in 0..self.n_rows {
                for d in 0..self.n_cols() {
                    if let Cell::Real(v) = self.get(n, d) {
                        out.cells[n * self.n_cols() + d] = Cell::Real(stats.inverse(d, v));
                    }
                }
            }
        }
        out.standardization = None;
        out
    }

    /// Attaches statistics to values already in standardized units.
    pub fn with_standardization(mut self, stats: Standardization) -> Self {
        self.standardization = Some(stats);
        self
    }

    pub fn read_csv<R: Read>(reader: R, schema: &TableSchema) -> Result<MixedTable> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        let expected: Vec<&str> = schema.features().iter().map(|f| f.name.as_str()).collect();
        if names != expected {
            return Err(Error::SchemaMismatch(format!(
                "CSV header {names:?} does not match schema {expected:?}"
            )));
        }
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != schema.len() {
                return Err(Error::Cell {
                    row: i + 1,
                    column: String::new(),
                    message: format!("expected {} fields, found {}", schema.len(), record.len()),
                });
            }
            let mut row = Vec::with_capacity(schema.len());
            for (field, spec) in record.iter().zip(schema.features()) {
                let cell = Cell::parse(field, spec).map_err(|message| Error::Cell {
                    row: i + 1,
                    column: spec.name.clone(),
                    message,
                })?;
                row.push(cell);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data("no rows".into()));
        }
        MixedTable::new(schema.clone(), rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(self.schema.features().iter().map(|f| f.name.as_str()))?;
        for row in self.rows() {
            wtr.write_record(row.iter().zip(self.schema.features()).map(|(c, f)| c.render(f)))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Loads a raw (unstandardized) table from a CSV file and a JSON schema file.
pub fn load_csv(csv_path: impl AsRef<Path>, schema_path: impl AsRef<Path>) -> Result<MixedTable> {
    let schema = TableSchema::from_json_file(schema_path)?;
    MixedTable::read_csv(File::open(csv_path)?, &schema)
}

pub(crate) fn population_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Unit basis vector `e_index` of length `cardinality`.
pub fn one_hot(index: usize, cardinality: usize) -> Result<Vec<f64>> {
    if index >= cardinality {
        return Err(Error::Data(format!("category index {index} out of range for {cardinality} categories")));
    }
    let mut v = vec![0.0; cardinality];
    v[index] = 1.0;
    Ok(v)
}

/// Learnable unit-norm embedding rows, one matrix per categorical feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    /// Indexed by feature; `None` for real features.
    tables: Vec<Option<Array2<f64>>>,
}

impl EmbeddingBank {
    pub fn new(schema: &TableSchema, dim: usize, rng: &mut SeededRng) -> Self {
        let tables = schema
            .features()
            .iter()
            .map(|f| {
                f.cardinality()
                    .map(|c| Array2::from_shape_simple_fn((c, dim), || rng.standard_normal()))
            })
            .collect();
        let mut bank = EmbeddingBank { dim, tables };
        bank.renormalize();
        bank
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingBank {
            dim: self.dim,
            tables: self
                .tables
                .iter()
                .map(|t| t.as_ref().map(|m| Array2::zeros(m.raw_dim())))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self, d: usize) -> Option<&Array2<f64>> {
        self.tables[d].as_ref()
    }

    pub fn table_mut(&mut self, d: usize) -> Option<&mut Array2<f64>> {
        self.tables[d].as_mut()
    }

    pub fn vector(&self, d: usize, category: usize) -> ArrayView1<'_, f64> {
        self.tables[d].as_ref().expect("categorical feature").row(category)
    }

    /// Rescales every embedding row to unit Euclidean norm.
    pub fn renormalize(&mut self) {
        for table in self.tables.iter_mut().flatten() {
            for mut row in table.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row /= norm;
                }
            }
        }
    }

    /// Encodes rows into the encoder input matrix. Cells flagged in `blank`
    /// are encoded at their mean behaviour: 0 for (standardized) reals and the
    /// zero vector for categoricals.
    pub fn encode_batch(&self, schema: &TableSchema, rows: &[&[Cell]], blank: Option<&[Vec<bool>]>) -> Array2<f64> {
        let width = schema.encoded_width(self.dim);
        let mut out = Array2::zeros((rows.len(), width));
        for (i, row) in rows.iter().enumerate() {
            let mut col = 0;
            for (d, &cell) in row.iter().enumerate() {
                let is_blank = blank.is_some_and(|b| b[i][d]);
                match cell {
                    Cell::Real(v) => {
                        if !is_blank {
                            out[(i, col)] = v;
                        }
                        col += 1;
                    }
                    Cell::Cat(c) => {
                        if !is_blank {
                            out.row_mut(i)
                                .slice_mut(ndarray::s![col..col + self.dim])
                                .assign(&self.vector(d, c));
                        }
                        col += self.dim;
                    }
                }
            }
        }
        out
    }

    /// Adds `d loss / d input` back onto the embedding rows that produced the
    /// encoder input (the gradient counterpart of [`Self::encode_batch`]).
    pub fn accumulate_grads(
        grads: &mut EmbeddingBank,
        rows: &[&[Cell]],
        blank: Option<&[Vec<bool>]>,
        input_grad: ArrayView2<f64>,
    ) {
        let dim = grads.dim;
        for (i, row) in rows.iter().enumerate() {
            let mut col = 0;
            for (d, &cell) in row.iter().enumerate() {
                match cell {
                    Cell::Real(_) => col += 1,
                    Cell::Cat(c) => {
                        if !blank.is_some_and(|b| b[i][d]) {
                            let src = input_grad.row(i);
                            let table = grads.tables[d].as_mut().expect("categorical feature");
                            let mut dst = table.row_mut(c);
                            dst += &src.slice(ndarray::s![col..col + dim]);
                        }
                        col += dim;
                    }
                }
            }
        }
    }
}

impl Parameters for EmbeddingBank {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.tables
            .iter()
            .enumerate()
            .filter_map(|(d, t)| {
                t.as_ref().map(|m| ParamView {
                    name: format!("feature{d}"),
                    shape: m.shape().to_vec(),
                    data: m.as_slice().expect("standard layout"),
                })
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.tables
            .iter_mut()
            .enumerate()
            .filter_map(|(d, t)| {
                t.as_mut().map(|m| {
                    let shape = m.shape().to_vec();
                    ParamViewMut {
                        name: format!("feature{d}"),
                        shape,
                        data: m.as_slice_mut().expect("standard layout"),
                    }
                })
            })
            .collect()
    }
}

/// Encodes a single row (see [`EmbeddingBank::encode_batch`]).
pub fn encode_row(schema: &TableSchema, bank: &EmbeddingBank, row: &[Cell]) -> Result<Vec<f64>> {
    if row.len() != schema.len() {
        return Err(Error::dim("row", schema.len(), row.len()));
    }
    for (d, (&cell, spec)) in row.iter().zip(schema.features()).enumerate() {
        let ok = match (cell, &spec.kind) {
            (Cell::Real(_), FeatureKind::Real) => true,
            (Cell::Cat(c), FeatureKind::Categorical { categories }) => c < categories.len(),
            _ => false,
        };
        if !ok {
            return Err(Error::Cell {
                row: 0,
                column: schema.feature(d).name.clone(),
                message: format!("invalid cell {cell:?}"),
            });
        }
    }
    Ok(bank.encode_batch(schema, &[row], None).into_raw_vec_and_offset().0)
}
