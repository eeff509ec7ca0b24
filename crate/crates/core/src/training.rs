//! Mini-batch training for the plain VAE and the two robust variants, and
//! model checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Cell, MixedTable, Standardization, TableSchema};
use crate::generative::{draw_noise, mean_pi, objective, Gate, NetworkShape, OutlierComponents, RvaeNetwork};
use crate::nn::{AdamConfig, AdamState, Parameters, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "vae")]
    Vae,
    /// Gates set in closed form at every batch step.
    #[serde(rename = "rvae-cvi")]
    RvaeCvi,
    /// Gates predicted by a separate network trained jointly.
    #[serde(rename = "rvae-avi")]
    RvaeAvi,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::RvaeCvi => "rvae-cvi",
            ModelKind::RvaeAvi => "rvae-avi",
        }
    }

    pub fn is_robust(self) -> bool {
        self != ModelKind::Vae
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "rvae-cvi" => Ok(ModelKind::RvaeCvi),
            "rvae-avi" => Ok(ModelKind::RvaeAvi),
            other => Err(Error::InvalidConfig(format!(
                "unknown model kind {other:?} (expected vae, rvae-cvi or rvae-avi)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Prior probability that a cell is clean.
    pub alpha: f64,
    /// Standard deviation of the real-valued outlier component.
    pub outlier_scale: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::RvaeCvi,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 150,
            alpha: 0.95,
            outlier_scale: 2.0,
            latent_dim: 20,
            hidden_dim: 400,
            embedding_dim: 50,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        TrainConfig {
            kind,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.outlier_scale > 1.0 && self.outlier_scale.is_finite()) {
            return bad(format!("outlier scale must be > 1, got {}", self.outlier_scale));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.embedding_dim == 0 {
            return bad("latent, hidden and embedding sizes must be positive".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            hidden: self.hidden_dim,
            latent: self.latent_dim,
            embedding_dim: self.embedding_dim,
            amortized: self.kind == ModelKind::RvaeAvi,
        }
    }
}

/// A trained model: network, the config it was trained with and the
/// standardization statistics of its training table.
#[derive(Debug, Clone, PartialEq)]
pub struct RvaeModel {
    pub config: TrainConfig,
    pub network: RvaeNetwork,
    pub standardization: Standardization,
}

impl RvaeModel {
    /// Freshly initialized (untrained) model.
    pub fn init(schema: &TableSchema, config: &TrainConfig, standardization: Standardization) -> Result<Self> {
        config.validate()?;
        if standardization.stats.len() != schema.len() {
            return Err(Error::dim("standardization statistics", schema.len(), standardization.stats.len()));
        }
        let network = RvaeNetwork::new(schema, config.shape(), &mut SeededRng::new(config.seed))?;
        Ok(RvaeModel {
            config: config.clone(),
            network,
            standardization,
        })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.network.schema
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn components(&self) -> OutlierComponents {
        OutlierComponents::new(self.schema(), self.config.outlier_scale).expect("validated config")
    }

    /// The gating used by this model's objective.
    pub fn gate(&self) -> Gate<'static> {
        match self.config.kind {
            ModelKind::Vae => Gate::Ungated,
            ModelKind::RvaeCvi => Gate::Coordinate { alpha: self.config.alpha },
            ModelKind::RvaeAvi => Gate::Amortized { alpha: self.config.alpha },
        }
    }

    /// Checks the schema and returns `table` standardized with this model's
    /// statistics (raw tables are transformed; already-standardized tables
    /// must carry the same statistics).
    pub fn prepare(&self, table: &MixedTable) -> Result<MixedTable> {
        self.schema().ensure_matches(table.schema())?;
        match table.standardization() {
            None => table.standardize_with(&self.standardization),
            Some(s) if *s == self.standardization => Ok(table.clone()),
            Some(_) => Err(Error::Data(
                "table was standardized with statistics different from the model's".into(),
            )),
        }
    }

    /// Verifies every parameter is finite and the component shapes agree.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shape = self.config.shape();
        let net = &self.network;
        if net.pi_encoder.is_some() != shape.amortized {
            return Err(Error::Checkpoint(format!(
                "{} models {} a gate network",
                self.config.kind,
                if shape.amortized { "require" } else { "must not carry" }
            )));
        }
        if net.latent_dim() != shape.latent || net.embeddings.dim() != shape.embedding_dim {
            return Err(Error::Checkpoint("network sizes disagree with the stored config".into()));
        }
        for p in net.params() {
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(p.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-row ELBO over the epoch's batches.
    pub mean_elbo: f64,
    /// Mean gate probability over all cells seen in the epoch (robust models).
    pub mean_pi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub wall_time_secs: f64,
}

/// Trains a model on a standardized table.
pub fn train(table: &MixedTable, config: &TrainConfig) -> Result<(RvaeModel, TrainLog)> {
    train_with(table, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    table: &MixedTable,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(RvaeModel, TrainLog)> {
    config.validate()?;
    let stats = table
        .standardization()
        .ok_or_else(|| Error::Data("training table must be standardized".into()))?
        .clone();
    if table.n_rows() == 0 {
        return Err(Error::Data("training table has no rows".into()));
    }
    let started = Instant::now();
    let mut model = RvaeModel::init(table.schema(), config, stats)?;
    let components = model.components();
    let gate = model.gate();
    let adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &model.network);
    let mut shuffle_rng = SeededRng::with_stream(config.seed, 1);
    let mut noise_rng = SeededRng::with_stream(config.seed, 2);
    let mut order: Vec<usize> = (0..table.n_rows()).collect();
    let latent = model.network.latent_dim();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut elbo_sum = 0.0;
        let mut pi_sum = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let diverged = |message: String| Error::Training {
                epoch: epoch + 1,
                batch: batch + 1,
                message,
            };
            let rows: Vec<&[Cell]> = idx.iter().map(|&n| table.row(n)).collect();
            let eps = draw_noise(&mut noise_rng, rows.len(), latent);
            let obj = objective(&model.network, &components, &rows, eps.view(), gate, true)
                .map_err(|e| match e {
                    Error::NonFinite(what) => diverged(format!("non-finite {what}")),
                    other => other,
                })?;
            elbo_sum += obj.elbo.iter().sum::<f64>();
            if let Some(p) = mean_pi(&obj) {
                pi_sum += p * rows.len() as f64;
            }
            let grads = obj.grads.expect("gradients requested");
            adam.step(&mut model.network, &grads).map_err(|e| diverged(e.to_string()))?;
            model.network.embeddings.renormalize();
        }
        let n = table.n_rows() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_elbo: elbo_sum / n,
            mean_pi: config.kind.is_robust().then_some(pi_sum / n),
        };
        on_epoch(&entry);
        epochs.push(entry);
    }
    Ok((
        model,
        TrainLog {
            epochs,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct ModelMetadata {
    model: String,
    schema: TableSchema,
    config: TrainConfig,
    seed: u64,
    standardization: Standardization,
}

pub fn model_to_bytes(model: &RvaeModel) -> Result<Vec<u8>> {
    let meta = ModelMetadata {
        model: model.kind().as_str().to_string(),
        schema: model.schema().clone(),
        config: model.config.clone(),
        seed: model.config.seed,
        standardization: model.standardization.clone(),
    };
    let views = model.network.params();
    let tensors: Vec<(String, Vec<usize>, &[f64])> = views.iter().map(|p| (p.name.clone(), p.shape.clone(), p.data)).collect();
    checkpoint::encode(serde_json::to_value(meta)?, &tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<RvaeModel> {
    let container = checkpoint::decode(bytes)?;
    let meta: ModelMetadata = serde_json::from_value(container.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("not a neural model checkpoint: {e}")))?;
    if meta.model != meta.config.kind.as_str() {
        return Err(Error::Checkpoint(format!(
            "model tag {:?} disagrees with config kind {}",
            meta.model, meta.config.kind
        )));
    }
    meta.schema.validate()?;
    let mut model = RvaeModel::init(&meta.schema, &meta.config, meta.standardization)?;
    let mut params = model.network.params_mut();
    if params.len() != container.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.len(),
            container.tensors.len()
        )));
    }
    for p in params.iter_mut() {
        let (entry, data) = container.tensor(&p.name)?;
        if entry.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has shape {:?}, expected {:?}",
                p.name, entry.shape, p.shape
            )));
        }
        p.data.copy_from_slice(data);
    }
    drop(params);
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &RvaeModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RvaeModel> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Reads only the model tag of a checkpoint (`vae`, `rvae-cvi`, `rvae-avi`,
/// `marginal`, ...).
pub fn checkpoint_kind(path: impl AsRef<Path>) -> Result<String> {
    let container = checkpoint::read(path)?;
    container
        .metadata
        .get("model")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint("header has no model tag".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;

    fn toy_table(n: usize, seed: u64) -> MixedTable {
        let schema = TableSchema::new(vec![
            FeatureSpec::real("x"),
            FeatureSpec::real("y"),
            FeatureSpec::categorical("c", ["a", "b"]),
        ])
        .unwrap();
        let mut rng = SeededRng::new(seed);
        let rows = (0..n)
            .map(|_| {
                let h = rng.standard_normal();
                vec![
                    Cell::Real(h + 0.1 * rng.standard_normal()),
                    Cell::Real(2.0 * h + 0.1 * rng.standard_normal()),
                    Cell::Cat(usize::from(h > 0.0)),
                ]
            })
            .collect();
        MixedTable::new(schema, rows).unwrap().standardize().unwrap()
    }

    fn quick(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            kind,
            epochs: 3,
            batch_size: 16,
            latent_dim: 3,
            hidden_dim: 16,
            embedding_dim: 4,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.latent_dim, c.hidden_dim, c.embedding_dim), (100, 150, 20, 400, 50));
        assert_eq!((c.learning_rate, c.alpha, c.outlier_scale, c.weight_decay), (1e-3, 0.95, 2.0, 0.0));
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { alpha: 1.0, ..TrainConfig::default() },
            TrainConfig { alpha: 0.0, ..TrainConfig::default() },
            TrainConfig { outlier_scale: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        assert!("rvae".parse::<ModelKind>().is_err());
        assert_eq!("rvae-avi".parse::<ModelKind>().unwrap(), ModelKind::RvaeAvi);
    }

    #[test]
    fn requires_standardized_table() {
        let raw = toy_table(10, 1).destandardize();
        assert!(train(&raw, &quick(ModelKind::Vae)).is_err());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let table = toy_table(40, 2);
        for kind in [ModelKind::Vae, ModelKind::RvaeCvi, ModelKind::RvaeAvi] {
            let (a, la) = train(&table, &quick(kind)).unwrap();
            let (b, lb) = train(&table, &quick(kind)).unwrap();
            assert_eq!(a, b);
            assert_eq!(la.epochs, lb.epochs);
            assert_eq!(la.epochs.len(), 3);
            assert_eq!(la.epochs[0].mean_pi.is_some(), kind.is_robust());
            assert_eq!(a.network.pi_encoder.is_some(), kind == ModelKind::RvaeAvi);
        }
    }

    #[test]
    fn last_partial_batch_is_used() {
        // 17 rows with batch 16: the second batch holds one row; changing
        // that row must change the result
        let table = toy_table(17, 3);
        let mut cfg = quick(ModelKind::Vae);
        cfg.epochs = 1;
        let (a, _) = train(&table, &cfg).unwrap();
        let mut rows: Vec<Vec<Cell>> = table.rows().map(|r| r.to_vec()).collect();
        for r in rows.iter_mut() {
            r[0] = Cell::Real(r[0].as_real().unwrap() + 0.5);
        }
        let shifted = MixedTable::new(table.schema().clone(), rows)
            .unwrap()
            .with_standardization(table.standardization().unwrap().clone());
        let (b, _) = train(&shifted, &cfg).unwrap();
        assert_ne!(a, b);
        let (_, log) = train(&table, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let table = toy_table(30, 4);
        for kind in [ModelKind::Vae, ModelKind::RvaeAvi] {
            let (model, _) = train(&table, &quick(kind)).unwrap();
            let bytes = model_to_bytes(&model).unwrap();
            let back = model_from_bytes(&bytes).unwrap();
            assert_eq!(model, back);
            let rows: Vec<&[Cell]> = table.rows().collect();
            assert_eq!(model.network.posterior(&rows, None).unwrap(), back.network.posterior(&rows, None).unwrap());

            let mut damaged = bytes.clone();
            damaged[1] ^= 0xff;
            assert!(model_from_bytes(&damaged).is_err());
            assert!(model_from_bytes(&bytes[..bytes.len() / 2]).is_err());
        }
    }

    #[test]
    fn prepare_rejects_other_schema() {
        let table = toy_table(10, 5);
        let model = RvaeModel::init(table.schema(), &quick(ModelKind::Vae), table.standardization().unwrap().clone()).unwrap();
        let other = TableSchema::new(vec![
            FeatureSpec::real("x"),
            FeatureSpec::real("z"),
            FeatureSpec::categorical("c", ["a", "b"]),
        ])
        .unwrap();
        let rows = vec![vec![Cell::Real(0.0), Cell::Real(1.0), Cell::Cat(0)], vec![Cell::Real(1.0), Cell::Real(0.0), Cell::Cat(1)]];
        let t = MixedTable::new(other, rows).unwrap();
        let err = model.prepare(&t).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
        assert!(err.to_string().contains('z') || err.to_string().contains('y'));
    }
}
