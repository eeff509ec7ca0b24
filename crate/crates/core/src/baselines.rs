//! Marginal-distribution baseline: each feature is modelled on its own, with
//! a BIC-selected Gaussian mixture for reals and category frequencies for
//! categoricals. Cells are scored by negative log-likelihood and repaired to
//! the mean of their most responsible component or the modal category.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{one_hot, population_moments, Cell, FeatureKind, MixedTable, TableSchema};
use crate::generative::gaussian_log_density;
use crate::nn::{argmax, SeededRng};
use crate::repair::{RepairMethod, RepairResult, Simplexes};
use crate::scoring::{ScoreReport, ScoreRule};
use crate::{Error, Result};

pub const MAX_COMPONENTS: usize = 40;
/// Component standard deviations never fall below this (in units of the
/// feature's own standard deviation).
pub const STD_FLOOR: f64 = 1e-4;
const MAX_EM_ITERS: usize = 100;
/// EM stops once the mean per-point log-likelihood improves by less.
const EM_TOL: f64 = 1e-3;

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Outcome of one EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub log_likelihood: f64,
    /// Total log-likelihood after every iteration.
    pub history: Vec<f64>,
}

impl GaussianMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn component_logs(&self, x: f64, out: &mut [f64]) {
        for j in 0..self.k() {
            out[j] = self.weights[j].ln() + gaussian_log_density(x, self.means[j], self.stds[j]);
        }
    }

    /// `(ln w_j − ln σ_j − ½ ln 2π, 1/σ_j)` per component.
    fn log_constants(&self) -> Vec<(f64, f64)> {
        (0..self.k())
            .map(|j| {
                let c = self.weights[j].ln() - self.stds[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                (c, 1.0 / self.stds[j])
            })
            .collect()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let mut buf = vec![0.0; self.k()];
        self.component_logs(x, &mut buf);
        log_sum_exp(&buf)
    }

    pub fn log_likelihood(&self, data: &[f64]) -> f64 {
        data.iter().map(|&x| self.log_density(x)).sum()
    }

    /// Index of the component with the highest posterior responsibility.
    pub fn most_responsible(&self, x: f64) -> usize {
        let mut buf = vec![0.0; self.k()];
        self.component_logs(x, &mut buf);
        argmax(&buf)
    }

    /// `−2 log L + (3k − 1) ln N`.
    pub fn bic(&self, data: &[f64]) -> f64 {
        -2.0 * self.log_likelihood(data) + (3 * self.k() - 1) as f64 * (data.len() as f64).ln()
    }

    fn kmeans_pp(data: &[f64], k: usize, std_floor: f64, rng: &mut SeededRng) -> Self {
        let n = data.len();
        let mut centers = vec![data[(rng.uniform() * n as f64) as usize % n]];
        let mut dist: Vec<f64> = data.iter().map(|x| (x - centers[0]).powi(2)).collect();
        while centers.len() < k {
            let total: f64 = dist.iter().sum();
            let next = if total > 0.0 {
                data[rng.categorical(&dist)]
            } else {
                data[(rng.uniform() * n as f64) as usize % n]
            };
            centers.push(next);
            for (dv, x) in dist.iter_mut().zip(data) {
                *dv = dv.min((x - next).powi(2));
            }
        }
        // hard assignment to the nearest centre gives the starting moments
        let mut sums = vec![(0.0, 0.0, 0.0); k];
        for &x in data {
            let j = argmax(&centers.iter().map(|c| -(x - c).abs()).collect::<Vec<_>>());
            sums[j].0 += 1.0;
            sums[j].1 += x;
            sums[j].2 += x * x;
        }
        let (_, global_std) = population_moments(data);
        let mut mix = GaussianMixture {
            weights: Vec::with_capacity(k),
            means: Vec::with_capacity(k),
            stds: Vec::with_capacity(k),
        };
        for (j, (cnt, s, s2)) in sums.into_iter().enumerate() {
            if cnt > 0.0 {
                let m = s / cnt;
                mix.weights.push(cnt / n as f64);
                mix.means.push(m);
                mix.stds.push((s2 / cnt - m * m).max(0.0).sqrt().max(std_floor));
            } else {
                mix.weights.push(1.0 / n as f64);
                mix.means.push(centers[j]);
                mix.stds.push(global_std.max(std_floor));
            }
        }
        let total: f64 = mix.weights.iter().sum();
        mix.weights.iter_mut().for_each(|w| *w /= total);
        mix
    }

    /// EM from a k-means++ start.
    pub fn fit_em(data: &[f64], k: usize, std_floor: f64, rng: &mut SeededRng) -> Result<EmFit> {
        if data.len() < 2 || k == 0 {
            return Err(Error::Data("a mixture fit needs at least two values and one component".into()));
        }
        let n = data.len();
        let mut mix = Self::kmeans_pp(data, k, std_floor, rng);
        let mut resp = vec![0.0; n * k];
        let mut history = Vec::new();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..MAX_EM_ITERS {
            let consts = mix.log_constants();
            let mut ll = 0.0;
            for (i, &x) in data.iter().enumerate() {
                let r = &mut resp[i * k..(i + 1) * k];
                for (j, v) in r.iter_mut().enumerate() {
                    let u = (x - mix.means[j]) * consts[j].1;
                    *v = consts[j].0 - 0.5 * u * u;
                }
                let lse = log_sum_exp(r);
                ll += lse;
                r.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            if !ll.is_finite() {
                return Err(Error::NonFinite("mixture log-likelihood".into()));
            }
            history.push(ll);
            if (ll - prev) / n as f64 <= EM_TOL {
                break;
            }
            prev = ll;
            for j in 0..k {
                let (mut nk, mut s) = (0.0, 0.0);
                for i in 0..n {
                    nk += resp[i * k + j];
                    s += resp[i * k + j] * data[i];
                }
                let nk = nk.max(1e-12);
                let m = s / nk;
                let var: f64 = (0..n).map(|i| resp[i * k + j] * (data[i] - m).powi(2)).sum::<f64>() / nk;
                mix.weights[j] = nk / n as f64;
                mix.means[j] = m;
                mix.stds[j] = var.sqrt().max(std_floor);
            }
            let total: f64 = mix.weights.iter().sum();
            mix.weights.iter_mut().for_each(|w| *w /= total);
        }
        // the last E-step scored the current parameters
        let log_likelihood = *history.last().expect("at least one iteration");
        Ok(EmFit {
            mixture: mix,
            log_likelihood,
            history,
        })
    }
}

/// BIC search over `k = 1..=max_k` (capped by the number of distinct
/// values). Returns the winner and every `(k, BIC)` evaluated.
pub fn fit_gmm_bic(data: &[f64], max_k: usize, rng: &mut SeededRng) -> Result<(GaussianMixture, Vec<(usize, f64)>)> {
    if data.len() < 2 {
        return Err(Error::Data("fitting a mixture needs at least two rows".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture data".into()));
    }
    let (mean, std) = population_moments(data);
    let scale = if std > 0.0 { std } else { 1.0 };
    let z: Vec<f64> = data.iter().map(|x| (x - mean) / scale).collect();
    let mut distinct = z.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let max_k = max_k.min(distinct.len()).max(1);

    let mut best: Option<(GaussianMixture, f64)> = None;
    let mut bics = Vec::with_capacity(max_k);
    for k in 1..=max_k {
        let restarts = if k <= 5 { 10 } else { 3 };
        let mut fit: Option<EmFit> = None;
        for _ in 0..restarts {
            let f = GaussianMixture::fit_em(&z, k, STD_FLOOR, rng)?;
            if fit.as_ref().is_none_or(|b| f.log_likelihood > b.log_likelihood) {
                fit = Some(f);
            }
        }
        let fit = fit.expect("at least one restart");
        let bic = -2.0 * fit.log_likelihood + (3 * k - 1) as f64 * (z.len() as f64).ln();
        // report in data units: each density picks up a factor 1/scale
        bics.push((k, bic + 2.0 * z.len() as f64 * scale.ln()));
        if best.as_ref().is_none_or(|(_, b)| bic < *b) {
            best = Some((fit.mixture, bic));
        }
    }
    let (m, _) = best.expect("k = 1 always fits");
    let mixture = GaussianMixture {
        weights: m.weights,
        means: m.means.iter().map(|v| v * scale + mean).collect(),
        stds: m.stds.iter().map(|v| v * scale).collect(),
    };
    Ok((mixture, bics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Marginal {
    Real(GaussianMixture),
    /// Category counts in the fitted table.
    Categorical { counts: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalModel {
    pub schema: TableSchema,
    pub n_rows: usize,
    pub features: Vec<Marginal>,
}

impl MarginalModel {
    pub fn frequencies(&self, d: usize) -> Option<Vec<f64>> {
        match &self.features[d] {
            Marginal::Categorical { counts } => {
                let total: u64 = counts.iter().sum();
                Some(counts.iter().map(|&c| c as f64 / total as f64).collect())
            }
            Marginal::Real(_) => None,
        }
    }

    /// `−ln p(x_d)`; unseen categories get probability `1/(N + C_d)`.
    pub fn cell_score(&self, d: usize, cell: Cell) -> f64 {
        match (&self.features[d], cell) {
            (Marginal::Real(g), Cell::Real(x)) => -g.log_density(x),
            (Marginal::Categorical { counts }, Cell::Cat(c)) => {
                let total: u64 = counts.iter().sum();
                if counts[c] == 0 {
                    ((total as usize + counts.len()) as f64).ln()
                } else {
                    -(counts[c] as f64 / total as f64).ln()
                }
            }
            _ => panic!("cell type does not match feature {d}"),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (d, f) in self.features.iter().enumerate() {
            match f {
                Marginal::Real(g) => {
                    let k = g.k();
                    tensors.push((format!("feature{d}.weights"), vec![k], g.weights.clone()));
                    tensors.push((format!("feature{d}.means"), vec![k], g.means.clone()));
                    tensors.push((format!("feature{d}.stds"), vec![k], g.stds.clone()));
                }
                Marginal::Categorical { counts } => {
                    tensors.push((format!("feature{d}.counts"), vec![counts.len()], counts.iter().map(|&c| c as f64).collect()));
                }
            }
        }
        let views: Vec<(String, Vec<usize>, &[f64])> = tensors.iter().map(|(n, s, v)| (n.clone(), s.clone(), v.as_slice())).collect();
        let meta = serde_json::json!({
            "model": "marginal",
            "schema": self.schema,
            "n_rows": self.n_rows,
            "max_components": MAX_COMPONENTS,
        });
        checkpoint::write(path, meta, &views)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = checkpoint::read(path)?;
        if c.metadata.get("model").and_then(|v| v.as_str()) != Some("marginal") {
            return Err(Error::Checkpoint("not a marginal model".into()));
        }
        let schema: TableSchema = serde_json::from_value(c.metadata["schema"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad schema: {e}")))?;
        schema.validate()?;
        let n_rows = c.metadata["n_rows"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing row count".into()))? as usize;
        let mut features = Vec::with_capacity(schema.len());
        for (d, spec) in schema.features().iter().enumerate() {
            let get = |name: &str| c.tensor(&format!("feature{d}.{name}")).map(|(_, v)| v.clone());
            features.push(match &spec.kind {
                FeatureKind::Real => {
                    let g = GaussianMixture {
                        weights: get("weights")?,
                        means: get("means")?,
                        stds: get("stds")?,
                    };
                    if g.means.len() != g.k() || g.stds.len() != g.k() || g.stds.iter().any(|s| !(*s > 0.0)) {
                        return Err(Error::Checkpoint(format!("inconsistent mixture for feature {d}")));
                    }
                    Marginal::Real(g)
                }
                FeatureKind::Categorical { categories } => {
                    let counts = get("counts")?;
                    if counts.len() != categories.len() {
                        return Err(Error::Checkpoint(format!("inconsistent counts for feature {d}")));
                    }
                    Marginal::Categorical {
                        counts: counts.iter().map(|&c| c as u64).collect(),
                    }
                }
            });
        }
        Ok(MarginalModel { schema, n_rows, features })
    }
}

/// Fits every feature of a raw table independently.
pub fn fit_marginals(table: &MixedTable, seed: u64) -> Result<MarginalModel> {
    if table.n_rows() < 2 {
        return Err(Error::Data("the marginal baseline needs at least two rows".into()));
    }
    let table = table.destandardize();
    let mut features = Vec::with_capacity(table.n_cols());
    for (d, spec) in table.schema().features().iter().enumerate() {
        features.push(match &spec.kind {
            FeatureKind::Real => {
                let mut rng = SeededRng::with_stream(seed, d as u64);
                Marginal::Real(fit_gmm_bic(&table.real_column(d), MAX_COMPONENTS, &mut rng)?.0)
            }
            FeatureKind::Categorical { categories } => {
                let mut counts = vec![0u64; categories.len()];
                for c in table.cat_column(d) {
                    counts[c] += 1;
                }
                Marginal::Categorical { counts }
            }
        });
    }
    Ok(MarginalModel {
        schema: table.schema().clone(),
        n_rows: table.n_rows(),
        features,
    })
}

pub fn marginal_score(model: &MarginalModel, table: &MixedTable) -> Result<ScoreReport> {
    model.schema.ensure_matches(table.schema())?;
    let table = table.destandardize();
    let cells = Array2::from_shape_fn((table.n_rows(), table.n_cols()), |(n, d)| model.cell_score(d, table.get(n, d)));
    ScoreReport::from_cells(ScoreRule::Nll, cells)
}

/// Repairs the flagged cells (every cell when `mask` is `None`).
pub fn marginal_repair(model: &MarginalModel, dirty: &MixedTable, mask: Option<&Array2<bool>>) -> Result<RepairResult> {
    model.schema.ensure_matches(dirty.schema())?;
    let mut table = dirty.destandardize();
    if let Some(m) = mask {
        if m.dim() != (table.n_rows(), table.n_cols()) {
            return Err(Error::dim("repair mask", table.n_rows() * table.n_cols(), m.len()));
        }
    }
    let mut simplexes: Simplexes = Vec::with_capacity(table.n_cols());
    for d in 0..table.n_cols() {
        let freqs = model.frequencies(d);
        let mut sx = freqs.as_ref().map(|f| Array2::zeros((table.n_rows(), f.len())));
        for n in 0..table.n_rows() {
            let flagged = mask.is_none_or(|m| m[(n, d)]);
            match (&model.features[d], table.get(n, d)) {
                (Marginal::Real(g), Cell::Real(x)) => {
                    if flagged {
                        table.set(n, d, Cell::Real(g.means[g.most_responsible(x)]))?;
                    }
                }
                (Marginal::Categorical { .. }, Cell::Cat(c)) => {
                    let f = freqs.as_ref().expect("categorical");
                    let p = if flagged {
                        table.set(n, d, Cell::Cat(argmax(f)))?;
                        f.clone()
                    } else {
                        one_hot(c, f.len())?
                    };
                    sx.as_mut().expect("categorical").row_mut(n).assign(&ndarray::ArrayView1::from(&p));
                }
                _ => unreachable!("table validated against the schema"),
            }
        }
        simplexes.push(sx);
    }
    Ok(RepairResult {
        method: RepairMethod::Marginal,
        table,
        simplexes,
        pi: None,
        clamped: mask.cloned(),
    })
}
