//! Per-feature likelihoods, outlier components, KL terms and the two
//! objectives: the plain VAE ELBO and the robust (gated mixture) ELBO.
//!
//! All objectives are evaluated on mini-batches with externally supplied
//! standard-normal noise `eps`, so values and gradients are reproducible and
//! can be compared against finite differences.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Cell, EmbeddingBank, FeatureKind, TableSchema};
use crate::nn::{
    log_softmax_at, logit, prefix_views, prefix_views_mut, sigmoid, softmax, softplus, Activation, DenseNet,
    ParamView, ParamViewMut, Parameters, SeededRng,
};
use crate::{Error, Result};

/// Bounds applied to every learned log standard deviation before `exp`.
pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 4.0;
/// Bound on the log density ratio fed to [`pi_update`].
pub const LOG_RATIO_CLAMP: f64 = 30.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn clamp_log_std(v: f64) -> f64 {
    v.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

fn inside_clamp(v: f64) -> bool {
    v > LOG_STD_MIN && v < LOG_STD_MAX
}

/// `ln N(x | mean, std)`.
pub fn gaussian_log_density(x: f64, mean: f64, std: f64) -> f64 {
    let u = (x - mean) / std;
    -HALF_LN_2PI - std.ln() - 0.5 * u * u
}

/// Gaussian posterior `q(z|x)` network: input → hidden (ReLU) → `[μ, log σ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub net: DenseNet,
}

impl Encoder {
    pub fn new(input_dim: usize, hidden: usize, latent: usize, rng: &mut SeededRng) -> Result<Self> {
        let net = DenseNet::mlp(&[input_dim, hidden, 2 * latent], Activation::Identity, rng)?;
        Ok(Encoder { net })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Posterior means and (clamped) standard deviations for an encoded batch.
    pub fn posterior(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.predict(input)?;
        let k = self.latent_dim();
        let mean = out.slice(s![.., ..k]).to_owned();
        let std = out.slice(s![.., k..]).mapv(|v| clamp_log_std(v).exp());
        Ok((mean, std))
    }
}

/// Where a feature's parameters live in the decoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Mean `m_d(z)` at `column`; `sigma` indexes the per-feature log σ_d.
    Real { column: usize, sigma: usize },
    /// Logits `a_d(z)` at `offset..offset + cardinality`.
    Categorical { offset: usize, cardinality: usize },
}

/// Shared trunk `z → hidden (ReLU)` followed by one linear output layer that
/// holds every per-feature head, plus per-feature learned log σ_d.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub net: DenseNet,
    pub log_sigma: Array1<f64>,
    heads: Vec<Head>,
}

impl Decoder {
    pub fn new(schema: &TableSchema, latent: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let heads = Self::layout(schema);
        let width = heads
            .iter()
            .map(|h| match h {
                Head::Real { .. } => 1,
                Head::Categorical { cardinality, .. } => *cardinality,
            })
            .sum::<usize>();
        let n_real = schema.real_indices().len();
        let net = DenseNet::mlp(&[latent, hidden, width], Activation::Identity, rng)?;
        Ok(Decoder {
            net,
            log_sigma: Array1::zeros(n_real),
            heads,
        })
    }

    fn layout(schema: &TableSchema) -> Vec<Head> {
        let mut column = 0;
        let mut sigma = 0;
        schema
            .features()
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Real => {
                    let h = Head::Real { column, sigma };
                    column += 1;
                    sigma += 1;
                    h
                }
                FeatureKind::Categorical { categories } => {
                    let h = Head::Categorical {
                        offset: column,
                        cardinality: categories.len(),
                    };
                    column += categories.len();
                    h
                }
            })
            .collect()
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Decoder {
            net: self.net.zeros_like(),
            log_sigma: Array1::zeros(self.log_sigma.len()),
            heads: self.heads.clone(),
        }
    }

    /// σ_d of the real head with sigma index `i`, after clamping.
    pub fn sigma(&self, i: usize) -> f64 {
        clamp_log_std(self.log_sigma[i]).exp()
    }

    /// Head outputs for a batch of latent vectors.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.predict(z)
    }

    /// `ln p_θ(x_d | z)` given this row's decoder output.
    pub fn log_lik_from_output(&self, output: &[f64], d: usize, cell: Cell) -> f64 {
        match (self.heads[d], cell) {
            (Head::Real { column, sigma }, Cell::Real(x)) => {
                gaussian_log_density(x, output[column], self.sigma(sigma))
            }
            (Head::Categorical { offset, cardinality }, Cell::Cat(c)) => {
                log_softmax_at(&output[offset..offset + cardinality], c)
            }
            _ => panic!("cell type does not match decoder head {d}"),
        }
    }

    /// `ln p_θ(x_d | z)`.
    pub fn log_lik_clean(&self, z: &[f64], d: usize, cell: Cell) -> Result<f64> {
        if d >= self.heads.len() {
            return Err(Error::dim("feature index", self.heads.len(), d));
        }
        let out = self.net.forward_one(z)?;
        match (self.heads[d], cell) {
            (Head::Real { .. }, Cell::Real(_)) | (Head::Categorical { .. }, Cell::Cat(_)) => {}
            _ => return Err(Error::Data(format!("cell {cell:?} does not match feature {d}"))),
        }
        if let (Head::Categorical { cardinality, .. }, Cell::Cat(c)) = (self.heads[d], cell) {
            if c >= cardinality {
                return Err(Error::Data(format!("category {c} out of range for feature {d}")));
            }
        }
        Ok(self.log_lik_from_output(&out, d, cell))
    }

    /// Category probabilities for categorical feature `d`.
    pub fn simplex(&self, output: &[f64], d: usize) -> Option<Vec<f64>> {
        match self.heads[d] {
            Head::Categorical { offset, cardinality } => Some(softmax(&output[offset..offset + cardinality])),
            Head::Real { .. } => None,
        }
    }

    /// Mode of `p_θ(x_d | z)`: the mean for reals, the most probable category
    /// (lowest index on ties) for categoricals.
    pub fn mode(&self, output: &[f64], d: usize) -> Cell {
        match self.heads[d] {
            Head::Real { column, .. } => Cell::Real(output[column]),
            Head::Categorical { offset, cardinality } => {
                Cell::Cat(crate::nn::argmax(&output[offset..offset + cardinality]))
            }
        }
    }

    /// Draw from `p_θ(x_d | z)`.
    pub fn sample(&self, output: &[f64], d: usize, rng: &mut SeededRng) -> Cell {
        match self.heads[d] {
            Head::Real { column, sigma } => Cell::Real(output[column] + self.sigma(sigma) * rng.standard_normal()),
            Head::Categorical { offset, cardinality } => {
                Cell::Cat(rng.categorical(&softmax(&output[offset..offset + cardinality])))
            }
        }
    }
}

/// Broad Gaussian `N(0, S)` (S a standard deviation) for real features and
/// the uniform distribution for categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierComponents {
    scale: f64,
    cardinalities: Vec<Option<usize>>,
}

impl OutlierComponents {
    pub fn new(schema: &TableSchema, scale: f64) -> Result<Self> {
        if !(scale > 1.0) || !scale.is_finite() {
            return Err(Error::InvalidConfig(format!("outlier scale S must be > 1, got {scale}")));
        }
        Ok(OutlierComponents {
            scale,
            cardinalities: schema.features().iter().map(|f| f.cardinality()).collect(),
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `ln p_0(x_d)`; independent of the latent.
    pub fn log_lik_outlier(&self, cell: Cell, d: usize) -> f64 {
        match (cell, self.cardinalities[d]) {
            (Cell::Real(x), None) => gaussian_log_density(x, 0.0, self.scale),
            (Cell::Cat(_), Some(c)) => -(c as f64).ln(),
            _ => panic!("cell type does not match feature {d}"),
        }
    }
}

/// `KL(N(μ, diag σ²) || N(0, I))`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
        .sum()
}

/// `KL(Bernoulli(π) || Bernoulli(α))` with `0 ln 0 = 0`.
pub fn kl_bernoulli(pi: f64, alpha: f64) -> f64 {
    let term = |p: f64, q: f64| if p > 0.0 { p * (p / q).ln() } else { 0.0 };
    term(pi, alpha) + term(1.0 - pi, 1.0 - alpha)
}

/// KL term expressed through the gate logit `u` (`π = sigmoid(u)`), stable
/// for saturated gates.
fn kl_bernoulli_logit(u: f64, alpha: f64) -> f64 {
    let pi = sigmoid(u);
    let ln_pi = -softplus(-u);
    let ln_not_pi = -softplus(u);
    pi * (ln_pi - alpha.ln()) + (1.0 - pi) * (ln_not_pi - (1.0 - alpha).ln())
}

/// Closed-form coordinate optimum of the gate: `sigmoid(r + logit α)`, with
/// `r` the expected log density ratio clean/outlier, clamped to ±30.
pub fn pi_update(log_ratio: f64, alpha: f64) -> f64 {
    // α / (α + (1-α)e^{-r}) rather than sigmoid(r + logit α): the sum in the
    // denominator rounds to exactly 1 at r = 0, so the prior comes back unchanged
    let r = log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    alpha / (alpha + (1.0 - alpha) * (-r).exp())
}

/// `-ln pi_update(r, α)`, computed without cancellation.
pub fn neg_log_pi(log_ratio: f64, alpha: f64) -> f64 {
    softplus(-(log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP) + logit(alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub hidden: usize,
    pub latent: usize,
    pub embedding_dim: usize,
    /// Carry an amortized gate network τ.
    pub amortized: bool,
}

/// Every learnable tensor of a model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct RvaeNetwork {
    pub schema: TableSchema,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub embeddings: EmbeddingBank,
    /// Amortized gate network τ: encoded row → hidden → D logits.
    pub pi_encoder: Option<DenseNet>,
}

impl RvaeNetwork {
    pub fn new(schema: &TableSchema, shape: NetworkShape, rng: &mut SeededRng) -> Result<Self> {
        schema.validate()?;
        if shape.hidden == 0 || shape.latent == 0 || shape.embedding_dim == 0 {
            return Err(Error::InvalidConfig(format!("network sizes must be positive: {shape:?}")));
        }
        let embeddings = EmbeddingBank::new(schema, shape.embedding_dim, rng);
        let input = schema.encoded_width(shape.embedding_dim);
        let encoder = Encoder::new(input, shape.hidden, shape.latent, rng)?;
        let decoder = Decoder::new(schema, shape.latent, shape.hidden, rng)?;
        let pi_encoder = if shape.amortized {
            Some(DenseNet::mlp(&[input, shape.hidden, schema.len()], Activation::Identity, rng)?)
        } else {
            None
        };
        Ok(RvaeNetwork {
            schema: schema.clone(),
            encoder,
            decoder,
            embeddings,
            pi_encoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        RvaeNetwork {
            schema: self.schema.clone(),
            encoder: Encoder {
                net: self.encoder.net.zeros_like(),
            },
            decoder: self.decoder.zeros_like(),
            embeddings: self.embeddings.zeros_like(),
            pi_encoder: self.pi_encoder.as_ref().map(DenseNet::zeros_like),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    pub fn encode(&self, rows: &[&[Cell]], blank: Option<&[Vec<bool>]>) -> Array2<f64> {
        self.embeddings.encode_batch(&self.schema, rows, blank)
    }

    /// Posterior `(μ, σ)` for a batch of rows.
    pub fn posterior(&self, rows: &[&[Cell]], blank: Option<&[Vec<bool>]>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.encoder.posterior(self.encode(rows, blank).view())
    }

    /// Amortized gate probabilities `π = sigmoid(τ(x))`.
    pub fn amortized_pi(&self, rows: &[&[Cell]]) -> Result<Array2<f64>> {
        let tau = self
            .pi_encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model has no amortized gate network".into()))?;
        Ok(tau.predict(self.encode(rows, None).view())?.mapv(sigmoid))
    }
}

impl Parameters for RvaeNetwork {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = prefix_views("encoder", self.encoder.net.params());
        out.extend(prefix_views("decoder", self.decoder.net.params()));
        out.push(ParamView {
            name: "decoder.log_sigma".into(),
            shape: vec![self.decoder.log_sigma.len()],
            data: self.decoder.log_sigma.as_slice().expect("standard layout"),
        });
        out.extend(prefix_views("embedding", self.embeddings.params()));
        if let Some(tau) = &self.pi_encoder {
            out.extend(prefix_views("pi_encoder", tau.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = prefix_views_mut("encoder", self.encoder.net.params_mut());
        out.extend(prefix_views_mut("decoder", self.decoder.net.params_mut()));
        let n = self.decoder.log_sigma.len();
        out.push(ParamViewMut {
            name: "decoder.log_sigma".into(),
            shape: vec![n],
            data: self.decoder.log_sigma.as_slice_mut().expect("standard layout"),
        });
        out.extend(prefix_views_mut("embedding", self.embeddings.params_mut()));
        if let Some(tau) = &mut self.pi_encoder {
            out.extend(prefix_views_mut("pi_encoder", tau.params_mut()));
        }
        out
    }
}

/// How cell gates enter the objective.
#[derive(Debug, Clone, Copy)]
pub enum Gate<'a> {
    /// Plain VAE: every cell is modelled by the clean component.
    Ungated,
    /// Gates set by [`pi_update`] from the current sample, held constant
    /// for differentiation.
    Coordinate { alpha: f64 },
    /// Caller-supplied gates (`batch × D`), held constant.
    Fixed { pi: &'a Array2<f64>, alpha: f64 },
    /// Gates from the network's τ; gradients flow into τ.
    Amortized { alpha: f64 },
}

impl Gate<'_> {
    fn alpha(&self) -> Option<f64> {
        match *self {
            Gate::Ungated => None,
            Gate::Coordinate { alpha } | Gate::Fixed { alpha, .. } | Gate::Amortized { alpha } => Some(alpha),
        }
    }
}

/// Result of evaluating an objective on a batch.
#[derive(Debug, Clone)]
pub struct Objective {
    /// Negative mean ELBO over the batch.
    pub loss: f64,
    /// Per-row ELBO.
    pub elbo: Vec<f64>,
    /// `ln p_θ(x_nd | z_n)` at the sampled latents.
    pub log_lik_clean: Array2<f64>,
    /// `ln p_0(x_nd)`.
    pub log_lik_outlier: Array2<f64>,
    /// Gates used (absent for the plain VAE).
    pub pi: Option<Array2<f64>>,
    /// Sampled latents.
    pub z: Array2<f64>,
    pub grads: Option<RvaeNetwork>,
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Evaluates `-mean ELBO` on `rows` (standardized cells) using the
/// reparameterized latent `z = μ + σ ⊙ eps`, and optionally its gradient with
/// respect to every parameter of `net`.
pub fn objective(
    net: &RvaeNetwork,
    components: &OutlierComponents,
    rows: &[&[Cell]],
    eps: ArrayView2<f64>,
    gate: Gate<'_>,
    want_grads: bool,
) -> Result<Objective> {
    let b = rows.len();
    let dims = net.schema.len();
    let k = net.latent_dim();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if eps.dim() != (b, k) {
        return Err(Error::dim("noise matrix columns", k, eps.ncols()));
    }
    if let Some(alpha) = gate.alpha() {
        validate_alpha(alpha)?;
    }
    if let Gate::Fixed { pi, .. } = gate {
        if pi.dim() != (b, dims) {
            return Err(Error::dim("fixed gate matrix", b * dims, pi.len()));
        }
        if pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("gate probabilities must lie in [0, 1]".into()));
        }
    }

    let input = net.encode(rows, None);
    let enc_trace = net.encoder.net.forward(input.view())?;
    let enc_out = enc_trace.output();
    let mu = enc_out.slice(s![.., ..k]);
    let raw_log_std = enc_out.slice(s![.., k..]);
    let std = raw_log_std.mapv(|v| clamp_log_std(v).exp());
    let z = &mu + &(&std * &eps);

    let dec_trace = net.decoder.net.forward(z.view())?;
    let dec_out = dec_trace.output();

    let mut lp = Array2::zeros((b, dims));
    let mut lp0 = Array2::zeros((b, dims));
    for (n, row) in rows.iter().enumerate() {
        let out = dec_out.row(n);
        let out = out.as_slice().expect("row-major");
        for (d, &cell) in row.iter().enumerate() {
            lp[(n, d)] = net.decoder.log_lik_from_output(out, d, cell);
            lp0[(n, d)] = components.log_lik_outlier(cell, d);
        }
    }

    let kl_g: Vec<f64> = (0..b)
        .map(|n| {
            (0..k)
                .map(|j| {
                    let (m, s, ls) = (mu[(n, j)], std[(n, j)], clamp_log_std(raw_log_std[(n, j)]));
                    0.5 * (m * m + s * s - 1.0) - ls
                })
                .sum()
        })
        .collect();

    let mut tau_state = None;
    let pi: Option<Array2<f64>> = match gate {
        Gate::Ungated => None,
        Gate::Coordinate { alpha } => Some(ndarray::Zip::from(&lp).and(&lp0).map_collect(|&a, &o| pi_update(a - o, alpha))),
        Gate::Fixed { pi, .. } => Some(pi.clone()),
        Gate::Amortized { .. } => {
            let tau = net
                .pi_encoder
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("amortized gate requested without a gate network".into()))?;
            let trace = tau.forward(input.view())?;
            let pi = trace.output().mapv(sigmoid);
            tau_state = Some((tau, trace));
            Some(pi)
        }
    };

    let mut elbo = Vec::with_capacity(b);
    for n in 0..b {
        let value = match (&pi, gate.alpha()) {
            (Some(pi), Some(alpha)) => {
                let fit: f64 = (0..dims)
                    .map(|d| pi[(n, d)] * lp[(n, d)] + (1.0 - pi[(n, d)]) * lp0[(n, d)])
                    .sum();
                let kl_b: f64 = match &tau_state {
                    Some((_, trace)) => (0..dims).map(|d| kl_bernoulli_logit(trace.output()[(n, d)], alpha)).sum(),
                    None => (0..dims).map(|d| kl_bernoulli(pi[(n, d)], alpha)).sum(),
                };
                fit - kl_g[n] - kl_b
            }
            _ => lp.row(n).sum() - kl_g[n],
        };
        elbo.push(value);
    }
    let loss = -elbo.iter().sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }

    let grads = if want_grads {
        let scale = 1.0 / b as f64;
        let mut grads = net.zeros_like();
        let mut d_out = Array2::zeros(dec_out.raw_dim());
        for (n, row) in rows.iter().enumerate() {
            for (d, &cell) in row.iter().enumerate() {
                let w = pi.as_ref().map_or(1.0, |p| p[(n, d)]) * scale;
                match (net.decoder.heads[d], cell) {
                    (Head::Real { column, sigma }, Cell::Real(x)) => {
                        let sd = net.decoder.sigma(sigma);
                        let diff = x - dec_out[(n, column)];
                        d_out[(n, column)] = -w * diff / (sd * sd);
                        if inside_clamp(net.decoder.log_sigma[sigma]) {
                            grads.decoder.log_sigma[sigma] -= w * ((diff / sd).powi(2) - 1.0);
                        }
                    }
                    (Head::Categorical { offset, cardinality }, Cell::Cat(c)) => {
                        let row_out = dec_out.row(n);
                        let p = softmax(&row_out.as_slice().expect("row-major")[offset..offset + cardinality]);
                        for (j, pj) in p.into_iter().enumerate() {
                            let target = if j == c { 1.0 } else { 0.0 };
                            d_out[(n, offset + j)] = -w * (target - pj);
                        }
                    }
                    _ => unreachable!("cells validated against schema"),
                }
            }
        }
        let (dec_grads, dz) = net.decoder.net.backward(&dec_trace, d_out.view())?;
        grads.decoder.net = dec_grads;

        let mut d_enc = Array2::zeros(enc_out.raw_dim());
        for n in 0..b {
            for j in 0..k {
                d_enc[(n, j)] = dz[(n, j)] + scale * mu[(n, j)];
                if inside_clamp(raw_log_std[(n, j)]) {
                    let s = std[(n, j)];
                    d_enc[(n, k + j)] = dz[(n, j)] * s * eps[(n, j)] + scale * (s * s - 1.0);
                }
            }
        }
        let (enc_grads, mut d_input) = net.encoder.net.backward(&enc_trace, d_enc.view())?;
        grads.encoder.net = enc_grads;

        if let (Some((tau, trace)), Some(pi), Some(alpha)) = (&tau_state, &pi, gate.alpha()) {
            let u = trace.output();
            let logit_alpha = logit(alpha);
            let mut du = Array2::zeros(u.raw_dim());
            for n in 0..b {
                for d in 0..dims {
                    let p = pi[(n, d)];
                    du[(n, d)] = scale * p * (1.0 - p) * ((u[(n, d)] - logit_alpha) - (lp[(n, d)] - lp0[(n, d)]));
                }
            }
            let (tau_grads, d_input_tau) = tau.backward(trace, du.view())?;
            d_input += &d_input_tau;
            grads.pi_encoder = Some(tau_grads);
        }

        EmbeddingBank::accumulate_grads(&mut grads.embeddings, rows, None, d_input.view());
        Some(grads)
    } else {
        None
    };

    Ok(Objective {
        loss,
        elbo,
        log_lik_clean: lp,
        log_lik_outlier: lp0,
        pi,
        z,
        grads,
    })
}

/// Draws a `rows × latent` standard-normal noise matrix.
pub fn draw_noise(rng: &mut SeededRng, rows: usize, latent: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, latent), || rng.standard_normal())
}

fn check_row(net: &RvaeNetwork, row: &[Cell]) -> Result<()> {
    crate::data::encode_row(&net.schema, &net.embeddings, row).map(|_| ())
}

/// Single-sample ELBO of the plain VAE for one row.
pub fn elbo_vae(net: &RvaeNetwork, row: &[Cell], rng: &mut SeededRng) -> Result<f64> {
    check_row(net, row)?;
    let eps = draw_noise(rng, 1, net.latent_dim());
    // the ungated objective never reads the outlier components' scale
    let components = OutlierComponents::new(&net.schema, 2.0)?;
    Ok(objective(net, &components, &[row], eps.view(), Gate::Ungated, false)?.elbo[0])
}

/// Single-sample robust ELBO for one row with the given gate probabilities.
pub fn elbo_rvae(
    net: &RvaeNetwork,
    components: &OutlierComponents,
    pi: &[f64],
    alpha: f64,
    row: &[Cell],
    rng: &mut SeededRng,
) -> Result<f64> {
    check_row(net, row)?;
    let pi = Array2::from_shape_vec((1, pi.len()), pi.to_vec())
        .map_err(|_| Error::dim("gate vector", net.schema.len(), pi.len()))?;
    let eps = draw_noise(rng, 1, net.latent_dim());
    Ok(objective(net, components, &[row], eps.view(), Gate::Fixed { pi: &pi, alpha }, false)?.elbo[0])
}

/// Mean over rows of an [`Objective`]'s gates, for logging.
pub fn mean_pi(obj: &Objective) -> Option<f64> {
    obj.pi.as_ref().map(|p| p.mean_axis(Axis(0)).map_or(0.0, |m| m.mean().unwrap_or(0.0)))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn neutral_evidence_returns_the_prior(alpha in 1e-6f64..1.0 - 1e-6) {
            prop_assert_eq!(pi_update(0.0, alpha), alpha);
        }

        #[test]
        fn closed_form_agrees_with_the_logistic(r in -40.0f64..40.0, alpha in 1e-3f64..0.999) {
            let reference = sigmoid(r.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP) + logit(alpha));
            prop_assert!((pi_update(r, alpha) - reference).abs() <= 1e-12);
        }
    }
}
