//! Toy dual-encoder training with hand-written backpropagation.
//!
//! Per study the image encoder sees both views and the text encoder both
//! sections. Losses are computed on the resulting Gaussian embeddings,
//! gradients flow back through the heads and hidden layers, the global
//! gradient norm is clipped and AdamW takes a step. The match scalars `a`, `b`
//! are shared by the inter- and intra-modal terms and trained alongside the
//! encoders.
//!
//! Per-sample backward passes run through [`crate::par`] in fixed-size chunks;
//! chunk sums are added in chunk order so results do not depend on the number
//! of threads.

mod baseline;
pub mod checkpoint;
pub mod encoder;
pub mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gaussian::{GaussianEmbedding, MatchScalars};
use crate::objective::{self, FourViews, LossBreakdown, LossConfig, MatchMatrix};
use crate::par;
use crate::store::EmbeddingStore;
use crate::synth::{derive_seed, fill_missing_views, SynthDataset, SynthStudy};
use crate::{Error, Result};

pub use encoder::{Dense, Encoder, ForwardCache};
pub use optim::{clip_global_norm, global_norm, lr_schedule, AdamW, AdamWConfig, Schedule};

const BACKWARD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_max_norm: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            base_lr: 5e-5,
            lr_min: 0.0,
            schedule: Schedule::Cosine,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_max_norm: 1.0,
            seed: 42,
            embed_dim: 16,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.base_lr) {
            return Err(Error::invalid("lr_min must lie in [0, base_lr]"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.embed_dim < 1 || self.hidden.contains(&0) {
            return Err(Error::invalid("embed_dim and hidden sizes must be positive"));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::invalid("clip_max_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer moments must lie in [0, 1) and eps > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainObjective {
    /// Composite Gaussian-embedding objective.
    Probabilistic(LossConfig),
    /// Deterministic bidirectional InfoNCE on cosine similarity of the means,
    /// averaged over the four view/section pairings.
    InfoNce { temperature: f64 },
}

impl Default for TrainObjective {
    fn default() -> Self {
        TrainObjective::Probabilistic(LossConfig::default())
    }
}

/// How a trained model scores image/text pairs at retrieval time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Contrastive stochastic distance between Gaussian embeddings.
    Csd,
    /// Negative cosine similarity of the means.
    NegCosine,
}

impl TrainObjective {
    pub fn scoring(&self) -> Scoring {
        match self {
            TrainObjective::Probabilistic(_) => Scoring::Csd,
            TrainObjective::InfoNce { .. } => Scoring::NegCosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TrainObjective::Probabilistic(cfg) => cfg.validate(),
            TrainObjective::InfoNce { temperature } if *temperature > 0.0 && temperature.is_finite() => Ok(()),
            TrainObjective::InfoNce { temperature } => {
                Err(Error::invalid(format!("temperature must be positive, got {temperature}")))
            }
        }
    }
}

/// Image and text encoders plus the shared match scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub image: Encoder,
    pub text: Encoder,
    pub scalars: MatchScalars,
    pub scoring: Scoring,
}

impl DualEncoder {
    pub fn init(image_dim: usize, text_dim: usize, cfg: &TrainConfig, scoring: Scoring) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let image = Encoder::init(image_dim, &cfg.hidden, cfg.embed_dim, &mut rng);
        let text = Encoder::init(text_dim, &cfg.hidden, cfg.embed_dim, &mut rng);
        Self { image, text, scalars: MatchScalars::default(), scoring }
    }

    pub fn num_params(&self) -> usize {
        self.image.num_params() + self.text.num_params() + 2
    }

    /// Image parameters, text parameters, raw scale, offset.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in self.image.param_slices().into_iter().chain(self.text.param_slices()) {
            out.extend_from_slice(s);
        }
        out.push(self.scalars.raw_scale);
        out.push(self.scalars.b);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dims(self.num_params(), flat.len()));
        }
        let mut pos = 0;
        for s in self.image.param_slices_mut().into_iter().chain(self.text.param_slices_mut()) {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        }
        self.scalars.raw_scale = flat[pos];
        self.scalars.b = flat[pos + 1];
        Ok(())
    }

    pub fn encode_image(&self, pixels: &[f64]) -> Result<GaussianEmbedding> {
        self.image.forward(pixels)
    }

    pub fn encode_text(&self, features: &[f64]) -> Result<GaussianEmbedding> {
        self.text.forward(features)
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DualEncoder,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn new(model: DualEncoder) -> Self {
        let n = model.num_params();
        Self { model, optimizer: AdamW::new(n) }
    }
}

/// Loss and flat gradient for one batch, before clipping.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
}

struct Forwarded {
    embeddings: Vec<GaussianEmbedding>,
    caches: Vec<ForwardCache>,
}

fn forward_many(encoder: &Encoder, inputs: &[&[f64]]) -> Result<Forwarded> {
    let results = par::map_slice(inputs, |x| encoder.forward_cached(x));
    let mut embeddings = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for r in results {
        let (z, c) = r?;
        embeddings.push(z);
        caches.push(c);
    }
    Ok(Forwarded { embeddings, caches })
}

fn backward_many(encoder: &Encoder, caches: &[ForwardCache], d_mu: &[Vec<f64>], d_lv: &[Vec<f64>]) -> Encoder {
    let n_chunks = caches.len().div_ceil(BACKWARD_CHUNK);
    let partials = par::map_range(n_chunks, |c| {
        let mut acc = encoder.zeros_like();
        let lo = c * BACKWARD_CHUNK;
        let hi = (lo + BACKWARD_CHUNK).min(caches.len());
        for k in lo..hi {
            encoder.backward(&caches[k], &d_mu[k], &d_lv[k], &mut acc);
        }
        acc
    });
    let mut total = encoder.zeros_like();
    for p in &partials {
        total.add_assign(p);
    }
    total
}

fn image_inputs(batch: &[SynthStudy]) -> Result<Vec<&[f64]>> {
    let mut inputs: Vec<&[f64]> = batch.iter().map(|s| s.view1.as_slice()).collect();
    for s in batch {
        inputs.push(s.view2()?.as_slice());
    }
    Ok(inputs)
}

fn text_inputs(batch: &[SynthStudy]) -> Vec<&[f64]> {
    batch.iter().map(|s| s.sect1.as_slice()).chain(batch.iter().map(|s| s.sect2.as_slice())).collect()
}

/// Upstream gradients on the `2B` image and `2B` text embeddings.
struct EmbeddingGrads {
    img_mu: Vec<Vec<f64>>,
    img_lv: Vec<Vec<f64>>,
    txt_mu: Vec<Vec<f64>>,
    txt_lv: Vec<Vec<f64>>,
    d_a: f64,
    d_b: f64,
}

/// Forward, loss and full backward pass for one batch.
pub fn batch_gradient(model: &DualEncoder, batch: &[SynthStudy], objective: &TrainObjective) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.len();
    let img = forward_many(&model.image, &image_inputs(batch)?)?;
    let txt = forward_many(&model.text, &text_inputs(batch))?;

    let (loss, up) = match objective {
        TrainObjective::Probabilistic(cfg) => {
            let views = FourViews {
                view1: &img.embeddings[..b],
                view2: &img.embeddings[b..],
                sect1: &txt.embeddings[..b],
                sect2: &txt.embeddings[b..],
            };
            let (loss, g) = objective::total_loss_with_grads(views, &MatchMatrix::identity(b), &model.scalars, cfg)?;
            let up = EmbeddingGrads {
                img_mu: [g.view1.mu, g.view2.mu].concat(),
                img_lv: [g.view1.log_var, g.view2.log_var].concat(),
                txt_mu: [g.sect1.mu, g.sect2.mu].concat(),
                txt_lv: [g.sect1.log_var, g.sect2.log_var].concat(),
                d_a: g.d_a,
                d_b: g.d_b,
            };
            (loss, up)
        }
        TrainObjective::InfoNce { temperature } => {
            let (loss, img_mu, txt_mu) = baseline::four_pair_infonce(&img.embeddings, &txt.embeddings, *temperature)?;
            let dim = model.image.embed_dim();
            let up = EmbeddingGrads {
                img_mu,
                img_lv: vec![vec![0.0; dim]; 2 * b],
                txt_mu,
                txt_lv: vec![vec![0.0; dim]; 2 * b],
                d_a: 0.0,
                d_b: 0.0,
            };
            let breakdown = LossBreakdown { inter: loss, total: loss, ..Default::default() };
            (breakdown, up)
        }
    };

    let g_img = backward_many(&model.image, &img.caches, &up.img_mu, &up.img_lv);
    let g_txt = backward_many(&model.text, &txt.caches, &up.txt_mu, &up.txt_lv);
    let mut grad = Vec::with_capacity(model.num_params());
    for s in g_img.param_slices().into_iter().chain(g_txt.param_slices()) {
        grad.extend_from_slice(s);
    }
    grad.push(up.d_a * model.scalars.a_grad_factor());
    grad.push(up.d_b);
    Ok(BatchGradient { loss, grad })
}

/// Forward-only loss for one batch (no caches, no gradients).
pub fn batch_loss(model: &DualEncoder, batch: &[SynthStudy], objective: &TrainObjective) -> Result<LossBreakdown> {
    let b = batch.len();
    let img: Vec<GaussianEmbedding> =
        image_inputs(batch)?.iter().map(|x| model.image.forward(x)).collect::<Result<_>>()?;
    let txt: Vec<GaussianEmbedding> =
        text_inputs(batch).iter().map(|x| model.text.forward(x)).collect::<Result<_>>()?;
    loss_on_embeddings(&img, &txt, b, &model.scalars, objective)
}

fn loss_on_embeddings(
    img: &[GaussianEmbedding],
    txt: &[GaussianEmbedding],
    b: usize,
    scalars: &MatchScalars,
    objective: &TrainObjective,
) -> Result<LossBreakdown> {
    match objective {
        TrainObjective::Probabilistic(cfg) => {
            let views = FourViews { view1: &img[..b], view2: &img[b..], sect1: &txt[..b], sect2: &txt[b..] };
            objective::total_loss(views, &MatchMatrix::identity(b), scalars, cfg)
        }
        TrainObjective::InfoNce { temperature } => {
            let loss = baseline::four_pair_infonce_loss(img, txt, *temperature)?;
            Ok(LossBreakdown { inter: loss, total: loss, ..Default::default() })
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

/// One optimizer step on `batch`; the learning rate follows the schedule at
/// the optimizer's current step out of `total_steps`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[SynthStudy],
    total_steps: u64,
    cfg: &TrainConfig,
    objective: &TrainObjective,
) -> Result<StepReport> {
    let step = state.optimizer.step;
    let lr = lr_schedule(step.min(total_steps), total_steps, cfg.base_lr, cfg.lr_min, cfg.schedule)?;
    let BatchGradient { loss, mut grad } = batch_gradient(&state.model, batch, objective)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("{loss:?}") });
    }
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step, detail: format!("gradient entry {k} is non-finite") });
    }
    let grad_norm = clip_global_norm(&mut grad, cfg.clip_max_norm);
    let clipped_norm = global_norm(&grad);
    let mut params = state.model.to_flat();
    state.optimizer.update(&mut params, &grad, lr, &cfg.adamw());
    state.model.load_flat(&params)?;
    Ok(StepReport { loss, grad_norm, clipped_norm, lr })
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    /// Mean loss breakdown per epoch.
    pub history: Vec<LossBreakdown>,
}

pub fn steps_per_epoch(n_studies: usize, batch_size: usize) -> usize {
    n_studies.div_ceil(batch_size)
}

/// Trains from a fresh initialization keyed on `cfg.seed`.
///
/// Missing second views are synthesized first. Each epoch shuffles the study
/// order with a stream derived from `(seed, epoch)`.
pub fn fit(dataset: &SynthDataset, cfg: &TrainConfig, objective: &TrainObjective) -> Result<FitResult> {
    cfg.validate()?;
    objective.validate()?;
    if dataset.studies.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let filled = fill_missing_views(dataset, cfg.seed);
    let studies = &filled.studies;
    let first = &studies[0];
    let model = DualEncoder::init(first.view1.as_slice().len(), first.sect1.len(), cfg, objective.scoring());
    let mut state = TrainState::new(model);
    let per_epoch = steps_per_epoch(studies.len(), cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs) as u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..studies.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(per_epoch);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| studies[i].clone()));
            losses.push(train_step(&mut state, &batch, total_steps, cfg, objective)?.loss);
        }
        history.push(LossBreakdown::mean(&losses));
    }
    Ok(FitResult { state, history })
}

/// Encodes view 1 and section 1 of every study (single-input inference).
pub fn encode_corpus(model: &DualEncoder, studies: &[SynthStudy]) -> Result<(EmbeddingStore, EmbeddingStore)> {
    let img =
        par::map_slice(studies, |s| model.encode_image(s.view1.as_slice())).into_iter().collect::<Result<Vec<_>>>()?;
    let txt = par::map_slice(studies, |s| model.encode_text(&s.sect1)).into_iter().collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = studies.iter().map(|s| s.id.clone()).collect();
    Ok((EmbeddingStore::from_embeddings(ids.clone(), &img)?, EmbeddingStore::from_embeddings(ids, &txt)?))
}

/// Encodes arbitrary report feature vectors (e.g. class prompts).
pub fn encode_texts(model: &DualEncoder, texts: &[Vec<f64>]) -> Result<Vec<GaussianEmbedding>> {
    par::map_slice(texts, |t| model.encode_text(t)).into_iter().collect()
}

/// Result of comparing backprop against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst relative error.
    pub worst_index: usize,
}

/// Denominator floor for relative errors: below this magnitude a central
/// difference at `h = 1e-5` cannot resolve a gradient to 1e-5 relative accuracy.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Checks every trainable scalar of `model` on `batch` against central
/// differences of the forward-only loss with step `h`.
pub fn gradient_check(
    model: &DualEncoder,
    batch: &[SynthStudy],
    objective: &TrainObjective,
    h: f64,
) -> Result<GradCheckReport> {
    let analytic = batch_gradient(model, batch, objective)?.grad;
    let b = batch.len();
    let img = forward_many(&model.image, &image_inputs(batch)?)?;
    let txt = forward_many(&model.text, &text_inputs(batch))?;
    let flat = model.to_flat();
    let n_img = model.image.num_params();
    let n_txt = model.text.num_params();

    // Only the encoder owning parameter `k` is re-run, and only downstream of `k`.
    let perturbed = |k: usize, value: f64| -> Result<(Vec<GaussianEmbedding>, Vec<GaussianEmbedding>, MatchScalars)> {
        let rerun = |encoder: &Encoder, fwd: &Forwarded, local: usize| -> Result<Vec<GaussianEmbedding>> {
            fwd.caches.iter().map(|c| encoder.forward_with_param(c, local, value)).collect()
        };
        let mut scalars = model.scalars;
        if k < n_img {
            return Ok((rerun(&model.image, &img, k)?, txt.embeddings.clone(), scalars));
        }
        if k < n_img + n_txt {
            return Ok((img.embeddings.clone(), rerun(&model.text, &txt, k - n_img)?, scalars));
        }
        if k == n_img + n_txt {
            scalars.raw_scale = value;
        } else {
            scalars.b = value;
        }
        Ok((img.embeddings.clone(), txt.embeddings.clone(), scalars))
    };

    let numeric = par::map_range(flat.len(), |k| -> Result<f64> {
        let (img_p, txt_p, s_p) = perturbed(k, flat[k] + h)?;
        let (img_m, txt_m, s_m) = perturbed(k, flat[k] - h)?;
        let diff = match objective {
            // term-wise difference keeps rounding noise far below the 1e-5 check
            TrainObjective::Probabilistic(cfg) => {
                let vp = FourViews { view1: &img_p[..b], view2: &img_p[b..], sect1: &txt_p[..b], sect2: &txt_p[b..] };
                let vm = FourViews { view1: &img_m[..b], view2: &img_m[b..], sect1: &txt_m[..b], sect2: &txt_m[b..] };
                objective::total_loss_difference((vp, &s_p), (vm, &s_m), &MatchMatrix::identity(b), cfg)?
            }
            TrainObjective::InfoNce { .. } => {
                loss_on_embeddings(&img_p, &txt_p, b, &s_p, objective)?.total
                    - loss_on_embeddings(&img_m, &txt_m, b, &s_m, objective)?.total
            }
        };
        Ok(diff / (2.0 * h))
    });
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0 };
    for (k, num) in numeric.into_iter().enumerate() {
        let num = num?;
        let rel = relative_error(analytic[k], num);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = k;
        }
        report.max_abs_error = report.max_abs_error.max((analytic[k] - num).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// Runs [`gradient_check`] on `n_batches` random batches of `batch_size`
/// studies. Batch `t` uses a fresh model initialized from a seed derived from
/// `(cfg.seed, t)` with match scalars drawn from `a in [0.5, 2]`, `b in [-1, 1]`,
/// so the check also covers scalars away from their initial values.
pub fn random_gradient_checks(
    dataset: &SynthDataset,
    cfg: &TrainConfig,
    objective: &TrainObjective,
    n_batches: usize,
    batch_size: usize,
    h: f64,
) -> Result<Vec<GradCheckReport>> {
    if dataset.studies.is_empty() || batch_size == 0 {
        return Err(Error::invalid("gradient check needs a non-empty dataset and batch"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    cfg.validate()?;
    objective.validate()?;
    let filled = fill_missing_views(dataset, cfg.seed);
    let first = &filled.studies[0];
    (0..n_batches)
        .map(|t| {
            let seed = derive_seed(cfg.seed, t as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch_cfg = TrainConfig { seed, ..cfg.clone() };
            let mut model =
                DualEncoder::init(first.view1.as_slice().len(), first.sect1.len(), &batch_cfg, objective.scoring());
            model.scalars = MatchScalars::new(rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0))?;
            let batch: Vec<SynthStudy> =
                (0..batch_size).map(|_| filled.studies[rng.random_range(0..filled.studies.len())].clone()).collect();
            gradient_check(&model, &batch, objective, h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_data(n: usize, seed: u64) -> SynthDataset {
        let cfg = SynthConfig {
            n_studies: n,
            n_classes: 3,
            ambiguity: 0.3,
            seed,
            height: 4,
            width: 4,
            text_dim: 6,
            latent_dim: 3,
            ..Default::default()
        };
        fill_missing_views(&generate_dataset(&cfg).unwrap(), seed)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { embed_dim: 4, hidden: vec![8, 6], batch_size: 8, ..Default::default() }
    }

    #[test]
    fn flat_roundtrip() {
        let model = DualEncoder::init(16, 6, &tiny_cfg(), Scoring::Csd);
        let flat = model.to_flat();
        let mut other = DualEncoder::init(16, 6, &TrainConfig { seed: 9, ..tiny_cfg() }, Scoring::Csd);
        assert_ne!(other, model);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, model);
        assert!(other.load_flat(&flat[1..]).is_err());
    }

    #[test]
    fn gradient_check_small_model() {
        let ds = tiny_data(4, 1);
        let model = DualEncoder::init(16, 6, &tiny_cfg(), Scoring::Csd);
        let report = gradient_check(&model, &ds.studies, &TrainObjective::default(), 1e-5).unwrap();
        assert_eq!(report.checked, model.num_params());
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn gradient_check_infonce() {
        let ds = tiny_data(4, 2);
        let model = DualEncoder::init(16, 6, &tiny_cfg(), Scoring::NegCosine);
        let obj = TrainObjective::InfoNce { temperature: 0.1 };
        let report = gradient_check(&model, &ds.studies, &obj, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let ds = tiny_data(8, 3);
        let cfg = TrainConfig { base_lr: 1e-3, ..tiny_cfg() };
        let mut state = TrainState::new(DualEncoder::init(16, 6, &cfg, Scoring::Csd));
        let before = state.model.clone();
        // at the end of a cosine schedule (lr_min = 0) the step size is zero
        state.optimizer.step = 10;
        let report = train_step(&mut state, &ds.studies, 10, &cfg, &TrainObjective::default()).unwrap();
        assert_eq!(report.lr, 0.0);
        assert!(report.loss.total.is_finite());
        assert_eq!(state.model, before);
    }

    #[test]
    fn clipping_bounds_the_applied_gradient() {
        let ds = tiny_data(8, 4);
        let cfg = TrainConfig { clip_max_norm: 1e-3, ..tiny_cfg() };
        let mut state = TrainState::new(DualEncoder::init(16, 6, &cfg, Scoring::Csd));
        let r = train_step(&mut state, &ds.studies, 100, &cfg, &TrainObjective::default()).unwrap();
        assert!(r.grad_norm > 1e-3);
        assert!(r.clipped_norm <= 1e-3 + 1e-9);

        let loose = TrainConfig { clip_max_norm: 1e6, ..tiny_cfg() };
        let mut state = TrainState::new(DualEncoder::init(16, 6, &loose, Scoring::Csd));
        let r = train_step(&mut state, &ds.studies, 100, &loose, &TrainObjective::default()).unwrap();
        assert_eq!(r.grad_norm, r.clipped_norm);
    }

    #[test]
    fn fixed_batch_loss_drops() {
        let ds = tiny_data(8, 5);
        let cfg = TrainConfig { base_lr: 3e-3, schedule: Schedule::Constant, ..tiny_cfg() };
        let obj = TrainObjective::default();
        let mut state = TrainState::new(DualEncoder::init(16, 6, &cfg, Scoring::Csd));
        let first = batch_loss(&state.model, &ds.studies, &obj).unwrap().total;
        for _ in 0..50 {
            train_step(&mut state, &ds.studies, 50, &cfg, &obj).unwrap();
        }
        let last = batch_loss(&state.model, &ds.studies, &obj).unwrap().total;
        assert!(last < 0.8 * first, "{first} -> {last}");
    }

    #[test]
    fn fit_is_deterministic_and_epochs_zero_is_init() {
        let ds = tiny_data(20, 6);
        let cfg = TrainConfig { epochs: 3, base_lr: 1e-3, ..tiny_cfg() };
        let a = fit(&ds, &cfg, &TrainObjective::default()).unwrap();
        let b = fit(&ds, &cfg, &TrainObjective::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state, b.state);
        assert_eq!(a.history.len(), 3);

        let none = fit(&ds, &TrainConfig { epochs: 0, ..cfg.clone() }, &TrainObjective::default()).unwrap();
        assert!(none.history.is_empty());
        assert_eq!(none.state.model, DualEncoder::init(16, 6, &cfg, Scoring::Csd));
    }

    #[test]
    fn encode_corpus_shapes() {
        let ds = tiny_data(10, 7);
        let model = DualEncoder::init(16, 6, &tiny_cfg(), Scoring::Csd);
        let (img, txt) = encode_corpus(&model, &ds.studies).unwrap();
        assert_eq!((img.len(), txt.len()), (10, 10));
        for i in 0..10 {
            assert_eq!(img.ids()[i], ds.studies[i].id);
            assert_eq!(txt.ids()[i], ds.studies[i].id);
        }
        assert!(img.log_var_raw().iter().chain(txt.log_var_raw()).all(|v| (-6.0..=6.0).contains(v)));
    }
}
