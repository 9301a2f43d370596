//! Training objectives with analytic gradients.
//!
//! Every loss takes an optional gradient buffer laid out like
//! [`Model::params`]; when given, the loss gradient is added to it.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{alt_reliability, AltReliability};
use crate::geometry::{BinaryMask, Region};
use crate::model::nn::{bce_with_logit, log_sum_exp, sigmoid, softmax, softplus};
use crate::model::{ImageGraph, Model};
use crate::pseudo::PseudoLabel;
use crate::rng::{stream_rng, streams};
use crate::semantic::{dot, ClassId, EmbeddingTable};
use crate::world::{Image, MaskedSample};

/// How Monte-Carlo noise draws are combined per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McAggregation {
    /// `-ln((1/K) sum_k sigma(a_k))`: negative log of the averaged likelihood.
    Likelihood,
    /// `(1/K) sum_k BCE_k`: averaged loss.
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Reference noise level; a pseudo mask with this mean noise gets weight 1.
    pub eta: f64,
    pub mc_samples: usize,
    pub aggregation: McAggregation,
    /// Variances are clamped from below to this value.
    pub min_variance: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { eta: 0.01, mc_samples: 8, aggregation: McAggregation::Likelihood, min_variance: 1e-12 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::config("eta must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples must be at least 1"));
        }
        if !(self.min_variance.is_finite() && self.min_variance > 0.0) {
            return Err(Error::config("min_variance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GtLossConfig {
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub background_weight: f64,
    pub mask_weight: f64,
}

impl Default for GtLossConfig {
    fn default() -> Self {
        Self { fg_iou: 0.5, bg_iou: 0.3, background_weight: 0.2, mask_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gt: GtLossConfig,
    pub noise: NoiseConfig,
    /// Divide per-object mask losses by the pixel count `M * M`.
    pub normalize_mask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gt: GtLossConfig::default(), noise: NoiseConfig::default(), normalize_mask: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.gt;
        if !(0.0 <= g.bg_iou && g.bg_iou <= g.fg_iou && g.fg_iou <= 1.0) {
            return Err(Error::config("need 0 <= bg_iou <= fg_iou <= 1"));
        }
        if !(g.background_weight >= 0.0 && g.mask_weight >= 0.0) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        self.noise.validate()
    }
}

// ---------------------------------------------------------------------------
// Scalar kernels

/// Softmax cross-entropy of `target`; returns the loss and its gradient
/// with respect to the logits.
pub fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut d: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    d[target] -= 1.0;
    (lse - logits[target], d)
}

fn class_logits(table: &EmbeddingTable, classes: &[ClassId], e: &[f64]) -> Vec<f64> {
    classes.iter().map(|&c| dot(table.vector(c), e)).collect()
}

/// `d e = sum_w d_logit_w * v_w`, scaled by `scale`.
fn logits_to_embedding_grad(table: &EmbeddingTable, classes: &[ClassId], d_logits: &[f64], scale: f64) -> Vec<f64> {
    let mut d = vec![0.0; table.dim()];
    for (&c, &g) in classes.iter().zip(d_logits) {
        for (t, v) in d.iter_mut().zip(table.vector(c)) {
            *t += scale * g * v;
        }
    }
    d
}

/// Summed (or pixel-averaged) BCE of `target` against `logits`, with the
/// logit gradient.
pub fn naive_mask_loss(logits: &[f64], target: &[bool], normalize: bool) -> (f64, Vec<f64>) {
    let scale = if normalize { 1.0 / logits.len() as f64 } else { 1.0 };
    let mut loss = 0.0;
    let d = logits
        .iter()
        .zip(target)
        .map(|(&s, &y)| {
            let y = if y { 1.0 } else { 0.0 };
            loss += bce_with_logit(y, s);
            scale * (sigmoid(s) - y)
        })
        .collect();
    (scale * loss, d)
}

/// Per-pixel variances from noise-head log-variances, clamped from below.
pub fn variances(log_var: &[f64], min_variance: f64) -> Vec<f64> {
    log_var.iter().map(|r| r.exp().max(min_variance)).collect()
}

pub fn mean_noise(variances: &[f64]) -> f64 {
    variances.iter().sum::<f64>() / variances.len() as f64
}

/// `K * P` standard normal draws, sample-major.
pub fn draw_noise<R: Rng>(rng: &mut R, mc_samples: usize, pixels: usize) -> Vec<f64> {
    (0..mc_samples * pixels).map(|_| rng.sample(StandardNormal)).collect()
}

/// Mask loss with logits corrupted by `eps = sqrt(var) * z`.
///
/// Returns the loss and its gradients with respect to the logits and the
/// log-variances. Pixels whose variance sits at the floor get no
/// log-variance gradient.
pub fn noisy_mask_loss(logits: &[f64], log_var: &[f64], target: &[bool], z: &[f64], cfg: &NoiseConfig, normalize: bool) -> (f64, Vec<f64>, Vec<f64>) {
    let p = logits.len();
    let k = cfg.mc_samples;
    assert_eq!(z.len(), k * p, "noise draws must be mc_samples x pixels");
    let scale = if normalize { 1.0 / p as f64 } else { 1.0 };
    let mut d_s = vec![0.0; p];
    let mut d_r = vec![0.0; p];
    let mut loss = 0.0;
    let mut a = vec![0.0; k];
    let mut eps = vec![0.0; k];
    for i in 0..p {
        let var = log_var[i].exp();
        let clamped = var < cfg.min_variance;
        let sd = var.max(cfg.min_variance).sqrt();
        let sign = if target[i] { 1.0 } else { -1.0 };
        for j in 0..k {
            eps[j] = sd * z[j * p + i];
            a[j] = sign * (logits[i] + eps[j]);
        }
        // dL/da_j
        let da: Vec<f64> = match cfg.aggregation {
            McAggregation::Likelihood => {
                // ln sigma(a) = -softplus(-a)
                let logq: Vec<f64> = a.iter().map(|&v| -softplus(-v)).collect();
                let lse = log_sum_exp(&logq);
                loss += (k as f64).ln() - lse;
                let w = softmax(&logq);
                a.iter().zip(&w).map(|(&v, &wj)| -wj * (1.0 - sigmoid(v))).collect()
            }
            McAggregation::Loss => {
                loss += a.iter().map(|&v| softplus(-v)).sum::<f64>() / k as f64;
                a.iter().map(|&v| -(1.0 - sigmoid(v)) / k as f64).collect()
            }
        };
        for j in 0..k {
            d_s[i] += scale * sign * da[j];
            if !clamped {
                d_r[i] += scale * sign * da[j] * eps[j] / 2.0;
            }
        }
    }
    (scale * loss, d_s, d_r)
}

/// `eta / mean(noise_map)`.
pub fn reliability(noise_map: &[f64], cfg: &NoiseConfig) -> Result<f64> {
    if noise_map.is_empty() || noise_map.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("noise map must be nonempty and strictly positive"));
    }
    Ok(cfg.eta / mean_noise(noise_map))
}

/// The smallest of the observed mean noise levels.
pub fn eta_from_mean_noise(mean_noise: &[f64]) -> Result<f64> {
    let eta = mean_noise.iter().copied().fold(f64::INFINITY, f64::min);
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::data("no pseudo labels to calibrate eta on"));
    }
    Ok(eta)
}

/// Ground-truth mask resampled onto an `m x m` grid over `region` by
/// nearest-neighbour lookup of grid-cell centres.
pub fn resample_mask(mask: &BinaryMask, region: &Region, m: usize) -> Vec<bool> {
    let mut out = vec![false; m * m];
    for i in 0..m {
        let y = region.y0 + (i as f64 + 0.5) * region.height() / m as f64;
        for j in 0..m {
            let x = region.x0 + (j as f64 + 0.5) * region.width() / m as f64;
            if x >= 0.0 && y >= 0.0 && (x as usize) < mask.width && (y as usize) < mask.height {
                out[i * m + j] = mask.get(x as usize, y as usize);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Ground-truth loss

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalTarget {
    /// Index of the matched annotation.
    Foreground(usize),
    Background,
    Ignore,
}

/// Labels each proposal by its best IoU with the annotation boxes.
pub fn assign_proposals(proposals: &[Region], boxes: &[Region], cfg: &GtLossConfig) -> Vec<ProposalTarget> {
    proposals
        .iter()
        .map(|p| {
            let mut best = (usize::MAX, -1.0);
            for (k, b) in boxes.iter().enumerate() {
                let iou = p.iou(b);
                if iou > best.1 {
                    best = (k, iou);
                }
            }
            if best.1 >= cfg.fg_iou {
                ProposalTarget::Foreground(best.0)
            } else if best.1 < cfg.bg_iou {
                ProposalTarget::Background
            } else {
                ProposalTarget::Ignore
            }
        })
        .collect()
}

/// Classification and mask components of the ground-truth loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GtTerms {
    pub classification: f64,
    pub mask: f64,
    pub total: f64,
}

/// Detection loss on one mask-annotated image.
///
/// Classification: cross-entropy over the base-class scores plus a zero
/// background logit, background terms weighted by `background_weight`,
/// normalized by the total weight. Mask: mean over foreground proposals of
/// the pixel-averaged BCE against the resampled ground-truth mask.
pub fn loss_gt(
    model: &Model,
    sample: &MaskedSample,
    proposals: &[Region],
    table: &EmbeddingTable,
    base: &[ClassId],
    cfg: &GtLossConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<GtTerms> {
    if sample.annotations.is_empty() {
        return Err(Error::invalid("mask-annotated sample without annotations"));
    }
    if base.is_empty() {
        return Err(Error::invalid("empty base class set"));
    }
    let boxes: Vec<Region> = sample.annotations.iter().map(|a| a.bbox).collect();
    let targets = assign_proposals(proposals, &boxes, cfg);
    let weight_of = |t: &ProposalTarget| match t {
        ProposalTarget::Foreground(_) => 1.0,
        ProposalTarget::Background => cfg.background_weight,
        ProposalTarget::Ignore => 0.0,
    };
    let total_weight: f64 = targets.iter().map(weight_of).sum();
    let n_fg = targets.iter().filter(|t| matches!(t, ProposalTarget::Foreground(_))).count();
    let labels = sample
        .annotations
        .iter()
        .map(|a| base.iter().position(|&c| c == a.class).ok_or_else(|| Error::invalid(format!("annotation class {} is not a base class", a.class.0))))
        .collect::<Result<Vec<_>>>()?;

    let m = model.config.mask_size;
    let mut graph = ImageGraph::new(model, &sample.image)?;
    let mut terms = GtTerms::default();
    for (p, t) in proposals.iter().zip(&targets) {
        let w = weight_of(t);
        if w == 0.0 {
            continue;
        }
        let roi = graph.region(p)?;
        let mut d_rf = vec![0.0; roi.feature.values.len()];
        let (e, ec) = model.embed_forward(&roi.feature);
        let mut logits = class_logits(table, base, &e);
        logits.push(0.0);
        let target = match t {
            ProposalTarget::Foreground(k) => labels[*k],
            _ => base.len(),
        };
        let (ce, d_logits) = softmax_ce(&logits, target);
        terms.classification += w * ce / total_weight;
        if let Some(g) = grad.as_deref_mut() {
            let d_e = logits_to_embedding_grad(table, base, &d_logits[..base.len()], w / total_weight);
            model.embed_backward(&roi.feature, &ec, &d_e, g, Some(&mut d_rf));
        }
        if let ProposalTarget::Foreground(k) = *t {
            let gt = resample_mask(&sample.annotations[k].mask, &roi.region, m);
            let out = model.mask_forward(&roi.feature);
            let (l, d) = naive_mask_loss(&out.raw, &gt, true);
            terms.mask += l / n_fg as f64;
            if let Some(g) = grad.as_deref_mut() {
                let s = cfg.mask_weight / n_fg as f64;
                let d: Vec<f64> = d.iter().map(|v| v * s).collect();
                model.mask_backward(&roi.feature, &out.cache, &d, g, Some(&mut d_rf));
            }
        }
        if grad.is_some() {
            graph.backward_region(&roi, &d_rf);
        }
    }
    if let Some(g) = grad {
        graph.finish(g);
    }
    terms.total = terms.classification + cfg.mask_weight * terms.mask;
    Ok(terms)
}

// ---------------------------------------------------------------------------
// Caption-image losses

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLossKind {
    None,
    Naive,
    Noisy,
}

/// Where per-object reliability weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    /// `eta` over the student's mean predicted noise at the aligned region.
    NoiseHead,
    ClassScore,
    PixelScore,
    DropoutEntropy,
}

/// Linear combination of the loss components of the student objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub gt: f64,
    /// Unweighted cross-modal loss.
    pub x: f64,
    /// Reliability-weighted cross-modal loss.
    pub x_alpha: f64,
    pub mask: f64,
    pub mask_loss: MaskLossKind,
    pub alpha: AlphaSource,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self::robust()
    }
}

impl ObjectiveWeights {
    pub fn robust() -> Self {
        Self { gt: 1.0, x: 0.0, x_alpha: 1.0, mask: 1.0, mask_loss: MaskLossKind::Noisy, alpha: AlphaSource::NoiseHead }
    }

    pub fn gt_only() -> Self {
        Self { gt: 1.0, x: 0.0, x_alpha: 0.0, mask: 0.0, mask_loss: MaskLossKind::None, alpha: AlphaSource::NoiseHead }
    }
}

/// Caption-side loss values of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptionTerms {
    pub l_x: f64,
    pub l_x_alpha: f64,
    pub l_m: f64,
    /// Per-object weights, when the weighted cross-modal loss is active.
    pub alpha: Vec<f64>,
    /// Per-object mean predicted noise, when the noise head was evaluated.
    pub mean_noise: Vec<f64>,
}

/// All caption-side terms of one image in a single pass. `alpha_override`
/// replaces the computed reliability weights. Mask-noise draws come from
/// `noise_rng`; `dropout_rng` feeds the dropout reliability estimate.
#[allow(clippy::too_many_arguments)]
pub fn caption_image_terms<R: Rng, D: Rng>(
    model: &Model,
    image: &Image,
    labels: &[PseudoLabel],
    table: &EmbeddingTable,
    caption: &[ClassId],
    weights: &ObjectiveWeights,
    cfg: &LossConfig,
    noise_rng: &mut R,
    dropout_rng: &mut D,
    alpha_override: Option<&[f64]>,
    mut grad: Option<&mut [f64]>,
) -> Result<CaptionTerms> {
    let mut terms = CaptionTerms::default();
    if labels.is_empty() {
        return Ok(terms);
    }
    if alpha_override.is_some_and(|a| a.len() != labels.len()) {
        return Err(Error::invalid("one weight per pseudo label required"));
    }
    let use_x = weights.x != 0.0 || weights.x_alpha != 0.0;
    let use_mask = weights.mask != 0.0 && weights.mask_loss != MaskLossKind::None;
    let computed_alpha = weights.x_alpha != 0.0 && alpha_override.is_none();
    let need_noise = (use_mask && weights.mask_loss == MaskLossKind::Noisy) || (computed_alpha && weights.alpha == AlphaSource::NoiseHead);
    let mut graph = ImageGraph::new(model, image)?;
    for (idx, label) in labels.iter().enumerate() {
        let target = if use_x || computed_alpha {
            Some(
                caption
                    .iter()
                    .position(|&c| c == label.class)
                    .ok_or_else(|| Error::invalid(format!("pseudo label {:?} is not a caption class", label.object)))?,
            )
        } else {
            None
        };
        let roi = graph.region(&label.region)?;
        let mut d_rf = vec![0.0; roi.feature.values.len()];
        let noise = need_noise.then(|| model.noise_forward(&roi.feature));
        if let Some(n) = &noise {
            terms.mean_noise.push(mean_noise(&variances(&n.raw, cfg.noise.min_variance)));
        }
        let alpha = if weights.x_alpha == 0.0 {
            None
        } else if let Some(a) = alpha_override {
            Some(a[idx])
        } else {
            let t = target.expect("target resolved");
            Some(match weights.alpha {
                AlphaSource::NoiseHead => cfg.noise.eta / terms.mean_noise.last().copied().expect("noise head evaluated"),
                AlphaSource::ClassScore => alt_reliability(AltReliability::ClassScore, model, &roi.feature, table, caption, t, dropout_rng)?,
                AlphaSource::PixelScore => alt_reliability(AltReliability::PixelScore, model, &roi.feature, table, caption, t, dropout_rng)?,
                AlphaSource::DropoutEntropy => alt_reliability(AltReliability::DropoutEntropy, model, &roi.feature, table, caption, t, dropout_rng)?,
            })
        };
        if let Some(a) = alpha {
            terms.alpha.push(a);
        }
        if let (true, Some(t)) = (use_x, target) {
            let (e, ec) = model.embed_forward(&roi.feature);
            let (ce, d_logits) = softmax_ce(&class_logits(table, caption, &e), t);
            let coeff = weights.x + weights.x_alpha * alpha.unwrap_or(0.0);
            if weights.x != 0.0 {
                terms.l_x += ce;
            }
            if let Some(a) = alpha {
                terms.l_x_alpha += a * ce;
            }
            if let Some(g) = grad.as_deref_mut() {
                let d_e = logits_to_embedding_grad(table, caption, &d_logits, coeff);
                model.embed_backward(&roi.feature, &ec, &d_e, g, Some(&mut d_rf));
            }
        }
        if use_mask {
            let out = model.mask_forward(&roi.feature);
            match weights.mask_loss {
                MaskLossKind::Naive => {
                    let (l, d) = naive_mask_loss(&out.raw, &label.mask, cfg.normalize_mask);
                    terms.l_m += l;
                    if let Some(g) = grad.as_deref_mut() {
                        let d: Vec<f64> = d.iter().map(|v| v * weights.mask).collect();
                        model.mask_backward(&roi.feature, &out.cache, &d, g, Some(&mut d_rf));
                    }
                }
                MaskLossKind::Noisy => {
                    let n = noise.as_ref().expect("noise head evaluated");
                    let z = draw_noise(noise_rng, cfg.noise.mc_samples, out.raw.len());
                    let (l, ds, dr) = noisy_mask_loss(&out.raw, &n.raw, &label.mask, &z, &cfg.noise, cfg.normalize_mask);
                    terms.l_m += l;
                    if let Some(g) = grad.as_deref_mut() {
                        let ds: Vec<f64> = ds.iter().map(|v| v * weights.mask).collect();
                        let dr: Vec<f64> = dr.iter().map(|v| v * weights.mask).collect();
                        model.mask_backward(&roi.feature, &out.cache, &ds, g, Some(&mut d_rf));
                        model.noise_backward(&roi.feature, &n.cache, &dr, g, Some(&mut d_rf));
                    }
                }
                MaskLossKind::None => unreachable!("inactive mask loss"),
            }
        }
        if grad.is_some() {
            graph.backward_region(&roi, &d_rf);
        }
    }
    if let Some(g) = grad {
        graph.finish(g);
    }
    Ok(terms)
}

#[allow(clippy::too_many_arguments)]
fn single_term<R: Rng>(
    model: &Model,
    image: &Image,
    labels: &[PseudoLabel],
    table: &EmbeddingTable,
    caption: &[ClassId],
    weights: ObjectiveWeights,
    cfg: &LossConfig,
    rng: &mut R,
    alpha_override: Option<&[f64]>,
    grad: Option<&mut [f64]>,
) -> Result<CaptionTerms> {
    let mut dropout = stream_rng(0, streams::DROPOUT, 0);
    caption_image_terms(model, image, labels, table, caption, &weights, cfg, rng, &mut dropout, alpha_override, grad)
}

fn cross_modal_weights() -> ObjectiveWeights {
    ObjectiveWeights { gt: 0.0, x: 1.0, x_alpha: 0.0, mask: 0.0, mask_loss: MaskLossKind::None, alpha: AlphaSource::NoiseHead }
}

/// `-sum_o log softmax_o` over caption-class scores at each aligned region.
pub fn loss_cross_modal(model: &Model, image: &Image, labels: &[PseudoLabel], table: &EmbeddingTable, caption: &[ClassId], grad: Option<&mut [f64]>) -> Result<f64> {
    let mut rng = stream_rng(0, streams::MASK_NOISE, 0);
    Ok(single_term(model, image, labels, table, caption, cross_modal_weights(), &LossConfig::default(), &mut rng, None, grad)?.l_x)
}

/// Cross-modal loss with one fixed weight per pseudo label.
pub fn loss_cross_modal_weighted(
    model: &Model,
    image: &Image,
    labels: &[PseudoLabel],
    table: &EmbeddingTable,
    caption: &[ClassId],
    alpha: &[f64],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let w = ObjectiveWeights { x: 0.0, x_alpha: 1.0, ..cross_modal_weights() };
    let mut rng = stream_rng(0, streams::MASK_NOISE, 0);
    Ok(single_term(model, image, labels, table, caption, w, &LossConfig::default(), &mut rng, Some(alpha), grad)?.l_x_alpha)
}

/// Cross-modal loss weighted by reliabilities from the model's own noise
/// head. The weights are constants with respect to the parameters.
pub fn loss_cross_modal_reweighted(
    model: &Model,
    image: &Image,
    labels: &[PseudoLabel],
    table: &EmbeddingTable,
    caption: &[ClassId],
    cfg: &LossConfig,
    grad: Option<&mut [f64]>,
) -> Result<(f64, Vec<f64>)> {
    let w = ObjectiveWeights { x: 0.0, x_alpha: 1.0, ..cross_modal_weights() };
    let mut rng = stream_rng(0, streams::MASK_NOISE, 0);
    let t = single_term(model, image, labels, table, caption, w, cfg, &mut rng, None, grad)?;
    Ok((t.l_x_alpha, t.alpha))
}

pub fn loss_mask_naive(model: &Model, image: &Image, labels: &[PseudoLabel], normalize: bool, grad: Option<&mut [f64]>) -> Result<f64> {
    let w = ObjectiveWeights { gt: 0.0, x: 0.0, x_alpha: 0.0, mask: 1.0, mask_loss: MaskLossKind::Naive, alpha: AlphaSource::NoiseHead };
    let cfg = LossConfig { normalize_mask: normalize, ..LossConfig::default() };
    let mut rng = stream_rng(0, streams::MASK_NOISE, 0);
    Ok(single_term(model, image, labels, &dummy_table(), &[], w, &cfg, &mut rng, None, grad)?.l_m)
}

/// Monte-Carlo mask loss under reparameterized Gaussian logit noise. Draws
/// are taken from `rng` in object, sample, pixel order.
pub fn loss_mask_noisy<R: Rng>(model: &Model, image: &Image, labels: &[PseudoLabel], cfg: &LossConfig, rng: &mut R, grad: Option<&mut [f64]>) -> Result<f64> {
    let w = ObjectiveWeights { gt: 0.0, x: 0.0, x_alpha: 0.0, mask: 1.0, mask_loss: MaskLossKind::Noisy, alpha: AlphaSource::NoiseHead };
    Ok(single_term(model, image, labels, &dummy_table(), &[], w, cfg, rng, None, grad)?.l_m)
}

fn dummy_table() -> EmbeddingTable {
    EmbeddingTable::new(1, Vec::new()).expect("empty table")
}

// ---------------------------------------------------------------------------
// Combined objective

/// Class sets used by the losses.
#[derive(Debug, Clone, Copy)]
pub struct Semantics<'a> {
    pub table: &'a EmbeddingTable,
    pub base: &'a [ClassId],
    pub caption: &'a [ClassId],
}

#[derive(Debug, Clone, Copy)]
pub struct CaptionItem<'a> {
    pub image: &'a Image,
    pub labels: &'a [PseudoLabel],
}

#[derive(Debug, Clone, Copy)]
pub struct BaseItem<'a> {
    pub sample: &'a MaskedSample,
    pub proposals: &'a [Region],
}

/// Summed loss components over a caption batch and a base batch.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub l_gt: f64,
    pub l_x: f64,
    pub l_m: f64,
    pub l_x_alpha: f64,
    pub total: f64,
    /// Reliability of every pseudo label, batch order.
    pub per_object_alpha: Vec<f64>,
    pub per_object_mean_noise: Vec<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_gt, self.l_x, self.l_m, self.l_x_alpha, self.total].iter().all(|v| v.is_finite())
    }
}

enum Part {
    Caption(CaptionTerms),
    Base(f64),
}

/// `gt * sum_base L_GT + sum_caption (x * L_X + x_alpha * L_X^alpha + mask * L_M)`.
///
/// Caption image `j` draws mask noise from stream `(seed, mask-noise, j)`.
/// Per-image work runs in parallel; results are reduced in batch order.
#[allow(clippy::too_many_arguments)]
pub fn total_student_objective(
    model: &Model,
    caption_batch: &[CaptionItem<'_>],
    base_batch: &[BaseItem<'_>],
    sem: &Semantics<'_>,
    weights: &ObjectiveWeights,
    cfg: &LossConfig,
    seed: u64,
    grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    if caption_batch.is_empty() && base_batch.is_empty() {
        return Err(Error::invalid("both batches are empty"));
    }
    let want_grad = grad.is_some();
    let n_params = model.params.len();
    let caption_active = weights.x != 0.0 || weights.x_alpha != 0.0 || (weights.mask != 0.0 && weights.mask_loss != MaskLossKind::None);
    let jobs: Vec<(bool, usize)> = (0..caption_batch.len())
        .filter(|_| caption_active)
        .map(|j| (true, j))
        .chain((0..base_batch.len()).filter(|_| weights.gt != 0.0).map(|j| (false, j)))
        .collect();
    let results: Vec<Result<(Part, Option<Vec<f64>>)>> = jobs
        .par_iter()
        .map(|&(is_caption, j)| {
            let mut g = want_grad.then(|| vec![0.0; n_params]);
            let part = if is_caption {
                let item = caption_batch[j];
                let mut noise = stream_rng(seed, streams::MASK_NOISE, j as u64);
                let mut dropout = stream_rng(seed, streams::DROPOUT, j as u64);
                Part::Caption(caption_image_terms(
                    model,
                    item.image,
                    item.labels,
                    sem.table,
                    sem.caption,
                    weights,
                    cfg,
                    &mut noise,
                    &mut dropout,
                    None,
                    g.as_deref_mut(),
                )?)
            } else {
                let item = base_batch[j];
                let t = loss_gt(model, item.sample, item.proposals, sem.table, sem.base, &cfg.gt, g.as_deref_mut())?;
                if let Some(g) = g.as_mut() {
                    for v in g.iter_mut() {
                        *v *= weights.gt;
                    }
                }
                Part::Base(t.total)
            };
            Ok((part, g))
        })
        .collect();
    let mut out = LossBreakdown::default();
    let mut grad = grad;
    for r in results {
        let (part, g) = r?;
        match part {
            Part::Caption(t) => {
                out.l_x += t.l_x;
                out.l_x_alpha += t.l_x_alpha;
                out.l_m += t.l_m;
                out.per_object_alpha.extend(t.alpha);
                out.per_object_mean_noise.extend(t.mean_noise);
            }
            Part::Base(v) => out.l_gt += v,
        }
        if let (Some(acc), Some(g)) = (grad.as_deref_mut(), g) {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
    }
    out.total = weights.gt * out.l_gt + weights.x * out.l_x + weights.x_alpha * out.l_x_alpha + weights.mask * out.l_m;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_cross_entropy() {
        let (l, d) = softmax_ce(&[0.0; 13], 4);
        assert!((l - 13f64.ln()).abs() < 1e-14);
        assert!(d.iter().sum::<f64>().abs() < 1e-14);
        assert!(softmax_ce(&[1e4, 0.0], 0).0 < 1e-12);
    }

    #[test]
    fn naive_mask_examples() {
        let t = [true, false, true, true];
        let (l, _) = naive_mask_loss(&[0.0; 4], &t, false);
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-14);
        assert!((naive_mask_loss(&[0.0; 4], &t, true).0 - 2f64.ln()).abs() < 1e-14);
        assert!((naive_mask_loss(&[2.0], &[true], false).0 - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
        assert!(naive_mask_loss(&[1e4, -1e4], &[true, false], false).0 < 1e-12);
    }

    #[test]
    fn noisy_single_draw_replays_generator() {
        let cfg = NoiseConfig { mc_samples: 1, ..NoiseConfig::default() };
        let z = draw_noise(&mut ChaCha8Rng::seed_from_u64(11), 1, 1);
        let z0: f64 = ChaCha8Rng::seed_from_u64(11).sample(StandardNormal);
        assert_eq!(z[0], z0);
        let var: f64 = 0.7;
        let (l, _, _) = noisy_mask_loss(&[0.3], &[var.ln()], &[true], &z, &cfg, false);
        assert!((l - bce_with_logit(1.0, 0.3 + var.sqrt() * z0)).abs() < 1e-12);
        let loss_cfg = NoiseConfig { aggregation: McAggregation::Loss, ..cfg };
        assert!((noisy_mask_loss(&[0.3], &[var.ln()], &[true], &z, &loss_cfg, false).0 - l).abs() < 1e-12);
    }

    #[test]
    fn noisy_kernel_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for aggregation in [McAggregation::Likelihood, McAggregation::Loss] {
            let cfg = NoiseConfig { mc_samples: 5, aggregation, ..NoiseConfig::default() };
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..1.0)).collect();
            let t: Vec<bool> = (0..6).map(|_| rng.gen()).collect();
            let z = draw_noise(&mut rng, 5, 6);
            let (_, ds, dr) = noisy_mask_loss(&s, &r, &t, &z, &cfg, true);
            let f = |s: &[f64], r: &[f64]| noisy_mask_loss(s, r, &t, &z, &cfg, true).0;
            let h = 1e-6;
            for i in 0..6 {
                let (mut sp, mut sm) = (s.clone(), s.clone());
                sp[i] += h;
                sm[i] -= h;
                assert!(((f(&sp, &r) - f(&sm, &r)) / (2.0 * h) - ds[i]).abs() < 1e-8);
                let (mut rp, mut rm) = (r.clone(), r.clone());
                rp[i] += h;
                rm[i] -= h;
                assert!(((f(&s, &rp) - f(&s, &rm)) / (2.0 * h) - dr[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn vanishing_variance_recovers_naive_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = NoiseConfig::default();
        let s: Vec<f64> = (0..49).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<bool> = (0..49).map(|_| rng.gen()).collect();
        let z = draw_noise(&mut rng, cfg.mc_samples, 49);
        let (noisy, _, dr) = noisy_mask_loss(&s, &[-100.0; 49], &t, &z, &cfg, true);
        assert!((noisy - naive_mask_loss(&s, &t, true).0).abs() < 1e-6);
        assert!(dr.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reliability_law() {
        let cfg = NoiseConfig { eta: 0.01, ..NoiseConfig::default() };
        assert_eq!(reliability(&[0.01; 4], &cfg).unwrap(), 1.0);
        assert!((reliability(&[0.02; 9], &cfg).unwrap() - 0.5).abs() < 1e-15);
        let map = [0.01, 0.03, 0.5];
        let doubled: Vec<f64> = map.iter().map(|v| v * 2.0).collect();
        assert!((reliability(&doubled, &cfg).unwrap() * 2.0 - reliability(&map, &cfg).unwrap()).abs() < 1e-15);
        assert!(reliability(&[0.0, 1.0], &cfg).is_err());
        assert_eq!(eta_from_mean_noise(&[0.3]).unwrap(), 0.3);
        assert!(eta_from_mean_noise(&[]).is_err());
    }

    #[test]
    fn proposal_assignment_thresholds() {
        let gt = [Region::new(0.0, 0.0, 10.0, 10.0)];
        let props = [Region::new(0.0, 0.0, 10.0, 8.0), Region::new(0.0, 0.0, 10.0, 4.0), Region::new(20.0, 20.0, 30.0, 30.0)];
        let t = assign_proposals(&props, &gt, &GtLossConfig::default());
        assert_eq!(t, vec![ProposalTarget::Foreground(0), ProposalTarget::Ignore, ProposalTarget::Background]);
    }

    #[test]
    fn resampled_full_box_mask() {
        let mut m = BinaryMask::empty(8, 8);
        for y in 2..6 {
            for x in 2..6 {
                m.set(x, y, true);
            }
        }
        assert!(resample_mask(&m, &Region::new(2.0, 2.0, 6.0, 6.0), 3).iter().all(|&b| b));
        assert_eq!(resample_mask(&m, &Region::new(0.0, 0.0, 8.0, 8.0), 4), vec![
            false, false, false, false, false, true, true, false, false, true, true, false, false, false, false, false
        ]);
    }
}
