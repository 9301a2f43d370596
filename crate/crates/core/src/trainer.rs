//! Teacher training on mask-annotated images, then student self-training on
//! annotated images plus captioned images labeled by the frozen teacher.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::losses::{
    assign_proposals, loss_gt, total_student_objective, AlphaSource, BaseItem, CaptionItem, LossBreakdown, LossConfig, MaskLossKind,
    ObjectiveWeights, ProposalTarget, Semantics,
};
use crate::model::{Checkpoint, Model, ModelConfig, ProposalConfig};
use crate::pseudo::{PseudoLabel, PseudoLabeler};
use crate::rng::{stream_rng, streams};
use crate::semantic::ClassId;
use crate::world::{CaptionedSample, Dataset, MaskedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl OptimConfig {
    pub fn teacher() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 1e-4, iterations: 2000, lr_steps: vec![1500], lr_decay: 0.1, grad_clip: 10.0 }
    }

    pub fn student() -> Self {
        Self { lr: 0.001, momentum: 0.9, weight_decay: 1e-4, iterations: 1500, lr_steps: vec![1200], lr_decay: 0.1, grad_clip: 10.0 }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay.powi(self.lr_steps.iter().filter(|&&s| iteration >= s).count() as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("invalid optimizer settings"));
        }
        Ok(())
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::teacher()
    }
}

/// Momentum SGD with L2 weight decay and global-norm gradient clipping.
pub fn sgd_step(params: &mut [f64], velocity: &mut [f64], grad: &mut [f64], cfg: &OptimConfig, lr: f64) {
    if cfg.grad_clip > 0.0 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad.iter()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Region-of-interest sampling for the ground-truth loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiSampling {
    pub rois_per_image: usize,
    pub fg_fraction: f64,
}

impl Default for RoiSampling {
    fn default() -> Self {
        Self { rois_per_image: 32, fg_fraction: 0.5 }
    }
}

/// Training proposals for `sample` (grid plus jittered ground-truth boxes),
/// subsampled to at most `rois_per_image` with at most `fg_fraction`
/// foreground. Deterministic in `(seed, key)`.
pub fn sample_rois(sample: &MaskedSample, proposals: &ProposalConfig, sampling: &RoiSampling, loss: &LossConfig, seed: u64, key: u64) -> Vec<Region> {
    let (w, h) = (sample.image.width, sample.image.height);
    let boxes: Vec<Region> = sample.annotations.iter().map(|a| a.bbox).collect();
    let mut rng = stream_rng(seed, streams::PROPOSAL_JITTER, key);
    let all = proposals.train(w, h, &boxes, &mut rng);
    let targets = assign_proposals(&all, &boxes, &loss.gt);
    let fg: Vec<usize> = (0..all.len()).filter(|&i| matches!(targets[i], ProposalTarget::Foreground(_))).collect();
    let bg: Vec<usize> = (0..all.len()).filter(|&i| targets[i] == ProposalTarget::Background).collect();
    let mut rng = stream_rng(seed, streams::ROI_SAMPLING, key);
    let n_fg = fg.len().min((sampling.rois_per_image as f64 * sampling.fg_fraction).round() as usize);
    let n_bg = bg.len().min(sampling.rois_per_image - n_fg);
    let mut picked: Vec<usize> = sample_indices(&mut rng, fg.len(), n_fg).into_iter().map(|i| fg[i]).collect();
    picked.extend(sample_indices(&mut rng, bg.len(), n_bg).into_iter().map(|i| bg[i]));
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub l_gt: f64,
    pub l_x: f64,
    pub l_m: f64,
    pub l_x_alpha: f64,
    pub total: f64,
    pub mean_alpha: Option<f64>,
    pub min_alpha: Option<f64>,
    pub max_alpha: Option<f64>,
}

pub const LOG_HEADER: &str = "iteration,lr,l_gt,l_x,l_m,l_x_alpha,total,mean_alpha,min_alpha,max_alpha";

impl LogRow {
    fn new(iteration: usize, lr: f64, b: &LossBreakdown, scale: f64) -> Self {
        let a = &b.per_object_alpha;
        let stats = (!a.is_empty()).then(|| {
            (a.iter().sum::<f64>() / a.len() as f64, a.iter().copied().fold(f64::INFINITY, f64::min), a.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        });
        Self {
            iteration,
            lr,
            l_gt: b.l_gt * scale,
            l_x: b.l_x * scale,
            l_m: b.l_m * scale,
            l_x_alpha: b.l_x_alpha * scale,
            total: b.total * scale,
            mean_alpha: stats.map(|s| s.0),
            min_alpha: stats.map(|s| s.1),
            max_alpha: stats.map(|s| s.2),
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.lr,
            self.l_gt,
            self.l_x,
            self.l_m,
            self.l_x_alpha,
            self.total,
            opt(self.mean_alpha),
            opt(self.min_alpha),
            opt(self.max_alpha)
        )
        .expect("string write");
        s
    }
}

/// Receives one row per completed iteration.
pub trait TrainLog {
    fn record(&mut self, row: &LogRow) -> Result<()>;
}

impl TrainLog for Vec<LogRow> {
    fn record(&mut self, row: &LogRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Appends CSV rows to a writer.
pub struct CsvLog<W: Write>(pub W);

impl<W: Write> TrainLog for CsvLog<W> {
    fn record(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.0, "{}", row.to_csv())?;
        Ok(())
    }
}

/// Discards rows.
pub struct NoLog;

impl TrainLog for NoLog {
    fn record(&mut self, _: &LogRow) -> Result<()> {
        Ok(())
    }
}

fn check_finite(model: &Model, b: &LossBreakdown, iteration: usize) -> Result<()> {
    if !b.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss at iteration {iteration}: {b:?}")));
    }
    if !model.is_finite() {
        return Err(Error::Divergence(format!("non-finite parameters after iteration {iteration}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Teacher

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub rois: RoiSampling,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { optim: OptimConfig::teacher(), batch_size: 2, rois: RoiSampling::default(), seed: 1 }
    }
}

/// Shared inputs of both training phases.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub data: &'a Dataset,
    pub model: &'a ModelConfig,
    pub proposals: &'a ProposalConfig,
    pub loss: &'a LossConfig,
}

impl TrainContext<'_> {
    fn base_classes(&self) -> Vec<ClassId> {
        self.data.vocab.base()
    }
}

fn base_batch_rois(ctx: &TrainContext<'_>, sampling: &RoiSampling, seed: u64, stream: u64, iteration: usize, batch: usize) -> Vec<(usize, Vec<Region>)> {
    let n = ctx.data.base.len();
    let mut rng = stream_rng(seed, stream, iteration as u64);
    (0..batch)
        .map(|k| {
            let i = rng.gen_range(0..n);
            let key = ((stream << 40) ^ ((iteration as u64) << 8)) + k as u64;
            (i, sample_rois(&ctx.data.base[i], ctx.proposals, sampling, ctx.loss, seed, key))
        })
        .collect()
}

/// Minimizes the ground-truth loss with momentum SGD. Resumes from
/// `resume` when given (its iteration count, weights and velocities).
pub fn train_teacher(cfg: &TeacherConfig, ctx: &TrainContext<'_>, resume: Option<Checkpoint>, log: &mut dyn TrainLog) -> Result<Checkpoint> {
    cfg.optim.validate()?;
    if ctx.data.base.is_empty() {
        return Err(Error::data("no mask-annotated training images"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut model_cfg = ctx.model.clone();
    model_cfg.embed_dim = ctx.data.embeddings.dim();
    let (mut model, mut velocity, start) = match resume {
        Some(ck) => {
            let v = ck.velocity.unwrap_or_else(|| vec![0.0; ck.model.params.len()]);
            (ck.model, v, ck.iteration)
        }
        None => {
            let m = Model::init(model_cfg, cfg.seed)?;
            let v = vec![0.0; m.params.len()];
            (m, v, 0)
        }
    };
    let base = ctx.base_classes();
    let sem = Semantics { table: &ctx.data.embeddings, base: &base, caption: &[] };
    let weights = ObjectiveWeights::gt_only();
    for it in start..cfg.optim.iterations {
        let batch = base_batch_rois(ctx, &cfg.rois, cfg.seed, streams::TEACHER_BATCH, it, cfg.batch_size);
        let items: Vec<BaseItem<'_>> = batch.iter().map(|(i, r)| BaseItem { sample: &ctx.data.base[*i], proposals: r }).collect();
        let mut grad = model.zero_grad();
        let b = total_student_objective(&model, &[], &items, &sem, &weights, ctx.loss, 0, Some(&mut grad))?;
        let scale = 1.0 / cfg.batch_size as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let lr = cfg.optim.lr_at(it);
        sgd_step(&mut model.params, &mut velocity, &mut grad, &cfg.optim, lr);
        check_finite(&model, &b, it)?;
        log.record(&LogRow::new(it, lr, &b, scale))?;
    }
    let mut ck = Checkpoint::new(model, cfg.seed, cfg.optim.iterations.max(start));
    ck.velocity = Some(velocity);
    ck.run_config = serde_json::to_value(cfg)?;
    Ok(ck)
}

/// Mean ground-truth loss of `model` on the first `n` base images with
/// fixed sampled proposals.
pub fn probe_gt_loss(model: &Model, ctx: &TrainContext<'_>, n: usize, seed: u64) -> Result<f64> {
    let base = ctx.base_classes();
    let n = n.min(ctx.data.base.len());
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let rois = sample_rois(&ctx.data.base[i], ctx.proposals, &RoiSampling::default(), ctx.loss, seed, i as u64);
            loss_gt(model, &ctx.data.base[i], &rois, &ctx.data.embeddings, &base, &ctx.loss.gt, None).map(|t| t.total)
        })
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Student

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TeacherOnly,
    XOnly,
    XPlusMask,
    Robust,
    ClassScore,
    PixelScore,
    DropoutEntropy,
}

impl Strategy {
    pub const ALL: [Strategy; 7] =
        [Strategy::TeacherOnly, Strategy::XOnly, Strategy::XPlusMask, Strategy::Robust, Strategy::ClassScore, Strategy::PixelScore, Strategy::DropoutEntropy];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TeacherOnly => "teacher_only",
            Strategy::XOnly => "x_only",
            Strategy::XPlusMask => "x_plus_mask",
            Strategy::Robust => "robust",
            Strategy::ClassScore => "class_score",
            Strategy::PixelScore => "pixel_score",
            Strategy::DropoutEntropy => "dropout_entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }

    /// Loss wiring of the strategy.
    pub fn weights(self) -> ObjectiveWeights {
        let x_plus = |alpha| ObjectiveWeights { gt: 1.0, x: 0.0, x_alpha: 1.0, mask: 1.0, mask_loss: MaskLossKind::Naive, alpha };
        match self {
            Strategy::TeacherOnly => ObjectiveWeights::gt_only(),
            Strategy::XOnly => ObjectiveWeights { x: 1.0, ..ObjectiveWeights::gt_only() },
            Strategy::XPlusMask => ObjectiveWeights { x: 1.0, mask: 1.0, mask_loss: MaskLossKind::Naive, ..ObjectiveWeights::gt_only() },
            Strategy::Robust => ObjectiveWeights::robust(),
            Strategy::ClassScore => x_plus(AlphaSource::ClassScore),
            Strategy::PixelScore => x_plus(AlphaSource::PixelScore),
            Strategy::DropoutEntropy => x_plus(AlphaSource::DropoutEntropy),
        }
    }
}

/// How the reference noise level is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtaCalibration {
    /// Use this value instead of calibrating.
    pub fixed: Option<f64>,
    pub images: usize,
    pub steps: usize,
}

impl Default for EtaCalibration {
    fn default() -> Self {
        Self { fixed: None, images: 64, steps: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub optim: OptimConfig,
    pub caption_batch: usize,
    pub base_batch: usize,
    pub rois: RoiSampling,
    pub weights: ObjectiveWeights,
    pub eta: EtaCalibration,
    /// Label every captioned image once up front instead of per batch.
    pub cache_pseudo_labels: bool,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::student(),
            caption_batch: 2,
            base_batch: 2,
            rois: RoiSampling::default(),
            weights: ObjectiveWeights::robust(),
            eta: EtaCalibration::default(),
            cache_pseudo_labels: true,
            seed: 1,
        }
    }
}

/// Student configuration wired for `strategy`; everything else is taken
/// from `base`.
pub fn variant_factory(strategy: Strategy, base: &StudentConfig) -> StudentConfig {
    let mut cfg = base.clone();
    cfg.weights = strategy.weights();
    if strategy == Strategy::TeacherOnly {
        cfg.optim.iterations = 0;
    }
    cfg
}

impl StudentConfig {
    fn needs_eta(&self) -> bool {
        self.weights.x_alpha != 0.0 && self.weights.alpha == AlphaSource::NoiseHead
    }
}

/// Source of pseudo labels during student training.
enum LabelSource<'a> {
    Cached(Vec<Vec<PseudoLabel>>),
    OnTheFly(PseudoLabeler<'a>),
}

impl LabelSource<'_> {
    fn labels(&self, i: usize, sample: &CaptionedSample) -> Result<std::borrow::Cow<'_, [PseudoLabel]>> {
        Ok(match self {
            LabelSource::Cached(v) => std::borrow::Cow::Borrowed(&v[i]),
            LabelSource::OnTheFly(l) => std::borrow::Cow::Owned(l.label(sample)?),
        })
    }
}

/// Pseudo labels for every captioned image, in dataset order.
pub fn label_all(labeler: &PseudoLabeler<'_>, samples: &[CaptionedSample]) -> Result<Vec<Vec<PseudoLabel>>> {
    samples.par_iter().map(|s| labeler.label(s)).collect()
}

#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub checkpoint: Checkpoint,
    pub eta: f64,
    /// Mean noise per pseudo label seen during calibration.
    pub calibration_noise: Vec<f64>,
}

/// Calibrates the reference noise level: a copy of `student` trains its
/// mask and noise heads with the noisy mask loss on `items` for `steps`
/// iterations, after which the smallest mean noise over all pseudo labels
/// is returned with every observed mean.
pub fn calibrate_eta(student: &Model, items: &[CaptionItem<'_>], sem: &Semantics<'_>, loss: &LossConfig, optim: &OptimConfig, steps: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
    if items.iter().all(|i| i.labels.is_empty()) {
        return Err(Error::data("calibration subset produced no pseudo labels"));
    }
    let weights = ObjectiveWeights { gt: 0.0, x: 0.0, x_alpha: 0.0, mask: 1.0, mask_loss: MaskLossKind::Noisy, alpha: AlphaSource::NoiseHead };
    let mut model = student.clone();
    let mut velocity = vec![0.0; model.params.len()];
    let per_step = 4.min(items.len());
    for step in 0..steps {
        let mut rng = stream_rng(seed, streams::STUDENT_CAPTION_BATCH, (1 << 32) + step as u64);
        let batch: Vec<CaptionItem<'_>> = (0..per_step).map(|_| items[rng.gen_range(0..items.len())]).collect();
        let mut grad = model.zero_grad();
        let b = total_student_objective(&model, &batch, &[], sem, &weights, loss, seed ^ (1 << 48) ^ step as u64, Some(&mut grad))?;
        grad.iter_mut().for_each(|g| *g /= per_step as f64);
        sgd_step(&mut model.params, &mut velocity, &mut grad, optim, optim.lr);
        check_finite(&model, &b, step)?;
    }
    let b = total_student_objective(&model, items, &[], sem, &weights, loss, seed, None)?;
    let eta = crate::losses::eta_from_mean_noise(&b.per_object_mean_noise)?;
    Ok((eta, b.per_object_mean_noise))
}

/// Self-training from a frozen teacher. The student starts as a copy of
/// `teacher` unless `resume` is given.
pub fn train_student(cfg: &StudentConfig, teacher: &Model, ctx: &TrainContext<'_>, resume: Option<Checkpoint>, log: &mut dyn TrainLog) -> Result<StudentOutput> {
    cfg.optim.validate()?;
    ctx.loss.validate()?;
    let data = ctx.data;
    if teacher.config.embed_dim != data.embeddings.dim() {
        return Err(Error::config("teacher embedding size does not match the class embeddings"));
    }
    let base = data.vocab.base();
    let caption = data.vocab.caption();
    let sem = Semantics { table: &data.embeddings, base: &base, caption: &caption };
    let labeler = PseudoLabeler::new(teacher, &data.vocab, &data.embeddings, ctx.proposals.clone());
    let uses_captions = cfg.weights.x != 0.0 || cfg.weights.x_alpha != 0.0 || cfg.weights.mask != 0.0;
    let runs = cfg.optim.iterations > 0 && uses_captions && !data.caption.is_empty();
    let source = if runs && cfg.cache_pseudo_labels {
        LabelSource::Cached(label_all(&labeler, &data.caption)?)
    } else {
        LabelSource::OnTheFly(labeler.clone())
    };

    let mut loss_cfg = ctx.loss.clone();
    let (eta, calibration_noise) = match (cfg.needs_eta() && runs, cfg.eta.fixed) {
        (_, Some(v)) => (v, Vec::new()),
        (false, None) => (loss_cfg.noise.eta, Vec::new()),
        (true, None) => {
            let n = cfg.eta.images.min(data.caption.len());
            let labels: Vec<Vec<PseudoLabel>> = (0..n).map(|i| source.labels(i, &data.caption[i]).map(|c| c.into_owned())).collect::<Result<_>>()?;
            let items: Vec<CaptionItem<'_>> = (0..n).map(|i| CaptionItem { image: &data.caption[i].image, labels: &labels[i] }).collect();
            calibrate_eta(teacher, &items, &sem, &loss_cfg, &cfg.optim, cfg.eta.steps, cfg.seed)?
        }
    };
    loss_cfg.noise.eta = eta;
    loss_cfg.validate()?;

    let (mut model, mut velocity, start) = match resume {
        Some(ck) => {
            let v = ck.velocity.unwrap_or_else(|| vec![0.0; ck.model.params.len()]);
            (ck.model, v, ck.iteration)
        }
        None => (teacher.clone(), vec![0.0; teacher.params.len()], 0),
    };
    let scale = 1.0 / cfg.caption_batch.max(cfg.base_batch).max(1) as f64;
    for it in start..cfg.optim.iterations {
        let mut crng = stream_rng(cfg.seed, streams::STUDENT_CAPTION_BATCH, it as u64);
        let cap_idx: Vec<usize> = if data.caption.is_empty() { Vec::new() } else { (0..cfg.caption_batch).map(|_| crng.gen_range(0..data.caption.len())).collect() };
        let labels: Vec<std::borrow::Cow<'_, [PseudoLabel]>> = cap_idx.iter().map(|&i| source.labels(i, &data.caption[i])).collect::<Result<_>>()?;
        let cap_items: Vec<CaptionItem<'_>> = cap_idx.iter().zip(&labels).map(|(&i, l)| CaptionItem { image: &data.caption[i].image, labels: l }).collect();
        let rois = if data.base.is_empty() { Vec::new() } else { base_batch_rois(ctx, &cfg.rois, cfg.seed, streams::STUDENT_BASE_BATCH, it, cfg.base_batch) };
        let base_items: Vec<BaseItem<'_>> = rois.iter().map(|(i, r)| BaseItem { sample: &data.base[*i], proposals: r }).collect();
        let mut grad = model.zero_grad();
        let b = total_student_objective(&model, &cap_items, &base_items, &sem, &cfg.weights, &loss_cfg, crate::rng::derive_seed(cfg.seed, streams::MASK_NOISE, it as u64), Some(&mut grad))?;
        grad.iter_mut().for_each(|g| *g *= scale);
        let lr = cfg.optim.lr_at(it);
        sgd_step(&mut model.params, &mut velocity, &mut grad, &cfg.optim, lr);
        check_finite(&model, &b, it)?;
        log.record(&LogRow::new(it, lr, &b, scale))?;
    }
    let mut ck = Checkpoint::new(model, cfg.seed, cfg.optim.iterations.max(start));
    ck.velocity = Some(velocity);
    ck.run_config = serde_json::json!({ "student": cfg, "eta": eta });
    Ok(StudentOutput { checkpoint: ck, eta, calibration_noise })
}
