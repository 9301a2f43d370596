//! Mask mAP at IoU 0.5 under the constrained and generalized protocols,
//! plus alternative reliability estimates for pseudo labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, Region};
use crate::model::nn::{sigmoid, softmax};
use crate::model::{extract_region, Model, ProposalConfig, RegionFeature};
use crate::semantic::{dot, predict_from_scores, score_all, ClassId, EmbeddingTable, Prediction, Vocabulary};
use crate::world::{Image, TestSample, TestSubset};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: ClassId,
    pub confidence: f64,
    pub region: Region,
    pub mask: BinaryMask,
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::invalid("mask shapes differ"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Greedy matching in descending confidence order; returns a true-positive
/// flag per detection in that order. `ious[d][g]` is the overlap of
/// detection `d` with ground truth `g` (0 across images).
pub fn greedy_match(confidences: &[f64], ious: &[Vec<f64>], n_gt: usize, iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut taken = vec![false; n_gt];
    order
        .iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in ious[d].iter().enumerate() {
                if !taken[g] && iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Recall and precision after each detection, in confidence order.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    tp.iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += t as usize;
            (hits as f64 / n_gt.max(1) as f64, hits as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the precision-recall curve with precision made
/// non-increasing from the right. Zero when there is no ground truth.
pub fn average_precision_from_ious(confidences: &[f64], ious: &[Vec<f64>], n_gt: usize, iou_thr: f64) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(&greedy_match(confidences, ious, n_gt, iou_thr), n_gt);
    let mut ap = 0.0;
    let mut running_max = 0.0f64;
    let mut envelope = vec![0.0; curve.len()];
    for i in (0..curve.len()).rev() {
        running_max = running_max.max(curve[i].1);
        envelope[i] = running_max;
    }
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    ap
}

/// One class's detections and ground truths, tagged by image.
#[derive(Debug, Clone, Default)]
pub struct ClassRecords {
    pub detections: Vec<(usize, f64, BinaryMask)>,
    pub ground_truth: Vec<(usize, BinaryMask)>,
}

impl ClassRecords {
    fn ious(&self) -> Result<Vec<Vec<f64>>> {
        self.detections
            .iter()
            .map(|(img, _, m)| {
                self.ground_truth
                    .iter()
                    .map(|(gi, g)| if gi == img { mask_iou(m, g) } else { Ok(0.0) })
                    .collect()
            })
            .collect()
    }

    pub fn average_precision(&self, iou_thr: f64) -> Result<f64> {
        let conf: Vec<f64> = self.detections.iter().map(|d| d.1).collect();
        Ok(average_precision_from_ious(&conf, &self.ious()?, self.ground_truth.len(), iou_thr))
    }

    pub fn pr_curve(&self, iou_thr: f64) -> Result<Vec<(f64, f64)>> {
        let conf: Vec<f64> = self.detections.iter().map(|d| d.1).collect();
        let tp = greedy_match(&conf, &self.ious()?, self.ground_truth.len(), iou_thr);
        Ok(pr_curve(&tp, self.ground_truth.len()))
    }
}

// ---------------------------------------------------------------------------
// Inference

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Same-class box IoU above which the lower-confidence detection is dropped.
    pub nms_iou: f64,
    pub max_detections: usize,
    pub iou_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { nms_iou: 0.5, max_detections: 100, iou_threshold: 0.5 }
    }
}

/// Anything that turns a test image into detections over a label space.
pub trait InstanceSegmenter: Sync {
    fn segment(&self, sample: &TestSample, classes: &[ClassId]) -> Result<Vec<Detection>>;
}

/// Pastes `M x M` logits into `region` on an image-sized canvas: each pixel
/// whose centre lies in the box takes its nearest grid cell, and is set
/// when the cell's probability is at least one half.
pub fn paste_mask(logits: &[f64], m: usize, region: &Region, width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height);
    let x_lo = (region.x0 - 0.5).ceil().max(0.0) as usize;
    let y_lo = (region.y0 - 0.5).ceil().max(0.0) as usize;
    for y in y_lo..height {
        let cy = y as f64 + 0.5;
        if cy >= region.y1 {
            break;
        }
        let i = (((cy - region.y0) / region.height() * m as f64) as usize).min(m - 1);
        for x in x_lo..width {
            let cx = x as f64 + 0.5;
            if cx >= region.x1 {
                break;
            }
            let j = (((cx - region.x0) / region.width() * m as f64) as usize).min(m - 1);
            if sigmoid(logits[i * m + j]) >= 0.5 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Greedy same-class non-maximum suppression; keeps at most `cap` indices.
pub fn nms(candidates: &[(ClassId, f64, Region)], iou: f64, cap: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() == cap {
            break;
        }
        let (c, _, r) = &candidates[i];
        if keep.iter().all(|&k| candidates[k].0 != *c || candidates[k].2.iou(r) <= iou) {
            keep.push(i);
        }
    }
    keep
}

/// Detector built from a trained model: every grid proposal is classified
/// by embedding scores; proposals beating the background keep the softmax
/// probability of their class as confidence.
pub struct ModelSegmenter<'a> {
    pub model: &'a Model,
    pub table: &'a EmbeddingTable,
    pub proposals: ProposalConfig,
    pub config: InferenceConfig,
}

impl<'a> ModelSegmenter<'a> {
    pub fn detect(&self, image: &Image, classes: &[ClassId]) -> Result<Vec<Detection>> {
        let (w, h) = (image.width, image.height);
        let features = self.model.backbone(image)?.features;
        let proposals = self.proposals.grid(w, h);
        let mut candidates = Vec::new();
        let mut feats = Vec::new();
        for r in &proposals {
            let roi = extract_region(self.model, &features, r, w, h)?;
            let scores = score_all(self.table, &self.model.embed_head(&roi.feature), classes)?;
            if let Prediction::Class(c, _) = predict_from_scores(&scores) {
                let mut logits = scores.values.clone();
                logits.push(scores.background);
                let k = scores.classes.iter().position(|&x| x == c).expect("predicted class in label space");
                candidates.push((c, softmax(&logits)[k], roi.region));
                feats.push(roi.feature);
            }
        }
        let m = self.model.config.mask_size;
        Ok(nms(&candidates, self.config.nms_iou, self.config.max_detections)
            .into_iter()
            .filter_map(|i| {
                let (class, confidence, region) = candidates[i];
                let mask = paste_mask(&self.model.mask_head(&feats[i]), m, &region, w, h);
                (mask.count() > 0).then_some(Detection { class, confidence, region, mask })
            })
            .collect())
    }
}

impl InstanceSegmenter for ModelSegmenter<'_> {
    fn segment(&self, sample: &TestSample, classes: &[ClassId]) -> Result<Vec<Detection>> {
        self.detect(&sample.image, classes)
    }
}

/// Test double that reports the ground truth verbatim.
pub struct GroundTruthSegmenter;

impl InstanceSegmenter for GroundTruthSegmenter {
    fn segment(&self, sample: &TestSample, classes: &[ClassId]) -> Result<Vec<Detection>> {
        Ok(sample
            .annotations
            .iter()
            .filter(|a| classes.contains(&a.class))
            .map(|a| Detection { class: a.class, confidence: 1.0, region: a.bbox, mask: a.mask.clone() })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Protocols and reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ConstrainedBase,
    ConstrainedTarget,
    Generalized,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::ConstrainedBase, Protocol::ConstrainedTarget, Protocol::Generalized];

    pub fn subset(self) -> TestSubset {
        match self {
            Protocol::ConstrainedBase => TestSubset::Base,
            Protocol::ConstrainedTarget => TestSubset::Target,
            Protocol::Generalized => TestSubset::Mixed,
        }
    }

    pub fn label_space(self, vocab: &Vocabulary) -> Vec<ClassId> {
        match self {
            Protocol::ConstrainedBase => vocab.base(),
            Protocol::ConstrainedTarget => vocab.target(),
            Protocol::Generalized => {
                let mut v = vocab.base();
                v.extend(vocab.target());
                v
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::ConstrainedBase => "constrained_base",
            Protocol::ConstrainedTarget => "constrained_target",
            Protocol::Generalized => "generalized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::invalid(format!("unknown protocol {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub split: String,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub iou_threshold: f64,
    pub per_class: BTreeMap<String, ClassReport>,
    /// Unweighted means over the classes of each group that have ground
    /// truth in the evaluated images.
    pub map_base: Option<f64>,
    pub map_target: Option<f64>,
    pub map_all: Option<f64>,
    pub n_images: usize,
    pub n_instances: usize,
}

/// Evaluation result together with the per-class records behind it.
pub struct Evaluation {
    pub report: EvalReport,
    pub records: BTreeMap<String, ClassRecords>,
}

impl Evaluation {
    /// `recall,precision` rows per class.
    pub fn pr_csv(&self) -> Result<BTreeMap<String, String>> {
        self.records
            .iter()
            .map(|(name, rec)| {
                let mut s = String::from("recall,precision\n");
                for (r, p) in rec.pr_curve(self.report.iou_threshold)? {
                    writeln!(s, "{r},{p}").expect("string write");
                }
                Ok((name.clone(), s))
            })
            .collect()
    }
}

/// Runs `segmenter` on `samples` restricted to `label_space` and scores
/// the result.
pub fn evaluate_with(
    segmenter: &dyn InstanceSegmenter,
    samples: &[&TestSample],
    vocab: &Vocabulary,
    label_space: &[ClassId],
    protocol: Protocol,
    iou_threshold: f64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let detections: Vec<Vec<Detection>> = samples.par_iter().map(|s| segmenter.segment(s, label_space)).collect::<Result<_>>()?;
    let mut records: BTreeMap<ClassId, ClassRecords> = label_space.iter().map(|&c| (c, ClassRecords::default())).collect();
    let mut n_instances = 0;
    for (i, (sample, dets)) in samples.iter().zip(detections).enumerate() {
        for a in &sample.annotations {
            if let Some(r) = records.get_mut(&a.class) {
                r.ground_truth.push((i, a.mask.clone()));
                n_instances += 1;
            }
        }
        for d in dets {
            if !d.confidence.is_finite() {
                return Err(Error::invalid("non-finite detection confidence"));
            }
            if let Some(r) = records.get_mut(&d.class) {
                r.detections.push((i, d.confidence, d.mask));
            }
        }
    }
    let mut per_class = BTreeMap::new();
    let (mut base, mut target, mut all) = (Vec::new(), Vec::new(), Vec::new());
    for (&c, rec) in &records {
        let ap = rec.average_precision(iou_threshold)?;
        let split = vocab.split(c);
        if !rec.ground_truth.is_empty() {
            all.push(ap);
            match split {
                crate::semantic::ClassSplit::Base => base.push(ap),
                crate::semantic::ClassSplit::Target => target.push(ap),
                crate::semantic::ClassSplit::CaptionOnly => {}
            }
        }
        per_class.insert(
            vocab.name(c).to_string(),
            ClassReport { split: format!("{split:?}").to_lowercase(), ap, n_gt: rec.ground_truth.len(), n_det: rec.detections.len() },
        );
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let report = EvalReport {
        protocol,
        iou_threshold,
        per_class,
        map_base: mean(&base),
        map_target: mean(&target),
        map_all: mean(&all),
        n_images: samples.len(),
        n_instances,
    };
    let records = records.into_iter().map(|(c, r)| (vocab.name(c).to_string(), r)).collect();
    Ok(Evaluation { report, records })
}

/// Standard protocol: the protocol's test subset and label space.
pub fn evaluate(segmenter: &dyn InstanceSegmenter, test: &[TestSample], vocab: &Vocabulary, protocol: Protocol, iou_threshold: f64) -> Result<Evaluation> {
    let subset: Vec<&TestSample> = test.iter().filter(|s| s.subset == protocol.subset()).collect();
    evaluate_with(segmenter, &subset, vocab, &protocol.label_space(vocab), protocol, iou_threshold)
}

// ---------------------------------------------------------------------------
// Alternative reliability scores

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltReliability {
    /// Softmax probability of the pseudo label's class over the caption classes.
    ClassScore,
    /// Mean over pixels of `max(p, 1 - p)` for the mask probabilities.
    PixelScore,
    /// One minus the normalized mutual information between the class
    /// prediction and dropout masks on the embedding-head input.
    DropoutEntropy,
}

pub const DROPOUT_PASSES: usize = 8;
pub const DROPOUT_RATE: f64 = 0.1;

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Reliability of a pseudo label of class `caption[target]` whose region
/// feature is `feature`.
pub fn alt_reliability<R: Rng>(
    strategy: AltReliability,
    model: &Model,
    feature: &RegionFeature,
    table: &EmbeddingTable,
    caption: &[ClassId],
    target: usize,
    rng: &mut R,
) -> Result<f64> {
    alt_reliability_with(strategy, model, feature, table, caption, target, DROPOUT_PASSES, DROPOUT_RATE, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn alt_reliability_with<R: Rng>(
    strategy: AltReliability,
    model: &Model,
    feature: &RegionFeature,
    table: &EmbeddingTable,
    caption: &[ClassId],
    target: usize,
    passes: usize,
    rate: f64,
    rng: &mut R,
) -> Result<f64> {
    if target >= caption.len() {
        return Err(Error::invalid("target outside the caption classes"));
    }
    let probs = |e: &[f64]| softmax(&caption.iter().map(|&c| dot(table.vector(c), e)).collect::<Vec<_>>());
    Ok(match strategy {
        AltReliability::ClassScore => probs(&model.embed_head(feature))[target],
        AltReliability::PixelScore => {
            let logits = model.mask_head(feature);
            logits.iter().map(|&l| sigmoid(l).max(1.0 - sigmoid(l))).sum::<f64>() / logits.len() as f64
        }
        AltReliability::DropoutEntropy => {
            if !(0.0..1.0).contains(&rate) || passes == 0 {
                return Err(Error::invalid("dropout rate must lie in [0, 1) with at least one pass"));
            }
            let n_in = model.config.embed_input();
            let mut mean = vec![0.0; caption.len()];
            let mut mean_entropy = 0.0;
            for _ in 0..passes {
                let scale: Vec<f64> = (0..n_in).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) }).collect();
                let p = probs(&model.embed_forward_masked(feature, Some(&scale)).0);
                mean_entropy += entropy(&p) / passes as f64;
                for (m, v) in mean.iter_mut().zip(&p) {
                    *m += v / passes as f64;
                }
            }
            let h_max = (caption.len() as f64).ln();
            if h_max == 0.0 {
                1.0
            } else {
                (1.0 - (entropy(&mean) - mean_entropy).max(0.0) / h_max).clamp(0.0, 1.0)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn mask_iou_examples() {
        let a = rect(8, 8, 0, 0, 4, 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &rect(8, 8, 4, 4, 8, 8)).unwrap(), 0.0);
        assert!((mask_iou(&a, &rect(8, 8, 2, 0, 6, 4)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::empty(4, 8)).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision_from_ious(&[0.9], &[vec![1.0]], 1, 0.5), 1.0);
        assert_eq!(average_precision_from_ious(&[], &[], 2, 0.5), 0.0);
        assert_eq!(average_precision_from_ious(&[0.3], &[vec![]], 0, 0.5), 0.0);
        // TP, FP, TP over 2 GT: precision 1, 1/2, 2/3 -> 0.5 * 1 + 0.5 * 2/3
        let ap = average_precision_from_ious(&[0.9, 0.8, 0.7], &[vec![0.9, 0.0], vec![0.4, 0.1], vec![0.0, 0.6]], 2, 0.5);
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn paste_fills_box_for_positive_logits() {
        let m = paste_mask(&[1.0; 4], 2, &Region::new(2.0, 3.0, 6.0, 5.0), 8, 8);
        assert_eq!(m.count(), 8);
        assert_eq!(m.tight_box(), Some(Region::new(2.0, 3.0, 6.0, 5.0)));
        assert_eq!(paste_mask(&[-1.0; 4], 2, &Region::new(2.0, 3.0, 6.0, 5.0), 8, 8).count(), 0);
    }

    #[test]
    fn nms_keeps_best_per_cluster() {
        let r = Region::new(0.0, 0.0, 10.0, 10.0);
        let c = [(ClassId(0), 0.5, r), (ClassId(0), 0.9, Region::new(1.0, 0.0, 11.0, 10.0)), (ClassId(1), 0.7, r)];
        assert_eq!(nms(&c, 0.5, 100), vec![1, 2]);
        assert_eq!(nms(&c, 0.5, 1), vec![1]);
    }
}
