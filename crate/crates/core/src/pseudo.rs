//! Pseudo labels from captions: each object word is aligned to the proposal
//! whose teacher embedding scores highest against the word vector, and the
//! teacher's binarized mask on that proposal becomes the pseudo mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{mean_noise, reliability, variances, NoiseConfig};
use crate::geometry::Region;
use crate::model::{extract_region, Model, ProposalConfig};
use crate::semantic::{dot, ClassId, EmbeddingTable, Vocabulary};
use crate::world::{extract_object_nouns, CaptionedSample, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class: ClassId,
    pub object: String,
    pub region: Region,
    /// Index of the aligned proposal in the labeling proposal set.
    pub proposal: usize,
    /// `M x M` binary mask, row-major.
    pub mask: Vec<bool>,
    pub teacher_logits: Vec<f64>,
    pub alignment_score: f64,
    pub reliability: Option<f64>,
}

/// Result of aligning one object word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub class: ClassId,
    pub proposal: usize,
    pub score: f64,
}

/// For each object, the proposal maximizing `v_o . e_r` over all
/// proposals, with ties going to the lowest index. No background test is
/// applied.
pub fn align_embeddings(table: &EmbeddingTable, objects: &[ClassId], proposal_embeddings: &[Vec<f64>]) -> Result<Vec<Alignment>> {
    if proposal_embeddings.is_empty() {
        return Err(Error::invalid("empty proposal set"));
    }
    if let Some(e) = proposal_embeddings.iter().find(|e| e.len() != table.dim()) {
        return Err(Error::invalid(format!("region embedding has length {}, table dimension is {}", e.len(), table.dim())));
    }
    Ok(objects
        .iter()
        .map(|&class| {
            let v = table.vector(class);
            let mut best = Alignment { class, proposal: 0, score: dot(v, &proposal_embeddings[0]) };
            for (i, e) in proposal_embeddings.iter().enumerate().skip(1) {
                let s = dot(v, e);
                if s > best.score {
                    best = Alignment { class, proposal: i, score: s };
                }
            }
            best
        })
        .collect())
}

/// Teacher embeddings of every proposal in `proposals`.
pub fn proposal_embeddings(model: &Model, image: &Image, proposals: &[Region]) -> Result<Vec<Vec<f64>>> {
    let features = model.backbone(image)?.features;
    proposals
        .iter()
        .map(|r| Ok(model.embed_head(&extract_region(model, &features, r, image.width, image.height)?.feature)))
        .collect()
}

pub fn align_objects(teacher: &Model, table: &EmbeddingTable, image: &Image, objects: &[ClassId], proposals: &[Region]) -> Result<Vec<Alignment>> {
    if objects.is_empty() {
        return Ok(Vec::new());
    }
    if proposals.is_empty() {
        return Err(Error::invalid("empty proposal set"));
    }
    align_embeddings(table, objects, &proposal_embeddings(teacher, image, proposals)?)
}

/// Pixel is foreground iff its logit is `>= 0`.
pub fn binarize(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&l| l >= 0.0).collect()
}

/// Labels captioned images with a frozen teacher.
#[derive(Debug, Clone)]
pub struct PseudoLabeler<'a> {
    pub teacher: &'a Model,
    pub vocab: &'a Vocabulary,
    pub table: &'a EmbeddingTable,
    pub proposals: ProposalConfig,
}

impl<'a> PseudoLabeler<'a> {
    pub fn new(teacher: &'a Model, vocab: &'a Vocabulary, table: &'a EmbeddingTable, proposals: ProposalConfig) -> Self {
        Self { teacher, vocab, table, proposals }
    }

    /// Caption classes named in `tokens`, in first-occurrence order.
    pub fn objects(&self, tokens: &[String]) -> Vec<ClassId> {
        extract_object_nouns(tokens, &self.vocab.object_lexicon())
            .iter()
            .filter_map(|t| self.vocab.id(t))
            .collect()
    }

    /// One pseudo label per object noun in the caption.
    pub fn label(&self, sample: &CaptionedSample) -> Result<Vec<PseudoLabel>> {
        self.label_image(&sample.image, &sample.tokens)
    }

    pub fn label_image(&self, image: &Image, tokens: &[String]) -> Result<Vec<PseudoLabel>> {
        let objects = self.objects(tokens);
        if objects.is_empty() {
            return Ok(Vec::new());
        }
        let proposals = self.proposals.grid(image.width, image.height);
        let features = self.teacher.backbone(image)?.features;
        let rois = proposals
            .iter()
            .map(|r| extract_region(self.teacher, &features, r, image.width, image.height))
            .collect::<Result<Vec<_>>>()?;
        let embeddings: Vec<Vec<f64>> = rois.iter().map(|roi| self.teacher.embed_head(&roi.feature)).collect();
        align_embeddings(self.table, &objects, &embeddings)?
            .into_iter()
            .map(|a| {
                let logits = self.teacher.mask_head(&rois[a.proposal].feature);
                Ok(PseudoLabel {
                    class: a.class,
                    object: self.vocab.name(a.class).to_string(),
                    region: proposals[a.proposal],
                    proposal: a.proposal,
                    mask: binarize(&logits),
                    teacher_logits: logits,
                    alignment_score: a.score,
                    reliability: None,
                })
            })
            .collect()
    }
}

/// Run-length encoding of a row-major binary mask: alternating run lengths
/// starting with a (possibly empty) run of zeros.
pub fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut n = 0u32;
    for &b in bits {
        if b != current {
            runs.push(n);
            current = b;
            n = 0;
        }
        n += 1;
    }
    runs.push(n);
    runs
}

pub fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(len);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    if out.len() != len {
        return Err(Error::format(format!("run lengths cover {} pixels, expected {len}", out.len())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(bits: &[bool], height: usize, width: usize) -> Self {
        assert_eq!(bits.len(), height * width);
        Self { size: [height, width], counts: rle_encode(bits) }
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        rle_decode(&self.counts, self.size[0] * self.size[1])
    }
}

/// One line of the pseudo-label dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample: usize,
    pub object: String,
    #[serde(rename = "box")]
    pub region: [f64; 4],
    pub alignment_score: f64,
    pub mask: RleMask,
    /// Per-pixel variances, row-major `M x M`.
    pub noise: Vec<f64>,
    pub mean_noise: f64,
    pub reliability: f64,
    /// Whether the caption word names an object absent from the image,
    /// when ground truth is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absent: Option<bool>,
}

impl PseudoLabelRecord {
    /// Inspection records for one captioned image. Noise maps come from
    /// `noise_model`'s noise head on each pseudo-label region.
    pub fn for_sample(index: usize, sample: &CaptionedSample, labels: &[PseudoLabel], noise_model: &Model, cfg: &NoiseConfig) -> Result<Vec<Self>> {
        if labels.is_empty() {
            return Ok(Vec::new());
        }
        let image = &sample.image;
        let features = noise_model.backbone(image)?.features;
        let m = noise_model.config.mask_size;
        let absent = &sample.diagnostics().absent_tokens;
        labels
            .iter()
            .map(|l| {
                let roi = extract_region(noise_model, &features, &l.region, image.width, image.height)?;
                let noise = variances(&noise_model.noise_forward(&roi.feature).raw, cfg.min_variance);
                let mean = mean_noise(&noise);
                Ok(Self {
                    sample: index,
                    object: l.object.clone(),
                    region: l.region.to_array(),
                    alignment_score: l.alignment_score,
                    mask: RleMask::encode(&l.mask, m, m),
                    reliability: reliability(&noise, cfg)?,
                    noise,
                    mean_noise: mean,
                    absent: Some(absent.contains(&l.object)),
                })
            })
            .collect()
    }
}
