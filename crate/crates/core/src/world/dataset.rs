//! Scene sampling and the three dataset splits: mask-annotated base scenes,
//! captioned scenes, and the evaluation scenes.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{render_scene, textured_background, Image, ShapeInstance, MAX_INSTANCES};
use super::vocab::{build_vocabulary, ClassAttributes, ShapeFamily, VocabularySpec};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, Region};
use crate::rng::{streams, stream_rng};
use crate::semantic::{ClassId, EmbeddingTable, Vocabulary};

const FILLERS: [&str; 10] = ["a", "photo", "of", "with", "and", "the", "some", "scene", "on", "near"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub max_instances: usize,
    pub n_base: usize,
    pub n_caption: usize,
    pub n_test_mixed: usize,
    pub n_test_base: usize,
    pub n_test_target: usize,
    pub caption_noise_rate: f64,
    pub vocabulary: VocabularySpec,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            max_instances: 4,
            n_base: 1500,
            n_caption: 2000,
            n_test_mixed: 200,
            n_test_base: 100,
            n_test_target: 100,
            caption_noise_rate: 0.3,
            vocabulary: VocabularySpec::default(),
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.caption_noise_rate) {
            return Err(Error::config(format!("caption_noise_rate {} outside [0, 1]", self.caption_noise_rate)));
        }
        if self.max_instances == 0 || self.max_instances > MAX_INSTANCES {
            return Err(Error::config(format!("max_instances must be in 1..={MAX_INSTANCES}")));
        }
        if self.image_size < 32 || self.image_size % 4 != 0 {
            return Err(Error::config("image_size must be a multiple of 4 and at least 32"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub class: ClassId,
    pub mask: BinaryMask,
    /// Tight box of `mask`.
    pub bbox: Region,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

/// Ground truth of a captioned scene, kept for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    pub annotations: Vec<Annotation>,
    /// Object tokens that name a class not present in the image.
    pub absent_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedSample {
    pub image: Image,
    pub tokens: Vec<String>,
    hidden_truth: HiddenTruth,
}

impl CaptionedSample {
    pub fn new(image: Image, tokens: Vec<String>, hidden_truth: HiddenTruth) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("caption must contain at least one token"));
        }
        Ok(Self { image, tokens, hidden_truth })
    }

    /// Not for training code: the trainer reads only `image` and `tokens`.
    pub fn diagnostics(&self) -> &HiddenTruth {
        &self.hidden_truth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSubset {
    Mixed,
    Base,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub subset: TestSubset,
}

/// Tokens of `tokens` that belong to `lexicon`, deduplicated, in first
/// occurrence order.
pub fn extract_object_nouns(tokens: &[String], lexicon: &BTreeSet<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokens.iter().filter(|t| lexicon.contains(*t) && seen.insert(t.as_str())).cloned().collect()
}

/// Draws one scene's shape list; classes are chosen uniformly from `pool`.
pub fn sample_shapes<R: Rng>(rng: &mut R, vocab: &Vocabulary, pool: &[ClassId], image_size: usize, max_instances: usize) -> Vec<ShapeInstance> {
    let n = rng.gen_range(1..=max_instances);
    let classes: Vec<ClassId> = (0..n).map(|_| *pool.choose(rng).expect("nonempty class pool")).collect();
    place_shapes(rng, vocab, &classes, image_size)
}

fn place_shapes<R: Rng>(rng: &mut R, vocab: &Vocabulary, classes: &[ClassId], image_size: usize) -> Vec<ShapeInstance> {
    let mut placed: Vec<ShapeInstance> = Vec::new();
    let extent = image_size as f64;
    for (z, &class) in classes.iter().enumerate() {
        let name = vocab.name(class);
        let attrs = ClassAttributes::parse(name).expect("vocabulary classes are attribute tuples");
        let (lo, hi) = attrs.size.pixel_range();
        let size = rng.gen_range(lo as f64..=hi as f64);
        let rotation = match attrs.shape {
            ShapeFamily::Circle | ShapeFamily::Ring => 0.0,
            _ => rng.gen_range(0.0..std::f64::consts::TAU),
        };
        let base = attrs.color.rgb();
        let color = [0, 1, 2].map(|c| (base[c] + rng.gen_range(-0.07..0.07)).clamp(0.0, 1.0));
        let margin = 0.75 * size;
        for _attempt in 0..30 {
            let center = (rng.gen_range(margin..extent - margin), rng.gen_range(margin..extent - margin));
            let clear = placed.iter().all(|p| {
                let d = ((p.center.0 - center.0).powi(2) + (p.center.1 - center.1).powi(2)).sqrt();
                d >= 0.45 * (p.size + size)
            });
            if clear {
                placed.push(ShapeInstance { class_name: name.to_string(), center, size, rotation, color, z_order: z as i32 });
                break;
            }
        }
    }
    placed
}

fn render_annotated<R: Rng>(rng: &mut R, vocab: &Vocabulary, shapes: &[ShapeInstance], image_size: usize) -> Result<(Image, Vec<Annotation>)> {
    let background = textured_background(image_size, image_size, rng);
    let (image, masks) = render_scene(shapes, background)?;
    let annotations = shapes
        .iter()
        .zip(masks)
        .filter_map(|(s, m)| {
            let mask = m?;
            let bbox = mask.tight_box()?;
            Some(Annotation { class: vocab.id(&s.class_name).expect("known class"), mask, bbox })
        })
        .collect();
    Ok((image, annotations))
}

pub struct SceneGenerator<'a> {
    pub vocab: &'a Vocabulary,
    pub config: &'a DataConfig,
}

impl<'a> SceneGenerator<'a> {
    pub fn new(vocab: &'a Vocabulary, config: &'a DataConfig) -> Self {
        Self { vocab, config }
    }

    fn base_sample(&self, seed: u64, index: usize) -> Result<MaskedSample> {
        let mut rng = stream_rng(seed, streams::BASE_SCENES, index as u64);
        let pool = self.vocab.base();
        let shapes = sample_shapes(&mut rng, self.vocab, &pool, self.config.image_size, self.config.max_instances);
        let (image, annotations) = render_annotated(&mut rng, self.vocab, &shapes, self.config.image_size)?;
        Ok(MaskedSample { image, annotations })
    }

    pub fn generate_base_dataset(&self, n: usize, seed: u64) -> Result<Vec<MaskedSample>> {
        (0..n).into_par_iter().map(|i| self.base_sample(seed, i)).collect()
    }

    fn caption_sample(&self, seed: u64, index: usize, noise_rate: f64) -> Result<CaptionedSample> {
        let mut rng = stream_rng(seed, streams::CAPTION_SCENES, index as u64);
        let pool = self.vocab.caption();
        let shapes = sample_shapes(&mut rng, self.vocab, &pool, self.config.image_size, self.config.max_instances);
        let (image, annotations) = render_annotated(&mut rng, self.vocab, &shapes, self.config.image_size)?;

        let mut present: Vec<ClassId> = Vec::new();
        for a in &annotations {
            if !present.contains(&a.class) {
                present.push(a.class);
            }
        }
        let filler = |rng: &mut rand_chacha::ChaCha8Rng| FILLERS[rng.gen_range(0..FILLERS.len())].to_string();
        let mut tokens = vec![filler(&mut rng), filler(&mut rng)];
        for &c in &present {
            tokens.push(self.vocab.name(c).to_string());
            tokens.push(filler(&mut rng));
        }
        let mut absent_tokens = Vec::new();
        if rng.gen_bool(noise_rate) {
            let candidates: Vec<ClassId> = pool.iter().copied().filter(|c| !present.contains(c)).collect();
            if let Some(&c) = candidates.choose(&mut rng) {
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, self.vocab.name(c).to_string());
                absent_tokens.push(self.vocab.name(c).to_string());
            }
        }
        CaptionedSample::new(image, tokens, HiddenTruth { annotations, absent_tokens })
    }

    pub fn generate_caption_dataset(&self, n: usize, seed: u64, caption_noise_rate: f64) -> Result<Vec<CaptionedSample>> {
        if !(0.0..=1.0).contains(&caption_noise_rate) {
            return Err(Error::invalid(format!("caption_noise_rate {caption_noise_rate} outside [0, 1]")));
        }
        (0..n).into_par_iter().map(|i| self.caption_sample(seed, i, caption_noise_rate)).collect()
    }

    fn test_sample(&self, seed: u64, index: usize, subset: TestSubset) -> Result<TestSample> {
        let mut rng = stream_rng(seed, streams::TEST_SCENES, index as u64);
        let base = self.vocab.base();
        let target = self.vocab.target();
        let pool: Vec<ClassId> = match subset {
            TestSubset::Base => base,
            TestSubset::Target => target.clone(),
            TestSubset::Mixed => base.into_iter().chain(target.iter().copied()).collect(),
        };
        let n = rng.gen_range(1..=self.config.max_instances);
        let mut classes: Vec<ClassId> = (0..n).map(|_| *pool.choose(&mut rng).expect("nonempty")).collect();
        if subset == TestSubset::Mixed && !classes.iter().any(|c| target.contains(c)) {
            classes[0] = *target.choose(&mut rng).expect("nonempty");
        }
        let shapes = place_shapes(&mut rng, self.vocab, &classes, self.config.image_size);
        let (image, annotations) = render_annotated(&mut rng, self.vocab, &shapes, self.config.image_size)?;
        Ok(TestSample { image, annotations, subset })
    }

    pub fn generate_test_dataset(&self, seed: u64) -> Result<Vec<TestSample>> {
        let c = self.config;
        let plan: Vec<TestSubset> = std::iter::repeat_n(TestSubset::Mixed, c.n_test_mixed)
            .chain(std::iter::repeat_n(TestSubset::Base, c.n_test_base))
            .chain(std::iter::repeat_n(TestSubset::Target, c.n_test_target))
            .collect();
        plan.into_par_iter().enumerate().map(|(i, s)| self.test_sample(seed, i, s)).collect()
    }
}

/// A complete generated benchmark held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingTable,
    pub base: Vec<MaskedSample>,
    pub caption: Vec<CaptionedSample>,
    pub test: Vec<TestSample>,
}

impl Dataset {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        config.validate()?;
        let (vocab, embeddings) = build_vocabulary(&config.vocabulary)?;
        let gen = SceneGenerator::new(&vocab, config);
        let base = gen.generate_base_dataset(config.n_base, config.seed)?;
        let caption = gen.generate_caption_dataset(config.n_caption, config.seed, config.caption_noise_rate)?;
        let test = gen.generate_test_dataset(config.seed)?;
        Ok(Self { config: config.clone(), vocab, embeddings, base, caption, test })
    }

    pub fn test_subset(&self, subset: TestSubset) -> Vec<&TestSample> {
        self.test.iter().filter(|t| t.subset == subset).collect()
    }
}
