//! Attribute-structured class vocabulary.
//!
//! Every class is a `(size, color, shape)` tuple rendered as the single
//! token `"{size}-{color}-{shape}"`. Its word vector concatenates one-hot
//! indicators of the three attribute values with a seeded random block, so
//! classes that share attributes are close in embedding space and held-out
//! classes can be recognized from the attributes they share with seen ones.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantic::{ClassSplit, EmbeddingTable, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorFamily {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBand {
    Small,
    Large,
}

pub const SHAPES: [ShapeFamily; 6] =
    [ShapeFamily::Circle, ShapeFamily::Square, ShapeFamily::Triangle, ShapeFamily::Diamond, ShapeFamily::Cross, ShapeFamily::Ring];
pub const COLORS: [ColorFamily; 6] =
    [ColorFamily::Red, ColorFamily::Green, ColorFamily::Blue, ColorFamily::Yellow, ColorFamily::Magenta, ColorFamily::Cyan];
pub const SIZES: [SizeBand; 2] = [SizeBand::Small, SizeBand::Large];

impl ShapeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Circle => "circle",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Ring => "ring",
        }
    }
}

impl ColorFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ColorFamily::Red => "red",
            ColorFamily::Green => "green",
            ColorFamily::Blue => "blue",
            ColorFamily::Yellow => "yellow",
            ColorFamily::Magenta => "magenta",
            ColorFamily::Cyan => "cyan",
        }
    }

    /// Reference RGB of the family; instances jitter around it.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorFamily::Red => [0.85, 0.15, 0.15],
            ColorFamily::Green => [0.15, 0.75, 0.20],
            ColorFamily::Blue => [0.20, 0.30, 0.90],
            ColorFamily::Yellow => [0.90, 0.85, 0.15],
            ColorFamily::Magenta => [0.80, 0.20, 0.80],
            ColorFamily::Cyan => [0.15, 0.80, 0.85],
        }
    }
}

impl SizeBand {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeBand::Small => "small",
            SizeBand::Large => "large",
        }
    }

    /// Inclusive range of instance sizes in pixels.
    pub fn pixel_range(self) -> (u32, u32) {
        match self {
            SizeBand::Small => (9, 13),
            SizeBand::Large => (17, 23),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassAttributes {
    pub size: SizeBand,
    pub color: ColorFamily,
    pub shape: ShapeFamily,
}

impl ClassAttributes {
    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.size.as_str(), self.color.as_str(), self.shape.as_str())
    }

    pub fn parse(name: &str) -> Option<Self> {
        let mut parts = name.split('-');
        let size = SIZES.into_iter().find(|s| Some(s.as_str()) == parts.clone().next())?;
        parts.next();
        let color = COLORS.into_iter().find(|c| Some(c.as_str()) == parts.clone().next())?;
        parts.next();
        let shape = SHAPES.into_iter().find(|s| Some(s.as_str()) == parts.clone().next())?;
        parts.next();
        parts.next().is_none().then_some(Self { size, color, shape })
    }

    /// Number of attribute values shared with `other` (0..=3).
    pub fn shared(&self, other: &Self) -> usize {
        usize::from(self.size == other.size) + usize::from(self.color == other.color) + usize::from(self.shape == other.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabularySpec {
    pub n_base: usize,
    pub n_caption_only: usize,
    pub n_target: usize,
    pub d_attr: usize,
    pub d_noise: usize,
    pub seed: u64,
}

impl Default for VocabularySpec {
    fn default() -> Self {
        Self { n_base: 12, n_caption_only: 8, n_target: 4, d_attr: 12, d_noise: 8, seed: 0 }
    }
}

/// Standard deviation scale of the random embedding block (its expected
/// norm), small next to the norm of the indicator block.
const NOISE_BLOCK_NORM: f64 = 0.5;

fn attribute_counts(d_attr: usize) -> Result<(usize, usize)> {
    if d_attr < 6 {
        return Err(Error::config(format!("d_attr = {d_attr} leaves fewer than two shape or color families")));
    }
    let rest = d_attr - SIZES.len();
    let shapes = rest.div_ceil(2);
    let colors = rest / 2;
    if shapes > SHAPES.len() || colors > COLORS.len() {
        return Err(Error::config(format!("d_attr = {d_attr} exceeds the renderable attribute families")));
    }
    Ok((shapes, colors))
}

/// Builds the class splits and their embeddings.
///
/// One shape family and one color family (chosen by the seed) never occur
/// among base classes. Target classes carry exactly one of these unseen
/// values, and caption-only classes are drawn first from tuples containing
/// them, so the captions are the only source of knowledge about those
/// attribute values.
pub fn build_vocabulary(spec: &VocabularySpec) -> Result<(Vocabulary, EmbeddingTable)> {
    let VocabularySpec { n_base, n_caption_only, n_target, d_attr, d_noise, seed } = *spec;
    if n_base == 0 || n_caption_only == 0 || n_target == 0 {
        return Err(Error::config("every class split needs at least one class"));
    }
    let (n_shapes, n_colors) = attribute_counts(d_attr)?;
    let shapes = &SHAPES[..n_shapes];
    let colors = &COLORS[..n_colors];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let novel_shape = *shapes.choose(&mut rng).expect("nonempty");
    let novel_color = *colors.choose(&mut rng).expect("nonempty");

    let mut shape_novel = Vec::new();
    let mut color_novel = Vec::new();
    let mut both_novel = Vec::new();
    let mut seen = Vec::new();
    for &shape in shapes {
        for &color in colors {
            for size in SIZES {
                let a = ClassAttributes { size, color, shape };
                match (shape == novel_shape, color == novel_color) {
                    (true, true) => both_novel.push(a),
                    (true, false) => shape_novel.push(a),
                    (false, true) => color_novel.push(a),
                    (false, false) => seen.push(a),
                }
            }
        }
    }
    shape_novel.shuffle(&mut rng);
    color_novel.shuffle(&mut rng);
    seen.shuffle(&mut rng);

    // Interleave so targets split evenly between the two unseen attributes.
    let mut novel: Vec<ClassAttributes> = Vec::new();
    let (mut a, mut b) = (shape_novel.into_iter(), color_novel.into_iter());
    loop {
        match (a.next(), b.next()) {
            (None, None) => break,
            (x, y) => novel.extend(x.into_iter().chain(y)),
        }
    }
    if n_target > novel.len() {
        return Err(Error::config(format!("attribute space hosts at most {} target classes", novel.len())));
    }
    let targets: Vec<_> = novel.drain(..n_target).collect();
    novel.extend(both_novel);

    let want_novel_caption = (3 * n_caption_only).div_ceil(4).min(novel.len());
    let mut caption_only: Vec<_> = novel.drain(..want_novel_caption).collect();
    let need_seen = n_caption_only - caption_only.len();
    if need_seen + n_base > seen.len() {
        return Err(Error::config(format!(
            "attribute space too small: {} classes requested, {} distinct tuples available",
            n_base + n_caption_only + n_target,
            seen.len() + want_novel_caption + n_target
        )));
    }
    caption_only.extend(seen.drain(..need_seen));
    let base: Vec<_> = seen.drain(..n_base).collect();

    let d = d_attr + d_noise;
    let mut entries = Vec::new();
    let mut vectors = Vec::new();
    for (group, split) in [(&base, ClassSplit::Base), (&caption_only, ClassSplit::CaptionOnly), (&targets, ClassSplit::Target)] {
        for attr in group.iter() {
            let mut v = vec![0.0; d];
            v[shapes.iter().position(|&s| s == attr.shape).expect("shape in range")] = 1.0;
            v[n_shapes + colors.iter().position(|&c| c == attr.color).expect("color in range")] = 1.0;
            v[n_shapes + n_colors + SIZES.iter().position(|&s| s == attr.size).expect("size")] = 1.0;
            let sd = if d_noise > 0 { NOISE_BLOCK_NORM / (d_noise as f64).sqrt() } else { 0.0 };
            for x in &mut v[d_attr..] {
                let z: f64 = rng.sample(StandardNormal);
                *x = sd * z;
            }
            entries.push((attr.name(), split));
            vectors.push(v);
        }
    }
    Ok((Vocabulary::new(entries)?, EmbeddingTable::new(d, vectors)?))
}
