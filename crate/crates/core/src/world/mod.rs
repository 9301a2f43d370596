//! Synthetic benchmark: rasterized shape scenes with instance masks,
//! captions built from an object lexicon, and attribute-structured class
//! embeddings.

pub mod dataset;
pub mod io;
pub mod render;
pub mod vocab;

pub use dataset::{
    extract_object_nouns, Annotation, CaptionedSample, DataConfig, Dataset, HiddenTruth, MaskedSample, SceneGenerator, TestSample,
    TestSubset,
};
pub use render::{render_scene, Image, ShapeInstance};
pub use vocab::{build_vocabulary, ClassAttributes, VocabularySpec};
