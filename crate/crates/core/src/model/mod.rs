//! The network shared by teacher and student: a small convolutional
//! backbone, bilinear region features, an embedding head, a class-agnostic
//! mask head and a noise head.

mod graph;
pub mod nn;
mod params;
mod proposals;

pub use graph::{extract_region, region_sampler, BackboneCache, EmbedCache, FeatureMap, HeadCache, HeadOutput, ImageGraph, RegionFeature, RoiForward};
pub use params::{Checkpoint, CheckpointHeader, ConvHeadSlots, LayerSlots, Model, ModelConfig, ParamGroup, ParamLayout, TensorSpec, CHECKPOINT_FORMAT, PARAM_GROUPS};
pub use proposals::ProposalConfig;
