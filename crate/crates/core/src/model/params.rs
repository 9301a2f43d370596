//! Parameter layout, initialization and the checkpoint file format.
//!
//! All parameters of a model live in one flat `Vec<f64>`; the layout maps
//! named tensors onto contiguous ranges in a fixed order:
//!
//! | group    | tensors (in order)                                                     |
//! |----------|------------------------------------------------------------------------|
//! | backbone | conv1.{weight,bias}, conv2.{weight,bias}, conv3.{weight,bias}          |
//! | embed    | fc1.{weight,bias}, fc2.{weight,bias}                                   |
//! | mask     | conv1.{weight,bias}, conv2.{weight,bias}, out.{weight,bias}            |
//! | noise    | conv1.{weight,bias}, conv2.{weight,bias}, out.{weight,bias}            |
//!
//! Convolution weights are `[out][in][ky][kx]`, linear weights `[out][in]`.
//!
//! A checkpoint is one line of UTF-8 JSON (the [`CheckpointHeader`]),
//! a `\n`, then `param_count` little-endian `f64` parameters in layout
//! order, optionally followed by `param_count` optimizer velocities.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::Conv2d;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub feature_channels: usize,
    /// Side of the square region feature grid (even).
    pub roi_size: usize,
    pub embed_hidden: usize,
    pub head_channels: usize,
    /// Side of the square mask / noise prediction grid.
    pub mask_size: usize,
    /// Word-embedding dimension; must match the embedding table.
    pub embed_dim: usize,
    /// Initial log-variance of the noise head output.
    pub init_log_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            feature_channels: 16,
            roi_size: 8,
            embed_hidden: 64,
            head_channels: 12,
            mask_size: 28,
            embed_dim: 20,
            init_log_variance: (0.01f64).ln(),
        }
    }
}

impl ModelConfig {
    /// A very small network used for gradient verification.
    pub fn tiny(embed_dim: usize) -> Self {
        Self {
            stem_channels: 2,
            feature_channels: 3,
            roi_size: 4,
            embed_hidden: 5,
            head_channels: 2,
            mask_size: 6,
            embed_dim,
            init_log_variance: -1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.stem_channels, self.feature_channels, self.embed_hidden, self.head_channels, self.mask_size, self.embed_dim];
        if positive.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.roi_size < 2 || self.roi_size % 2 != 0 {
            return Err(Error::config("roi_size must be even and at least 2"));
        }
        if !self.init_log_variance.is_finite() {
            return Err(Error::config("init_log_variance must be finite"));
        }
        Ok(())
    }

    pub fn conv1(&self) -> Conv2d {
        Conv2d::new(3, self.stem_channels, 3, 2, 1)
    }
    pub fn conv2(&self) -> Conv2d {
        Conv2d::new(self.stem_channels, self.feature_channels, 3, 2, 1)
    }
    pub fn conv3(&self) -> Conv2d {
        Conv2d::new(self.feature_channels, self.feature_channels, 3, 1, 1)
    }
    pub fn head_conv1(&self) -> Conv2d {
        Conv2d::new(self.feature_channels, self.head_channels, 3, 1, 1)
    }
    pub fn head_conv2(&self) -> Conv2d {
        Conv2d::new(self.head_channels, self.head_channels, 3, 1, 1)
    }
    pub fn head_out(&self) -> Conv2d {
        Conv2d::new(self.head_channels, 1, 1, 1, 0)
    }

    /// Embedding head input: pooled region grid plus the two box-size inputs.
    pub fn embed_input(&self) -> usize {
        self.feature_channels * (self.roi_size / 2) * (self.roi_size / 2) + 2
    }

    pub const BACKBONE_STRIDE: usize = 4;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight and bias ranges of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvHeadSlots {
    pub conv1: LayerSlots,
    pub conv2: LayerSlots,
    pub out: LayerSlots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Embed,
    Mask,
    Noise,
}

pub const PARAM_GROUPS: [ParamGroup; 4] = [ParamGroup::Backbone, ParamGroup::Embed, ParamGroup::Mask, ParamGroup::Noise];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub conv1: LayerSlots,
    pub conv2: LayerSlots,
    pub conv3: LayerSlots,
    pub fc1: LayerSlots,
    pub fc2: LayerSlots,
    pub mask: ConvHeadSlots,
    pub noise: ConvHeadSlots,
    groups: [Range<usize>; 4],
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| -> Range<usize> {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            let r = spec.range();
            tensors.push(spec);
            r
        };
        let mut conv = |prefix: &str, c: Conv2d| LayerSlots {
            weight: push(format!("{prefix}.weight"), vec![c.c_out, c.c_in, c.kernel, c.kernel]),
            bias: push(format!("{prefix}.bias"), vec![c.c_out]),
        };
        let conv1 = conv("backbone.conv1", cfg.conv1());
        let conv2 = conv("backbone.conv2", cfg.conv2());
        let conv3 = conv("backbone.conv3", cfg.conv3());
        let fc1 = LayerSlots {
            weight: push("embed.fc1.weight".into(), vec![cfg.embed_hidden, cfg.embed_input()]),
            bias: push("embed.fc1.bias".into(), vec![cfg.embed_hidden]),
        };
        let fc2 = LayerSlots {
            weight: push("embed.fc2.weight".into(), vec![cfg.embed_dim, cfg.embed_hidden]),
            bias: push("embed.fc2.bias".into(), vec![cfg.embed_dim]),
        };
        let mut head = |prefix: &str| {
            let mut conv = |name: &str, c: Conv2d| LayerSlots {
                weight: push(format!("{prefix}.{name}.weight"), vec![c.c_out, c.c_in, c.kernel, c.kernel]),
                bias: push(format!("{prefix}.{name}.bias"), vec![c.c_out]),
            };
            ConvHeadSlots { conv1: conv("conv1", cfg.head_conv1()), conv2: conv("conv2", cfg.head_conv2()), out: conv("out", cfg.head_out()) }
        };
        let mask = head("mask");
        let noise = head("noise");
        let groups = [
            conv1.weight.start..conv3.bias.end,
            fc1.weight.start..fc2.bias.end,
            mask.conv1.weight.start..mask.out.bias.end,
            noise.conv1.weight.start..noise.out.bias.end,
        ];
        Self { tensors, conv1, conv2, conv3, fc1, fc2, mask, noise, groups }
    }

    pub fn len(&self) -> usize {
        self.groups[3].end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: ParamGroup) -> Range<usize> {
        self.groups[g as usize].clone()
    }
}

/// Parameters of one network (teacher or student share this shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl Model {
    /// Glorot-uniform weights, zero biases; the noise head output bias
    /// starts at `init_log_variance`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.len()];
        let mut rng = stream_rng(seed, streams::PARAM_INIT, 0);
        for t in &layout.tensors {
            if t.name.ends_with(".weight") {
                let (fan_out, fan_in) = match t.shape.as_slice() {
                    [o, i] => (*o, *i),
                    [o, i, kh, kw] => (o * kh * kw, i * kh * kw),
                    _ => unreachable!("weights are 2-D or 4-D"),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for p in &mut params[t.range()] {
                    *p = rng.gen_range(-limit..limit);
                }
            }
        }
        params[layout.noise.out.bias.clone()].fill(config.init_log_variance);
        Ok(Self { config, layout, params })
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        &self.params[self.layout.group(g)]
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorSpec>,
    pub param_count: usize,
    pub has_velocity: bool,
    pub seed: u64,
    pub iteration: usize,
    /// Free-form run settings recorded alongside the weights.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "crossmodal-seg-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub velocity: Option<Vec<f64>>,
    pub seed: u64,
    pub iteration: usize,
    pub run_config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64, iteration: usize) -> Self {
        Self { model, velocity: None, seed, iteration, run_config: serde_json::Value::Null }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.model.config.clone(),
            tensors: self.model.layout.tensors.clone(),
            param_count: self.model.params.len(),
            has_velocity: self.velocity.is_some(),
            seed: self.seed,
            iteration: self.iteration,
            run_config: self.run_config.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for p in self.model.params.iter().chain(self.velocity.iter().flatten()) {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format("checkpoint header not terminated"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(format!("unsupported checkpoint format {:?}", header.format)));
        }
        let layout = ParamLayout::new(&header.config);
        if layout.tensors != header.tensors || layout.len() != header.param_count {
            return Err(Error::format("checkpoint tensor table does not match its model config"));
        }
        let payload = &bytes[nl + 1..];
        let n = header.param_count * if header.has_velocity { 2 } else { 1 };
        if payload.len() != 8 * n {
            return Err(Error::format(format!("checkpoint payload is {} bytes, header implies {}", payload.len(), 8 * n)));
        }
        let mut values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let velocity = header.has_velocity.then(|| values.split_off(header.param_count));
        Ok(Self {
            model: Model { config: header.config, layout, params: values },
            velocity,
            seed: header.seed,
            iteration: header.iteration,
            run_config: header.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
