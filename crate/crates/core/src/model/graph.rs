//! Forward and backward passes of the backbone, region feature extraction
//! and the three heads.
//!
//! Gradients accumulate into a flat buffer laid out like
//! [`Model::params`]. Region-level backward passes return the gradient with
//! respect to the region feature, which [`ImageGraph::backward_region`]
//! scatters onto the feature map; [`ImageGraph::finish`] then runs the
//! backbone backward pass once per image.

use super::nn::{self, BilinearSampler};
use super::params::{ConvHeadSlots, LayerSlots, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::world::Image;

/// Backbone output, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Fixed-size `C x S x S` crop of a feature map plus the box size relative
/// to the image (`[w / W, h / H]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub channels: usize,
    pub size: usize,
    pub values: Vec<f64>,
    pub geometry: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    height: usize,
    width: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    dims: [(usize, usize); 3],
    pub features: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Output of the mask or noise head: `M x M` raw values (mask logits, or
/// log-variances for the noise head) and the cache for backward.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub raw: Vec<f64>,
    pub cache: HeadCache,
}

fn slices<'a>(p: &'a [f64], s: &LayerSlots) -> (&'a [f64], &'a [f64]) {
    (&p[s.weight.clone()], &p[s.bias.clone()])
}

/// Splits a gradient buffer into the weight and bias gradients of one layer.
fn grad_slices<'a>(g: &'a mut [f64], s: &LayerSlots) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(s.weight.end == s.bias.start);
    let (w, b) = g[s.weight.start..s.bias.end].split_at_mut(s.weight.len());
    (w, b)
}

impl Model {
    pub fn backbone(&self, image: &Image) -> Result<BackboneCache> {
        if !image.is_finite() {
            return Err(Error::invalid("non-finite image"));
        }
        let c = &self.config;
        let p = &self.params;
        let (h, w) = (image.height, image.width);
        let input: Vec<f64> = image.planes.iter().map(|v| 2.0 * v - 1.0).collect();
        let (c1, c2, c3) = (c.conv1(), c.conv2(), c.conv3());
        let d1 = (c1.out_dim(h), c1.out_dim(w));
        let d2 = (c2.out_dim(d1.0), c2.out_dim(d1.1));
        let d3 = (c3.out_dim(d2.0), c3.out_dim(d2.1));
        let (w1, b1) = slices(p, &self.layout.conv1);
        let mut a1 = c1.forward(&input, h, w, w1, b1);
        nn::tanh_inplace(&mut a1);
        let (w2, b2) = slices(p, &self.layout.conv2);
        let mut a2 = c2.forward(&a1, d1.0, d1.1, w2, b2);
        nn::tanh_inplace(&mut a2);
        let (w3, b3) = slices(p, &self.layout.conv3);
        let mut a3 = c3.forward(&a2, d2.0, d2.1, w3, b3);
        nn::tanh_inplace(&mut a3);
        Ok(BackboneCache {
            height: h,
            width: w,
            input,
            a1,
            a2,
            dims: [d1, d2, d3],
            features: FeatureMap { channels: c.feature_channels, height: d3.0, width: d3.1, values: a3 },
        })
    }

    pub fn backbone_backward(&self, cache: &BackboneCache, d_features: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let p = &self.params;
        let [d1, d2, _] = cache.dims;
        let mut d3 = d_features.to_vec();
        nn::tanh_backward(&cache.features.values, &mut d3);
        let mut da2 = vec![0.0; cache.a2.len()];
        {
            let (gw, gb) = grad_slices(grad, &self.layout.conv3);
            c.conv3().backward(&cache.a2, d2.0, d2.1, &p[self.layout.conv3.weight.clone()], &d3, Some(&mut da2), gw, gb);
        }
        nn::tanh_backward(&cache.a2, &mut da2);
        let mut da1 = vec![0.0; cache.a1.len()];
        {
            let (gw, gb) = grad_slices(grad, &self.layout.conv2);
            c.conv2().backward(&cache.a1, d1.0, d1.1, &p[self.layout.conv2.weight.clone()], &da2, Some(&mut da1), gw, gb);
        }
        nn::tanh_backward(&cache.a1, &mut da1);
        let (gw, gb) = grad_slices(grad, &self.layout.conv1);
        c.conv1().backward(&cache.input, cache.height, cache.width, &p[self.layout.conv1.weight.clone()], &da1, None, gw, gb);
    }

    pub fn embed_forward(&self, rf: &RegionFeature) -> (Vec<f64>, EmbedCache) {
        self.embed_forward_masked(rf, None)
    }

    /// Embedding head with optional multiplicative masks on its input
    /// (used for dropout passes).
    pub fn embed_forward_masked(&self, rf: &RegionFeature, input_scale: Option<&[f64]>) -> (Vec<f64>, EmbedCache) {
        let mut input = nn::avg_pool2(&rf.values, rf.channels, rf.size, rf.size);
        input.extend_from_slice(&rf.geometry);
        if let Some(s) = input_scale {
            for (v, m) in input.iter_mut().zip(s) {
                *v *= m;
            }
        }
        let (w1, b1) = slices(&self.params, &self.layout.fc1);
        let mut hidden = nn::linear_forward(&input, w1, b1);
        nn::tanh_inplace(&mut hidden);
        let (w2, b2) = slices(&self.params, &self.layout.fc2);
        let out = nn::linear_forward(&hidden, w2, b2);
        (out, EmbedCache { input, hidden })
    }

    /// Accumulates parameter gradients; adds the region-feature gradient to
    /// `d_rf` when given.
    pub fn embed_backward(&self, rf: &RegionFeature, cache: &EmbedCache, d_out: &[f64], grad: &mut [f64], d_rf: Option<&mut [f64]>) {
        let mut d_hidden = vec![0.0; cache.hidden.len()];
        {
            let (gw, gb) = grad_slices(grad, &self.layout.fc2);
            nn::linear_backward(&cache.hidden, &self.params[self.layout.fc2.weight.clone()], d_out, Some(&mut d_hidden), gw, gb);
        }
        nn::tanh_backward(&cache.hidden, &mut d_hidden);
        let mut d_input = d_rf.as_ref().map(|_| vec![0.0; cache.input.len()]);
        {
            let (gw, gb) = grad_slices(grad, &self.layout.fc1);
            nn::linear_backward(&cache.input, &self.params[self.layout.fc1.weight.clone()], &d_hidden, d_input.as_deref_mut(), gw, gb);
        }
        if let (Some(d_rf), Some(d_input)) = (d_rf, d_input) {
            let pooled = d_input.len() - 2;
            nn::avg_pool2_backward(&d_input[..pooled], rf.channels, rf.size, rf.size, d_rf);
        }
    }

    fn conv_head_forward(&self, slots: &ConvHeadSlots, rf: &RegionFeature) -> HeadOutput {
        let c = &self.config;
        let s = rf.size;
        let p = &self.params;
        let (w1, b1) = slices(p, &slots.conv1);
        let mut h1 = c.head_conv1().forward(&rf.values, s, s, w1, b1);
        nn::tanh_inplace(&mut h1);
        let (w2, b2) = slices(p, &slots.conv2);
        let mut h2 = c.head_conv2().forward(&h1, s, s, w2, b2);
        nn::tanh_inplace(&mut h2);
        let (w3, b3) = slices(p, &slots.out);
        let low = c.head_out().forward(&h2, s, s, w3, b3);
        let raw = upsampler(c, s).apply(&low, 1);
        HeadOutput { raw, cache: HeadCache { h1, h2 } }
    }

    fn conv_head_backward(&self, slots: &ConvHeadSlots, rf: &RegionFeature, cache: &HeadCache, d_raw: &[f64], grad: &mut [f64], d_rf: Option<&mut [f64]>) {
        let c = &self.config;
        let s = rf.size;
        let p = &self.params;
        let mut d_low = vec![0.0; s * s];
        upsampler(c, s).backward(d_raw, 1, &mut d_low);
        let mut d_h2 = vec![0.0; cache.h2.len()];
        {
            let (gw, gb) = grad_slices(grad, &slots.out);
            c.head_out().backward(&cache.h2, s, s, &p[slots.out.weight.clone()], &d_low, Some(&mut d_h2), gw, gb);
        }
        nn::tanh_backward(&cache.h2, &mut d_h2);
        let mut d_h1 = vec![0.0; cache.h1.len()];
        {
            let (gw, gb) = grad_slices(grad, &slots.conv2);
            c.head_conv2().backward(&cache.h1, s, s, &p[slots.conv2.weight.clone()], &d_h2, Some(&mut d_h1), gw, gb);
        }
        nn::tanh_backward(&cache.h1, &mut d_h1);
        let (gw, gb) = grad_slices(grad, &slots.conv1);
        c.head_conv1().backward(&rf.values, s, s, &p[slots.conv1.weight.clone()], &d_h1, d_rf, gw, gb);
    }

    /// `M x M` mask logits.
    pub fn mask_forward(&self, rf: &RegionFeature) -> HeadOutput {
        self.conv_head_forward(&self.layout.mask, rf)
    }

    pub fn mask_backward(&self, rf: &RegionFeature, cache: &HeadCache, d_logits: &[f64], grad: &mut [f64], d_rf: Option<&mut [f64]>) {
        self.conv_head_backward(&self.layout.mask, rf, cache, d_logits, grad, d_rf);
    }

    /// `M x M` log-variances; the variances are their exponentials.
    pub fn noise_forward(&self, rf: &RegionFeature) -> HeadOutput {
        self.conv_head_forward(&self.layout.noise, rf)
    }

    /// `d_log_var` is the gradient with respect to the log-variances.
    pub fn noise_backward(&self, rf: &RegionFeature, cache: &HeadCache, d_log_var: &[f64], grad: &mut [f64], d_rf: Option<&mut [f64]>) {
        self.conv_head_backward(&self.layout.noise, rf, cache, d_log_var, grad, d_rf);
    }

    /// Strictly positive per-pixel variances.
    pub fn noise_head(&self, rf: &RegionFeature) -> Vec<f64> {
        self.noise_forward(rf).raw.iter().map(|r| r.exp()).collect()
    }

    pub fn mask_head(&self, rf: &RegionFeature) -> Vec<f64> {
        self.mask_forward(rf).raw
    }

    pub fn embed_head(&self, rf: &RegionFeature) -> Vec<f64> {
        self.embed_forward(rf).0
    }
}

fn upsampler(c: &ModelConfig, s: usize) -> BilinearSampler {
    BilinearSampler::resize(s, s, c.mask_size, c.mask_size)
}

/// Bilinear crop-and-resize of `region` (image pixels) to `size x size`
/// sample points on a stride-`stride` feature map.
pub fn region_sampler(features: &FeatureMap, region: &Region, image_w: usize, image_h: usize, size: usize, stride: usize) -> Result<BilinearSampler> {
    let r = region.clip_checked(image_w, image_h)?;
    let s = stride as f64;
    let (fx0, fy0) = (r.x0 / s, r.y0 / s);
    let (fw, fh) = (r.width() / s, r.height() / s);
    let xs: Vec<f64> = (0..size).map(|i| fx0 + (i as f64 + 0.5) * fw / size as f64 - 0.5).collect();
    let ys: Vec<f64> = (0..size).map(|i| fy0 + (i as f64 + 0.5) * fh / size as f64 - 0.5).collect();
    Ok(BilinearSampler::from_coords(features.height, features.width, &ys, &xs))
}

/// Region feature together with the sampler that produced it.
#[derive(Debug, Clone)]
pub struct RoiForward {
    pub region: Region,
    pub feature: RegionFeature,
    sampler: BilinearSampler,
}

/// One image's backbone pass with a gradient accumulator for its feature map.
pub struct ImageGraph<'m> {
    pub model: &'m Model,
    pub image_width: usize,
    pub image_height: usize,
    cache: BackboneCache,
    d_features: Vec<f64>,
}

impl<'m> ImageGraph<'m> {
    pub fn new(model: &'m Model, image: &Image) -> Result<Self> {
        let cache = model.backbone(image)?;
        let d_features = vec![0.0; cache.features.values.len()];
        Ok(Self { model, image_width: image.width, image_height: image.height, cache, d_features })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.cache.features
    }

    pub fn region(&self, region: &Region) -> Result<RoiForward> {
        extract_region(self.model, &self.cache.features, region, self.image_width, self.image_height)
    }

    pub fn backward_region(&mut self, roi: &RoiForward, d_feature: &[f64]) {
        roi.sampler.backward(d_feature, roi.feature.channels, &mut self.d_features);
    }

    pub fn finish(self, grad: &mut [f64]) {
        if self.d_features.iter().any(|&g| g != 0.0) {
            self.model.backbone_backward(&self.cache, &self.d_features, grad);
        }
    }
}

pub fn extract_region(model: &Model, features: &FeatureMap, region: &Region, image_w: usize, image_h: usize) -> Result<RoiForward> {
    let size = model.config.roi_size;
    let sampler = region_sampler(features, region, image_w, image_h, size, ModelConfig::BACKBONE_STRIDE)?;
    let r = region.clipped(image_w, image_h);
    let feature = RegionFeature {
        channels: features.channels,
        size,
        values: sampler.apply(&features.values, features.channels),
        geometry: [r.width() / image_w as f64, r.height() / image_h as f64],
    };
    Ok(RoiForward { region: r, feature, sampler })
}
