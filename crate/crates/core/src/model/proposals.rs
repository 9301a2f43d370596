//! Deterministic region proposals: a multi-scale sliding grid, plus
//! jittered copies of ground-truth boxes during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Region;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Box side lengths (geometric mean of width and height) in pixels.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub ratios: Vec<f64>,
    pub stride: usize,
    /// Maximum edge displacement of a jittered box, relative to its size.
    pub jitter: f64,
    pub jitter_copies: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { scales: vec![12.0, 18.0, 26.0], ratios: vec![1.0, 1.4], stride: 6, jitter: 0.1, jitter_copies: 4 }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::config("proposal scales and ratios must be nonempty"));
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("proposal scales and ratios must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::config("proposal stride must be positive"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::config("proposal jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Number of grid centers along an axis of length `n`.
    pub fn centers(&self, n: usize) -> usize {
        let half = self.stride / 2;
        if n <= half {
            0
        } else {
            (n - half - 1) / self.stride + 1
        }
    }

    pub fn grid_count(&self, width: usize, height: usize) -> usize {
        self.scales.len() * self.ratios.len() * self.centers(width) * self.centers(height)
    }

    /// Grid proposals in the order scale, ratio, row, column.
    pub fn grid(&self, width: usize, height: usize) -> Vec<Region> {
        let mut out = Vec::with_capacity(self.grid_count(width, height));
        let half = (self.stride / 2) as f64;
        for &s in &self.scales {
            for &r in &self.ratios {
                let (bw, bh) = (s * r.sqrt(), s / r.sqrt());
                for iy in 0..self.centers(height) {
                    let cy = half + (iy * self.stride) as f64;
                    for ix in 0..self.centers(width) {
                        let cx = half + (ix * self.stride) as f64;
                        out.push(Region::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0).clipped(width, height));
                    }
                }
            }
        }
        out
    }

    /// `jitter_copies` perturbed copies of `gt`, each edge displaced by up to
    /// `jitter` times the box extent along its axis, clipped to the image.
    pub fn jittered<R: Rng>(&self, gt: &Region, width: usize, height: usize, rng: &mut R) -> Vec<Region> {
        let (w, h) = (gt.width(), gt.height());
        let mut out = Vec::with_capacity(self.jitter_copies);
        while out.len() < self.jitter_copies {
            let mut d = || if self.jitter > 0.0 { rng.gen_range(-self.jitter..self.jitter) } else { 0.0 };
            let r = Region::new(gt.x0 + d() * w, gt.y0 + d() * h, gt.x1 + d() * w, gt.y1 + d() * h).clipped(width, height);
            if r.is_valid_in(width, height) {
                out.push(r);
            }
        }
        out
    }

    /// Grid proposals followed by jittered copies of each ground-truth box.
    pub fn train<R: Rng>(&self, width: usize, height: usize, gt_boxes: &[Region], rng: &mut R) -> Vec<Region> {
        let mut out = self.grid(width, height);
        for gt in gt_boxes {
            out.extend(self.jittered(gt, width, height, rng));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grid_count_on_64px() {
        let c = ProposalConfig::default();
        // centers 3, 9, ..., 63
        assert_eq!(c.centers(64), 11);
        let g = c.grid(64, 64);
        assert_eq!(g.len(), 3 * 2 * 11 * 11);
        assert!(g.iter().all(|r| r.is_valid_in(64, 64)));
        assert_eq!(g, c.grid(64, 64));
    }

    #[test]
    fn jitter_stays_close_to_source() {
        let c = ProposalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..1000 {
            let x0 = (i % 40) as f64;
            let gt = Region::new(x0, 10.0, x0 + 9.0 + (i % 15) as f64, 31.0);
            for j in c.jittered(&gt, 64, 64, &mut rng) {
                assert!(j.is_valid_in(64, 64));
                assert!(j.iou(&gt) >= 0.5);
            }
        }
    }
}
