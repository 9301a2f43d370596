use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{ClassAttributes, ShapeFamily};
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

pub const MAX_INSTANCES: usize = 6;
pub const MIN_SIZE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class_name: String,
    pub center: (f64, f64),
    pub size: f64,
    pub rotation: f64,
    pub color: [f64; 3],
    pub z_order: i32,
}

/// RGB image stored as three channel planes (`[c][y][x]`), values in
/// `[0, 1]` quantized to multiples of 1/255 so that 8-bit files
/// round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, planes: vec![value; 3 * width * height] }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.planes[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.planes[(c * self.height + y) * self.width + x] = v;
    }

    pub fn quantize(&mut self) {
        for v in &mut self.planes {
            *v = quantize(*v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Point-in-shape test on center-relative, un-rotated coordinates.
fn inside(shape: ShapeFamily, u: f64, v: f64, size: f64) -> bool {
    let h = size / 2.0;
    match shape {
        ShapeFamily::Square => -h <= u && u < h && -h <= v && v < h,
        ShapeFamily::Circle => u * u + v * v < h * h,
        ShapeFamily::Diamond => u.abs() + v.abs() < h,
        ShapeFamily::Triangle => -h <= v && v < h && u.abs() <= (v + h) / 2.0,
        ShapeFamily::Cross => {
            let arm = size / 6.0;
            (u.abs() < arm && v.abs() < h) || (v.abs() < arm && u.abs() < h)
        }
        ShapeFamily::Ring => {
            let r2 = u * u + v * v;
            r2 < h * h && r2 >= (h / 2.0) * (h / 2.0)
        }
    }
}

/// Full (unoccluded) rasterization of one instance, sampled at pixel centers.
pub fn rasterize(instance: &ShapeInstance, width: usize, height: usize) -> Result<BinaryMask> {
    let attrs = ClassAttributes::parse(&instance.class_name)
        .ok_or_else(|| Error::invalid(format!("unrenderable class {:?}", instance.class_name)))?;
    if !(instance.size >= MIN_SIZE) {
        return Err(Error::invalid(format!("instance size {} below {MIN_SIZE}", instance.size)));
    }
    let (cx, cy) = instance.center;
    let (sin, cos) = instance.rotation.sin_cos();
    let reach = instance.size * 0.75 + 1.0;
    let x_lo = (cx - reach).floor().max(0.0) as usize;
    let y_lo = (cy - reach).floor().max(0.0) as usize;
    let x_hi = ((cx + reach).ceil().max(0.0) as usize).min(width);
    let y_hi = ((cy + reach).ceil().max(0.0) as usize).min(height);
    let mut mask = BinaryMask::empty(width, height);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if inside(attrs.shape, u, v, instance.size) {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

/// Low-contrast seeded texture: gray level, two sinusoidal gratings and
/// per-pixel grain.
pub fn textured_background<R: Rng>(width: usize, height: usize, rng: &mut R) -> Image {
    let mut img = Image::filled(width, height, 0.0);
    let level = rng.gen_range(0.30..0.55);
    let tint: [f64; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let mut g = level;
            for &(fx, fy, phase, amp) in &waves {
                g += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            }
            let grain = rng.gen_range(-0.04..0.04);
            for (c, t) in tint.iter().enumerate() {
                img.set(c, x, y, g + t + grain);
            }
        }
    }
    img
}

/// Painter's-algorithm composition by ascending `z_order` (stable on
/// ties). Returns the image and, per input instance, its visible mask or
/// `None` when the instance is completely hidden.
pub fn render_scene(shapes: &[ShapeInstance], background: Image) -> Result<(Image, Vec<Option<BinaryMask>>)> {
    if shapes.is_empty() || shapes.len() > MAX_INSTANCES {
        return Err(Error::invalid(format!("scene must hold 1..={MAX_INSTANCES} shapes, got {}", shapes.len())));
    }
    let (width, height) = (background.width, background.height);
    let mut image = background;
    let mut owner: Vec<Option<usize>> = vec![None; width * height];
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by_key(|&i| shapes[i].z_order);
    for &i in &order {
        let full = rasterize(&shapes[i], width, height)?;
        if full.count() == 0 {
            return Err(Error::invalid(format!("shape {i} lies entirely outside the image")));
        }
        for y in 0..height {
            for x in 0..width {
                if full.get(x, y) {
                    owner[y * width + x] = Some(i);
                    for c in 0..3 {
                        image.set(c, x, y, shapes[i].color[c]);
                    }
                }
            }
        }
    }
    image.quantize();
    let masks = (0..shapes.len())
        .map(|i| {
            let mut m = BinaryMask::empty(width, height);
            for (p, o) in owner.iter().enumerate() {
                m.bits[p] = *o == Some(i);
            }
            (m.count() > 0).then_some(m)
        })
        .collect();
    Ok((image, masks))
}
