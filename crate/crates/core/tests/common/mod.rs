#![allow(dead_code)]

use crossmodal_seg::geometry::{BinaryMask, Region};
use crossmodal_seg::model::{Model, ModelConfig};
use crossmodal_seg::pseudo::PseudoLabel;
use crossmodal_seg::semantic::{ClassId, EmbeddingTable};
use crossmodal_seg::world::dataset::{Annotation, MaskedSample};
use crossmodal_seg::world::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGE: usize = 16;
pub const DIM: usize = 4;
pub const CLASSES: usize = 5;

/// A tiny model, image, embedding table and pseudo labels for one case.
pub struct Tiny {
    pub model: Model,
    pub image: Image,
    pub table: EmbeddingTable,
    pub caption: Vec<ClassId>,
    pub labels: Vec<PseudoLabel>,
    pub sample: MaskedSample,
    pub proposals: Vec<Region>,
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::filled(size, size, 0.0);
    for v in &mut img.planes {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}

pub fn random_region(rng: &mut ChaCha8Rng, size: usize) -> Region {
    let s = size as f64;
    let w = rng.gen_range(4.0..s * 0.8);
    let h = rng.gen_range(4.0..s * 0.8);
    let x0 = rng.gen_range(0.0..s - w);
    let y0 = rng.gen_range(0.0..s - h);
    Region::new(x0, y0, x0 + w, y0 + h)
}

pub fn tiny(seed: u64) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::tiny(DIM);
    cfg.init_log_variance = rng.gen_range(-3.0..0.0);
    let mut model = Model::init(cfg, seed).unwrap();
    // Larger weights keep gradients away from zero.
    for p in &mut model.params {
        *p *= 1.5;
    }
    let image = random_image(&mut rng, IMAGE);
    let vectors = (0..CLASSES).map(|_| (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let table = EmbeddingTable::new(DIM, vectors).unwrap();
    let caption: Vec<ClassId> = (0..CLASSES).map(ClassId).collect();
    let m = model.config.mask_size;
    let labels = (0..rng.gen_range(1..4))
        .map(|_| {
            let class = ClassId(rng.gen_range(0..CLASSES));
            PseudoLabel {
                class,
                object: format!("c{}", class.0),
                region: random_region(&mut rng, IMAGE),
                proposal: 0,
                mask: (0..m * m).map(|_| rng.gen_bool(0.5)).collect(),
                teacher_logits: vec![0.0; m * m],
                alignment_score: 0.0,
                reliability: None,
            }
        })
        .collect();
    let annotations = (0..2)
        .map(|k| {
            let bbox = random_region(&mut rng, IMAGE);
            let mut mask = BinaryMask::empty(IMAGE, IMAGE);
            for y in bbox.y0.ceil() as usize..bbox.y1.floor() as usize {
                for x in bbox.x0.ceil() as usize..bbox.x1.floor() as usize {
                    mask.set(x, y, rng.gen_bool(0.7));
                }
            }
            Annotation { class: ClassId(k), mask, bbox }
        })
        .collect::<Vec<_>>();
    let mut proposals: Vec<Region> = annotations.iter().map(|a: &Annotation| a.bbox).collect();
    proposals.extend((0..4).map(|_| random_region(&mut rng, IMAGE)));
    let sample = MaskedSample { image: image.clone(), annotations };
    Tiny { model, image, table, caption, labels, sample, proposals }
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every parameter. Components where both are below `floor` count as
/// agreeing.
pub fn fd_max_rel_error(model: &Model, analytic: &[f64], f: impl Fn(&Model) -> f64) -> f64 {
    let h = 1e-5;
    let mut m = model.clone();
    let mut worst = 0.0f64;
    for i in 0..m.params.len() {
        let p = m.params[i];
        m.params[i] = p + h;
        let up = f(&m);
        m.params[i] = p - h;
        let down = f(&m);
        m.params[i] = p;
        let numeric = (up - down) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((numeric - analytic[i]).abs() / scale);
    }
    worst
}

pub use gradients::*;

mod gradients {
    use super::*;
    use crossmodal_seg::losses::{
        loss_cross_modal, loss_cross_modal_reweighted, loss_cross_modal_weighted, loss_gt, loss_mask_naive, loss_mask_noisy, GtLossConfig, LossConfig,
        McAggregation,
    };

    pub const GRADIENT_CASES: u64 = 10;

    fn base(t: &Tiny) -> Vec<ClassId> {
        t.caption[..3].to_vec()
    }

    pub fn gt_error(seed: u64) -> f64 {
        let t = tiny(seed);
        let cfg = GtLossConfig::default();
        let b = base(&t);
        let f = |m: &Model| loss_gt(m, &t.sample, &t.proposals, &t.table, &b, &cfg, None).unwrap().total;
        let mut g = t.model.zero_grad();
        loss_gt(&t.model, &t.sample, &t.proposals, &t.table, &b, &cfg, Some(&mut g)).unwrap();
        fd_max_rel_error(&t.model, &g, f)
    }

    pub fn cross_modal_error(seed: u64) -> f64 {
        let t = tiny(seed);
        let f = |m: &Model| loss_cross_modal(m, &t.image, &t.labels, &t.table, &t.caption, None).unwrap();
        let mut g = t.model.zero_grad();
        loss_cross_modal(&t.model, &t.image, &t.labels, &t.table, &t.caption, Some(&mut g)).unwrap();
        fd_max_rel_error(&t.model, &g, f)
    }

    pub fn mask_naive_error(seed: u64) -> f64 {
        let t = tiny(seed);
        let normalize = seed % 2 == 0;
        let f = |m: &Model| loss_mask_naive(m, &t.image, &t.labels, normalize, None).unwrap();
        let mut g = t.model.zero_grad();
        loss_mask_naive(&t.model, &t.image, &t.labels, normalize, Some(&mut g)).unwrap();
        fd_max_rel_error(&t.model, &g, f)
    }

    /// Fixed draws per evaluation; alternates the two aggregation rules.
    pub fn mask_noisy_error(seed: u64) -> f64 {
        let t = tiny(seed);
        let mut cfg = LossConfig::default();
        cfg.noise.aggregation = if seed % 2 == 0 { McAggregation::Likelihood } else { McAggregation::Loss };
        let rng = || ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let f = |m: &Model| loss_mask_noisy(m, &t.image, &t.labels, &cfg, &mut rng(), None).unwrap();
        let mut g = t.model.zero_grad();
        loss_mask_noisy(&t.model, &t.image, &t.labels, &cfg, &mut rng(), Some(&mut g)).unwrap();
        fd_max_rel_error(&t.model, &g, f)
    }

    /// The reliability weights are constants, so the reference is the
    /// weighted loss with the weights frozen at the current parameters.
    pub fn cross_modal_reweighted_error(seed: u64) -> f64 {
        let t = tiny(seed);
        let cfg = LossConfig::default();
        let mut g = t.model.zero_grad();
        let (_, alpha) = loss_cross_modal_reweighted(&t.model, &t.image, &t.labels, &t.table, &t.caption, &cfg, Some(&mut g)).unwrap();
        let f = |m: &Model| loss_cross_modal_weighted(m, &t.image, &t.labels, &t.table, &t.caption, &alpha, None).unwrap();
        fd_max_rel_error(&t.model, &g, f)
    }

    pub fn gradient_suite() -> Vec<(&'static str, f64)> {
        let checks: [(&'static str, fn(u64) -> f64); 5] = [
            ("loss_gt", gt_error),
            ("loss_cross_modal", cross_modal_error),
            ("loss_mask_naive", mask_naive_error),
            ("loss_mask_noisy", mask_noisy_error),
            ("loss_cross_modal_reweighted", cross_modal_reweighted_error),
        ];
        checks
            .iter()
            .map(|&(name, f)| (name, (0..GRADIENT_CASES).map(|s| f(100 + s)).fold(0.0, f64::max)))
            .collect()
    }
}
