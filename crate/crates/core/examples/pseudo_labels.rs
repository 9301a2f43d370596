//! Aligns caption words to teacher proposals and prints the resulting
//! pseudo labels next to the hidden ground truth.

use crossmodal_seg::config::ExperimentConfig;
use crossmodal_seg::experiment::Experiment;
use crossmodal_seg::pseudo::{PseudoLabeler, RleMask};
use crossmodal_seg::trainer::NoLog;

fn main() -> crossmodal_seg::Result<()> {
    let cfg = ExperimentConfig::parse("data.n_base = 200\ndata.n_caption = 8\nteacher.optim.iterations = 300\nteacher.optim.lr_steps = [250]")?;
    let exp = Experiment::generate(cfg)?;
    let teacher = exp.train_teacher(&mut NoLog)?;
    let data = &exp.dataset;
    let labeler = PseudoLabeler::new(&teacher.model, &data.vocab, &data.embeddings, exp.config.proposals.clone());
    let m = teacher.model.config.mask_size;

    for sample in &data.caption {
        println!("caption: {}", sample.tokens.join(" "));
        let truth = sample.diagnostics();
        for l in labeler.label(sample)? {
            let best_iou = truth.annotations.iter().filter(|a| a.class == l.class).map(|a| a.bbox.iou(&l.region)).fold(0.0, f64::max);
            let rle = RleMask::encode(&l.mask, m, m);
            println!(
                "  {:<24} score {:7.3}  box {:?}  fg {:3}/{}  runs {:2}  iou with truth {:.2}{}",
                l.object,
                l.alignment_score,
                l.region.to_array().map(|v| v.round()),
                l.mask.iter().filter(|b| **b).count(),
                m * m,
                rle.counts.len(),
                best_iou,
                if truth.absent_tokens.contains(&l.object) { "  (absent)" } else { "" }
            );
        }
    }
    Ok(())
}
