//! Trains a teacher and a robust student on captions where half the words
//! may name absent objects, then compares the student's predicted noise on
//! pseudo masks for absent and present words.
//!
//! ```text
//! cargo run --example noise_inspection -- [seed] [key=value ...]
//! ```

use crossmodal_seg::config::ExperimentConfig;
use crossmodal_seg::experiment::Experiment;
use crossmodal_seg::pseudo::{PseudoLabelRecord, PseudoLabeler};
use crossmodal_seg::trainer::{label_all, NoLog, Strategy};

fn main() -> crossmodal_seg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse().expect("seed")).unwrap_or(1);
    let mut overrides = vec!["data.caption_noise_rate = 0.5".to_string()];
    overrides.extend(args.iter().skip(1).cloned());
    let exp = Experiment::generate(ExperimentConfig::parse(&overrides.join("\n"))?.with_seed(seed))?;

    let teacher = exp.train_teacher(&mut NoLog)?;
    let student = exp.train_variant(&teacher.model, Strategy::Robust, &mut NoLog)?;
    let mut noise = exp.config.loss.noise.clone();
    noise.eta = student.eta;

    let data = &exp.dataset;
    let labeler = PseudoLabeler::new(&teacher.model, &data.vocab, &data.embeddings, exp.config.proposals.clone());
    let labels = label_all(&labeler, &data.caption)?;
    let (mut absent, mut present) = (Vec::new(), Vec::new());
    for (i, (sample, l)) in data.caption.iter().zip(&labels).enumerate() {
        for r in PseudoLabelRecord::for_sample(i, sample, l, &student.checkpoint.model, &noise)? {
            if r.absent == Some(true) { absent.push(r.mean_noise) } else { present.push(r.mean_noise) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    // Probability that an absent-word mask is noisier than a present-word one.
    let wins: f64 = absent
        .iter()
        .map(|a| present.iter().map(|p| if a > p { 1.0 } else if a == p { 0.5 } else { 0.0 }).sum::<f64>())
        .sum();
    println!("eta {:.5}", student.eta);
    println!("absent  n={:5} mean noise {:.5}", absent.len(), mean(&absent));
    println!("present n={:5} mean noise {:.5}", present.len(), mean(&present));
    println!("P(absent > present) = {:.3}", wins / (absent.len() * present.len()).max(1) as f64);
    Ok(())
}
