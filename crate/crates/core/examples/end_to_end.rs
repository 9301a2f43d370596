//! Generates the default benchmark, trains a teacher and several students,
//! and compares their mask mAP.
//!
//! ```text
//! cargo run --example end_to_end -- [seed] [key=value ...]
//! ```
//! Extra arguments override config keys, e.g. `student.optim.lr=0.005`.

use std::time::Instant;

use crossmodal_seg::config::ExperimentConfig;
use crossmodal_seg::experiment::{AblationRow, Experiment};
use crossmodal_seg::trainer::{LogRow, Strategy};

fn main() -> crossmodal_seg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map(|s| s.parse().expect("seed")).unwrap_or(1);
    let overrides = args.iter().skip(1).cloned().collect::<Vec<_>>().join("\n");
    let cfg = ExperimentConfig::parse(&overrides)?.with_seed(seed);

    let t0 = Instant::now();
    let exp = Experiment::generate(cfg)?;
    println!("data: {:.1}s", t0.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut log = Vec::new();
    let teacher = exp.train_teacher(&mut log)?;
    let mean = |r: &[LogRow]| r.iter().map(|x| x.l_gt).sum::<f64>() / r.len().max(1) as f64;
    println!(
        "teacher: {:.1}s  l_gt {:.3} -> {:.3}",
        t.elapsed().as_secs_f64(),
        mean(&log[..20.min(log.len())]),
        mean(&log[log.len().saturating_sub(20)..])
    );

    println!("{}", AblationRow::CSV_HEADER);
    for s in [Strategy::TeacherOnly, Strategy::XPlusMask, Strategy::Robust] {
        let t = Instant::now();
        let row = &exp.ablate(&teacher.model, &[s])?[0];
        println!("{}  ({:.1}s)", row.to_csv(), t.elapsed().as_secs_f64());
    }
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
