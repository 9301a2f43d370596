//! Trains a teacher on a small base split and saves its checkpoint.
//!
//! ```text
//! cargo run --example train_teacher -- [checkpoint_path]
//! ```

use std::path::PathBuf;

use crossmodal_seg::config::ExperimentConfig;
use crossmodal_seg::experiment::Experiment;
use crossmodal_seg::model::Checkpoint;
use crossmodal_seg::trainer::probe_gt_loss;

fn main() -> crossmodal_seg::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xmseg-teacher.ckpt"));
    let cfg = ExperimentConfig::parse("data.n_base = 200\ndata.n_caption = 0\nteacher.optim.iterations = 300\nteacher.optim.lr_steps = [250]")?;
    let exp = Experiment::generate(cfg)?;

    let mut log = Vec::new();
    let ck = exp.train_teacher(&mut log)?;
    for row in log.iter().step_by(50) {
        println!("iter {:4}  lr {:.4}  l_gt {:.4}", row.iteration, row.lr, row.l_gt);
    }
    println!("held-in probe loss {:.4}", probe_gt_loss(&ck.model, &exp.context(), 20, 99)?);

    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    assert_eq!(back.model, ck.model);
    println!("saved {} parameters to {}", ck.model.params.len(), path.display());
    Ok(())
}
