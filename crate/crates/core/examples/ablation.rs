//! Every student strategy from one teacher on a reduced benchmark.
//!
//! ```text
//! cargo run --example ablation -- [seed]
//! ```

use crossmodal_seg::config::ExperimentConfig;
use crossmodal_seg::experiment::{AblationRow, Experiment};
use crossmodal_seg::trainer::{NoLog, Strategy};

fn main() -> crossmodal_seg::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(1);
    let cfg = ExperimentConfig::parse(
        "data.n_base = 400\ndata.n_caption = 400\ndata.n_test_mixed = 60\ndata.n_test_base = 30\ndata.n_test_target = 30\n\
         teacher.optim.iterations = 600\nteacher.optim.lr_steps = [450]\nstudent.optim.iterations = 300\nstudent.optim.lr_steps = [250]",
    )?
    .with_seed(seed);
    let exp = Experiment::generate(cfg)?;
    let teacher = exp.train_teacher(&mut NoLog)?;
    println!("{}", AblationRow::CSV_HEADER);
    for row in exp.ablate(&teacher.model, &Strategy::ALL)? {
        println!("{}", row.to_csv());
    }
    Ok(())
}
