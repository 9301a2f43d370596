//! Mask mAP under the three protocols, for a perfect segmenter and for a
//! briefly trained teacher, with one class's precision-recall curve.

use crossmodal_seg::config::ExperimentConfig;
use crossmodal_seg::eval::{evaluate, GroundTruthSegmenter, Protocol};
use crossmodal_seg::experiment::Experiment;
use crossmodal_seg::trainer::NoLog;

fn main() -> crossmodal_seg::Result<()> {
    let cfg = ExperimentConfig::parse("data.n_base = 200\ndata.n_caption = 0\ndata.n_test_mixed = 30\ndata.n_test_base = 20\ndata.n_test_target = 20\nteacher.optim.iterations = 300\nteacher.optim.lr_steps = [250]")?;
    let exp = Experiment::generate(cfg)?;
    let data = &exp.dataset;
    let teacher = exp.train_teacher(&mut NoLog)?;

    for p in Protocol::ALL {
        let oracle = evaluate(&GroundTruthSegmenter, &data.test, &data.vocab, p, 0.5)?.report;
        let ev = exp.evaluate(&teacher.model, p)?;
        let r = &ev.report;
        println!("{:<18} oracle base {:?} target {:?} | teacher base {:?} target {:?} all {:?}", p.name(), oracle.map_base, oracle.map_target, r.map_base, r.map_target, r.map_all);
        if p == Protocol::ConstrainedBase {
            if let Some((class, csv)) = ev.pr_csv()?.into_iter().next() {
                println!("PR curve for {class}:\n{}", csv.lines().take(8).collect::<Vec<_>>().join("\n"));
            }
        }
    }
    Ok(())
}
