//! Command-line behaviour on a small generated benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use crossmodal_seg::cli::main_with_args;
use crossmodal_seg::model::Checkpoint;
use crossmodal_seg::pseudo::{PseudoLabelRecord, PseudoLabeler};
use crossmodal_seg::world::Dataset;
use serde_json::Value;

const SMALL: &[&str] = &[
    "--set", "data.n_base=30", "--set", "data.n_caption=24", "--set", "data.n_test_mixed=8", "--set", "data.n_test_base=4", "--set", "data.n_test_target=4",
    "--set", "teacher.optim.iterations=12", "--set", "student.optim.iterations=6", "--set", "student.eta.images=6", "--set", "student.eta.steps=2", "--seed", "3",
];

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["xmseg"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn run_small(args: &[&str]) -> i32 {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    run(&v)
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// A generated dataset and a trained teacher.
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        assert_eq!(run_small(&["gen-data", "--out", &s(&root.join("data"))]), 0);
        assert_eq!(run_small(&["train-teacher", "--data", &s(&root.join("data")), "--out", &s(&root.join("teacher"))]), 0);
        Self { _tmp: tmp, root }
    }

    fn path(&self, p: &str) -> String {
        s(&self.root.join(p))
    }
}

fn data_rows(path: &str) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn teacher_log_has_one_row_per_iteration_and_metadata() {
    let f = Fixture::new();
    assert_eq!(data_rows(&f.path("teacher/teacher_log.csv")).len(), 12);
    let meta: Value = serde_json::from_str(&fs::read_to_string(f.path("teacher/run.json")).unwrap()).unwrap();
    let rec = &meta["train-teacher"];
    assert_eq!(rec["seed"], 3);
    assert_eq!(rec["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(rec["config_digest"].as_str().unwrap().len(), 64);
    let data_meta: Value = serde_json::from_str(&fs::read_to_string(f.path("data/run.json")).unwrap()).unwrap();
    assert!(data_meta["gen-data"]["inputs"]["dataset_digest"].is_string());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let f = Fixture::new();
    let data = f.path("data");
    assert_eq!(run_small(&["train-teacher", "--data", &data, "--out", &f.path("half"), "--set", "teacher.optim.iterations=5"]), 0);
    assert_eq!(run_small(&["train-teacher", "--data", &data, "--out", &f.path("half"), "--resume", &f.path("half/teacher.ckpt")]), 0);
    let whole = fs::read(f.path("teacher/teacher.ckpt")).unwrap();
    assert_eq!(fs::read(f.path("half/teacher.ckpt")).unwrap(), whole);
    assert_eq!(fs::read_to_string(f.path("half/teacher_log.csv")).unwrap(), fs::read_to_string(f.path("teacher/teacher_log.csv")).unwrap());

    let teacher = f.path("teacher/teacher.ckpt");
    assert_eq!(run_small(&["train-student", "--teacher", &teacher, "--data", &data, "--out", &f.path("s_full")]), 0);
    assert_eq!(run_small(&["train-student", "--teacher", &teacher, "--data", &data, "--out", &f.path("s_half"), "--set", "student.optim.iterations=3"]), 0);
    assert_eq!(run_small(&["train-student", "--teacher", &teacher, "--data", &data, "--out", &f.path("s_half"), "--resume", &f.path("s_half/student.ckpt")]), 0);
    assert_eq!(fs::read(f.path("s_half/student.ckpt")).unwrap(), fs::read(f.path("s_full/student.ckpt")).unwrap());
    assert_eq!(data_rows(&f.path("s_half/student_log.csv")), data_rows(&f.path("s_full/student_log.csv")));
}

#[test]
fn pseudo_label_dump_matches_in_process_labels() {
    let f = Fixture::new();
    let teacher = f.path("teacher/teacher.ckpt");
    assert_eq!(run_small(&["pseudo-label", "--teacher", &teacher, "--data", &f.path("data"), "--out", &f.path("pl")]), 0);
    let records: Vec<PseudoLabelRecord> =
        fs::read_to_string(f.path("pl/pseudo_labels.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();

    let data = Dataset::load(Path::new(&f.path("data"))).unwrap();
    let ck = Checkpoint::load(Path::new(&teacher)).unwrap();
    let labeler = PseudoLabeler::new(&ck.model, &data.vocab, &data.embeddings, Default::default());
    let expected: usize = data.caption.iter().map(|c| labeler.objects(&c.tokens).len()).sum();
    assert_eq!(records.len(), expected);

    let m = ck.model.config.mask_size;
    let mut it = records.iter();
    for (i, sample) in data.caption.iter().enumerate() {
        for label in labeler.label(sample).unwrap() {
            let r = it.next().unwrap();
            assert_eq!((r.sample, r.object.as_str()), (i, label.object.as_str()));
            assert_eq!(r.mask.size, [m, m]);
            assert_eq!(r.mask.decode().unwrap(), label.mask);
            assert_eq!(r.region, label.region.to_array());
            assert_eq!(r.noise.len(), m * m);
            assert!(r.reliability > 0.0);
        }
    }
}

#[test]
fn ablation_rows_and_teacher_only_consistency() {
    let f = Fixture::new();
    let data = f.path("data");
    let teacher = f.path("teacher/teacher.ckpt");
    assert_eq!(run_small(&["ablate", "--data", &data, "--teacher", &teacher, "--out", &f.path("ab"), "--strategies", "teacher-only,robust,x-plus-mask"]), 0);
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(f.path("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(data_rows(&f.path("ab/ablation.csv")).len(), 3);
    assert_eq!(rows[0]["strategy"], "teacher_only");

    assert_eq!(run_small(&["eval", "--checkpoint", &teacher, "--data", &data, "--out", &f.path("ev")]), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(f.path("ev/eval_generalized.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["generalized_target"], report["map_target"]);
    assert_eq!(rows[0]["generalized_base"], report["map_base"]);
    assert!(fs::read_dir(f.path("ev/pr_generalized")).unwrap().count() > 0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(&tmp.path().join("x"));
    assert_eq!(run(&["gen-data", "--out", &out, "--set", "data.n_bsae=3"]), 2);
    assert_eq!(run(&["gen-data", "--out", &out, "--set", "data.caption_noise_rate=2"]), 2);
    assert_eq!(run(&["gen-data", "--bogus"]), 2);
    assert_eq!(run(&["--jobs", "0", "gen-data", "--out", &out]), 2);
    assert_eq!(run(&["eval", "--checkpoint", &s(&tmp.path().join("missing.ckpt")), "--data", &out, "--out", &out]), 3);

    let data = s(&tmp.path().join("data"));
    assert_eq!(run_small(&["gen-data", "--out", &data]), 0);
    let diverging = ["train-teacher", "--data", &data, "--out", &out, "--set", "teacher.optim.lr=1e300", "--set", "teacher.optim.grad_clip=1e300"];
    assert_eq!(run_small(&diverging), 4);
}

#[test]
fn empty_splits_give_a_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let zero = ["--set", "data.n_base=0", "--set", "data.n_caption=0", "--set", "data.n_test_mixed=0", "--set", "data.n_test_base=0", "--set", "data.n_test_target=0"];
    let mut args = vec!["gen-data", "--out"];
    let o = s(&out);
    args.push(&o);
    args.extend_from_slice(&zero);
    assert_eq!(run(&args), 0);
    let d = Dataset::load(&out).unwrap();
    assert!(d.base.is_empty() && d.caption.is_empty() && d.test.is_empty());
}
