//! Generates a small synthetic benchmark, writes it to disk and reloads it.
//!
//! ```text
//! cargo run --example generate_dataset -- [out_dir]
//! ```

use std::path::PathBuf;

use crossmodal_seg::semantic::ClassSplit;
use crossmodal_seg::world::io::dataset_digest;
use crossmodal_seg::world::{DataConfig, Dataset};

fn main() -> crossmodal_seg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xmseg-data"));
    let cfg = DataConfig { n_base: 50, n_caption: 50, n_test_mixed: 20, n_test_base: 10, n_test_target: 10, ..DataConfig::default() };
    let data = Dataset::generate(&cfg)?;

    for split in [ClassSplit::Base, ClassSplit::CaptionOnly, ClassSplit::Target] {
        let names: Vec<&str> = data.vocab.ids().filter(|&c| data.vocab.split(c) == split).map(|c| data.vocab.name(c)).collect();
        println!("{split:?}: {}", names.join(", "));
    }
    for s in data.caption.iter().take(3) {
        println!("caption: {}  (absent: {:?})", s.tokens.join(" "), s.diagnostics().absent_tokens);
    }

    let manifest = data.save(&out)?;
    println!("wrote {} base, {} caption, {} test images to {}", manifest.counts.base, manifest.counts.caption, manifest.counts.test, out.display());
    println!("digest {}", dataset_digest(&out)?);
    assert_eq!(Dataset::load(&out)?, data);
    Ok(())
}
