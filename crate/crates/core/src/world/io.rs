//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json       dataset index (UTF-8 JSON)
//! <dir>/embeddings.txt      class word vectors, one `name v1 .. vd` line per class
//! <dir>/base/000000.ppm     binary PPM (P6) images
//! <dir>/base/000000_0.pgm   binary PGM (P5) masks, 0 or 255
//! <dir>/caption/...         same layout; masks are diagnostics only
//! <dir>/test/...
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{Annotation, CaptionedSample, DataConfig, Dataset, HiddenTruth, MaskedSample, TestSample, TestSubset};
use super::render::Image;
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, Region};
use crate::semantic::{ClassSplit, EmbeddingTable, Vocabulary};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(3 * image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.push((image.get(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Parses a binary PNM header and returns (width, height, payload).
fn parse_pnm<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("non-ASCII PNM header"))?);
    }
    if fields[0] != magic {
        return Err(Error::format(format!("expected {magic}, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PNM header field {s:?}")));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(Error::format("only 8-bit PNM supported"));
    }
    // exactly one whitespace byte separates header and payload
    Ok((w, h, &bytes[(pos + 1).min(bytes.len())..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, data) = parse_pnm(bytes, "P6")?;
    if data.len() != 3 * w * h {
        return Err(Error::format(format!("PPM payload {} bytes, expected {}", data.len(), 3 * w * h)));
    }
    let mut img = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(c, x, y, f64::from(data[(y * w + x) * 3 + c]) / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let (w, h, data) = parse_pnm(bytes, "P5")?;
    if data.len() != w * h {
        return Err(Error::format(format!("PGM payload {} bytes, expected {}", data.len(), w * h)));
    }
    Ok(BinaryMask { width: w, height: h, bits: data.iter().map(|&v| v >= 128).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub name: String,
    pub split: ClassSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub mask: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub image: String,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: String,
    pub tokens: Vec<String>,
    pub hidden_truth: Vec<AnnotationRecord>,
    pub absent_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub image: String,
    pub subset: TestSubset,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecords {
    pub base: Vec<BaseRecord>,
    pub caption: Vec<CaptionRecord>,
    pub test: Vec<TestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub classes: Vec<ClassRecord>,
    pub embeddings: String,
    pub counts: SplitCounts,
    pub splits: SplitRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub base: usize,
    pub caption: usize,
    pub test: usize,
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(&path)?.write_all(bytes)?;
    Ok(())
}

fn annotation_records(dir: &Path, vocab: &Vocabulary, stem: &str, annotations: &[Annotation]) -> Result<Vec<AnnotationRecord>> {
    annotations
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let rel = format!("{stem}_{k}.pgm");
            write_file(dir, &rel, &encode_pgm(&a.mask))?;
            Ok(AnnotationRecord { mask: rel, bbox: a.bbox.to_array(), label: vocab.name(a.class).to_string() })
        })
        .collect()
}

impl Dataset {
    /// Writes the dataset tree and returns the manifest.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let vocab = &self.vocab;
        write_file(dir, EMBEDDINGS_FILE, self.embeddings.to_text(vocab).as_bytes())?;
        let mut base = Vec::with_capacity(self.base.len());
        for (i, s) in self.base.iter().enumerate() {
            let stem = format!("base/{i:06}");
            write_file(dir, &format!("{stem}.ppm"), &encode_ppm(&s.image))?;
            base.push(BaseRecord { image: format!("{stem}.ppm"), annotations: annotation_records(dir, vocab, &stem, &s.annotations)? });
        }
        let mut caption = Vec::with_capacity(self.caption.len());
        for (i, s) in self.caption.iter().enumerate() {
            let stem = format!("caption/{i:06}");
            write_file(dir, &format!("{stem}.ppm"), &encode_ppm(&s.image))?;
            caption.push(CaptionRecord {
                image: format!("{stem}.ppm"),
                tokens: s.tokens.clone(),
                hidden_truth: annotation_records(dir, vocab, &stem, &s.diagnostics().annotations)?,
                absent_tokens: s.diagnostics().absent_tokens.clone(),
            });
        }
        let mut test = Vec::with_capacity(self.test.len());
        for (i, s) in self.test.iter().enumerate() {
            let stem = format!("test/{i:06}");
            write_file(dir, &format!("{stem}.ppm"), &encode_ppm(&s.image))?;
            test.push(TestRecord { image: format!("{stem}.ppm"), subset: s.subset, annotations: annotation_records(dir, vocab, &stem, &s.annotations)? });
        }
        let manifest = Manifest {
            format_version: 1,
            seed: self.config.seed,
            config: self.config.clone(),
            classes: vocab.ids().map(|c| ClassRecord { name: vocab.name(c).to_string(), split: vocab.split(c) }).collect(),
            embeddings: EMBEDDINGS_FILE.to_string(),
            counts: SplitCounts { base: base.len(), caption: caption.len(), test: test.len() },
            splits: SplitRecords { base, caption, test },
        };
        write_file(dir, MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(format!("bad manifest: {e}")))?;
        let vocab = Vocabulary::new(manifest.classes.iter().map(|c| (c.name.clone(), c.split)).collect())?;
        let embeddings = EmbeddingTable::from_text(&fs::read_to_string(dir.join(&manifest.embeddings))?, &vocab)?;
        let read_image = |rel: &str| -> Result<Image> { decode_ppm(&fs::read(dir.join(rel))?) };
        let read_annotations = |records: &[AnnotationRecord]| -> Result<Vec<Annotation>> {
            records
                .iter()
                .map(|r| {
                    let class = vocab.id(&r.label).ok_or_else(|| Error::data(format!("unknown label {:?}", r.label)))?;
                    let mask = decode_pgm(&fs::read(dir.join(&r.mask))?)?;
                    let [x0, y0, x1, y1] = r.bbox;
                    Ok(Annotation { class, mask, bbox: Region::new(x0, y0, x1, y1) })
                })
                .collect()
        };
        let base = manifest
            .splits
            .base
            .iter()
            .map(|r| Ok(MaskedSample { image: read_image(&r.image)?, annotations: read_annotations(&r.annotations)? }))
            .collect::<Result<Vec<_>>>()?;
        let caption = manifest
            .splits
            .caption
            .iter()
            .map(|r| {
                let truth = HiddenTruth { annotations: read_annotations(&r.hidden_truth)?, absent_tokens: r.absent_tokens.clone() };
                CaptionedSample::new(read_image(&r.image)?, r.tokens.clone(), truth)
            })
            .collect::<Result<Vec<_>>>()?;
        let test = manifest
            .splits
            .test
            .iter()
            .map(|r| Ok(TestSample { image: read_image(&r.image)?, annotations: read_annotations(&r.annotations)?, subset: r.subset }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: manifest.config, vocab, embeddings, base, caption, test })
    }
}

/// SHA-256 over the manifest and every file it references, in manifest order.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut h = Sha256::new();
    h.update(&manifest_bytes);
    h.update(fs::read(dir.join(&manifest.embeddings))?);
    let mut files: Vec<&str> = Vec::new();
    for r in &manifest.splits.base {
        files.push(&r.image);
        files.extend(r.annotations.iter().map(|a| a.mask.as_str()));
    }
    for r in &manifest.splits.caption {
        files.push(&r.image);
        files.extend(r.hidden_truth.iter().map(|a| a.mask.as_str()));
    }
    for r in &manifest.splits.test {
        files.push(&r.image);
        files.extend(r.annotations.iter().map(|a| a.mask.as_str()));
    }
    for f in files {
        h.update(fs::read(dir.join(f))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_roundtrip() {
        let mut img = Image::filled(3, 2, 0.0);
        img.set(0, 1, 1, 1.0);
        img.set(2, 2, 0, 128.0 / 255.0);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_roundtrip_and_values() {
        let mut m = BinaryMask::empty(4, 2);
        m.set(3, 1, true);
        let bytes = encode_pgm(&m);
        assert!(bytes.starts_with(b"P5\n4 2\n255\n"));
        assert_eq!(*bytes.last().unwrap(), 255);
        assert_eq!(decode_pgm(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_pnm_rejected() {
        let bytes = encode_pgm(&BinaryMask::empty(4, 4));
        assert!(decode_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(&bytes).is_err());
    }

    #[test]
    fn dataset_save_load_roundtrip() {
        let config = DataConfig { n_base: 4, n_caption: 4, n_test_mixed: 2, n_test_base: 1, n_test_target: 1, ..Default::default() };
        let ds = Dataset::generate(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.save(dir.path()).unwrap();
        assert_eq!(manifest.counts, SplitCounts { base: 4, caption: 4, test: 4 });
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
