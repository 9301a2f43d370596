//! Class vocabularies, word embeddings and embedding-space scoring.
//!
//! A region is scored against class `o` by the raw inner product between the
//! class word vector and the region's visual embedding. The background class
//! has a fixed all-zero embedding, so its score is always exactly zero and a
//! region is background whenever every class score falls at or below zero.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a class inside a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSplit {
    /// Mask-annotated classes.
    Base,
    /// Classes that only ever appear as caption words.
    CaptionOnly,
    /// Held-out classes, seen only at evaluation time.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    classes: Vec<String>,
    splits: Vec<ClassSplit>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(entries: Vec<(String, ClassSplit)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut classes = Vec::with_capacity(entries.len());
        let mut splits = Vec::with_capacity(entries.len());
        for (i, (name, split)) in entries.into_iter().enumerate() {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("class name {name:?} must be a single non-empty token")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate class name {name:?}")));
            }
            classes.push(name);
            splits.push(split);
        }
        Ok(Self { classes, splits, index })
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindexed(mut self) -> Result<Self> {
        let entries = self.classes.drain(..).zip(self.splits.drain(..)).collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.classes[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.index.get(name).copied().map(ClassId)
    }

    pub fn split(&self, id: ClassId) -> ClassSplit {
        self.splits[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.classes.len()).map(ClassId)
    }

    fn filtered(&self, keep: impl Fn(ClassSplit) -> bool) -> Vec<ClassId> {
        self.ids().filter(|&c| keep(self.split(c))).collect()
    }

    /// Base classes, in vocabulary order.
    pub fn base(&self) -> Vec<ClassId> {
        self.filtered(|s| s == ClassSplit::Base)
    }

    pub fn caption_only(&self) -> Vec<ClassId> {
        self.filtered(|s| s == ClassSplit::CaptionOnly)
    }

    /// Caption classes: base plus caption-only, in vocabulary order.
    pub fn caption(&self) -> Vec<ClassId> {
        self.filtered(|s| s != ClassSplit::Target)
    }

    pub fn target(&self) -> Vec<ClassId> {
        self.filtered(|s| s == ClassSplit::Target)
    }

    /// Tokens that count as object nouns in captions.
    ///
    /// Only caption classes are mentionable; target names never occur in
    /// any caption and are therefore not part of the lexicon.
    pub fn object_lexicon(&self) -> BTreeSet<String> {
        self.caption().into_iter().map(|c| self.classes[c.0].clone()).collect()
    }
}

/// Word vectors for every class plus the implied zero background vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::invalid(format!("class {i}: vector length {} != {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("class {i}: non-finite embedding entry")));
            }
        }
        Ok(Self { dim, vectors, background: vec![0.0; dim] })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: ClassId) -> &[f64] {
        &self.vectors[id.0]
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Text map format: one line per class, `name v1 v2 ... vd`. The
    /// background row is not written.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for id in vocab.ids() {
            out.push_str(vocab.name(id));
            for x in self.vector(id) {
                // `{:?}` on f64 is the shortest representation that round-trips.
                let _ = write!(out, " {x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let name = fields.next().unwrap_or_default();
            let id = vocab
                .id(name)
                .ok_or_else(|| Error::format(format!("line {}: unknown class {name:?}", lineno + 1)))?;
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::format(format!("line {}: {e}", lineno + 1)))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::format(format!("line {}: expected {d} values, got {}", lineno + 1, values.len())))
                }
                _ => {}
            }
            if rows[id.0].replace(values).is_some() {
                return Err(Error::format(format!("class {name:?} listed twice")));
            }
        }
        let vectors = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::format(format!("missing embedding for {:?}", vocab.name(ClassId(i))))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim.unwrap_or(0), vectors)
    }
}

/// Raw inner product between a class vector and a region embedding.
pub fn class_score(class_vector: &[f64], embedding: &[f64]) -> Result<f64> {
    if class_vector.len() != embedding.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: class vector {} vs embedding {}",
            class_vector.len(),
            embedding.len()
        )));
    }
    Ok(dot(class_vector, embedding))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub classes: Vec<ClassId>,
    pub values: Vec<f64>,
    /// Always exactly zero.
    pub background: f64,
}

pub fn score_all(table: &EmbeddingTable, embedding: &[f64], classes: &[ClassId]) -> Result<Scores> {
    if classes.is_empty() {
        return Err(Error::invalid("empty class subset"));
    }
    let values = classes
        .iter()
        .map(|&c| {
            if c.0 >= table.len() {
                return Err(Error::invalid(format!("class id {} outside vocabulary", c.0)));
            }
            class_score(table.vector(c), embedding)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scores { classes: classes.to_vec(), values, background: class_score(table.background(), embedding)? })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(ClassId, f64),
    Background,
}

impl Prediction {
    pub fn score(&self) -> f64 {
        match *self {
            Prediction::Class(_, s) => s,
            Prediction::Background => 0.0,
        }
    }
}

/// Argmax over `classes`, or background when no class beats the zero
/// background score. Ties between classes go to the earlier entry of
/// `classes`; an exact tie with background resolves to background.
pub fn predict_class(table: &EmbeddingTable, embedding: &[f64], classes: &[ClassId]) -> Result<Prediction> {
    let scores = score_all(table, embedding, classes)?;
    Ok(predict_from_scores(&scores))
}

pub fn predict_from_scores(scores: &Scores) -> Prediction {
    let mut best: Option<(ClassId, f64)> = None;
    for (&c, &s) in scores.classes.iter().zip(&scores.values) {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    match best {
        Some((c, s)) if s > scores.background => Prediction::Class(c, s),
        _ => Prediction::Background,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(vectors: Vec<Vec<f64>>) -> EmbeddingTable {
        let d = vectors[0].len();
        EmbeddingTable::new(d, vectors).unwrap()
    }

    #[test]
    fn background_scores_zero() {
        let e = [0.3, -2.0, 5.0];
        assert_eq!(class_score(&[0.0; 3], &e).unwrap(), 0.0);
    }

    #[test]
    fn one_hot_selects_coordinate() {
        assert_eq!(class_score(&[1.0, 0.0], &[0.5, 0.3]).unwrap(), 0.5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(matches!(class_score(&[1.0], &[1.0, 2.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn random_score_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut products = [0.0; 8];
        for i in 0..8 {
            products[i] = v[i] * e[i];
        }
        let oracle = products.iter().fold(0.0, |acc, p| acc + p);
        assert!((class_score(&v, &e).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn score_all_examples() {
        let t = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ids = [ClassId(0), ClassId(1)];
        let s = score_all(&t, &[0.2, -0.4], &ids).unwrap();
        assert_eq!(s.values, vec![0.2, -0.4]);
        assert_eq!(s.background, 0.0);
        let z = score_all(&t, &[0.0, 0.0], &ids).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(score_all(&t, &[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn score_all_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vectors: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let e: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = table(vectors.clone());
        let ids: Vec<ClassId> = (0..5).map(ClassId).collect();
        let s = score_all(&t, &e, &ids).unwrap();
        for (i, v) in vectors.iter().enumerate() {
            assert_eq!(s.values[i], class_score(v, &e).unwrap());
        }
    }

    #[test]
    fn predict_examples() {
        let t = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ids = [ClassId(0), ClassId(1)];
        assert_eq!(predict_class(&t, &[-0.1, -0.2], &ids).unwrap(), Prediction::Background);
        assert_eq!(predict_class(&t, &[0.2, -0.4], &ids).unwrap(), Prediction::Class(ClassId(0), 0.2));
        // Tie between classes: first wins. Tie with background: background.
        assert_eq!(predict_class(&t, &[0.3, 0.3], &ids).unwrap(), Prediction::Class(ClassId(0), 0.3));
        assert_eq!(predict_class(&t, &[0.0, -1.0], &ids).unwrap(), Prediction::Background);
    }

    #[test]
    fn predict_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let vectors: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let e: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = table(vectors.clone());
            let ids: Vec<ClassId> = (0..20).map(ClassId).collect();
            let mut oracle = Prediction::Background;
            let mut best = 0.0;
            for (i, v) in vectors.iter().enumerate() {
                let s: f64 = v.iter().zip(&e).map(|(a, b)| a * b).sum();
                if s > best {
                    best = s;
                    oracle = Prediction::Class(ClassId(i), s);
                }
            }
            assert_eq!(predict_class(&t, &e, &ids).unwrap(), oracle);
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let r = Vocabulary::new(vec![("a".into(), ClassSplit::Base), ("a".into(), ClassSplit::Target)]);
        assert!(r.is_err());
    }

    #[test]
    fn caption_set_contains_base() {
        let v = Vocabulary::new(vec![
            ("a".into(), ClassSplit::Base),
            ("b".into(), ClassSplit::CaptionOnly),
            ("c".into(), ClassSplit::Target),
        ])
        .unwrap();
        assert_eq!(v.caption(), vec![ClassId(0), ClassId(1)]);
        assert!(v.object_lexicon().contains("a"));
        assert!(!v.object_lexicon().contains("c"));
    }

    #[test]
    fn text_roundtrip() {
        let v = Vocabulary::new(vec![("a".into(), ClassSplit::Base), ("b".into(), ClassSplit::Target)]).unwrap();
        let t = table(vec![vec![0.1, 1.0 / 3.0], vec![-2.5e-7, 4.0]]);
        let text = t.to_text(&v);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(EmbeddingTable::from_text(&text, &v).unwrap(), t);
    }

    proptest::proptest! {
        #[test]
        fn background_always_exactly_zero(e in proptest::collection::vec(-1e6f64..1e6, 3)) {
            let t = table(vec![vec![1.0, 2.0, 3.0]]);
            let s = score_all(&t, &e, &[ClassId(0)]).unwrap();
            proptest::prop_assert_eq!(s.background, 0.0);
        }

        #[test]
        fn argmax_invariant_under_positive_rescaling(
            raw in proptest::collection::vec(-1.0f64..1.0, 12),
            e in proptest::collection::vec(-1.0f64..1.0, 3),
            scale in 0.01f64..100.0,
        ) {
            let vectors: Vec<Vec<f64>> = raw.chunks(3).map(|c| c.to_vec()).collect();
            let scaled: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let ids: Vec<ClassId> = (0..4).map(ClassId).collect();
            let a = predict_class(&table(vectors), &e, &ids).unwrap();
            let b = predict_class(&table(scaled), &e, &ids).unwrap();
            match (a, b) {
                (Prediction::Class(x, _), Prediction::Class(y, _)) => proptest::prop_assert_eq!(x, y),
                (Prediction::Background, Prediction::Background) => {}
                _ => proptest::prop_assert!(false, "prediction kind changed under rescaling"),
            }
        }

        #[test]
        fn appending_weaker_classes_keeps_prediction(
            raw in proptest::collection::vec(-1.0f64..1.0, 9),
            e in proptest::collection::vec(0.1f64..1.0, 3),
        ) {
            let vectors: Vec<Vec<f64>> = raw.chunks(3).map(|c| c.to_vec()).collect();
            let ids: Vec<ClassId> = (0..3).map(ClassId).collect();
            let base = predict_class(&table(vectors.clone()), &e, &ids).unwrap();
            let mut extended = vectors;
            // A class whose score is strictly below the current best.
            let weak: Vec<f64> = e.iter().map(|x| -x).collect();
            extended.push(weak);
            let ids4: Vec<ClassId> = (0..4).map(ClassId).collect();
            proptest::prop_assert_eq!(predict_class(&table(extended), &e, &ids4).unwrap(), base);
        }
    }
}
