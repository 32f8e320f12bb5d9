//! Images annotated with captions, entity boxes and relation triplets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases and collapses runs of whitespace into single spaces.
pub fn normalize_label(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// A labelled entity with an absolute pixel box (origin top-left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityBox {
    pub label: String,
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

impl EntityBox {
    pub fn new(label: &str, xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> Self {
        Self {
            label: normalize_label(label),
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn centre(&self) -> (f32, f32) {
        ((self.xmin + self.xmax) * 0.5, (self.ymin + self.ymax) * 0.5)
    }

    /// Box as normalized `(cx, cy, w, h)` for an image of the given size.
    pub fn normalized_cxcywh(&self, width: u32, height: u32) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        let (x0, y0) = (self.xmin as f64 / w, self.ymin as f64 / h);
        let (x1, y1) = (self.xmax as f64 / w, self.ymax as f64 / h);
        [(x0 + x1) * 0.5, (y0 + y1) * 0.5, x1 - x0, y1 - y0]
    }

    fn check(&self, width: u32, height: u32) -> core::result::Result<(), String> {
        if self.label.is_empty() {
            return Err("empty label".to_string());
        }
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite coordinate".to_string());
        }
        if !(0.0 <= self.xmin && self.xmin < self.xmax && self.xmax <= width as f32) {
            return Err(format!(
                "x range [{}, {}] invalid for width {}",
                self.xmin, self.xmax, width
            ));
        }
        if !(0.0 <= self.ymin && self.ymin < self.ymax && self.ymax <= height as f32) {
            return Err(format!(
                "y range [{}, {}] invalid for height {}",
                self.ymin, self.ymax, height
            ));
        }
        Ok(())
    }
}

/// `⟨subject, relation, object⟩` over indices into the record's entity list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub subject: usize,
    pub relation: String,
    pub object: usize,
}

impl RelationTriplet {
    pub fn new(subject: usize, relation: &str, object: usize) -> Self {
        Self {
            subject,
            relation: normalize_label(relation),
            object,
        }
    }
}

/// One image and its annotations. Pixels are `height × width × 3`, row-major,
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
    pub captions: Vec<String>,
    pub entities: Vec<EntityBox>,
    pub triplets: Vec<RelationTriplet>,
}

impl ImageRecord {
    /// Applies label normalization in place and checks every invariant.
    pub fn normalize_and_validate(&mut self) -> Result<()> {
        for e in &mut self.entities {
            e.label = normalize_label(&e.label);
        }
        for t in &mut self.triplets {
            t.relation = normalize_label(&t.relation);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| Error::InvalidRecord {
            id: self.id.clone(),
            field: field.to_string(),
            reason,
        };
        if self.width == 0 || self.height == 0 {
            return Err(fail("width/height", "zero dimension".to_string()));
        }
        let expected = self.width as usize * self.height as usize * 3;
        if self.pixels.len() != expected {
            return Err(fail(
                "pixels",
                format!("{} values, expected {}", self.pixels.len(), expected),
            ));
        }
        if self
            .pixels
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(fail("pixels", "value outside [0, 1]".to_string()));
        }
        if self.captions.is_empty() && self.entities.is_empty() && self.triplets.is_empty() {
            return Err(fail("captions", "record has no annotations".to_string()));
        }
        for (i, e) in self.entities.iter().enumerate() {
            e.check(self.width, self.height)
                .map_err(|r| fail(&format!("entities[{i}]"), r))?;
        }
        let n = self.entities.len();
        for (i, t) in self.triplets.iter().enumerate() {
            let field = format!("triplets[{i}]");
            if t.subject >= n || t.object >= n {
                return Err(fail(&field, format!("entity index out of range ({n} entities)")));
            }
            if t.subject == t.object {
                return Err(fail(&field, "subject equals object".to_string()));
            }
            if t.relation.is_empty() {
                return Err(fail(&field, "empty relation".to_string()));
            }
        }
        Ok(())
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width as usize + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Frequency-ranked relation strings. Index `len()` is the out-of-vocabulary
/// bucket, so a classifier over this vocabulary has `len() + 1` outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationVocab {
    entries: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl RelationVocab {
    pub fn from_entries(entries: Vec<String>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        Self { entries, index }
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn out_of_vocab(&self) -> usize {
        self.entries.len()
    }

    pub fn n_classes(&self) -> usize {
        self.entries.len() + 1
    }

    /// Class index of `relation`, or the out-of-vocabulary index.
    pub fn index_of(&self, relation: &str) -> usize {
        self.index
            .get(relation)
            .copied()
            .unwrap_or(self.entries.len())
    }

    pub fn relation(&self, idx: usize) -> Option<&str> {
        self.entries.get(idx).map(String::as_str)
    }
}

/// Per-relation triplet counts across a corpus.
pub fn relation_counts(records: &[ImageRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        for t in &r.triplets {
            *counts.entry(t.relation.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Keeps the `v` most frequent relations; ties go to the lexicographically
/// smaller string.
pub fn build_relation_vocab(records: &[ImageRecord], v: usize) -> Result<RelationVocab> {
    if v == 0 {
        return Err(Error::Config("relation vocabulary size must be ≥ 1".into()));
    }
    let counts = relation_counts(records);
    if counts.is_empty() {
        return Err(Error::Empty("corpus has no relation triplets"));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(v);
    Ok(RelationVocab::from_entries(
        ranked.into_iter().map(|(r, _)| r).collect(),
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images: usize,
    pub captions: usize,
    pub entities: usize,
    pub triplets: usize,
    pub distinct_relations: usize,
}

pub fn corpus_stats(records: &[ImageRecord]) -> CorpusStats {
    CorpusStats {
        images: records.len(),
        captions: records.iter().map(|r| r.captions.len()).sum(),
        entities: records.iter().map(|r| r.entities.len()).sum(),
        triplets: records.iter().map(|r| r.triplets.len()).sum(),
        distinct_relations: relation_counts(records).len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn record(triplets: &[(&str, usize)]) -> ImageRecord {
        ImageRecord {
            id: "img".into(),
            width: 4,
            height: 4,
            pixels: vec![0.5; 48],
            captions: vec!["a cat".into()],
            entities: vec![
                EntityBox::new("cat", 0.0, 0.0, 2.0, 2.0),
                EntityBox::new("mat", 1.0, 1.0, 4.0, 4.0),
            ],
            triplets: triplets
                .iter()
                .flat_map(|&(r, n)| (0..n).map(move |_| RelationTriplet::new(0, r, 1)))
                .collect(),
        }
    }

    #[test]
    fn vocab_ranks_by_frequency() {
        let r = record(&[("on", 5), ("left of", 3), ("under", 1)]);
        let v = build_relation_vocab(&[r], 2).unwrap();
        assert_eq!(v.entries(), &["on".to_string(), "left of".to_string()]);
        assert_eq!(v.index_of("under"), 2);
        assert_eq!(v.n_classes(), 3);
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let r = record(&[("b", 2), ("a", 2)]);
        let v = build_relation_vocab(&[r], 1).unwrap();
        assert_eq!(v.entries(), &["a".to_string()]);
    }

    #[test]
    fn vocab_requires_triplets() {
        let r = record(&[]);
        assert!(build_relation_vocab(&[r.clone()], 3).is_err());
        assert!(build_relation_vocab(&[record(&[("on", 1)])], 0).is_err());
    }

    #[test]
    fn stats_count_everything() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());
        let mut r = record(&[("on", 1), ("under", 1)]);
        r.captions.push("another".into());
        r.entities.push(EntityBox::new("dog", 0.0, 0.0, 1.0, 1.0));
        let s = corpus_stats(&[r]);
        assert_eq!(
            (s.images, s.captions, s.entities, s.triplets, s.distinct_relations),
            (1, 2, 3, 2, 2)
        );
    }

    #[test]
    fn validation_names_the_bad_field() {
        let mut r = record(&[("on", 1)]);
        r.entities[1].xmin = 4.0;
        match r.validate() {
            Err(Error::InvalidRecord { id, field, .. }) => {
                assert_eq!(id, "img");
                assert_eq!(field, "entities[1]");
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut r = record(&[("on", 1)]);
        r.triplets[0].object = 0;
        assert!(r.validate().is_err());
        let mut r = record(&[]);
        r.captions.clear();
        r.entities.clear();
        assert!(r.validate().is_err());
    }

    #[test]
    fn labels_are_normalized() {
        assert_eq!(normalize_label("  Red   Circle "), "red circle");
        let mut r = record(&[("Left  Of", 1)]);
        r.entities[0].label = "Big  CAT".into();
        r.normalize_and_validate().unwrap();
        assert_eq!(r.entities[0].label, "big cat");
        assert_eq!(r.triplets[0].relation, "left of");
    }
}
