//! Scene graph → structured caption: sample, sort by subject position, template.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{EntityBox, RelationTriplet};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbaliserConfig {
    /// Triplets sampled per caption.
    pub k: usize,
    pub max_tokens_caption: usize,
    pub max_tokens_vsg: usize,
    pub rng_seed: u64,
}

impl Default for VerbaliserConfig {
    fn default() -> Self {
        Self {
            k: 16,
            max_tokens_caption: 36,
            max_tokens_vsg: 112,
            rng_seed: 0,
        }
    }
}

impl VerbaliserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        if self.max_tokens_vsg < self.max_tokens_caption {
            return Err(Error::Config(
                "max_tokens_vsg must be ≥ max_tokens_caption".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbalisedCaption {
    pub text: String,
    pub source: Vec<RelationTriplet>,
}

/// Uniformly samples `min(k, |graph|)` distinct triplets, returned in graph order.
pub fn sample_triplets<R: Rng + ?Sized>(
    graph: &[RelationTriplet],
    k: usize,
    rng: &mut R,
) -> Result<Vec<RelationTriplet>> {
    if graph.is_empty() {
        return Err(Error::Empty("scene graph has no triplets"));
    }
    let n = k.min(graph.len());
    let mut picked = rand::seq::index::sample(rng, graph.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| graph[i].clone()).collect())
}

/// Raster order of subject centres: `y`, then `x`, then input position.
pub fn sort_triplets(triplets: &[RelationTriplet], entities: &[EntityBox]) -> Vec<RelationTriplet> {
    let mut out = triplets.to_vec();
    // sort_by is stable, which supplies the input-position tie-break.
    out.sort_by(|a, b| {
        let (ax, ay) = entities[a.subject].centre();
        let (bx, by) = entities[b.subject].centre();
        ay.total_cmp(&by).then(ax.total_cmp(&bx))
    });
    out
}

fn segment(t: &RelationTriplet, entities: &[EntityBox]) -> String {
    let mut s = String::new();
    s.push_str(&entities[t.subject].label);
    s.push(' ');
    s.push_str(&t.relation);
    s.push(' ');
    s.push_str(&entities[t.object].label);
    s
}

/// `[CLS] s r o [SEP] … s r o [SEP]`, keeping whole triplets while the token
/// count stays within `max_tokens`.
pub fn verbalise(
    sorted: &[RelationTriplet],
    entities: &[EntityBox],
    tokenizer: &Tokenizer,
    max_tokens: usize,
) -> VerbalisedCaption {
    let mut text = String::from("[CLS]");
    let mut used = 1;
    let mut source = Vec::new();
    for t in sorted {
        let seg = segment(t, entities);
        let cost = tokenizer.count(&seg) + 1;
        if used + cost > max_tokens {
            break;
        }
        used += cost;
        text.push(' ');
        text.push_str(&seg);
        text.push_str(" [SEP]");
        source.push(t.clone());
    }
    VerbalisedCaption { text, source }
}

/// Full pipeline: sample `k`, sort, verbalise.
pub fn verbalise_graph<R: Rng + ?Sized>(
    graph: &[RelationTriplet],
    entities: &[EntityBox],
    tokenizer: &Tokenizer,
    k: usize,
    max_tokens: usize,
    rng: &mut R,
) -> Result<VerbalisedCaption> {
    let sampled = sample_triplets(graph, k, rng)?;
    let sorted = sort_triplets(&sampled, entities);
    Ok(verbalise(&sorted, entities, tokenizer, max_tokens))
}

/// Splits a verbalised caption back into `(subject, relation, object)` label
/// strings. Each segment is split at the first occurrence of one of the known
/// `relations` (longest match wins).
pub fn parse_verbalised(text: &str, relations: &[&str]) -> Option<Vec<(String, String, String)>> {
    let body = text.trim().strip_prefix("[CLS]")?;
    let mut out = Vec::new();
    let mut segments: Vec<&str> = body.split("[SEP]").map(str::trim).collect();
    if segments.pop()? != "" {
        return None;
    }
    for seg in segments {
        let words: Vec<&str> = seg.split(' ').collect();
        let mut best: Option<(usize, usize)> = None;
        for start in 1..words.len() {
            for r in relations {
                let rl = r.split(' ').count();
                if start + rl < words.len()
                    && words[start..start + rl].join(" ") == *r
                    && best.is_none_or(|(s, l)| start < s || (start == s && rl > l))
                {
                    best = Some((start, rl));
                }
            }
        }
        let (s, l) = best?;
        out.push((
            words[..s].join(" "),
            words[s..s + l].join(" "),
            words[s + l..].join(" "),
        ));
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ents() -> Vec<EntityBox> {
        vec![
            EntityBox::new("cat", 0.0, 40.0, 20.0, 60.0),   // centre (10, 50)
            EntityBox::new("mat", 0.0, 0.0, 20.0, 40.0),    // centre (10, 20)
            EntityBox::new("dog", 30.0, 0.0, 40.0, 10.0),   // centre (35, 5)
            EntityBox::new("table", 0.0, 10.0, 64.0, 30.0), // centre (32, 20)
        ]
    }

    fn tok() -> Tokenizer {
        Tokenizer::build(["cat on mat dog under table"])
    }

    #[test]
    fn template_one_and_two_triplets() {
        let e = ents();
        let t = tok();
        let one = [RelationTriplet::new(0, "on", 1)];
        assert_eq!(verbalise(&one, &e, &t, 112).text, "[CLS] cat on mat [SEP]");
        let two = [RelationTriplet::new(0, "on", 1), RelationTriplet::new(2, "under", 3)];
        assert_eq!(
            verbalise(&two, &e, &t, 112).text,
            "[CLS] cat on mat [SEP] dog under table [SEP]"
        );
    }

    #[test]
    fn sort_is_raster_order() {
        let e = ents();
        let ts = [RelationTriplet::new(0, "on", 3), RelationTriplet::new(1, "on", 3)];
        let sorted = sort_triplets(&ts, &e);
        assert_eq!(sorted[0].subject, 1);
        // same y, smaller x first
        let ts = [RelationTriplet::new(3, "on", 0), RelationTriplet::new(1, "on", 0)];
        assert_eq!(sort_triplets(&ts, &e)[0].subject, 1);
        // shared subject keeps input order
        let ts = [RelationTriplet::new(0, "on", 1), RelationTriplet::new(0, "under", 3)];
        assert_eq!(sort_triplets(&ts, &e), ts.to_vec());
        assert_eq!(sort_triplets(&ts[..1], &e), ts[..1].to_vec());
    }

    #[test]
    fn sampling_cardinality_and_seed() {
        let graph: Vec<_> = (0..100)
            .map(|i| RelationTriplet::new(i % 4, "on", (i + 1) % 4))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_triplets(&graph[..3], 16, &mut rng).unwrap(), graph[..3].to_vec());
        let s = sample_triplets(&graph, 16, &mut rng).unwrap();
        assert_eq!(s.len(), 16);
        let a = sample_triplets(&graph, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_triplets(&graph, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(sample_triplets(&[], 4, &mut rng).is_err());
    }

    #[test]
    fn truncates_at_whole_triplets() {
        let e = vec![
            EntityBox::new("abcdefghij", 0.0, 0.0, 10.0, 10.0),
            EntityBox::new("jihgfedcba", 20.0, 20.0, 30.0, 30.0),
        ];
        // Only single characters are in this vocabulary, so each label costs 10 tokens.
        let t = Tokenizer::build(["a b c d e f g h i j on"]);
        assert_eq!(t.count("abcdefghij"), 10);
        let ts: Vec<_> = (0..16).map(|_| RelationTriplet::new(0, "on", 1)).collect();
        let v = verbalise(&ts, &e, &t, 112);
        // 1 + 5 × (10 + 1 + 10 + 1) = 111 ≤ 112; a sixth would need 133.
        assert_eq!(v.source.len(), 5);
        assert_eq!(t.count(&v.text), 111);
        assert!(v.text.ends_with("[SEP]"));
    }

    #[test]
    fn parse_back_recovers_labels() {
        let e = vec![
            EntityBox::new("red circle", 0.0, 0.0, 10.0, 10.0),
            EntityBox::new("blue square", 20.0, 20.0, 30.0, 30.0),
        ];
        let t = Tokenizer::build(["red circle blue square left of above"]);
        let ts = [RelationTriplet::new(0, "left of", 1), RelationTriplet::new(1, "above", 0)];
        let v = verbalise(&ts, &e, &t, 112);
        let parsed = parse_verbalised(&v.text, &["left of", "above"]).unwrap();
        assert_eq!(
            parsed,
            vec![
                ("red circle".into(), "left of".into(), "blue square".into()),
                ("blue square".into(), "above".into(), "red circle".into()),
            ]
        );
    }
}
