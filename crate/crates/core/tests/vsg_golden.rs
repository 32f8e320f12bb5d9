use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgvp_core::scene::{EntityBox, RelationTriplet};
use rgvp_core::tokenizer::Tokenizer;
use rgvp_core::verbalise::{parse_verbalised, verbalise_graph};
use serde_json::Value;

struct Case {
    id: u64,
    seed: u64,
    k: usize,
    max_tokens: usize,
    entities: Vec<EntityBox>,
    triplets: Vec<RelationTriplet>,
    expected: String,
}

fn cases() -> Vec<Case> {
    include_str!("golden/vsg.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let num = |k: &str| v[k].as_u64().unwrap();
            let entities = v["entities"]
                .as_array()
                .unwrap()
                .iter()
                .map(|e| {
                    let f = |i: usize| e[i].as_f64().unwrap() as f32;
                    EntityBox::new(e[0].as_str().unwrap(), f(1), f(2), f(3), f(4))
                })
                .collect();
            let triplets = v["triplets"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| {
                    RelationTriplet::new(t[0].as_u64().unwrap() as usize, t[1].as_str().unwrap(), t[2].as_u64().unwrap() as usize)
                })
                .collect();
            Case {
                id: num("case"),
                seed: num("seed"),
                k: num("k") as usize,
                max_tokens: num("max_tokens") as usize,
                entities,
                triplets,
                expected: v["expected"].as_str().unwrap().to_string(),
            }
        })
        .collect()
}

fn tokenizer(c: &Case) -> Tokenizer {
    let words: Vec<&str> = c
        .entities
        .iter()
        .map(|e| e.label.as_str())
        .chain(c.triplets.iter().map(|t| t.relation.as_str()))
        .collect();
    Tokenizer::build(words)
}

#[test]
fn verbalisations_match_golden_bytes() {
    let cases = cases();
    assert_eq!(cases.len(), 20);
    for c in &cases {
        let tok = tokenizer(c);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let v = verbalise_graph(&c.triplets, &c.entities, &tok, c.k, c.max_tokens, &mut rng).unwrap();
        assert_eq!(v.text, c.expected, "case {}", c.id);
        assert!(tok.count(&v.text) <= c.max_tokens, "case {}", c.id);
    }
}

#[test]
fn golden_texts_parse_back_to_their_sources() {
    for c in cases() {
        let tok = tokenizer(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let v = verbalise_graph(&c.triplets, &c.entities, &tok, c.k, c.max_tokens, &mut rng).unwrap();
        let mut rels: Vec<&str> = c.triplets.iter().map(|t| t.relation.as_str()).collect();
        rels.sort_unstable();
        rels.dedup();
        let parsed = parse_verbalised(&c.expected, &rels).unwrap();
        let want: Vec<(String, String, String)> = v
            .source
            .iter()
            .map(|t| (c.entities[t.subject].label.clone(), t.relation.clone(), c.entities[t.object].label.clone()))
            .collect();
        assert_eq!(parsed, want, "case {}", c.id);
    }
}
