//! Closed-vocabulary word/subword tokenizer.
//!
//! Text is split on whitespace; each word is matched greedily against the
//! vocabulary, longest piece first, continuation pieces carrying a `##`
//! prefix. The vocabulary holds every corpus word plus every character seen
//! (as a word-initial and a `##` piece), so unseen words built from known
//! characters still tokenize.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const MASK: u32 = 2;
pub const PAD: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
    max_piece_chars: usize,
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIALS.len()
}

impl Tokenizer {
    /// Builds a vocabulary from the words of `texts`. Special-token literals
    /// in the text are not added as words.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut words = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                if SPECIALS.contains(&w) {
                    continue;
                }
                let w = w.to_lowercase();
                chars.extend(w.chars());
                words.insert(w);
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut add = |t: String, tokens: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for w in words {
            add(w, &mut tokens);
        }
        for c in &chars {
            add(c.to_string(), &mut tokens);
        }
        for c in &chars {
            let mut s = String::from("##");
            s.push(*c);
            add(s, &mut tokens);
        }
        Self::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    /// Restores a tokenizer from its ordered token list (ids are positions).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config(
                "token list must start with the five special tokens".into(),
            ));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(alloc::format!("duplicate token '{t}'")));
            }
        }
        let max_piece_chars = tokens
            .iter()
            .map(|t| t.trim_start_matches("##").chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            tokens,
            ids,
            max_piece_chars,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// True for pieces that continue a word (`##…`).
    pub fn is_continuation(&self, id: u32) -> bool {
        self.token(id).is_some_and(|t| t.starts_with("##"))
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(pos) = SPECIALS.iter().position(|s| *s == word) {
            out.push(pos as u32);
            return;
        }
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let start_len = out.len();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            let max_end = chars.len().min(start + self.max_piece_chars);
            for end in (start + 1..=max_end).rev() {
                let piece: String = chars[start..end].iter().collect();
                let key = if start == 0 {
                    piece
                } else {
                    let mut s = String::from("##");
                    s.push_str(&piece);
                    s
                };
                if let Some(&id) = self.ids.get(&key) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(start_len);
                    out.push(UNK);
                    return;
                }
            }
        }
    }

    /// Tokenizes `text` as-is (special literals map to their ids).
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Number of tokens `text` encodes to.
    pub fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    /// Encodes a sentence as `[CLS] … [SEP]`, truncated to `max_len` tokens.
    /// Text that already begins with `[CLS]` is taken verbatim.
    pub fn encode_sentence(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = if text.split_whitespace().next() == Some("[CLS]") {
            self.encode(text)
        } else {
            let mut v = Vec::with_capacity(8);
            v.push(CLS);
            v.extend(self.encode(text));
            v.push(SEP);
            v
        };
        if ids.len() > max_len {
            ids.truncate(max_len);
            if let Some(last) = ids.last_mut() {
                *last = SEP;
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id).unwrap_or("[UNK]");
            if let Some(rest) = t.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(t);
            }
        }
        out
    }

    /// Groups non-special token positions into words.
    pub fn words(&self, ids: &[u32]) -> Vec<Vec<usize>> {
        let mut words: Vec<Vec<usize>> = Vec::new();
        let mut prev_word = false;
        for (i, &id) in ids.iter().enumerate() {
            if is_special(id) && id != UNK {
                prev_word = false;
                continue;
            }
            if self.is_continuation(id) && prev_word {
                if let Some(w) = words.last_mut() {
                    w.push(i);
                }
            } else {
                words.push(alloc::vec![i]);
            }
            prev_word = true;
        }
        words
    }

    /// Whole-word masking: words are drawn in random order until at least
    /// `ratio` of the maskable tokens are covered; every token of a drawn word
    /// becomes `[MASK]`. Returns the masked sequence and `(position, original
    /// id)` targets in position order.
    pub fn mask_for_mlm<R: Rng + ?Sized>(
        &self,
        ids: &[u32],
        ratio: f64,
        rng: &mut R,
    ) -> Result<(Vec<u32>, Vec<(usize, u32)>)> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config("mask ratio must be in (0, 1)".into()));
        }
        let mut words = self.words(ids);
        let n: usize = words.iter().map(Vec::len).sum();
        if n == 0 {
            return Err(Error::Empty("no maskable words"));
        }
        words.shuffle(rng);
        let need = ratio * n as f64 - 1e-9;
        let mut masked = ids.to_vec();
        let mut targets = Vec::new();
        let mut covered = 0usize;
        for w in words {
            if covered as f64 >= need {
                break;
            }
            covered += w.len();
            for p in w {
                targets.push((p, ids[p]));
                masked[p] = MASK;
            }
        }
        targets.sort_unstable();
        Ok((masked, targets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tok() -> Tokenizer {
        Tokenizer::build(["a red circle left of a blue square", "the cat sat"])
    }

    #[test]
    fn specials_have_fixed_ids() {
        let t = tok();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(t.id(s), Some(i as u32));
        }
        assert_eq!(t.encode("[CLS] cat [SEP]")[0], CLS);
    }

    #[test]
    fn round_trip_in_vocab_text() {
        let t = tok();
        let text = "a blue circle left of the cat";
        assert_eq!(t.decode(&t.encode(text)), text);
    }

    #[test]
    fn unseen_word_splits_into_pieces() {
        let t = tok();
        let ids = t.encode("circles");
        assert_eq!(ids.len(), 2);
        assert_eq!(t.decode(&ids), "circles");
        assert_eq!(t.encode("zebra"), alloc::vec![UNK]);
    }

    #[test]
    fn whole_word_masking() {
        let t = tok();
        let ids = t.encode_sentence("a red circle sat", 36);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (masked, targets) = t.mask_for_mlm(&ids, 0.25, &mut rng).unwrap();
        assert_eq!(targets.len(), 1);
        assert_eq!(masked.iter().filter(|&&m| m == MASK).count(), 1);
        assert_eq!(masked[0], CLS);

        // "catss" -> "cat" "##s" "##s"
        let ids = t.encode_sentence("catss", 36);
        assert_eq!(ids.len(), 2 + 3, "{:?}", t.decode(&ids));
        let (masked, targets) = t.mask_for_mlm(&ids, 0.25, &mut rng).unwrap();
        assert_eq!(targets.len(), 3);
        assert_eq!(&masked[1..4], &[MASK, MASK, MASK]);
    }

    #[test]
    fn masking_is_seeded() {
        let t = tok();
        let ids = t.encode_sentence("a red circle left of a blue square", 36);
        let run = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            t.mask_for_mlm(&ids, 0.25, &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn masking_needs_a_word() {
        let t = tok();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(t.mask_for_mlm(&[CLS, SEP], 0.25, &mut rng).is_err());
        assert!(t.mask_for_mlm(&[CLS, 5, SEP], 0.0, &mut rng).is_err());
    }

    #[test]
    fn sentence_truncation_keeps_sep() {
        let t = tok();
        let ids = t.encode_sentence("a red circle left of a blue square", 5);
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[4], SEP);
    }
}
