//! Word lexicon: pronounceable synthetic words under a Zipf frequency law,
//! a rare tail, homophone pairs whose members share one audio prototype, and
//! a deterministic length-preserving respeller.
//!
//! A homophone pair is built by respelling a rare word and adding the
//! respelling to the lexicon with the same prototype id. The two members are
//! spelled differently but map to identical clean audio, so only context can
//! disambiguate them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
    "bl", "br", "ch", "cl", "cr", "dr", "fl", "fr", "gl", "gr", "pl", "pr", "sh", "sk", "sl",
    "sm", "sn", "sp", "st", "th", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ee", "oa", "oo"];
const CODAS: &[&str] = &[
    "", "b", "ck", "d", "g", "l", "ll", "m", "n", "nd", "ng", "nt", "p", "r", "rd", "s", "st", "t",
];

/// Length-preserving grapheme substitutions, scanned in order; the first rule
/// whose pattern occurs is applied once, at its leftmost occurrence.
const RESPELL_RULES: &[(&str, &str)] = &[
    ("all", "awl"),
    ("ee", "ea"),
    ("ea", "ee"),
    ("ai", "ay"),
    ("oa", "oe"),
    ("oo", "ue"),
];

/// Fallback when no digraph rule matches: swap the last vowel.
fn vowel_swap(c: char) -> Option<char> {
    match c {
        'a' => Some('u'),
        'e' => Some('i'),
        'i' => Some('y'),
        'o' => Some('a'),
        'u' => Some('o'),
        _ => None,
    }
}

fn rule_respell(word: &str) -> String {
    for (pat, rep) in RESPELL_RULES {
        if let Some(pos) = word.find(pat) {
            let mut out = String::with_capacity(word.len());
            out.push_str(&word[..pos]);
            out.push_str(rep);
            out.push_str(&word[pos + pat.len()..]);
            return out;
        }
    }
    let chars: Vec<char> = word.chars().collect();
    for i in (0..chars.len()).rev() {
        if let Some(sub) = vowel_swap(chars[i]) {
            let mut out = chars.clone();
            out[i] = sub;
            return out.into_iter().collect();
        }
    }
    // Words are built from syllables and always contain a vowel; consonant-only
    // input can only come from outside the generator.
    let mut out = chars;
    if let Some(last) = out.last_mut() {
        *last = if *last == 'x' { 'z' } else { 'x' };
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomophonePair {
    pub word_a: String,
    pub word_b: String,
    pub prototype_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    /// Words in rank order; index is the rank used by the Zipf law.
    pub words: Vec<String>,
    /// Zipf(s = 1.2) weights by rank, normalized to sum 1.
    pub frequency_weights: Vec<f64>,
    pub rare_flags: Vec<bool>,
    pub homophone_pairs: Vec<HomophonePair>,
    /// Explicit respell table covering every lexicon word; pair members map
    /// onto each other so respelling stays within the shared prototype.
    pub respell_map: BTreeMap<String, String>,
    /// Prototype spelling index per word (self for unpaired words).
    pub prototype_ids: Vec<usize>,
    /// Seed for the per-character prototype feature vectors.
    pub proto_seed: u64,

    #[serde(skip)]
    index: BTreeMap<String, usize>,
    /// `(cumulative weight, word index)` over non-rare words only.
    #[serde(skip)]
    frequent_cumsum: Vec<(f64, usize)>,
}

impl Lexicon {
    pub fn word_index(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn is_rare(&self, w: &str) -> bool {
        self.word_index(w).map(|i| self.rare_flags[i]).unwrap_or(false)
    }

    /// The spelling whose characters drive the audio features for `word`.
    pub fn prototype_spelling(&self, word: &str) -> Result<&str> {
        let idx = self
            .word_index(word)
            .ok_or_else(|| Error::Data(format!("word '{word}' not in lexicon")))?;
        Ok(&self.words[self.prototype_ids[idx]])
    }

    pub fn respell(&self, word: &str) -> String {
        self.respell_map
            .get(word)
            .cloned()
            .unwrap_or_else(|| rule_respell(word))
    }

    pub fn rare_words(&self) -> Vec<&str> {
        self.words
            .iter()
            .zip(&self.rare_flags)
            .filter(|(_, &r)| r)
            .map(|(w, _)| w.as_str())
            .collect()
    }

    /// Sample a non-rare word by its (renormalized) Zipf weight. Rare words
    /// enter transcripts only through forced injection, which keeps their
    /// training counts controlled.
    pub fn sample_frequent(&self, rng: &mut ChaCha8Rng) -> &str {
        let total = self.frequent_cumsum.last().map(|&(c, _)| c).unwrap_or(1.0);
        let x: f64 = rng.gen::<f64>() * total;
        let pos = self
            .frequent_cumsum
            .partition_point(|&(c, _)| c < x)
            .min(self.frequent_cumsum.len() - 1);
        &self.words[self.frequent_cumsum[pos].1]
    }

    /// Rebuild the derived lookup tables (after construction or deserialize).
    pub fn finish(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let mut acc = 0.0;
        self.frequent_cumsum = self
            .frequency_weights
            .iter()
            .zip(&self.rare_flags)
            .enumerate()
            .filter(|(_, (_, &rare))| !rare)
            .map(|(i, (&w, _))| {
                acc += w;
                (acc, i)
            })
            .collect();
    }
}

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    w
}

/// Deterministic lexicon for a seed: Zipf weights over ranks, a rare tail,
/// and at least 20 homophone pairs carved out of the rare words.
pub fn build_lexicon(seed: u64, n_words: usize, rare_fraction: f64) -> Result<Lexicon> {
    if n_words < 100 {
        return Err(Error::Config(format!("n_words {n_words} < 100")));
    }
    if !(rare_fraction > 0.0 && rare_fraction < 1.0) {
        return Err(Error::Config(format!(
            "rare_fraction {rare_fraction} outside (0,1)"
        )));
    }
    let mut rng = rng_for(seed, &[tag("lexicon")]);
    let mut words: Vec<String> = Vec::with_capacity(n_words);
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    while words.len() < n_words {
        let w = make_word(&mut rng);
        if (3..=9).contains(&w.len()) && !seen.contains_key(&w) {
            seen.insert(w.clone(), ());
            words.push(w);
        }
    }

    let n_rare_base = ((n_words as f64) * rare_fraction).round() as usize;
    let first_rare = n_words - n_rare_base;
    let mut rare_flags = vec![false; n_words];
    for flag in rare_flags.iter_mut().skip(first_rare) {
        *flag = true;
    }

    // Pair half the rare base words (at least 20) with respelled partners.
    let n_pairs = (n_rare_base / 2).max(20).min(n_rare_base);
    if n_pairs < 20 {
        return Err(Error::Config(format!(
            "need >= 20 homophone pairs, rare tail has only {n_rare_base} words"
        )));
    }
    let mut prototype_ids: Vec<usize> = (0..n_words).collect();
    let mut pairs = Vec::new();
    let mut respell_map: BTreeMap<String, String> = BTreeMap::new();
    let mut source_rank = first_rare;
    while pairs.len() < n_pairs && source_rank < n_words {
        let src = words[source_rank].clone();
        let partner = rule_respell(&src);
        if partner != src && !seen.contains_key(&partner) {
            seen.insert(partner.clone(), ());
            words.push(partner.clone());
            rare_flags.push(true);
            prototype_ids.push(source_rank);
            respell_map.insert(src.clone(), partner.clone());
            respell_map.insert(partner.clone(), src.clone());
            pairs.push(HomophonePair {
                word_a: src,
                word_b: partner,
                prototype_id: source_rank,
            });
        }
        source_rank += 1;
    }
    if pairs.len() < 20 {
        return Err(Error::Config(format!(
            "only built {} homophone pairs; respell collisions too frequent",
            pairs.len()
        )));
    }

    for w in &words {
        if !respell_map.contains_key(w) {
            respell_map.insert(w.clone(), rule_respell(w));
        }
    }

    let total: f64 = (1..=words.len()).map(|k| (k as f64).powf(-1.2)).sum();
    let frequency_weights: Vec<f64> = (1..=words.len())
        .map(|k| (k as f64).powf(-1.2) / total)
        .collect();

    let mut lex = Lexicon {
        words,
        frequency_weights,
        rare_flags,
        homophone_pairs: pairs,
        respell_map,
        prototype_ids,
        proto_seed: seed,
        index: BTreeMap::new(),
        frequent_cumsum: Vec::new(),
    };
    lex.finish();
    Ok(lex)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_lexicon() {
        let a = build_lexicon(11, 200, 0.2).unwrap();
        let b = build_lexicon(11, 200, 0.2).unwrap();
        assert_eq!(a.words, b.words);
        assert_eq!(a.homophone_pairs.len(), b.homophone_pairs.len());
        let c = build_lexicon(12, 200, 0.2).unwrap();
        assert_ne!(a.words, c.words);
    }

    #[test]
    fn weights_follow_zipf() {
        let lex = build_lexicon(1, 150, 0.3).unwrap();
        let w = &lex.frequency_weights;
        for k in 1..w.len() {
            let expect = ((k + 1) as f64 / k as f64).powf(-1.2);
            let got = w[k] / w[k - 1];
            assert!((got - expect).abs() < 1e-12, "rank {k}");
        }
    }

    #[test]
    fn pairs_share_prototypes_and_are_rare() {
        let lex = build_lexicon(7, 200, 0.2).unwrap();
        assert!(lex.homophone_pairs.len() >= 20);
        for p in &lex.homophone_pairs {
            assert_ne!(p.word_a, p.word_b);
            assert!(lex.is_rare(&p.word_a), "{}", p.word_a);
            assert!(lex.is_rare(&p.word_b), "{}", p.word_b);
            let ia = lex.word_index(&p.word_a).unwrap();
            let ib = lex.word_index(&p.word_b).unwrap();
            assert_eq!(lex.prototype_ids[ia], p.prototype_id);
            assert_eq!(lex.prototype_ids[ib], p.prototype_id);
            assert_eq!(
                lex.prototype_spelling(&p.word_a).unwrap(),
                lex.prototype_spelling(&p.word_b).unwrap()
            );
        }
    }

    #[test]
    fn respell_changes_and_preserves_length() {
        let lex = build_lexicon(3, 200, 0.2).unwrap();
        for w in &lex.words {
            let r = lex.respell(w);
            assert_ne!(&r, w, "respell({w})");
            assert_eq!(r.len(), w.len(), "respell({w}) = {r}");
        }
    }

    #[test]
    fn pair_members_respell_onto_each_other() {
        let lex = build_lexicon(5, 200, 0.2).unwrap();
        for p in &lex.homophone_pairs {
            assert_eq!(lex.respell(&p.word_a), p.word_b);
            assert_eq!(lex.respell(&p.word_b), p.word_a);
        }
    }
}
