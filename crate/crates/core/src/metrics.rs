//! Word error rate with SUB/INS/DEL decomposition, rare-word sets, Rare WER,
//! and the context-perturbation harness.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, Sample};
use crate::error::Result;

/// One step of a minimal-cost alignment between reference and hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlignOp {
    Match { r: String },
    Sub { r: String, h: String },
    Del { r: String },
    Ins { h: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WerReport {
    pub condition: String,
    pub n_ref_words: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub rare_ref_words: usize,
    pub rare_errors: usize,
}

impl WerReport {
    pub fn wer(&self) -> f64 {
        (self.sub + self.ins + self.del) as f64 / self.n_ref_words.max(1) as f64
    }

    /// Rare WER over reference occurrences of rare words; `None` when the
    /// references contain no rare words.
    pub fn rare_wer(&self) -> Option<f64> {
        (self.rare_ref_words > 0).then(|| self.rare_errors as f64 / self.rare_ref_words as f64)
    }

    pub fn merge(&mut self, other: &WerReport) {
        self.n_ref_words += other.n_ref_words;
        self.sub += other.sub;
        self.ins += other.ins;
        self.del += other.del;
        self.rare_ref_words += other.rare_ref_words;
        self.rare_errors += other.rare_errors;
    }
}

/// Levenshtein alignment with unit costs. Ties break substitution first,
/// then deletion, then insertion, so the SUB/INS/DEL split is reproducible.
pub fn align_words(ref_words: &[&str], hyp_words: &[&str]) -> Vec<AlignOp> {
    let (n, m) = (ref_words.len(), hyp_words.len());
    let mut cost = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        cost[idx(i, 0)] = i;
    }
    for j in 0..=m {
        cost[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = cost[idx(i - 1, j - 1)]
                + if ref_words[i - 1] == hyp_words[j - 1] { 0 } else { 1 };
            let del_cost = cost[idx(i - 1, j)] + 1;
            let ins_cost = cost[idx(i, j - 1)] + 1;
            cost[idx(i, j)] = sub_cost.min(del_cost).min(ins_cost);
        }
    }
    // Backtrace with the fixed tie-break order.
    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[idx(i, j)];
        if i > 0 && j > 0 {
            let diag = cost[idx(i - 1, j - 1)];
            let matched = ref_words[i - 1] == hyp_words[j - 1];
            if here == diag + usize::from(!matched) {
                ops.push(if matched {
                    AlignOp::Match { r: ref_words[i - 1].into() }
                } else {
                    AlignOp::Sub { r: ref_words[i - 1].into(), h: hyp_words[j - 1].into() }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[idx(i - 1, j)] + 1 {
            ops.push(AlignOp::Del { r: ref_words[i - 1].into() });
            i -= 1;
            continue;
        }
        ops.push(AlignOp::Ins { h: hyp_words[j - 1].into() });
        j -= 1;
    }
    ops.reverse();
    ops
}

/// Score one reference/hypothesis pair, attributing rare errors against the
/// given rare set. Rare insertions are not attributed; an occurrence counts
/// as an error when it aligns as a substitution or deletion.
pub fn align_wer(ref_text: &str, hyp_text: &str, rare: &BTreeSet<String>) -> WerReport {
    let ref_words: Vec<&str> = ref_text.split_whitespace().collect();
    let hyp_words: Vec<&str> = hyp_text.split_whitespace().collect();
    let ops = align_words(&ref_words, &hyp_words);
    let mut report = WerReport {
        n_ref_words: ref_words.len(),
        ..WerReport::default()
    };
    for op in &ops {
        match op {
            AlignOp::Match { r } => {
                if rare.contains(r.as_str()) {
                    report.rare_ref_words += 1;
                }
            }
            AlignOp::Sub { r, .. } => {
                report.sub += 1;
                if rare.contains(r.as_str()) {
                    report.rare_ref_words += 1;
                    report.rare_errors += 1;
                }
            }
            AlignOp::Del { r } => {
                report.del += 1;
                if rare.contains(r.as_str()) {
                    report.rare_ref_words += 1;
                    report.rare_errors += 1;
                }
            }
            AlignOp::Ins { .. } => report.ins += 1,
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RareRule {
    /// Frequent = smallest count-descending prefix covering 90% of token
    /// mass; rare = the complement.
    TokenMass,
    /// Frequent = the most frequent 90% of word types.
    TypeCount,
}

/// Extract the rare-word set from training transcripts. Ties at equal counts
/// break lexicographically so the set is deterministic.
pub fn rare_word_set(train: &[Sample], rule: RareRule, percentile: f64) -> BTreeSet<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for s in train {
        for w in s.transcript.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
            total += 1;
        }
    }
    let mut by_count: Vec<(&String, &usize)> = counts.iter().collect();
    by_count.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));

    let mut rare = BTreeSet::new();
    match rule {
        RareRule::TokenMass => {
            let threshold = (total as f64) * percentile;
            let mut mass = 0usize;
            let mut covered = false;
            for (w, &c) in by_count {
                if covered {
                    rare.insert(w.clone());
                } else {
                    mass += c;
                    if mass as f64 >= threshold {
                        covered = true;
                    }
                }
            }
        }
        RareRule::TypeCount => {
            let keep = ((by_count.len() as f64) * percentile).floor() as usize;
            for (w, _) in by_count.iter().skip(keep) {
                rare.insert((*w).clone());
            }
        }
    }
    rare
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    None,
    RemoveAll,
    Random,
    RespellReplace,
    RespellAppend,
    GroundTruth,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 6] = [
        PerturbKind::None,
        PerturbKind::RemoveAll,
        PerturbKind::Random,
        PerturbKind::RespellReplace,
        PerturbKind::RespellAppend,
        PerturbKind::GroundTruth,
    ];
}

/// Empirical token distribution of the training transcripts, for the random
/// perturbation.
pub struct TokenSampler {
    cum: Vec<(usize, String)>,
    total: usize,
}

impl TokenSampler {
    pub fn new(train: &[Sample]) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in train {
            for w in s.transcript.split_whitespace() {
                *counts.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        let mut cum = Vec::with_capacity(counts.len());
        let mut acc = 0usize;
        for (w, c) in counts {
            acc += c;
            cum.push((acc, w));
        }
        TokenSampler { cum, total: acc }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> &str {
        let x = rng.gen_range(0..self.total.max(1));
        let pos = self.cum.partition_point(|(c, _)| *c <= x);
        &self.cum[pos.min(self.cum.len() - 1)].1
    }
}

/// Apply a context perturbation to one sample, returning the new context.
pub fn perturb_context(
    sample: &Sample,
    kind: PerturbKind,
    lexicon: &Lexicon,
    rare: &BTreeSet<String>,
    sampler: &TokenSampler,
    rng: &mut ChaCha8Rng,
) -> Result<Option<String>> {
    let reference: BTreeSet<&str> = sample.transcript.split_whitespace().collect();
    let ctx_words = || -> Vec<String> {
        sample
            .context
            .as_deref()
            .unwrap_or("")
            .split_whitespace()
            .map(String::from)
            .collect()
    };
    let out = match kind {
        PerturbKind::None => sample.context.clone(),
        PerturbKind::RemoveAll => None,
        PerturbKind::Random => {
            let n = ctx_words().len();
            (n > 0).then(|| {
                (0..n)
                    .map(|_| sampler.sample(rng).to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
        }
        PerturbKind::GroundTruth => {
            // Rare words of the reference transcript, in appearance order.
            let mut seen = BTreeSet::new();
            let words: Vec<String> = sample
                .transcript
                .split_whitespace()
                .filter(|w| rare.contains(*w) && seen.insert(w.to_string()))
                .map(String::from)
                .collect();
            (!words.is_empty()).then(|| words.join(" "))
        }
        PerturbKind::RespellReplace => {
            let words: Vec<String> = ctx_words()
                .into_iter()
                .map(|w| {
                    if rare.contains(&w) && reference.contains(w.as_str()) {
                        lexicon.respell(&w)
                    } else {
                        w
                    }
                })
                .collect();
            (!words.is_empty()).then(|| words.join(" "))
        }
        PerturbKind::RespellAppend => {
            let mut words = ctx_words();
            let mut appended = BTreeSet::new();
            for w in words.clone() {
                if rare.contains(&w) && reference.contains(w.as_str()) && appended.insert(w.clone())
                {
                    words.push(lexicon.respell(&w));
                }
            }
            (!words.is_empty()).then(|| words.join(" "))
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_rare() -> BTreeSet<String> {
        BTreeSet::new()
    }

    #[test]
    fn exact_match_is_zero() {
        let r = align_wer("a b c", "a b c", &no_rare());
        assert_eq!(r.wer(), 0.0);
        assert_eq!((r.sub, r.ins, r.del), (0, 0, 0));
    }

    #[test]
    fn single_substitution() {
        let r = align_wer("a b c", "a x c", &no_rare());
        assert_eq!(r.sub, 1);
        assert!((r.wer() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ref_counts_insertions() {
        let r = align_wer("", "a b", &no_rare());
        assert_eq!(r.ins, 2);
        assert_eq!(r.n_ref_words, 0);
        assert_eq!(r.wer(), 2.0);
    }

    #[test]
    fn rare_attribution_sub_and_del() {
        let rare: BTreeSet<String> = ["rarew".to_string()].into();
        let del = align_wer("x rarew y", "x y", &rare);
        assert_eq!(del.rare_ref_words, 1);
        assert_eq!(del.rare_errors, 1);
        let sub = align_wer("x rarew", "x respell", &rare);
        assert_eq!(sub.rare_errors, 1);
        let ok = align_wer("x rarew", "x rarew", &rare);
        assert_eq!(ok.rare_errors, 0);
        assert_eq!(ok.rare_ref_words, 1);
        // Insertions of rare words are not attributed.
        let ins = align_wer("x", "x rarew", &rare);
        assert_eq!(ins.rare_errors, 0);
        assert_eq!(ins.rare_ref_words, 0);
    }

    #[test]
    fn distance_symmetry_with_role_swap() {
        let pairs = [("a b c d", "a x c"), ("", "q"), ("m n", "m n o p")];
        for (r, h) in pairs {
            let fwd = align_wer(r, h, &no_rare());
            let bwd = align_wer(h, r, &no_rare());
            assert_eq!(fwd.sub + fwd.ins + fwd.del, bwd.sub + bwd.ins + bwd.del);
            assert_eq!(fwd.sub, bwd.sub);
            assert_eq!(fwd.ins, bwd.del);
            assert_eq!(fwd.del, bwd.ins);
        }
    }

    fn sample_of(transcript: &str) -> Sample {
        Sample {
            id: "t".into(),
            transcript: transcript.into(),
            context: None,
            rare_words: vec![],
            feats: vec![vec![0.0]],
        }
    }

    #[test]
    fn single_word_corpus_has_empty_rare_set() {
        let train = vec![sample_of("w w w w")];
        assert!(rare_word_set(&train, RareRule::TokenMass, 0.9).is_empty());
    }

    #[test]
    fn uniform_ten_words_token_mass() {
        // Ten types with equal counts: the smallest 90%-mass prefix is 9
        // types, leaving exactly one rare word (the lexicographically last).
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let train = vec![sample_of(&words.join(" "))];
        let rare = rare_word_set(&train, RareRule::TokenMass, 0.9);
        assert_eq!(rare.len(), 1);
        assert!(rare.contains("w9"));
    }

    #[test]
    fn perturb_none_is_identity_and_remove_composes() {
        let mut s = sample_of("a rarew b");
        s.context = Some("rarew foo bar".into());
        let lex = crate::corpus::build_lexicon(1, 100, 0.3).unwrap();
        let rare: BTreeSet<String> = ["rarew".to_string()].into();
        let sampler = TokenSampler::new(&[sample_of("a b c")]);
        let mut rng = crate::rng::rng_for(0, &[0]);
        let same = perturb_context(&s, PerturbKind::None, &lex, &rare, &sampler, &mut rng).unwrap();
        assert_eq!(same, s.context);
        let gone =
            perturb_context(&s, PerturbKind::RemoveAll, &lex, &rare, &sampler, &mut rng).unwrap();
        assert_eq!(gone, None);
    }

    #[test]
    fn respell_replace_and_append() {
        let lex = crate::corpus::build_lexicon(1, 100, 0.3).unwrap();
        let pair = lex.homophone_pairs[0].clone();
        let mut s = sample_of(&format!("x {} y", pair.word_a));
        s.context = Some(format!("{} other", pair.word_a));
        let rare: BTreeSet<String> = [pair.word_a.clone()].into();
        let sampler = TokenSampler::new(&[sample_of("x y")]);
        let mut rng = crate::rng::rng_for(0, &[1]);

        let replaced =
            perturb_context(&s, PerturbKind::RespellReplace, &lex, &rare, &sampler, &mut rng)
                .unwrap()
                .unwrap();
        assert!(replaced.contains(&pair.word_b));
        assert!(!replaced.split_whitespace().any(|w| w == pair.word_a));

        let appended =
            perturb_context(&s, PerturbKind::RespellAppend, &lex, &rare, &sampler, &mut rng)
                .unwrap()
                .unwrap();
        let words: Vec<&str> = appended.split_whitespace().collect();
        assert!(words.contains(&pair.word_a.as_str()));
        assert!(words.contains(&pair.word_b.as_str()));
    }

    #[test]
    fn ground_truth_keeps_rare_reference_words_in_order() {
        let lex = crate::corpus::build_lexicon(1, 100, 0.3).unwrap();
        let mut s = sample_of("x r2 y r1 r2");
        s.context = Some("whatever".into());
        let rare: BTreeSet<String> = ["r1".to_string(), "r2".to_string()].into();
        let sampler = TokenSampler::new(&[sample_of("x y")]);
        let mut rng = crate::rng::rng_for(0, &[2]);
        let gt = perturb_context(&s, PerturbKind::GroundTruth, &lex, &rare, &sampler, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(gt, "r2 r1");
    }
}
