//! Edit-distance oracle: the aligned SUB+INS+DEL total must equal a plain
//! dynamic-programming minimal edit distance (no backtrace, no tie-breaks)
//! on random word pairs.

use std::collections::BTreeSet;

use ctxasr_core::metrics::align_wer;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent reference: textbook Levenshtein distance over words.
fn edit_distance(a: &[&str], b: &[&str]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut curr = vec![0usize; m + 1];
    for i in 1..=n {
        curr[0] = i;
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            curr[j] = (prev[j - 1] + cost).min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

fn random_sentence(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let vocab = ["ada", "bix", "cor", "dun", "elm", "fip"];
    let len = rng.gen_range(0..=max_words);
    (0..len)
        .map(|_| vocab[rng.gen_range(0..vocab.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn alignment_total_matches_edit_distance_on_1000_pairs() {
    let empty = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..1000 {
        let r = random_sentence(&mut rng, 8);
        let h = random_sentence(&mut rng, 8);
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        let expect = edit_distance(&rw, &hw);
        let report = align_wer(&r, &h, &empty);
        assert_eq!(
            report.sub + report.ins + report.del,
            expect,
            "ref='{r}' hyp='{h}'"
        );
    }
}

proptest! {
    #[test]
    fn components_always_sum_to_min_distance(
        r_idx in prop::collection::vec(0usize..5, 0..8),
        h_idx in prop::collection::vec(0usize..5, 0..8),
    ) {
        let vocab = ["ada", "bix", "cor", "dun", "elm"];
        let r: Vec<&str> = r_idx.iter().map(|&i| vocab[i]).collect();
        let h: Vec<&str> = h_idx.iter().map(|&i| vocab[i]).collect();
        let report = align_wer(&r.join(" "), &h.join(" "), &BTreeSet::new());
        prop_assert_eq!(report.sub + report.ins + report.del, edit_distance(&r, &h));
    }
}
