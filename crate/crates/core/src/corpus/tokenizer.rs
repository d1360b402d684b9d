//! Character tokenizer.
//!
//! Vocabulary: pad, bos, eos, space, apostrophe, digits, lowercase letters.
//! Uppercase ASCII is folded to lowercase and every other byte (including all
//! non-ASCII) is silently dropped, so tokenize/detokenize round-trips exactly
//! on in-vocabulary text.

use sha2::{Digest, Sha256};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPACE: usize = 3;
const APOSTROPHE: usize = 4;
const DIGIT0: usize = 5;
const LETTER_A: usize = 15;

/// Total symbol count; the CTC blank sits one past this, at `vocab_size()`.
pub fn vocab_size() -> usize {
    LETTER_A + 26
}

pub fn ctc_blank() -> usize {
    vocab_size()
}

fn char_to_id(c: char) -> Option<usize> {
    match c {
        ' ' => Some(SPACE),
        '\'' => Some(APOSTROPHE),
        '0'..='9' => Some(DIGIT0 + (c as usize - '0' as usize)),
        'a'..='z' => Some(LETTER_A + (c as usize - 'a' as usize)),
        'A'..='Z' => Some(LETTER_A + (c.to_ascii_lowercase() as usize - 'a' as usize)),
        _ => None,
    }
}

fn id_to_char(id: usize) -> Option<char> {
    match id {
        SPACE => Some(' '),
        APOSTROPHE => Some('\''),
        _ if (DIGIT0..DIGIT0 + 10).contains(&id) => {
            Some((b'0' + (id - DIGIT0) as u8) as char)
        }
        _ if (LETTER_A..LETTER_A + 26).contains(&id) => {
            Some((b'a' + (id - LETTER_A) as u8) as char)
        }
        _ => None,
    }
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.chars().filter_map(char_to_id).collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().filter_map(|&id| id_to_char(id)).collect()
}

/// Stable hash of the vocabulary definition, recorded in bundle manifests so
/// a checkpoint refuses to load against a different tokenizer.
pub fn tokenizer_hash() -> String {
    let mut spec = String::new();
    for id in 0..vocab_size() {
        match id {
            PAD => spec.push_str("<pad>"),
            BOS => spec.push_str("<bos>"),
            EOS => spec.push_str("<eos>"),
            _ => spec.push(id_to_char(id).unwrap()),
        }
    }
    let mut h = Sha256::new();
    h.update(spec.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
