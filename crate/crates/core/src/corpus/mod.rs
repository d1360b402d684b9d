//! Deterministic synthetic data oracle.
//!
//! The corpus is engineered so that textual context measurably matters:
//! homophone pairs share identical clean audio, rare words reach transcripts
//! only through controlled injection (keeping them under the frequent-mass
//! cutoff), and every eval sample carries a context containing at least one
//! rare word from its transcript.

mod augment;
mod features;
mod lexicon;
pub mod tokenizer;

pub use augment::{augment, AugmentConfig};
pub use features::{features_for, prototype_vector, AudioFeatures};
pub use lexicon::{build_lexicon, HomophonePair, Lexicon};

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_words: usize,
    pub rare_fraction: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub transcript_min_words: usize,
    pub transcript_max_words: usize,
    /// Forced training occurrences per rare word type. Kept well below the
    /// frequent-mass cutoff so every rare word stays rare under the metric.
    pub rare_quota: usize,
    pub context_fraction: f64,
    pub distractor_min: usize,
    pub distractor_max: usize,
    /// Probability that a distractor is drawn from the rare tail instead of
    /// the frequent distribution.
    pub distractor_rare_prob: f64,
    /// Probability that the rare word injected into an eval transcript is a
    /// homophone-pair member, making its audio ambiguous by construction.
    pub eval_homophone_bias: f64,
    pub feat_dim: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_words: 200,
            rare_fraction: 0.2,
            train_size: 3000,
            eval_size: 96,
            transcript_min_words: 5,
            transcript_max_words: 12,
            rare_quota: 12,
            context_fraction: 0.25,
            distractor_min: 5,
            distractor_max: 15,
            distractor_rare_prob: 0.3,
            eval_homophone_bias: 0.75,
            feat_dim: 16,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("corpus sizes must be >= 1".into()));
        }
        if self.transcript_min_words < 1 || self.transcript_min_words > self.transcript_max_words {
            return Err(Error::Config("bad transcript word range".into()));
        }
        if !(0.0..=1.0).contains(&self.context_fraction) {
            return Err(Error::Config("context_fraction outside [0,1]".into()));
        }
        if self.distractor_min > self.distractor_max {
            return Err(Error::Config("bad distractor range".into()));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One utterance: transcript, synthetic audio, optional context string, and
/// the lexicon-rare words appearing in the transcript.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub transcript: String,
    pub context: Option<String>,
    pub rare_words: Vec<String>,
    pub feats: Vec<Vec<f32>>,
}

impl Sample {
    pub fn features(&self) -> AudioFeatures {
        AudioFeatures {
            frames: self.feats.clone(),
            frame_shift_ms: features::FRAME_SHIFT_MS,
        }
    }

    pub fn transcript_tokens(&self) -> Vec<usize> {
        tokenizer::tokenize(&self.transcript)
    }
}

pub struct Corpus {
    pub lexicon: Lexicon,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn rare_words_in(lex: &Lexicon, transcript: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for w in transcript.split_whitespace() {
        if lex.is_rare(w) && seen.insert(w.to_string()) {
            out.push(w.to_string());
        }
    }
    out
}

fn draw_transcript(lex: &Lexicon, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(cfg.transcript_min_words..=cfg.transcript_max_words);
    (0..len).map(|_| lex.sample_frequent(rng).to_string()).collect()
}

fn build_context(
    lex: &Lexicon,
    cfg: &CorpusConfig,
    transcript_rares: &[String],
    rng: &mut ChaCha8Rng,
) -> String {
    let rare_list = lex.rare_words();
    let mut words: Vec<String> = transcript_rares.to_vec();
    let n_distract = rng.gen_range(cfg.distractor_min..=cfg.distractor_max);
    for _ in 0..n_distract {
        if rng.gen::<f64>() < cfg.distractor_rare_prob && !rare_list.is_empty() {
            words.push(rare_list[rng.gen_range(0..rare_list.len())].to_string());
        } else {
            words.push(lex.sample_frequent(rng).to_string());
        }
    }
    words.shuffle(rng);
    words.join(" ")
}

/// Deterministic `{train, eval}` sample sets for a seed.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let lexicon = build_lexicon(seed, cfg.n_words, cfg.rare_fraction)?;
    let rare: Vec<String> = lexicon.rare_words().iter().map(|s| s.to_string()).collect();
    let pair_members: Vec<String> = lexicon
        .homophone_pairs
        .iter()
        .flat_map(|p| [p.word_a.clone(), p.word_b.clone()])
        .collect();

    // Quota injection plan: each rare type lands in `rare_quota` distinct
    // train samples, decided up front so sample rendering can parallelize.
    let mut plan: Vec<Vec<String>> = vec![Vec::new(); cfg.train_size];
    {
        let mut rng = rng_for(seed, &[tag("inject")]);
        let mut slots: Vec<usize> = (0..cfg.train_size).collect();
        for word in &rare {
            slots.shuffle(&mut rng);
            for &s in slots.iter().take(cfg.rare_quota.min(cfg.train_size)) {
                plan[s].push(word.clone());
            }
        }
    }

    let train: Vec<Sample> = (0..cfg.train_size)
        .into_par_iter()
        .map(|i| -> Result<Sample> {
            let mut rng = rng_for(seed, &[tag("train-sample"), i as u64]);
            let mut words = draw_transcript(&lexicon, cfg, &mut rng);
            for rare_word in &plan[i] {
                let mut slot = rng.gen_range(0..words.len());
                // Avoid clobbering an earlier injection when several rare
                // types land in one sample.
                let mut tries = 0;
                while lexicon.is_rare(&words[slot]) && tries < words.len() {
                    slot = (slot + 1) % words.len();
                    tries += 1;
                }
                words[slot] = rare_word.clone();
            }
            let transcript = words.join(" ");
            let rare_words = rare_words_in(&lexicon, &transcript);
            let context = (rng.gen::<f64>() < cfg.context_fraction)
                .then(|| build_context(&lexicon, cfg, &rare_words, &mut rng));
            let feats = features_for(&transcript, &lexicon, cfg.feat_dim, rng.gen())?;
            Ok(Sample {
                id: format!("train-{i:05}"),
                transcript,
                context,
                rare_words,
                feats: feats.frames,
            })
        })
        .collect::<Result<_>>()?;

    let train_set: BTreeSet<&str> = train.iter().map(|s| s.transcript.as_str()).collect();

    let eval: Vec<Sample> = (0..cfg.eval_size)
        .into_par_iter()
        .map(|i| -> Result<Sample> {
            let mut rng = rng_for(seed, &[tag("eval-sample"), i as u64]);
            let transcript = loop {
                let mut words = draw_transcript(&lexicon, cfg, &mut rng);
                let injected = if rng.gen::<f64>() < cfg.eval_homophone_bias {
                    pair_members[rng.gen_range(0..pair_members.len())].clone()
                } else {
                    rare[rng.gen_range(0..rare.len())].clone()
                };
                let slot = rng.gen_range(0..words.len());
                words[slot] = injected;
                let t = words.join(" ");
                if !train_set.contains(t.as_str()) {
                    break t;
                }
            };
            let rare_words = rare_words_in(&lexicon, &transcript);
            debug_assert!(!rare_words.is_empty());
            let context = build_context(&lexicon, cfg, &rare_words, &mut rng);
            let feats = features_for(&transcript, &lexicon, cfg.feat_dim, rng.gen())?;
            Ok(Sample {
                id: format!("eval-{i:05}"),
                transcript,
                context: Some(context),
                rare_words,
                feats: feats.frames,
            })
        })
        .collect::<Result<_>>()?;

    Ok(Corpus {
        lexicon,
        train,
        eval,
    })
}

/// Training text for the decoder base LM: transcripts plus context strings.
pub fn text_lines(corpus: &Corpus) -> Vec<String> {
    let mut lines = Vec::with_capacity(corpus.train.len() * 2);
    for s in &corpus.train {
        lines.push(s.transcript.clone());
        if let Some(ctx) = &s.context {
            lines.push(ctx.clone());
        }
    }
    lines
}

fn write_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .map(|line| Ok(serde_json::from_str(&line?)?))
        .collect()
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&corpus.train, &dir.join("train.jsonl"))?;
    write_jsonl(&corpus.eval, &dir.join("eval.jsonl"))?;
    let lex = serde_json::to_string_pretty(&corpus.lexicon)?;
    fs::write(dir.join("lexicon.json"), lex)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let lex_path = dir.join("lexicon.json");
    let lex_raw = fs::read_to_string(&lex_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", lex_path.display())))?;
    let mut lexicon: Lexicon = serde_json::from_str(&lex_raw)?;
    lexicon.finish();
    Ok(Corpus {
        lexicon,
        train: read_jsonl(&dir.join("train.jsonl"))?,
        eval: read_jsonl(&dir.join("eval.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            train_size: 400,
            eval_size: 24,
            rare_quota: 3,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg, 5).unwrap();
        let b = generate_corpus(&cfg, 5).unwrap();
        let ser = |c: &Corpus| serde_json::to_string(&c.train).unwrap();
        assert_eq!(ser(&a), ser(&b));
        assert_eq!(
            serde_json::to_string(&a.eval).unwrap(),
            serde_json::to_string(&b.eval).unwrap()
        );
    }

    #[test]
    fn eval_samples_all_satisfy_shared_rare_rule() {
        let corpus = generate_corpus(&small_cfg(), 9).unwrap();
        for s in &corpus.eval {
            let ctx = s.context.as_deref().expect("eval sample without context");
            let ctx_words: BTreeSet<&str> = ctx.split_whitespace().collect();
            let shared = s
                .transcript
                .split_whitespace()
                .any(|w| corpus.lexicon.is_rare(w) && ctx_words.contains(w));
            assert!(shared, "eval sample {} has no shared rare word", s.id);
        }
    }

    #[test]
    fn train_context_fraction_near_quarter() {
        let cfg = CorpusConfig {
            train_size: 3000,
            eval_size: 8,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg, 3).unwrap();
        let with_ctx = corpus.train.iter().filter(|s| s.context.is_some()).count();
        let frac = with_ctx as f64 / corpus.train.len() as f64;
        assert!((frac - 0.25).abs() <= 0.02, "context fraction {frac}");
    }

    #[test]
    fn transcript_sets_disjoint() {
        let corpus = generate_corpus(&small_cfg(), 4).unwrap();
        let train: BTreeSet<&str> = corpus.train.iter().map(|s| s.transcript.as_str()).collect();
        for s in &corpus.eval {
            assert!(!train.contains(s.transcript.as_str()));
        }
    }

    #[test]
    fn save_load_round_trip_bytes() {
        let dir = std::env::temp_dir().join(format!("corpus-test-{}", std::process::id()));
        let corpus = generate_corpus(&small_cfg(), 6).unwrap();
        save_corpus(&corpus, &dir).unwrap();
        let first = fs::read(dir.join("train.jsonl")).unwrap();
        save_corpus(&corpus, &dir).unwrap();
        assert_eq!(first, fs::read(dir.join("train.jsonl")).unwrap());
        let loaded = load_corpus(&dir).unwrap();
        assert_eq!(loaded.train.len(), corpus.train.len());
        assert_eq!(loaded.lexicon.words, corpus.lexicon.words);
        fs::remove_dir_all(&dir).ok();
    }
}
