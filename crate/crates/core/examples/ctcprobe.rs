//! Single-sample CTC memorization probe.
use std::collections::BTreeMap;
use ctxasr_core::corpus::{generate_corpus, tokenizer, CorpusConfig};
use ctxasr_core::encoder::{ctc_log_probs, encode, init_encoder, EncoderConfig};
use ctxasr_core::nn::Runtime;
use ctxasr_core::rng::{rng_for, tag};
use ctxasr_core::tensor::{Mode, ParamStore};
use ctxasr_core::trainer::{adam_step, AdamState, OptimizerConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let cfg = CorpusConfig { train_size: 8, eval_size: 4, rare_quota: 1, ..CorpusConfig::default() };
    let corpus = generate_corpus(&cfg, 3).unwrap();
    let sample = &corpus.train[0];
    println!("transcript: '{}' frames {}", sample.transcript, sample.feats.len());

    let ecfg = EncoderConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut rng = rng_for(1, &[tag("enc")]);
    init_encoder(&mut store, &mut rng, &ecfg, tokenizer::vocab_size());
    let mut state = AdamState::default();
    let opt = OptimizerConfig::default();
    let targets = sample.transcript_tokens();
    for step in 0..steps {
        let mut rt = Runtime::new(&store, Mode::Train, step as u64);
        let enc = encode(&mut rt, &ecfg, &sample.features()).unwrap();
        let lp = ctc_log_probs(&mut rt, &ecfg, &enc, tokenizer::vocab_size()).unwrap();
        let loss = ctxasr_core::ctc::ctc_loss(&lp, &targets, tokenizer::ctc_blank()).unwrap();
        loss.backward().unwrap();
        let grads: BTreeMap<String, Vec<f32>> = rt.grads().into_iter().collect();
        adam_step(&mut store, &grads, &mut state, &opt, lr).unwrap();
        if step % 50 == 0 || step == steps - 1 {
            println!("step {step}: loss {:.3}", loss.item());
        }
    }
    // greedy decode
    let mut rt = Runtime::new(&store, Mode::Eval, 0);
    let enc = encode(&mut rt, &ecfg, &sample.features()).unwrap();
    let lp = ctc_log_probs(&mut rt, &ecfg, &enc, tokenizer::vocab_size()).unwrap();
    let shape = lp.shape();
    let ids = ctxasr_core::ctc::ctc_greedy_decode(&lp.to_vec(), shape[0], shape[1], tokenizer::ctc_blank());
    println!("decoded: '{}'", tokenizer::detokenize(&ids));
}
