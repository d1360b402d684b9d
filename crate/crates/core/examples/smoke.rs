//! End-to-end smoke run: generate a corpus, pretrain both halves, fine-tune,
//! and compare eval WER with and without context. Prints timings so the
//! desk-scale defaults can be calibrated.

use std::collections::BTreeSet;
use std::time::Instant;

use ctxasr_core::bundle::{assemble_finetune_bundle, ModelBundle};
use ctxasr_core::config::ExperimentConfig;
use ctxasr_core::corpus::{generate_corpus, tokenizer};
use ctxasr_core::ctc::ctc_greedy_decode;
use ctxasr_core::decoder::init_decoder_base;
use ctxasr_core::encoder::init_encoder;
use ctxasr_core::metrics::{align_wer, rare_word_set, RareRule, WerReport};
use ctxasr_core::nn::Runtime;
use ctxasr_core::pipeline::{generation_cap, transcribe};
use ctxasr_core::rng::{rng_for, tag};
use ctxasr_core::tensor::{Mode, ParamStore};
use ctxasr_core::trainer::{run_phase, Phase, TrainOptions};

fn main() {
    let t_all = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let ctc_steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lm_steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let ft_steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(800);

    let mut cfg = ExperimentConfig::default();
    cfg.schedules.ctc.schedule.total_steps = ctc_steps;
    cfg.schedules.lm.schedule.total_steps = lm_steps;
    cfg.schedules.finetune.schedule.total_steps = ft_steps;
    cfg.schedules.finetune.schedule.warmup_steps = 100;
    let seed = cfg.seed;

    let t0 = Instant::now();
    let corpus = generate_corpus(&cfg.corpus, seed).unwrap();
    println!("corpus: {:?} ({} train / {} eval)", t0.elapsed(), corpus.train.len(), corpus.eval.len());

    let rare = rare_word_set(&corpus.train, RareRule::TokenMass, 0.9);
    let homos: Vec<&str> = corpus
        .lexicon
        .homophone_pairs
        .iter()
        .flat_map(|p| [p.word_a.as_str(), p.word_b.as_str()])
        .collect();
    let missing: Vec<&&str> = homos.iter().filter(|w| !rare.contains(**w)).collect();
    println!("rare set size {}, homophones missing from it: {}", rare.len(), missing.len());

    let out = std::env::temp_dir().join("ctxasr-smoke");

    // LM pretrain (0 steps = reuse a previous run's checkpoint)
    let t0 = Instant::now();
    let mut lm_bundle = if lm_steps == 0 {
        ModelBundle::<f32>::load(&out.join("lm")).unwrap()
    } else {
        let mut lm_store = ParamStore::<f32>::new();
        let mut rng = rng_for(seed, &[tag("lm-init")]);
        init_decoder_base(&mut lm_store, &mut rng, &cfg.decoder);
        ModelBundle::new(
            lm_store,
            cfg.encoder.clone(),
            cfg.decoder.clone(),
            None,
            ctxasr_core::decoder::Variant::DecoderOnly,
        )
    };
    if lm_steps > 0 {
        let mut opts = TrainOptions::new(Phase::LmPretrain);
        opts.schedule = cfg.schedules.lm.schedule.clone();
        opts.schedule.total_steps = lm_steps;
        opts.batch_size = cfg.schedules.lm.batch_size;
        let _ = std::fs::remove_dir_all(out.join("lm"));
        let outcome = run_phase(&corpus, &mut lm_bundle, &opts, seed, &out.join("lm")).unwrap();
        println!(
            "lm: {:?} loss {:.3} heldout_ce {:.3} (uniform {:.3})",
            t0.elapsed(),
            outcome.final_loss,
            outcome.heldout_ce.unwrap_or(f64::NAN),
            (tokenizer::vocab_size() as f64).ln()
        );
    }

    // CTC pretrain
    let t0 = Instant::now();
    let mut ctc_bundle = if ctc_steps == 0 {
        ModelBundle::<f32>::load(&out.join("ctc")).unwrap()
    } else {
        let mut enc_store = ParamStore::<f32>::new();
        let mut rng = rng_for(seed, &[tag("encoder-init")]);
        init_encoder(&mut enc_store, &mut rng, &cfg.encoder, tokenizer::vocab_size());
        ModelBundle::new(
            enc_store,
            cfg.encoder.clone(),
            cfg.decoder.clone(),
            None,
            ctxasr_core::decoder::Variant::DecoderOnly,
        )
    };
    if ctc_steps > 0 {
        let mut opts = TrainOptions::new(Phase::CtcPretrain);
        opts.schedule = cfg.schedules.ctc.schedule.clone();
        opts.schedule.total_steps = ctc_steps;
        opts.batch_size = cfg.schedules.ctc.batch_size;
        opts.augment = if std::env::var("SMOKE_NO_AUG").is_ok() { None } else { cfg.augment.clone() };
        let _ = std::fs::remove_dir_all(out.join("ctc"));
        let outcome = run_phase(&corpus, &mut ctc_bundle, &opts, seed, &out.join("ctc")).unwrap();
        println!(
            "ctc: {:?} loss {:.3} skipped {}",
            t0.elapsed(),
            outcome.final_loss,
            outcome.skipped_samples
        );
    }

    // CTC greedy sanity on a train subset
    let mut correct = WerReport::default();
    for s in corpus.train.iter().take(24) {
        let mut rt = Runtime::new(&ctc_bundle.store, Mode::Eval, 0);
        let enc = ctxasr_core::encoder::encode(&mut rt, &cfg.encoder, &s.features()).unwrap();
        let lp = ctxasr_core::encoder::ctc_log_probs(&mut rt, &cfg.encoder, &enc, tokenizer::vocab_size()).unwrap();
        let shape = lp.shape();
        let ids = ctc_greedy_decode(&lp.to_vec(), shape[0], shape[1], tokenizer::ctc_blank());
        let hyp = tokenizer::detokenize(&ids);
        correct.merge(&align_wer(&s.transcript, &hyp, &BTreeSet::new()));
    }
    println!("ctc greedy train WER: {:.3}", correct.wer());

    // Finetune
    let t0 = Instant::now();
    let mut bundle = if ft_steps == 0 {
        ModelBundle::<f32>::load(&out.join("ft")).unwrap()
    } else {
        assemble_finetune_bundle(
            &ctc_bundle,
            &lm_bundle,
            cfg.lora.clone(),
            ctxasr_core::decoder::Variant::DecoderOnly,
            seed,
        )
        .unwrap()
    };
    println!(
        "finetune bundle: {} trainable / {} frozen ({} lora)",
        bundle.trainable_param_count(),
        bundle.frozen_param_count(),
        bundle.lora_param_count()
    );
    if ft_steps > 0 {
        let mut opts = TrainOptions::new(Phase::Finetune);
        opts.schedule = cfg.schedules.finetune.schedule.clone();
        opts.schedule.total_steps = ft_steps;
        opts.batch_size = cfg.schedules.finetune.batch_size;
        opts.context_in_training = true;
        opts.augment = cfg.augment.clone();
        opts.eval_interval = 0;
        let _ = std::fs::remove_dir_all(out.join("ft"));
        let outcome = run_phase(&corpus, &mut bundle, &opts, seed, &out.join("ft")).unwrap();
        println!("finetune: {:?} loss {:.4}", t0.elapsed(), outcome.final_loss);
    }

    // Eval with and without context
    for (label, with_ctx) in [("with-context", true), ("no-context", false)] {
        let t0 = Instant::now();
        use rayon::prelude::*;
        let reports: Vec<WerReport> = corpus
            .eval
            .par_iter()
            .map(|s| {
                let feats = s.features();
                let ctx = if with_ctx { s.context.as_deref() } else { None };
                let hyp = transcribe(
                    &bundle,
                    &feats,
                    ctx,
                    ctxasr_core::nn::MaskScheme::Causal,
                    generation_cap(&feats),
                )
                .unwrap_or_default();
                align_wer(&s.transcript, &hyp, &rare)
            })
            .collect();
        let mut total = WerReport::default();
        for r in &reports {
            total.merge(r);
        }
        println!(
            "{label}: WER {:.4} RareWER {:.4} ({} rare refs) [{:?}]",
            total.wer(),
            total.rare_wer().unwrap_or(f64::NAN),
            total.rare_ref_words,
            t0.elapsed()
        );
    }
    println!("total: {:?}", t_all.elapsed());
}
