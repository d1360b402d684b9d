//! Data generation, the three training phases, and the variant ablation.

use std::fs;
use std::path::Path;

use ctxasr_core::bundle::{assemble_finetune_bundle, ModelBundle};
use ctxasr_core::config::ExperimentConfig;
use ctxasr_core::corpus::{generate_corpus, load_corpus, save_corpus, tokenizer, Corpus};
use ctxasr_core::decoder::{init_decoder_base, Variant};
use ctxasr_core::encoder::init_encoder;
use ctxasr_core::error::{Error, Result};
use ctxasr_core::rng::{rng_for, tag};
use ctxasr_core::tensor::ParamStore;
use ctxasr_core::trainer::{run_phase, Phase, TrainOptions};

pub fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    save_corpus(&corpus, &out.join("corpus"))?;
    // Record the resolved config beside the data for downstream commands.
    cfg.save(&out.join("config.json"))?;
    println!(
        "corpus: {} train / {} eval samples, lexicon {} words ({} homophone pairs)",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.lexicon.words.len(),
        corpus.lexicon.homophone_pairs.len()
    );
    Ok(())
}

pub fn load_run_corpus(out: &Path) -> Result<Corpus> {
    load_corpus(&out.join("corpus"))
}

fn require_dir(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} not found; run `ctxasr {produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

pub fn pretrain_ctc(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    require_dir(&out.join("corpus"), "gen-data")?;
    let corpus = load_run_corpus(out)?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = rng_for(cfg.seed, &[tag("encoder-init")]);
    init_encoder(&mut store, &mut rng, &cfg.encoder, tokenizer::vocab_size());
    let mut bundle = ModelBundle::new(
        store,
        cfg.encoder.clone(),
        cfg.decoder.clone(),
        None,
        Variant::DecoderOnly,
    );
    if resume {
        if let Ok(prev) = ModelBundle::<f32>::load(&out.join("ctc")) {
            bundle = prev;
        }
    }
    let mut opts = TrainOptions::new(Phase::CtcPretrain);
    opts.schedule = cfg.schedules.ctc.schedule.clone();
    opts.batch_size = cfg.schedules.ctc.batch_size;
    opts.augment = cfg.augment.clone();
    opts.resume = resume;
    let outcome = run_phase(&corpus, &mut bundle, &opts, cfg.seed, &out.join("ctc"))?;
    println!(
        "ctc pretrain: {} steps, final loss {:.4}, skipped {} infeasible",
        outcome.steps_run, outcome.final_loss, outcome.skipped_samples
    );
    Ok(())
}

pub fn pretrain_lm(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    require_dir(&out.join("corpus"), "gen-data")?;
    let corpus = load_run_corpus(out)?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = rng_for(cfg.seed, &[tag("lm-init")]);
    init_decoder_base(&mut store, &mut rng, &cfg.decoder);
    let mut bundle = ModelBundle::new(
        store,
        cfg.encoder.clone(),
        cfg.decoder.clone(),
        None,
        Variant::DecoderOnly,
    );
    if resume {
        if let Ok(prev) = ModelBundle::<f32>::load(&out.join("lm")) {
            bundle = prev;
        }
    }
    let mut opts = TrainOptions::new(Phase::LmPretrain);
    opts.schedule = cfg.schedules.lm.schedule.clone();
    opts.batch_size = cfg.schedules.lm.batch_size;
    opts.resume = resume;
    let outcome = run_phase(&corpus, &mut bundle, &opts, cfg.seed, &out.join("lm"))?;
    println!(
        "lm pretrain: {} steps, final loss {:.4}, held-out ce {:.4}",
        outcome.steps_run,
        outcome.final_loss,
        outcome.heldout_ce.unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn train(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    train_variant(&cfg, out, cfg.variant, "finetune", resume)
}

/// Fine-tune one variant from the shared pretrained halves into OUT/<dir>.
pub fn train_variant(
    cfg: &ExperimentConfig,
    out: &Path,
    variant: Variant,
    dir: &str,
    resume: bool,
) -> Result<()> {
    require_dir(&out.join("corpus"), "gen-data")?;
    require_dir(&out.join("ctc"), "pretrain-ctc")?;
    require_dir(&out.join("lm"), "pretrain-lm")?;
    let corpus = load_run_corpus(out)?;
    let ctc_bundle = ModelBundle::<f32>::load(&out.join("ctc"))?;
    let lm_bundle = ModelBundle::<f32>::load(&out.join("lm"))?;

    let target = out.join(dir);
    let mut bundle = if resume && target.join("manifest.json").exists() {
        ModelBundle::<f32>::load(&target)?
    } else {
        let mut b =
            assemble_finetune_bundle(&ctc_bundle, &lm_bundle, cfg.lora.clone(), variant, cfg.seed)?;
        // The decoder base is frozen from here on; adapters, encoder and (for
        // the variant) cross-attention matrices stay trainable.
        b.store.freeze_prefix("decoder.embed");
        b.store.freeze_prefix("decoder.head");
        b
    };

    let mut opts = TrainOptions::new(Phase::Finetune);
    opts.schedule = cfg.schedules.finetune.schedule.clone();
    opts.batch_size = cfg.schedules.finetune.batch_size;
    opts.context_in_training = cfg.context_in_training;
    opts.mask_scheme = cfg.mask_scheme.scheme();
    opts.augment = cfg.augment.clone();
    opts.eval_interval = (cfg.schedules.finetune.schedule.total_steps / 4).max(1);
    opts.resume = resume;
    let outcome = run_phase(&corpus, &mut bundle, &opts, cfg.seed, &target)?;
    println!(
        "finetune[{variant:?}]: {} steps, final loss {:.4}, trainable {} / frozen {}",
        outcome.steps_run,
        outcome.final_loss,
        bundle.trainable_param_count(),
        bundle.frozen_param_count()
    );
    Ok(())
}

pub fn ablate_decoder(config: &Path, out: &Path, only: Option<&str>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let variants: Vec<(Variant, &str)> = match only {
        Some("decoder-only") => vec![(Variant::DecoderOnly, "variant-decoder_only")],
        Some("encoder-decoder") => vec![(Variant::EncoderDecoder, "variant-encoder_decoder")],
        _ => vec![
            (Variant::DecoderOnly, "variant-decoder_only"),
            (Variant::EncoderDecoder, "variant-encoder_decoder"),
        ],
    };
    let mut rows = Vec::new();
    for (variant, dir) in &variants {
        train_variant(&cfg, out, *variant, dir, false)?;
        let bundle = ModelBundle::<f32>::load(&out.join(dir))?;
        let report = crate::evalrun::eval_condition(
            &cfg,
            out,
            &bundle,
            cfg.context_in_eval,
            ctxasr_core::metrics::PerturbKind::None,
            cfg.mask_scheme,
            &format!("{dir}"),
        )?;
        rows.push((*variant, bundle.trainable_param_count(), report));
    }
    let mut md = String::from("| decoder | trainable params | WER | Rare WER |\n|---|---|---|---|\n");
    for (variant, params, r) in &rows {
        md.push_str(&format!(
            "| {:?} | {} | {:.4} | {} |\n",
            variant,
            params,
            r.wer(),
            r.rare_wer().map_or("n/a".into(), |w| format!("{w:.4}")),
        ));
    }
    fs::write(out.join("ablation_variants.md"), &md)?;
    print!("{md}");
    Ok(())
}
