//! Evaluation under one context/perturbation/mask condition.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ctxasr_core::bundle::ModelBundle;
use ctxasr_core::config::{ExperimentConfig, MaskKind};
use ctxasr_core::error::{Error, Result};
use ctxasr_core::metrics::{
    align_wer, perturb_context, rare_word_set, PerturbKind, TokenSampler, WerReport,
};
use ctxasr_core::pipeline::{generation_cap, transcribe};
use ctxasr_core::rng::{derive_seed, tag};

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub condition: String,
    pub variant: String,
    pub context_train: bool,
    pub context_eval: bool,
    pub perturb: PerturbKind,
    pub mask: MaskKind,
    pub seed: u64,
    pub n_samples: usize,
    pub n_ref_words: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub wer: f64,
    pub rare_ref_words: usize,
    pub rare_errors: usize,
    pub rare_wer: Option<f64>,
}

fn parse_perturb(s: &str) -> Result<PerturbKind> {
    Ok(match s {
        "none" => PerturbKind::None,
        "remove" => PerturbKind::RemoveAll,
        "random" => PerturbKind::Random,
        "respell-replace" => PerturbKind::RespellReplace,
        "respell-append" => PerturbKind::RespellAppend,
        "ground-truth" => PerturbKind::GroundTruth,
        other => {
            return Err(Error::Config(format!(
            "unknown perturb '{other}' (expected none|remove|random|respell-replace|respell-append|ground-truth)"
        )))
        }
    })
}

fn parse_mask(s: &str) -> Result<MaskKind> {
    Ok(match s {
        "causal" => MaskKind::Causal,
        "prefix" => MaskKind::PrefixFull,
        other => {
            return Err(Error::Config(format!(
                "unknown mask '{other}' (expected causal|prefix)"
            )))
        }
    })
}

/// Score the eval split for one condition. Context off is the same path as
/// the remove-all perturbation.
pub fn eval_condition_counted(
    cfg: &ExperimentConfig,
    out: &Path,
    bundle: &ModelBundle<f32>,
    context_eval: bool,
    perturb: PerturbKind,
    mask: MaskKind,
    label: &str,
) -> Result<(WerReport, usize)> {
    let corpus = crate::commands::load_run_corpus(out)?;
    let rare = rare_word_set(&corpus.train, cfg.eval.rare_rule, cfg.eval.rare_percentile);
    let sampler = TokenSampler::new(&corpus.train);
    let effective = if context_eval { perturb } else { PerturbKind::RemoveAll };
    let scheme = mask.scheme();

    let n = if cfg.eval.max_samples == 0 {
        corpus.eval.len()
    } else {
        cfg.eval.max_samples.min(corpus.eval.len())
    };
    let reports: Vec<Result<WerReport>> = corpus.eval[..n]
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = ctxasr_core::rng::rng_for(
                derive_seed(cfg.seed, &[tag("eval-perturb"), tag(label)]),
                &[i as u64],
            );
            let ctx = perturb_context(sample, effective, &corpus.lexicon, &rare, &sampler, &mut rng)?;
            let feats = sample.features();
            let hyp = transcribe(bundle, &feats, ctx.as_deref(), scheme, generation_cap(&feats))?;
            Ok(align_wer(&sample.transcript, &hyp, &rare))
        })
        .collect();
    let mut total = WerReport {
        condition: label.to_string(),
        ..WerReport::default()
    };
    for r in reports {
        total.merge(&r?);
    }
    Ok((total, n))
}

pub fn eval_condition(
    cfg: &ExperimentConfig,
    out: &Path,
    bundle: &ModelBundle<f32>,
    context_eval: bool,
    perturb: PerturbKind,
    mask: MaskKind,
    label: &str,
) -> Result<WerReport> {
    eval_condition_counted(cfg, out, bundle, context_eval, perturb, mask, label).map(|(r, _)| r)
}

pub fn eval(
    config: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    context: &str,
    perturb: &str,
    mask: &str,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let perturb = parse_perturb(perturb)?;
    let mask = parse_mask(mask)?;
    let context_eval = context == "on";
    let ckpt_dir = checkpoint
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| out.join("finetune"));
    let bundle = ModelBundle::<f32>::load(&ckpt_dir)?;

    let label = format!(
        "ctx-{}_perturb-{}_mask-{}",
        if context_eval { "on" } else { "off" },
        match perturb {
            PerturbKind::None => "none",
            PerturbKind::RemoveAll => "remove",
            PerturbKind::Random => "random",
            PerturbKind::RespellReplace => "respell-replace",
            PerturbKind::RespellAppend => "respell-append",
            PerturbKind::GroundTruth => "ground-truth",
        },
        match mask {
            MaskKind::Causal => "causal",
            MaskKind::PrefixFull => "prefix",
        }
    );
    let (report, n_samples) =
        eval_condition_counted(&cfg, out, &bundle, context_eval, perturb, mask, &label)?;

    let result = EvalResult {
        condition: label.clone(),
        variant: format!("{:?}", bundle.variant),
        context_train: cfg.context_in_training,
        context_eval,
        perturb,
        mask,
        seed: cfg.seed,
        n_samples,
        n_ref_words: report.n_ref_words,
        sub: report.sub,
        ins: report.ins,
        del: report.del,
        wer: report.wer(),
        rare_ref_words: report.rare_ref_words,
        rare_errors: report.rare_errors,
        rare_wer: report.rare_wer(),
    };
    let eval_dir = out.join("eval");
    fs::create_dir_all(&eval_dir)?;
    fs::write(
        eval_dir.join(format!("{label}.json")),
        serde_json::to_string_pretty(&result)?,
    )?;
    let md = format!(
        "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
        result.variant,
        result.context_train,
        result.context_eval,
        100.0 * result.wer,
        100.0 * result.sub as f64 / result.n_ref_words.max(1) as f64,
        100.0 * result.ins as f64 / result.n_ref_words.max(1) as f64,
        100.0 * result.del as f64 / result.n_ref_words.max(1) as f64,
        result
            .rare_wer
            .map_or("n/a".to_string(), |w| format!("{:.2}", 100.0 * w)),
    );
    fs::write(eval_dir.join(format!("{label}.md")), &md)?;
    println!("{label}: WER {:.4} RareWER {}", result.wer,
        result.rare_wer.map_or("n/a".to_string(), |w| format!("{w:.4}")));
    Ok(())
}
