//! Optimization loop for all three phases: CTC encoder pretraining, decoder
//! base LM pretraining, and mixed-modal fine-tuning.
//!
//! Determinism: batch composition is a pure function of (seed, step), every
//! per-sample forward seeds its own dropout/augment streams from
//! (seed, step, slot), and per-sample gradients merge in slot order — so the
//! result is bit-identical for any worker count, and resuming from a
//! checkpoint replays the exact step sequence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::corpus::{augment, tokenizer, AugmentConfig, Corpus};
use crate::ctc;
use crate::decoder::{self};
use crate::encoder;
use crate::error::{Error, Result};
use crate::metrics::align_wer;
use crate::nn::{MaskScheme, Runtime};
use crate::pipeline::{self, PromptMode};
use crate::rng::{derive_seed, rng_for, tag};
use crate::tensor::{load_checkpoint, save_checkpoint, Mode, ParamStore, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 1e-5,
            grad_clip_norm: 1.0,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            peak_lr: 5e-4,
            floor_lr: 1e-5,
            warmup_steps: 200,
            total_steps: 4000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.floor_lr && self.floor_lr <= self.peak_lr) {
            return Err(Error::Config("need 0 < floor_lr <= peak_lr".into()));
        }
        if !(0 < self.warmup_steps && self.warmup_steps < self.total_steps) {
            return Err(Error::Config("need 0 < warmup_steps < total_steps".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then geometric decay to the floor at
/// `total_steps`; both branches agree at the warmup boundary.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step <= cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let frac = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        cfg.peak_lr * (cfg.floor_lr / cfg.peak_lr).powf(frac)
    }
}

/// Adam moments plus the step counter.
pub struct AdamState<S: Scalar> {
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One optimizer step: clip the global gradient norm, apply decoupled weight
/// decay, then bias-corrected Adam. Frozen parameters are untouched; a NaN
/// gradient aborts the step.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &BTreeMap<String, Vec<S>>,
    state: &mut AdamState<S>,
    opt: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    let mut sq_norm = 0.0f64;
    for (name, g) in grads {
        if !store.entry(name).trainable {
            return Err(Error::Config(format!("gradient for frozen parameter {name}")));
        }
        for &v in g {
            let v = v.to_f64().unwrap();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            sq_norm += v * v;
        }
    }
    let norm = sq_norm.sqrt();
    let clip = if norm > opt.grad_clip_norm && norm > 0.0 {
        opt.grad_clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    let (b1, b2) = (S::from_f64_exact(opt.beta1), S::from_f64_exact(opt.beta2));
    let one_m_b1 = S::from_f64_exact(1.0 - opt.beta1);
    let one_m_b2 = S::from_f64_exact(1.0 - opt.beta2);
    let decay = S::from_f64_exact(1.0 - lr * opt.weight_decay);
    let clip_s = S::from_f64_exact(clip);
    let eps = S::from_f64_exact(opt.eps);
    let lr_s = S::from_f64_exact(lr);
    let inv_bc1 = S::from_f64_exact(1.0 / bc1);
    let inv_bc2 = S::from_f64_exact(1.0 / bc2);

    for (name, g) in grads {
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
        store.update(name, |p| {
            for i in 0..n {
                let gi = g[i] * clip_s;
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                p[i] = p[i] * decay - lr_s * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CtcPretrain,
    LmPretrain,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub phase: Phase,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Off: prompts always drop context. On: context used when present.
    pub context_in_training: bool,
    pub mask_scheme: MaskScheme,
    pub augment: Option<AugmentConfig>,
    pub eval_interval: u64,
    pub eval_subset: usize,
    pub resume: bool,
}

impl TrainOptions {
    pub fn new(phase: Phase) -> Self {
        TrainOptions {
            phase,
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            context_in_training: true,
            mask_scheme: MaskScheme::Causal,
            augment: None,
            eval_interval: 0,
            eval_subset: 24,
            resume: false,
        }
    }
}

#[derive(Debug, Serialize)]
struct LogLine<'a> {
    step: u64,
    lr: f64,
    loss: f64,
    phase: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_wer: Option<f64>,
}

pub struct PhaseOutcome {
    pub steps_run: u64,
    pub final_loss: f64,
    pub skipped_samples: u64,
    pub heldout_ce: Option<f64>,
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::CtcPretrain => "ctc_pretrain",
        Phase::LmPretrain => "lm_pretrain",
        Phase::Finetune => "finetune",
    }
}

/// Index of the dataset item consumed by draw `k` of the run: a fresh
/// seeded permutation per epoch, computed statelessly.
fn draw_index(seed: u64, len: usize, global_draw: u64) -> usize {
    let epoch = global_draw / len as u64;
    let pos = (global_draw % len as u64) as usize;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = rng_for(seed, &[tag("epoch-order"), epoch]);
    order.shuffle(&mut rng);
    order[pos]
}

enum Item<'a> {
    Sample(&'a crate::corpus::Sample),
    Line(&'a str),
}

fn sample_loss<S: Scalar>(
    bundle: &ModelBundle<S>,
    opts: &TrainOptions,
    item: &Item,
    seed: u64,
    step: u64,
    slot: usize,
) -> Result<Option<(f64, Vec<(String, Vec<S>)>)>> {
    let rt_seed = derive_seed(seed, &[tag("dropout"), step, slot as u64]);
    let mut rt = Runtime::new(&bundle.store, Mode::Train, rt_seed);
    let loss = match (opts.phase, item) {
        (Phase::LmPretrain, Item::Line(line)) => {
            let mut ids = vec![tokenizer::BOS];
            ids.extend(tokenizer::tokenize(line));
            ids.push(tokenizer::EOS);
            if ids.len() < 2 {
                return Ok(None);
            }
            decoder::lm_loss(&mut rt, &bundle.decoder, &ids)?
        }
        (Phase::CtcPretrain, Item::Sample(sample)) => {
            let mut feats = sample.features();
            if let Some(aug) = &opts.augment {
                let mut arng = rng_for(seed, &[tag("augment"), step, slot as u64]);
                feats = augment(&feats, aug, &mut arng);
            }
            let enc = encoder::encode(&mut rt, &bundle.encoder, &feats)?;
            let lp = encoder::ctc_log_probs(&mut rt, &bundle.encoder, &enc, tokenizer::vocab_size())?;
            let targets = sample.transcript_tokens();
            match ctc::ctc_loss(&lp, &targets, tokenizer::ctc_blank()) {
                Ok(l) => l,
                Err(crate::error::TensorError::CtcInfeasible { .. }) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
        (Phase::Finetune, Item::Sample(sample)) => {
            let mut feats = sample.features();
            if let Some(aug) = &opts.augment {
                let mut arng = rng_for(seed, &[tag("augment"), step, slot as u64]);
                feats = augment(&feats, aug, &mut arng);
            }
            let enc = encoder::encode(&mut rt, &bundle.encoder, &feats)?;
            let ctx_ids: Option<Vec<usize>> = if opts.context_in_training {
                sample.context.as_deref().map(|c| {
                    let mut crng = rng_for(seed, &[tag("crop"), step, slot as u64]);
                    pipeline::crop_context(
                        &tokenizer::tokenize(c),
                        pipeline::MAX_CONTEXT_TOKENS,
                        PromptMode::Train,
                        &mut crng,
                    )
                })
            } else {
                None
            };
            let prompt = pipeline::assemble_prompt(
                &mut rt,
                bundle.variant,
                ctx_ids.as_deref(),
                &enc,
                &sample.transcript_tokens(),
                PromptMode::Train,
            )?;
            pipeline::sequence_loss(
                &mut rt,
                (&bundle.decoder, bundle.variant, bundle.lora.as_ref()),
                &prompt,
                opts.mask_scheme,
            )?
        }
        _ => return Err(Error::Config("phase/item mismatch".into())),
    };
    loss.backward().map_err(Error::Tensor)?;
    let value = loss.item().to_f64().unwrap();
    Ok(Some((value, rt.grads())))
}

fn quick_eval_wer<S: Scalar>(bundle: &ModelBundle<S>, corpus: &Corpus, opts: &TrainOptions) -> f64 {
    let n = opts.eval_subset.min(corpus.eval.len());
    let reports: Vec<_> = corpus.eval[..n]
        .par_iter()
        .map(|s| {
            let ctx = if opts.context_in_training { s.context.as_deref() } else { None };
            let feats = s.features();
            let cap = pipeline::generation_cap(&feats);
            let hyp = pipeline::transcribe(bundle, &feats, ctx, opts.mask_scheme, cap)
                .unwrap_or_default();
            align_wer(&s.transcript, &hyp, &std::collections::BTreeSet::new())
        })
        .collect();
    let mut total = crate::metrics::WerReport::default();
    for r in &reports {
        total.merge(r);
    }
    total.wer()
}

fn optimizer_state_path(dir: &Path) -> PathBuf {
    dir.join("optimizer.bin")
}

fn save_optimizer_state<S: Scalar>(state: &AdamState<S>, dir: &Path) -> Result<()> {
    let mut store = ParamStore::<S>::new();
    for (name, m) in &state.m {
        store.insert(&format!("m.{name}"), vec![m.len()], m.clone(), false);
    }
    for (name, v) in &state.v {
        store.insert(&format!("v.{name}"), vec![v.len()], v.clone(), false);
    }
    store.insert("step", vec![1], vec![S::from_f64_exact(state.step as f64)], false);
    save_checkpoint(&store, &optimizer_state_path(dir))
}

fn load_optimizer_state<S: Scalar>(dir: &Path) -> Result<AdamState<S>> {
    let store = load_checkpoint::<S>(&optimizer_state_path(dir))?;
    let mut state = AdamState::default();
    for (name, entry) in store.iter() {
        if let Some(stripped) = name.strip_prefix("m.") {
            state.m.insert(stripped.to_string(), entry.data.as_ref().clone());
        } else if let Some(stripped) = name.strip_prefix("v.") {
            state.v.insert(stripped.to_string(), entry.data.as_ref().clone());
        } else if name == "step" {
            state.step = entry.data[0].to_f64().unwrap() as u64;
        }
    }
    Ok(state)
}

/// Run one training phase to `schedule.total_steps`, appending metrics to
/// `metrics.jsonl` in `out_dir` and checkpointing the bundle at the end (and
/// at the best periodic eval WER, under `best/`).
pub fn run_phase<S: Scalar>(
    corpus: &Corpus,
    bundle: &mut ModelBundle<S>,
    opts: &TrainOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<PhaseOutcome> {
    opts.schedule.validate()?;
    opts.optimizer.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if let Some(aug) = &opts.augment {
        aug.validate(bundle.encoder.feat_dim)?;
    }
    fs::create_dir_all(out_dir)?;

    // The LM phase consumes text lines; the others consume samples.
    let lines: Vec<String>;
    let dataset_len = match opts.phase {
        Phase::LmPretrain => {
            lines = crate::corpus::text_lines(corpus);
            lines.len()
        }
        _ => {
            lines = Vec::new();
            corpus.train.len()
        }
    };
    if dataset_len == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    // Hold out a tail slice of text lines for perplexity reporting.
    let heldout_start = match opts.phase {
        Phase::LmPretrain => dataset_len - (dataset_len / 20).max(1),
        _ => dataset_len,
    };

    let mut state = if opts.resume && optimizer_state_path(out_dir).exists() {
        load_optimizer_state(out_dir)?
    } else {
        AdamState::default()
    };

    let log_path = out_dir.join("metrics.jsonl");
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;

    let mut skipped = 0u64;
    let mut last_loss = f64::NAN;
    let mut best_wer = f64::INFINITY;
    let phase_str = phase_name(opts.phase);

    let start_step = state.step;
    for step in start_step..opts.schedule.total_steps {
        let batch: Vec<Item> = (0..opts.batch_size)
            .map(|j| {
                let draw = step * opts.batch_size as u64 + j as u64;
                let idx = draw_index(
                    derive_seed(seed, &[tag(phase_str)]),
                    heldout_start.max(1),
                    draw,
                );
                match opts.phase {
                    Phase::LmPretrain => Item::Line(&lines[idx]),
                    _ => Item::Sample(&corpus.train[idx]),
                }
            })
            .collect();

        let results: Vec<Result<Option<(f64, Vec<(String, Vec<S>)>)>>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, item)| sample_loss(bundle, opts, item, seed, step, slot))
            .collect();

        let mut merged: BTreeMap<String, Vec<S>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut n_ok = 0usize;
        for r in results {
            match r? {
                Some((loss, grads)) => {
                    loss_sum += loss;
                    n_ok += 1;
                    for (name, g) in grads {
                        match merged.entry(name) {
                            std::collections::btree_map::Entry::Vacant(e) => {
                                e.insert(g);
                            }
                            std::collections::btree_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&g) {
                                    *a += *b;
                                }
                            }
                        }
                    }
                }
                None => skipped += 1,
            }
        }
        if n_ok == 0 {
            state.step += 1;
            continue;
        }
        let inv = S::from_f64_exact(1.0 / n_ok as f64);
        for g in merged.values_mut() {
            for v in g.iter_mut() {
                *v = *v * inv;
            }
        }
        last_loss = loss_sum / n_ok as f64;

        let lr = lr_at(step + 1, &opts.schedule);
        adam_step(&mut bundle.store, &merged, &mut state, &opts.optimizer, lr)?;

        let eval_wer = if opts.eval_interval > 0
            && opts.phase == Phase::Finetune
            && (state.step % opts.eval_interval == 0 || state.step == opts.schedule.total_steps)
        {
            let wer = quick_eval_wer(bundle, corpus, opts);
            if wer < best_wer {
                best_wer = wer;
                bundle.save(&out_dir.join("best"))?;
            }
            Some(wer)
        } else {
            None
        };

        serde_json::to_writer(
            &mut log,
            &LogLine { step: state.step, lr, loss: last_loss, phase: phase_str, eval_wer },
        )?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    // Held-out cross-entropy for the LM phase.
    let heldout_ce = if opts.phase == Phase::LmPretrain && heldout_start < dataset_len {
        let mut total = 0.0;
        let mut n = 0usize;
        for line in &lines[heldout_start..] {
            let mut ids = vec![tokenizer::BOS];
            ids.extend(tokenizer::tokenize(line));
            ids.push(tokenizer::EOS);
            if ids.len() < 2 {
                continue;
            }
            let mut rt = Runtime::new(&bundle.store, Mode::Eval, 0);
            let ce = decoder::lm_loss(&mut rt, &bundle.decoder, &ids)?;
            total += ce.item().to_f64().unwrap();
            n += 1;
        }
        (n > 0).then(|| total / n as f64)
    } else {
        None
    };

    bundle.save(out_dir)?;
    save_optimizer_state(&state, out_dir)?;

    Ok(PhaseOutcome {
        steps_run: state.step,
        final_loss: last_loss,
        skipped_samples: skipped,
        heldout_ce,
    })
}

/// Build the global rayon pool from `CTXASR_THREADS` (defaults to all cores).
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("CTXASR_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}
