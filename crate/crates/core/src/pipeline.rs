//! Mixed-modal prompt assembly and the end-to-end loss/decode glue.
//!
//! A prompt is one embedding sequence: context tokens, bos, audio tokens,
//! then (in training) the transcript and eos. The cross-entropy loss is
//! masked so that only spoken positions — transcript and eos — are targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bundle::ModelBundle;
use crate::corpus::{tokenizer, AudioFeatures};
use crate::decoder::{self, Variant};
use crate::encoder;
use crate::error::{Error, Result};
use crate::nn::{MaskScheme, Runtime};
use crate::tensor::{Mode, Scalar, Tensor};

pub const MAX_CONTEXT_TOKENS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Context,
    Bos,
    Audio,
    Transcript,
    Eos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    Train,
    Infer,
}

/// Fused decoder input: per-position source tags, the embedding stream, the
/// loss mask (true exactly on transcript/eos positions), and the prefix
/// length covering context + bos + audio.
pub struct PromptSequence<S: Scalar> {
    pub embeddings: Tensor<S>,
    pub sources: Vec<Source>,
    pub loss_mask: Vec<bool>,
    /// Token id per position; audio positions carry none.
    pub token_ids: Vec<Option<usize>>,
    pub prefix_len: usize,
    /// Audio memory for the encoder-decoder variant (audio is then absent
    /// from the embedding stream).
    pub encoder_out: Option<Tensor<S>>,
}

impl<S: Scalar> PromptSequence<S> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Crop a context to `max_len` tokens: a random window during training, the
/// trailing window at inference (leading tokens dropped).
pub fn crop_context(
    tokens: &[usize],
    max_len: usize,
    mode: PromptMode,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if max_len == 0 || tokens.len() <= max_len {
        return tokens.to_vec();
    }
    match mode {
        PromptMode::Train => {
            let start = rng.gen_range(0..=tokens.len() - max_len);
            tokens[start..start + max_len].to_vec()
        }
        PromptMode::Infer => tokens[tokens.len() - max_len..].to_vec(),
    }
}

/// Assemble the mixed-modal prompt: context, bos, audio, transcript, eos.
/// In infer mode the transcript must be empty and the sequence stops after
/// the audio block. For the encoder-decoder variant the audio block is
/// routed to `encoder_out` instead of the embedding stream.
pub fn assemble_prompt<S: Scalar>(
    rt: &mut Runtime<S>,
    variant: Variant,
    context: Option<&[usize]>,
    audio_emb: &Tensor<S>,
    transcript: &[usize],
    mode: PromptMode,
) -> Result<PromptSequence<S>> {
    let n_audio = audio_emb.shape()[0];
    if n_audio == 0 {
        return Err(Error::Data("prompt requires non-empty audio".into()));
    }
    match mode {
        PromptMode::Infer if !transcript.is_empty() => {
            return Err(Error::Config("infer prompt must have empty transcript".into()))
        }
        PromptMode::Train if transcript.is_empty() => {
            return Err(Error::Config("train prompt must have a transcript".into()))
        }
        _ => {}
    }

    let ctx = context.unwrap_or(&[]);
    let audio_inline = variant == Variant::DecoderOnly;
    let mut sources = Vec::new();
    let mut token_ids: Vec<Option<usize>> = Vec::new();
    let mut text_ids: Vec<usize> = Vec::new();

    for &id in ctx {
        sources.push(Source::Context);
        token_ids.push(Some(id));
        text_ids.push(id);
    }
    sources.push(Source::Bos);
    token_ids.push(Some(tokenizer::BOS));
    text_ids.push(tokenizer::BOS);
    if audio_inline {
        for _ in 0..n_audio {
            sources.push(Source::Audio);
            token_ids.push(None);
        }
    }
    let prefix_len = sources.len();
    if mode == PromptMode::Train {
        for &id in transcript {
            sources.push(Source::Transcript);
            token_ids.push(Some(id));
            text_ids.push(id);
        }
        sources.push(Source::Eos);
        token_ids.push(Some(tokenizer::EOS));
        text_ids.push(tokenizer::EOS);
    }

    let table = rt.p("decoder.embed.table");
    let text_emb = Tensor::embedding_lookup(&table, &text_ids)?;
    let n_ctx_bos = ctx.len() + 1;
    let embeddings = if audio_inline {
        let head = text_emb.slice(0, 0, n_ctx_bos)?;
        if text_ids.len() > n_ctx_bos {
            let tail = text_emb.slice(0, n_ctx_bos, text_ids.len())?;
            Tensor::concat(&[&head, audio_emb, &tail], 0)?
        } else {
            Tensor::concat(&[&head, audio_emb], 0)?
        }
    } else {
        text_emb
    };

    let loss_mask: Vec<bool> = sources
        .iter()
        .map(|s| matches!(s, Source::Transcript | Source::Eos))
        .collect();

    Ok(PromptSequence {
        embeddings,
        sources,
        loss_mask,
        token_ids,
        prefix_len,
        encoder_out: (!audio_inline).then(|| audio_emb.clone()),
    })
}

/// Mean next-token cross-entropy over positions whose target (the following
/// position) is loss-masked true. The scheme's prefix length is taken from
/// the prompt.
pub fn sequence_loss<S: Scalar>(
    rt: &mut Runtime<S>,
    bundle_cfg: (&crate::decoder::DecoderConfig, Variant, Option<&crate::nn::LoraConfig>),
    prompt: &PromptSequence<S>,
    scheme: MaskScheme,
) -> Result<Tensor<S>> {
    let (dcfg, variant, lora) = bundle_cfg;
    let n = prompt.len();
    let logits = decoder::decoder_forward(
        rt,
        dcfg,
        variant,
        lora,
        &prompt.embeddings,
        scheme.with_prefix(prompt.prefix_len),
        prompt.encoder_out.as_ref(),
    )?;
    let mut targets = vec![0usize; n];
    let mut include = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        if prompt.loss_mask[i + 1] {
            include[i] = true;
            targets[i] = prompt.token_ids[i + 1]
                .ok_or_else(|| Error::Data("loss-masked position without token".into()))?;
        }
    }
    if !include.iter().any(|&b| b) {
        return Err(Error::Data("no unmasked targets in prompt".into()));
    }
    Ok(logits.log_softmax_lastdim()?.masked_nll(&targets, &include)?)
}

/// Full inference path: tokenize and crop the context, encode audio,
/// assemble the prompt, decode greedily, detokenize.
pub fn transcribe<S: Scalar>(
    bundle: &ModelBundle<S>,
    feats: &AudioFeatures,
    context: Option<&str>,
    scheme: MaskScheme,
    max_new_tokens: usize,
) -> Result<String> {
    let mut rt = Runtime::new(&bundle.store, Mode::Eval, 0);
    let audio = encoder::encode(&mut rt, &bundle.encoder, feats)?;
    let ctx_tokens: Option<Vec<usize>> = context.map(|c| {
        let mut unused = crate::rng::rng_for(0, &[0]);
        crop_context(&tokenizer::tokenize(c), MAX_CONTEXT_TOKENS, PromptMode::Infer, &mut unused)
    });
    let prompt = assemble_prompt(
        &mut rt,
        bundle.variant,
        ctx_tokens.as_deref(),
        &audio,
        &[],
        PromptMode::Infer,
    )?;
    let ids = decoder::greedy_generate(
        &bundle.store,
        &bundle.decoder,
        bundle.variant,
        bundle.lora.as_ref(),
        &prompt.embeddings,
        scheme.with_prefix(prompt.prefix_len),
        prompt.encoder_out.as_ref(),
        tokenizer::EOS,
        max_new_tokens,
    )?;
    Ok(tokenizer::detokenize(&ids))
}

/// Generation cap for an utterance: at most one output character per two
/// input frames, plus slack. Keeps degenerate decodes cheap.
pub fn generation_cap(feats: &AudioFeatures) -> usize {
    (feats.len() / 2 + 12).min(200)
}
