//! Model bundle: the parameter store plus every config needed to rebuild the
//! computation, saved as a checkpoint file and a JSON manifest. Loading
//! refuses a manifest whose tokenizer hash differs from this build's.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer;
use crate::decoder::{DecoderConfig, Variant};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::LoraConfig;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Scalar};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone)]
pub struct ModelBundle<S: Scalar> {
    pub store: ParamStore<S>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub lora: Option<LoraConfig>,
    pub variant: Variant,
    pub tokenizer_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    lora: Option<LoraConfig>,
    variant: Variant,
    tokenizer_hash: String,
    trainable_params: usize,
    frozen_params: usize,
}

impl<S: Scalar> ModelBundle<S> {
    pub fn new(
        store: ParamStore<S>,
        encoder: EncoderConfig,
        decoder: DecoderConfig,
        lora: Option<LoraConfig>,
        variant: Variant,
    ) -> Self {
        ModelBundle {
            store,
            encoder,
            decoder,
            lora,
            variant,
            tokenizer_hash: tokenizer::tokenizer_hash(),
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.param_count(true)
    }

    pub fn frozen_param_count(&self) -> usize {
        self.store.param_count(false)
    }

    /// Adapter parameters actually present in the store.
    pub fn lora_param_count(&self) -> usize {
        self.store
            .count_matching(|n| n.ends_with(".lora_a") || n.ends_with(".lora_b"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.store, &dir.join("checkpoint.bin"))?;
        let manifest = Manifest {
            schema_version: MANIFEST_VERSION,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            lora: self.lora.clone(),
            variant: self.variant,
            tokenizer_hash: self.tokenizer_hash.clone(),
            trainable_params: self.trainable_param_count(),
            frozen_params: self.frozen_param_count(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let raw = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest schema {} unsupported (expected {MANIFEST_VERSION})",
                manifest.schema_version
            )));
        }
        let expected = tokenizer::tokenizer_hash();
        if manifest.tokenizer_hash != expected {
            return Err(Error::Config(format!(
                "tokenizer hash mismatch: checkpoint {}, build {expected}",
                manifest.tokenizer_hash
            )));
        }
        let store = load_checkpoint(&dir.join("checkpoint.bin"))?;
        Ok(ModelBundle {
            store,
            encoder: manifest.encoder,
            decoder: manifest.decoder,
            lora: manifest.lora,
            variant: manifest.variant,
            tokenizer_hash: manifest.tokenizer_hash,
        })
    }
}

/// Compose the fine-tuning bundle: pretrained encoder weights (CTC head
/// dropped, encoder stays trainable), the pretrained decoder base frozen,
/// fresh LoRA adapters, and fresh cross-attention matrices for the
/// encoder-decoder variant.
pub fn assemble_finetune_bundle<S: Scalar>(
    ctc_bundle: &ModelBundle<S>,
    lm_bundle: &ModelBundle<S>,
    lora: LoraConfig,
    variant: Variant,
    seed: u64,
) -> Result<ModelBundle<S>> {
    let mut store = ParamStore::<S>::new();
    for (name, entry) in ctc_bundle.store.iter() {
        if name.starts_with("encoder.") && !name.starts_with("encoder.ctc_head") {
            store.insert(name, entry.shape.clone(), entry.data.as_ref().clone(), true);
        }
    }
    for (name, entry) in lm_bundle.store.iter() {
        if name.starts_with("decoder.") {
            store.insert(name, entry.shape.clone(), entry.data.as_ref().clone(), false);
        }
    }
    let decoder_cfg = lm_bundle.decoder.clone();
    let mut rng = crate::rng::rng_for(seed, &[crate::rng::tag("finetune-init")]);
    crate::decoder::attach_lora(&mut store, &mut rng, &decoder_cfg, &lora)?;
    if variant == Variant::EncoderDecoder {
        crate::decoder::attach_cross_attention(&mut store, &mut rng, &decoder_cfg);
    }
    Ok(ModelBundle::new(
        store,
        ctc_bundle.encoder.clone(),
        decoder_cfg,
        Some(lora),
        variant,
    ))
}
