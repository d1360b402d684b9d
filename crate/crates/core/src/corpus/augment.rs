//! Training-time feature augmentation: speed perturbation by nearest-frame
//! resampling, additive Gaussian noise, then frequency and time masking.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::AudioFeatures;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub freq_masks: usize,
    /// Maximum band width per frequency mask; the full-scale recipe uses 27
    /// of 80 channels, scaled here to the configured feature width.
    pub freq_mask_width: usize,
    pub time_masks: usize,
    pub time_mask_max_frac: f64,
    pub speed_factors: Vec<f64>,
    pub noise_sigma: f64,
}

impl AugmentConfig {
    pub fn scaled_default(feat_dim: usize) -> Self {
        AugmentConfig {
            freq_masks: 2,
            freq_mask_width: ((27.0 * feat_dim as f64) / 80.0).round() as usize,
            time_masks: 10,
            time_mask_max_frac: 0.04,
            speed_factors: vec![0.9, 1.0, 1.1],
            noise_sigma: 0.05,
        }
    }

    /// No-op settings; augment becomes the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            freq_masks: 0,
            freq_mask_width: 0,
            time_masks: 0,
            time_mask_max_frac: 0.0,
            speed_factors: vec![1.0],
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self, feat_dim: usize) -> Result<()> {
        if self.freq_mask_width > feat_dim {
            return Err(Error::Config(format!(
                "freq_mask_width {} exceeds feat_dim {feat_dim}",
                self.freq_mask_width
            )));
        }
        if !(0.0..=1.0).contains(&self.time_mask_max_frac) {
            return Err(Error::Config("time_mask_max_frac outside [0,1]".into()));
        }
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("speed_factors must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn augment(feats: &AudioFeatures, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AudioFeatures {
    let t = feats.len();
    let d = feats.feat_dim();

    // Speed: nearest-frame index resampling to round(T / factor) frames.
    let factor = *cfg.speed_factors.choose(rng).unwrap_or(&1.0);
    let mut frames: Vec<Vec<f32>> = if (factor - 1.0).abs() < f64::EPSILON {
        feats.frames.clone()
    } else {
        let t_out = ((t as f64) / factor).round().max(1.0) as usize;
        (0..t_out)
            .map(|i| {
                let src = ((i as f64) * factor).round() as usize;
                feats.frames[src.min(t - 1)].clone()
            })
            .collect()
    };
    let t_out = frames.len();

    if cfg.noise_sigma > 0.0 {
        for frame in &mut frames {
            for v in frame.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += (z * cfg.noise_sigma) as f32;
            }
        }
    }

    for _ in 0..cfg.freq_masks {
        if cfg.freq_mask_width == 0 {
            break;
        }
        let width = rng.gen_range(0..=cfg.freq_mask_width);
        if width == 0 || width > d {
            continue;
        }
        let start = rng.gen_range(0..=d - width);
        for frame in &mut frames {
            for v in &mut frame[start..start + width] {
                *v = 0.0;
            }
        }
    }

    let max_time = ((t_out as f64) * cfg.time_mask_max_frac).floor() as usize;
    for _ in 0..cfg.time_masks {
        if max_time == 0 {
            break;
        }
        let width = rng.gen_range(0..=max_time);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=t_out - width);
        for frame in &mut frames[start..start + width] {
            frame.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    AudioFeatures {
        frames,
        frame_shift_ms: feats.frame_shift_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn toy(t: usize, d: usize) -> AudioFeatures {
        AudioFeatures {
            frames: (0..t)
                .map(|i| (0..d).map(|j| (i * d + j) as f32 + 1.0).collect())
                .collect(),
            frame_shift_ms: 10,
        }
    }

    #[test]
    fn identity_config_is_identity() {
        let f = toy(12, 4);
        let mut rng = rng_for(0, &[1]);
        let out = augment(&f, &AugmentConfig::identity(), &mut rng);
        assert_eq!(out.frames, f.frames);
    }

    #[test]
    fn speed_resampling_length() {
        let f = toy(100, 2);
        let cfg = AugmentConfig {
            speed_factors: vec![0.9],
            ..AugmentConfig::identity()
        };
        let mut rng = rng_for(0, &[2]);
        let out = augment(&f, &cfg, &mut rng);
        assert_eq!(out.len(), (100.0f64 / 0.9).round() as usize);
    }

    #[test]
    fn masked_bands_are_exact_zero() {
        let f = toy(50, 8);
        let cfg = AugmentConfig {
            freq_masks: 2,
            freq_mask_width: 3,
            time_masks: 4,
            time_mask_max_frac: 0.1,
            speed_factors: vec![1.0],
            noise_sigma: 0.0,
        };
        let mut rng = rng_for(5, &[3]);
        let out = augment(&f, &cfg, &mut rng);
        // Every entry either survived untouched or was zeroed by a band mask.
        let zeros = out
            .frames
            .iter()
            .flatten()
            .filter(|&&v| v == 0.0)
            .count();
        assert!(zeros > 0);
        for (i, frame) in out.frames.iter().enumerate() {
            for (j, &v) in frame.iter().enumerate() {
                assert!(v == 0.0 || v == f.frames[i][j]);
            }
        }
    }
}
