use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ModelConfig};
use crate::error::{invalid, Result};
use crate::ot_align::IpotConfig;
use crate::patching::PatchGeometry;

use super::data::{SyntheticSpec, TOKENS_PER_SENTENCE};

/// Which global contrastive loss to train with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveMode {
    Off,
    /// Plain InfoNCE (`L`).
    Plain,
    /// Integrity-weighted InfoNCE (`L*`).
    Weighted,
}

/// Per-term enable flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub contrastive: ContrastiveMode,
    pub spm: bool,
    pub mip: bool,
}

impl LossToggles {
    pub const ALL: Self = Self {
        contrastive: ContrastiveMode::Weighted,
        spm: true,
        mip: true,
    };

    pub const MIP_ONLY: Self = Self {
        contrastive: ContrastiveMode::Off,
        spm: false,
        mip: true,
    };

    /// Ablation presets: `L`, `L*`, `L+SPM`, `L*+SPM`, `L*+SPM+MIP`.
    pub fn preset(name: &str) -> Option<Self> {
        let (contrastive, spm, mip) = match name {
            "L" => (ContrastiveMode::Plain, false, false),
            "L*" => (ContrastiveMode::Weighted, false, false),
            "L+SPM" => (ContrastiveMode::Plain, true, false),
            "L*+SPM" => (ContrastiveMode::Weighted, true, false),
            "L*+SPM+MIP" => (ContrastiveMode::Weighted, true, true),
            _ => return None,
        };
        Some(Self { contrastive, spm, mip })
    }

    pub const PRESETS: [&'static str; 5] = ["L", "L*", "L+SPM", "L*+SPM", "L*+SPM+MIP"];

    /// Enable flags for (v2t, t2v, spm, mip).
    pub fn enabled(&self) -> [bool; 4] {
        let c = self.contrastive != ContrastiveMode::Off;
        [c, c, self.spm, self.mip]
    }
}

/// Synthetic data used by `pretrain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub num_concepts: usize,
    pub concepts_per_pair: usize,
    pub noise: f64,
    #[serde(default)]
    pub world_seed: u64,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub decoder_depth: usize,
    pub num_patches: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Weights of (v2t, t2v, spm, mip).
    pub lambdas: [f64; 4],
    pub beta: f64,
    pub ot_iters: usize,
    pub seed: u64,
    pub losses: LossToggles,
    pub data: DataConfig,
}

impl TrainConfig {
    /// Single-core configuration: N=32, D=64, P=16, 2000 training pairs.
    /// Uses τ = 0.1; at τ = 0.4 the toy task reaches only ~0.65 top-1 in 10 epochs.
    /// β = 0.1 sharpens the training plans; at 0.5 local alignment stays at chance.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            decoder_depth: 1,
            num_patches: 16,
            patch_size: 4,
            mask_ratio: 0.5,
            batch_size: 32,
            tau: 0.1,
            lr: 1e-3,
            epochs: 10,
            lambdas: [1.0; 4],
            beta: 0.1,
            ot_iters: 50,
            seed: 0,
            losses: LossToggles::ALL,
            data: DataConfig {
                train_pairs: 2000,
                eval_pairs: 128,
                num_concepts: 16,
                concepts_per_pair: 3,
                noise: 0.1,
                world_seed: 0,
            },
        }
    }

    /// Large-batch hyperparameters (N=256, τ=0.4, lr 1.5e-4) on the
    /// synthetic task. Far too slow for one core; kept for reference.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 256,
            tau: 0.4,
            lr: 1.5e-4,
            beta: 0.5,
            ..Self::desk()
        }
    }

    /// Smallest configuration with every term active, for gradient checks.
    pub fn micro() -> Self {
        Self {
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            decoder_depth: 1,
            num_patches: 4,
            patch_size: 2,
            mask_ratio: 0.5,
            batch_size: 2,
            tau: 0.4,
            lr: 1e-3,
            epochs: 1,
            lambdas: [1.0; 4],
            beta: 0.5,
            ot_iters: 50,
            seed: 0,
            losses: LossToggles::ALL,
            data: DataConfig {
                train_pairs: 2,
                eval_pairs: 2,
                num_concepts: 3,
                concepts_per_pair: 2,
                noise: 0.1,
                world_seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid("dim must be a positive multiple of heads"));
        }
        if self.depth == 0 || self.decoder_depth == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(invalid(
                "depth, decoder_depth, batch_size and patch_size must be positive",
            ));
        }
        self.grid_side()?;
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(invalid(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.mlp_ratio > 0.0) || !(self.beta > 0.0) {
            return Err(invalid("mlp_ratio and beta must be positive"));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(invalid("lambdas must be finite and non-negative"));
        }
        if self.losses.spm && self.ot_iters == 0 {
            return Err(invalid("ot_iters must be positive when SPM is enabled"));
        }
        self.train_spec().validate()
    }

    fn grid_side(&self) -> Result<usize> {
        let side = (self.num_patches as f64).sqrt().round() as usize;
        if side == 0 || side * side != self.num_patches || !side.is_multiple_of(2) {
            return Err(invalid(format!(
                "num_patches {} must be the square of an even number",
                self.num_patches
            )));
        }
        Ok(side)
    }

    pub fn geometry(&self) -> PatchGeometry {
        let side = self.grid_side().expect("validated config");
        PatchGeometry {
            patch_size: self.patch_size,
            grid_h: side,
            grid_w: side,
            channels: 1,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.train_spec().vocab_size()
    }

    pub fn model_config(&self) -> ModelConfig {
        let geometry = self.geometry();
        let p = geometry.num_patches();
        let enc = |depth, vocab_size, max_positions| EncoderConfig {
            depth,
            heads: self.heads,
            dim: self.dim,
            mlp_ratio: self.mlp_ratio,
            vocab_size,
            max_positions,
        };
        ModelConfig {
            geometry,
            image: enc(self.depth, 1, p),
            text: enc(
                self.depth,
                self.vocab_size(),
                TOKENS_PER_SENTENCE * self.data.concepts_per_pair,
            ),
            decoder: enc(self.decoder_depth, 1, p),
        }
    }

    pub fn ipot(&self) -> IpotConfig {
        IpotConfig {
            beta: self.beta,
            outer_iters: self.ot_iters,
            ..IpotConfig::default()
        }
    }

    /// Training pairs are generated from `seed`.
    pub fn train_spec(&self) -> SyntheticSpec {
        self.data_spec(self.seed, self.data.train_pairs)
    }

    /// Held-out pairs come from `seed + 1` with the same concept world.
    pub fn eval_spec(&self) -> SyntheticSpec {
        self.data_spec(self.seed.wrapping_add(1), self.data.eval_pairs)
    }

    /// Generator settings for `num_pairs` pairs from `seed` in this config's concept world.
    pub fn data_spec(&self, seed: u64, num_pairs: usize) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            world_seed: self.data.world_seed,
            num_pairs,
            num_concepts: self.data.num_concepts,
            concepts_per_pair: self.data.concepts_per_pair,
            noise: self.data.noise,
            grid_side: self.grid_side().unwrap_or(2),
            patch_size: self.patch_size,
        }
    }

    /// Learning rate during epoch `e` (0-based): `lr·(1 − 0.9·e/epochs)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.lr;
        }
        self.lr * (1.0 - epoch as f64 / self.epochs as f64 * 0.9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::desk().validate().unwrap();
        TrainConfig::full_scale().validate().unwrap();
        TrainConfig::micro().validate().unwrap();
        let p = TrainConfig::full_scale();
        assert_eq!(
            (p.mask_ratio, p.batch_size, p.tau, p.lr, p.epochs),
            (0.5, 256, 0.4, 1.5e-4, 10)
        );
        assert_eq!(p.lambdas, [1.0; 4]);
    }

    #[test]
    fn lr_schedule_is_exact() {
        let c = TrainConfig {
            lr: 2e-3,
            epochs: 10,
            ..TrainConfig::desk()
        };
        for e in 0..10 {
            assert_eq!(c.lr_at(e), 2e-3 * (1.0 - e as f64 / 10.0 * 0.9));
        }
        assert_eq!(c.lr_at(0), 2e-3);
        assert!((c.lr_at(10) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            TrainConfig {
                mask_ratio: 1.5,
                ..TrainConfig::micro()
            },
            TrainConfig {
                tau: 0.0,
                ..TrainConfig::micro()
            },
            TrainConfig {
                lr: -1.0,
                ..TrainConfig::micro()
            },
            TrainConfig {
                num_patches: 9,
                ..TrainConfig::micro()
            },
            TrainConfig {
                heads: 3,
                ..TrainConfig::micro()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::micro()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let mut v = serde_json::to_value(TrainConfig::desk()).unwrap();
        let back: TrainConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, TrainConfig::desk());
        v["warmup"] = serde_json::json!(3);
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
    }

    #[test]
    fn ablation_presets() {
        for name in LossToggles::PRESETS {
            assert!(LossToggles::preset(name).is_some());
        }
        assert_eq!(LossToggles::preset("L*+SPM+MIP"), Some(LossToggles::ALL));
        assert_eq!(LossToggles::preset("SPM"), None);
        assert_eq!(LossToggles::MIP_ONLY.enabled(), [false, false, false, true]);
    }
}
