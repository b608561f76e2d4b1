//! Flat TOML run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cbam::CbamConfig;
use crate::data::{Contrast, PipelineConfig, SyntheticConfig};
use crate::decoder::DecoderConfig;
use crate::encoder::{AdapterConfig, Bottleneck, EncoderConfig, UpInit};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::nn::Activation;
use crate::optim::AdamConfig;
use crate::peft::Mode;
use crate::polar::{Interpolation, PolarGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,

    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub global_blocks: Vec<usize>,
    pub mlp_ratio: f64,

    pub use_adapter: bool,
    pub adapter_ratio: f64,
    pub adapter_activation: Activation,
    pub adapter_scale: f64,
    pub adapter_up_init: UpInit,

    pub use_cbam: bool,
    pub cbam_kernel: usize,
    pub cbam_reduction: usize,
    pub cbam_on_pixels: bool,

    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,

    pub use_polar: bool,
    pub polar_radii: usize,
    pub polar_angles: usize,
    pub interpolation: Interpolation,
    pub margin: f64,

    pub w_disc: f64,
    pub w_cup: f64,
    pub w_contain: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_ratio: f64,

    pub synth_count: usize,
    pub synth_contrast: Contrast,
    pub synth_noise: f64,
    pub synth_vessels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-scale defaults: batch 8, 40 epochs, 256-pixel inputs.
    pub fn desk() -> Self {
        let enc = EncoderConfig::desk();
        let dec = DecoderConfig::default();
        let grid = PolarGrid::default();
        let w = LossWeights::default();
        let syn = SyntheticConfig::default();
        Self {
            seed: 0,
            mode: Mode::Scratch,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            embed_dim: enc.embed_dim,
            depth: enc.depth,
            num_heads: enc.num_heads,
            window_size: enc.window_size,
            global_blocks: enc.global_blocks,
            mlp_ratio: enc.mlp_ratio,
            use_adapter: true,
            adapter_ratio: 0.25,
            adapter_activation: Activation::Gelu,
            adapter_scale: 1.0,
            adapter_up_init: UpInit::Zero,
            use_cbam: true,
            cbam_kernel: 7,
            cbam_reduction: 16,
            cbam_on_pixels: false,
            decoder_dim: dec.dim,
            decoder_depth: dec.depth,
            decoder_heads: dec.num_heads,
            decoder_mlp_dim: dec.mlp_dim,
            use_polar: true,
            polar_radii: grid.num_radii,
            polar_angles: grid.num_angles,
            interpolation: grid.interpolation,
            margin: 1.5,
            w_disc: w.disc,
            w_cup: w.cup,
            w_contain: w.contain,
            lr: 1e-4,
            batch_size: 8,
            epochs: 40,
            train_ratio: 0.8,
            synth_count: 64,
            synth_contrast: syn.contrast,
            synth_noise: syn.noise_sigma,
            synth_vessels: syn.vessel_count,
        }
    }

    /// Training protocol of the original GPU setup: batch 32, 150 epochs,
    /// PEFT on a ViT-B sized encoder with 48-wide adapters.
    pub fn paper() -> Self {
        let enc = EncoderConfig::sam_vit_b_like();
        Self {
            mode: Mode::Peft,
            adapter_ratio: 0.0625,
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            embed_dim: enc.embed_dim,
            depth: enc.depth,
            num_heads: enc.num_heads,
            window_size: enc.window_size,
            global_blocks: enc.global_blocks,
            mlp_ratio: enc.mlp_ratio,
            decoder_dim: 256,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            batch_size: 32,
            epochs: 150,
            synth_count: 1200,
            ..Self::desk()
        }
    }

    /// Desk schedule (256-pixel inputs, batch 8, 40 epochs) on a 4-block
    /// encoder, fast enough to train in minutes on one CPU core.
    pub fn quick() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 96,
            depth: 4,
            num_heads: 4,
            window_size: 4,
            global_blocks: vec![1, 3],
            decoder_dim: 64,
            decoder_heads: 4,
            decoder_mlp_dim: 128,
            cbam_reduction: 16,
            polar_radii: 256,
            polar_angles: 256,
            ..Self::desk()
        }
    }

    /// Minimal model for smoke tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            window_size: 2,
            global_blocks: vec![1],
            mlp_ratio: 2.0,
            cbam_reduction: 4,
            decoder_dim: 16,
            decoder_heads: 2,
            decoder_mlp_dim: 32,
            polar_radii: 64,
            polar_angles: 64,
            lr: 1e-3,
            batch_size: 4,
            epochs: 2,
            synth_count: 10,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "quick" => Ok(Self::quick()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected desk, paper, quick or tiny)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                in_chans: 3,
                embed_dim: self.embed_dim,
                depth: self.depth,
                num_heads: self.num_heads,
                window_size: self.window_size,
                global_blocks: self.global_blocks.clone(),
                mlp_ratio: self.mlp_ratio,
                neck_dim: self.decoder_dim,
            },
            adapter: self.use_adapter.then_some(AdapterConfig {
                bottleneck: Bottleneck::Ratio(self.adapter_ratio),
                activation: self.adapter_activation,
                residual_scale: self.adapter_scale,
                up_init: self.adapter_up_init,
            }),
            cbam: self.use_cbam.then_some(CbamConfig {
                kernel: self.cbam_kernel,
                reduction: self.cbam_reduction,
                spatial_on_pixels: self.cbam_on_pixels,
            }),
            decoder: DecoderConfig {
                dim: self.decoder_dim,
                depth: self.decoder_depth,
                num_heads: self.decoder_heads,
                mlp_dim: self.decoder_mlp_dim,
                downsample: 2,
            },
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            grid: PolarGrid {
                num_radii: self.polar_radii,
                num_angles: self.polar_angles,
                interpolation: self.interpolation,
            },
            margin: self.margin,
            input_size: self.image_size,
            use_polar: self.use_polar,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            disc: self.w_disc,
            cup: self.w_cup,
            contain: self.w_contain,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let s = self.image_size.max(64) as f64;
        SyntheticConfig {
            image_size: self.image_size.max(64),
            disc_axis_range: (0.1875 * s, 0.234375 * s),
            contrast: self.synth_contrast,
            noise_sigma: self.synth_noise,
            vessel_count: self.synth_vessels,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.adam().validate()?;
        PolarGrid::new(self.polar_radii, self.polar_angles, self.interpolation)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio)));
        }
        if !(self.adapter_ratio.is_finite() && self.adapter_ratio > 0.0) {
            return Err(Error::Config("adapter_ratio must be > 0".into()));
        }
        self.synthetic().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "paper", "quick", "tiny"] {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("huge").is_err());
        let p = RunConfig::paper();
        assert_eq!((p.batch_size, p.epochs, p.lr), (32, 150, 1e-4));
        let d = RunConfig::desk();
        assert_eq!((d.batch_size, d.epochs, d.image_size), (8, 40, 256));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::tiny();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("learning_rate = 0.1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("w_disc = 1.5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("mode = \"lora\""), Err(Error::Config(_))));
        let partial = RunConfig::from_toml("epochs = 3\nseed = 9").unwrap();
        assert_eq!((partial.epochs, partial.seed, partial.batch_size), (3, 9, 8));
    }
}
