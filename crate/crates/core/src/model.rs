//! Full segmentation model: encoder (with optional adapters and CBAM),
//! point-prompt encoder and two-channel mask decoder.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::cbam::{install_hooks, CbamConfig, GateMode};
use crate::decoder::{decoder_builders, DecoderConfig, MaskDecoder, PointPrompt, PromptEncoder};
use crate::encoder::{AdapterConfig, EncoderConfig, ImageEncoder};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore, ParamTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
    pub cbam: Option<CbamConfig>,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            adapter: Some(AdapterConfig::default()),
            cbam: Some(CbamConfig::default()),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        if let Some(c) = &self.cbam {
            c.validate()?;
        }
        self.decoder.validate()?;
        if self.encoder.neck_dim != self.decoder.dim {
            return Err(Error::Config(format!(
                "encoder neck_dim {} must equal decoder dim {}",
                self.encoder.neck_dim, self.decoder.dim
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.encoder.image_size
    }
}

pub struct SegModel {
    cfg: ModelConfig,
    encoder: ImageEncoder,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
    store: ParamStore,
}

fn build(cfg: &ModelConfig, pb: &ParamBuilder) -> Result<(ImageEncoder, PromptEncoder, MaskDecoder)> {
    cfg.validate()?;
    let mut encoder = ImageEncoder::new(&pb.pp("encoder"), &cfg.encoder, cfg.adapter.as_ref())?;
    if let Some(c) = &cfg.cbam {
        install_hooks(&mut encoder, c, &pb.pp("cbam"))?;
    }
    let (ppb, dpb) = decoder_builders(pb);
    let side = cfg.encoder.image_size;
    let prompt = PromptEncoder::new(&ppb, cfg.decoder.dim, side, side)?;
    let decoder = MaskDecoder::new(&dpb, &cfg.decoder)?;
    Ok((encoder, prompt, decoder))
}

impl SegModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let pb = ParamBuilder::new(seed, dtype, device);
        let (encoder, prompt, decoder) = build(cfg, &pb)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            prompt,
            decoder,
            store: pb.into_store()?,
        })
    }

    /// Parameter names, tags and shapes of `cfg` without allocating weights.
    pub fn census(cfg: &ModelConfig) -> Result<Vec<(String, ParamTag, Vec<usize>)>> {
        let pb = ParamBuilder::census();
        build(cfg, &pb)?;
        Ok(pb.entries())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn set_cbam_bypass(&mut self, bypass: bool) {
        self.encoder.set_cbam_bypass(bypass);
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        if let Some(h) = self.encoder.hooks.as_mut() {
            h.set_mode(mode);
        }
    }

    /// Image embedding `(B, h, w, dim)` for images `(B, S, S, C)`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.encode(images)?.into_tensor())
    }

    /// Logits `(B, 2, S, S)`; channel 0 is the disc, channel 1 the cup.
    pub fn forward(&self, images: &Tensor, prompts: &[PointPrompt]) -> Result<Tensor> {
        let b = images.dim(0)?;
        if prompts.len() != b {
            return Err(Error::invalid(format!(
                "{} prompts for a batch of {b}",
                prompts.len()
            )));
        }
        let emb = self.embed(images)?;
        let (_, h, w, _) = emb.dims4()?;
        let sparse = self.prompt.encode_points(prompts)?;
        let pe = self.prompt.dense_pe(h, w)?;
        let side = self.cfg.encoder.image_size;
        self.decoder
            .forward(&emb, &pe, &sparse, self.prompt.no_mask_embed(), side, side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::PointLabel;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 32,
                patch_size: 8,
                in_chans: 3,
                embed_dim: 16,
                depth: 2,
                num_heads: 2,
                window_size: 2,
                global_blocks: vec![1],
                mlp_ratio: 2.0,
                neck_dim: 16,
            },
            adapter: Some(AdapterConfig::default()),
            cbam: Some(CbamConfig {
                reduction: 4,
                ..Default::default()
            }),
            decoder: DecoderConfig {
                dim: 16,
                depth: 2,
                num_heads: 2,
                mlp_dim: 32,
                downsample: 2,
            },
        }
    }

    #[test]
    fn census_matches_allocated_model() {
        let cfg = tiny();
        let m = SegModel::new(&cfg, 1, DType::F32, &Device::Cpu).unwrap();
        let allocated: Vec<_> = m
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tag, p.var.dims().to_vec()))
            .collect();
        assert_eq!(SegModel::census(&cfg).unwrap(), allocated);
    }

    #[test]
    fn forward_shape() {
        let m = SegModel::new(&tiny(), 1, DType::F32, &Device::Cpu).unwrap();
        let img = Tensor::zeros((2, 32, 32, 3), DType::F32, &Device::Cpu).unwrap();
        let p = PointPrompt {
            x: 5.0,
            y: 5.0,
            label: PointLabel::Foreground,
        };
        assert_eq!(m.forward(&img, &[p, p]).unwrap().dims(), &[2, 2, 32, 32]);
        assert!(m.forward(&img, &[p]).is_err());
    }

    #[test]
    fn mismatched_decoder_dim_rejected() {
        let mut cfg = tiny();
        cfg.decoder.dim = 32;
        cfg.decoder.mlp_dim = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
