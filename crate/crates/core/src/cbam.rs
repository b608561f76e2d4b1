//! Convolutional block attention split across the encoder: the spatial gate
//! runs on the patch-embedded grid before the first block, the channel gate
//! on the last block's output before the neck.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::loss::sigmoid_tensor;
use crate::nn::Linear;
use crate::params::{Init, ParamBuilder, ParamTag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbamConfig {
    /// Odd spatial kernel size, at least 3.
    pub kernel: usize,
    pub reduction: usize,
    /// Apply the spatial gate to raw pixels instead of embedded tokens.
    pub spatial_on_pixels: bool,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self {
            kernel: 7,
            reduction: 16,
            spatial_on_pixels: false,
        }
    }
}

impl CbamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial kernel must be odd and >= 3, got {}",
                self.kernel
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("channel reduction ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self, channels: usize) -> usize {
        (channels / self.reduction).max(1)
    }
}

/// Normal gating, or gates pinned open (pre-activations clamped high enough
/// that the sigmoid rounds to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    ForcedOpen,
}

const FORCED_OPEN_LOGIT: f64 = 80.0;

fn gate(pre: &Tensor, mode: GateMode) -> Result<Tensor> {
    let pre = match mode {
        GateMode::Learned => pre.clone(),
        GateMode::ForcedOpen => pre.clamp(FORCED_OPEN_LOGIT, f64::MAX)?,
    };
    Ok(sigmoid_tensor(&pre)?)
}

#[derive(Debug, Clone)]
pub struct SpatialAttention {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    mode: GateMode,
}

impl SpatialAttention {
    pub fn new(pb: &ParamBuilder, kernel: usize) -> Result<Self> {
        let fan_in = 2 * kernel * kernel;
        Ok(Self {
            weight: pb.param("weight", &[1, 2, kernel, kernel], Init::fan_in(fan_in))?,
            bias: pb.param("bias", &[1], Init::fan_in(fan_in))?,
            kernel,
            mode: GateMode::Learned,
        })
    }

    pub fn set_mode(&mut self, mode: GateMode) {
        self.mode = mode;
    }

    /// Spatial gate `(B, H, W, 1)` for a channels-last map `(B, H, W, C)`.
    pub fn gate(&self, f: &Tensor) -> Result<Tensor> {
        let max = f.max_keepdim(D::Minus1)?;
        let mean = f.mean_keepdim(D::Minus1)?;
        let pooled = Tensor::cat(&[&max, &mean], 3)?.permute((0, 3, 1, 2))?.contiguous()?;
        let conv = pooled
            .conv2d(&self.weight, self.kernel / 2, 1, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, 1, 1, 1))?)?;
        gate(&conv.permute((0, 2, 3, 1))?, self.mode)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        Ok(f.broadcast_mul(&self.gate(f)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    mode: GateMode,
}

impl ChannelAttention {
    pub fn new(pb: &ParamBuilder, channels: usize, cfg: &CbamConfig) -> Result<Self> {
        let hidden = cfg.hidden_dim(channels);
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), channels, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, channels)?,
            mode: GateMode::Learned,
        })
    }

    pub fn set_mode(&mut self, mode: GateMode) {
        self.mode = mode;
    }

    fn shared_mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.relu()?)
    }

    /// Per-channel weights `(B, 1, 1, C)` for a map `(B, H, W, C)`.
    pub fn weights(&self, f: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = f.dims4()?;
        let flat = f.reshape((b, h * w, c))?;
        let avg = flat.mean(1)?;
        let max = flat.max(1)?;
        let pre = (self.shared_mlp(&avg)? + self.shared_mlp(&max)?)?;
        Ok(gate(&pre, self.mode)?.reshape((b, 1, 1, c))?)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        Ok(f.broadcast_mul(&self.weights(f)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct CbamHooks {
    pub spatial: SpatialAttention,
    pub channel: ChannelAttention,
    cfg: CbamConfig,
}

impl CbamHooks {
    pub fn spatial_on_pixels(&self) -> bool {
        self.cfg.spatial_on_pixels
    }

    pub fn config(&self) -> &CbamConfig {
        &self.cfg
    }

    pub fn set_mode(&mut self, mode: GateMode) {
        self.spatial.set_mode(mode);
        self.channel.set_mode(mode);
    }
}

/// Adds the spatial gate in front of the encoder blocks and the channel gate
/// after them. Parameters are registered under `pb` with tag `cbam`.
pub fn install_hooks(encoder: &mut ImageEncoder, cfg: &CbamConfig, pb: &ParamBuilder) -> Result<()> {
    if encoder.hooks.is_some() {
        return Err(Error::InvalidState("CBAM hooks already installed".into()));
    }
    cfg.validate()?;
    let pb = pb.tagged(ParamTag::Cbam);
    let ecfg = encoder.config();
    encoder.hooks = Some(CbamHooks {
        spatial: SpatialAttention::new(&pb.pp("spatial"), cfg.kernel)?,
        channel: ChannelAttention::new(&pb.pp("channel"), ecfg.embed_dim, cfg)?,
        cfg: *cfg,
    });
    Ok(())
}
