//! ViT image encoder with windowed/global attention blocks and two bottleneck
//! adapters per block.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! y1  = x  + Attn(LN(x))
//! y2  = adapter_1(y1)
//! y3  = y2 + MLP(LN(y2))
//! out = adapter_2(y3)
//! ```
//!
//! Adapters compute `x + s·Up(act(Down(x)))`. With a zero-initialised up
//! projection they are exact identities, so a freshly adapted encoder
//! reproduces its base encoder bit for bit.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::cbam::CbamHooks;
use crate::error::{Error, Result};
use crate::nn::{attention, Activation, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamBuilder, ParamTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub global_blocks: Vec<usize>,
    pub mlp_ratio: f64,
    /// Output dimension of the neck (the decoder embedding dim).
    pub neck_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// CPU-trainable default: 16 blocks, 12 windowed and 4 global.
    pub fn desk() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            in_chans: 3,
            embed_dim: 192,
            depth: 16,
            num_heads: 6,
            window_size: 8,
            global_blocks: vec![3, 7, 11, 15],
            mlp_ratio: 4.0,
            neck_dim: 128,
        }
    }

    /// ViT-B sized layout used for parameter accounting.
    pub fn sam_vit_b_like() -> Self {
        Self {
            image_size: 1024,
            patch_size: 16,
            in_chans: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            window_size: 14,
            global_blocks: vec![2, 5, 8, 11],
            mlp_ratio: 4.0,
            neck_dim: 256,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.in_chans == 0 || self.neck_dim == 0 {
            return bad("depth, in_chans and neck_dim must be positive".into());
        }
        if self.window_size == 0 {
            return bad("window_size must be >= 1".into());
        }
        if let Some(b) = self.global_blocks.iter().find(|&&b| b >= self.depth) {
            return bad(format!("global block index {b} outside [0, {})", self.depth));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    Dim(usize),
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpInit {
    #[default]
    Zero,
    SmallRandom,
}

impl std::str::FromStr for UpInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "small_random" | "small-random" => Ok(Self::SmallRandom),
            other => Err(Error::invalid(format!("unknown up-projection init '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: Bottleneck,
    pub activation: Activation,
    pub residual_scale: f64,
    pub up_init: UpInit,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck: Bottleneck::Ratio(0.25),
            activation: Activation::Gelu,
            residual_scale: 1.0,
            up_init: UpInit::Zero,
        }
    }
}

/// Standard deviation of a small-random up projection.
pub const SMALL_RANDOM_STD: f64 = 1e-2;

impl AdapterConfig {
    pub fn bottleneck_dim(&self, embed_dim: usize) -> usize {
        match self.bottleneck {
            Bottleneck::Dim(b) => b,
            Bottleneck::Ratio(r) => ((embed_dim as f64 * r).round() as usize).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bottleneck {
            Bottleneck::Dim(0) => return Err(Error::Config("adapter bottleneck must be >= 1".into())),
            Bottleneck::Ratio(r) if !(r.is_finite() && r > 0.0) => {
                return Err(Error::Config(format!("adapter ratio must be > 0, got {r}")))
            }
            _ => {}
        }
        if !self.residual_scale.is_finite() {
            return Err(Error::Config("adapter residual scale must be finite".into()));
        }
        Ok(())
    }

    /// Parameters in one adapter: `(d·b + b) + (b·d + d)`.
    pub fn param_count(&self, embed_dim: usize) -> usize {
        let b = self.bottleneck_dim(embed_dim);
        (embed_dim * b + b) + (b * embed_dim + embed_dim)
    }
}

/// Feature map of shape `(batch, h, w, dim)` passed between encoder blocks.
#[derive(Debug, Clone)]
pub struct TokenGrid(Tensor);

impl TokenGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape("(batch, h, w, dim)", t.dims()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `(batch, h, w, dim)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Linear,
    pos_embed: Tensor,
    patch: usize,
    image_size: usize,
    in_chans: usize,
}

impl PatchEmbed {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let fan_in = cfg.patch_size * cfg.patch_size * cfg.in_chans;
        let g = cfg.grid_side();
        Ok(Self {
            proj: Linear::new(&pb.pp("proj"), fan_in, cfg.embed_dim)?,
            pos_embed: pb.param("pos_embed", &[1, g, g, cfg.embed_dim], Init::Normal(0.02))?,
            patch: cfg.patch_size,
            image_size: cfg.image_size,
            in_chans: cfg.in_chans,
        })
    }

    /// `(B, H, W, C)` image → `(B, H/p, W/p, d)` tokens.
    pub fn forward(&self, img: &Tensor) -> Result<TokenGrid> {
        let (b, h, w, c) = img.dims4()?;
        if h != self.image_size || w != self.image_size || c != self.in_chans {
            return Err(Error::invalid(format!(
                "patch embed expects {0}x{0}x{1} input, got {h}x{w}x{c}",
                self.image_size, self.in_chans
            )));
        }
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let patches = img
            .reshape((b, gh, p, gw, p, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, gh, gw, p * p * c))?;
        let tokens = self.proj.forward(&patches)?.broadcast_add(&self.pos_embed)?;
        TokenGrid::new(tokens)
    }
}

#[derive(Debug, Clone)]
pub struct Adapter {
    down: Linear,
    up: Linear,
    act: Activation,
    scale: f64,
}

impl Adapter {
    pub fn new(pb: &ParamBuilder, dim: usize, cfg: &AdapterConfig) -> Result<Self> {
        let b = cfg.bottleneck_dim(dim);
        let up_init = match cfg.up_init {
            UpInit::Zero => Init::Zeros,
            UpInit::SmallRandom => Init::Normal(SMALL_RANDOM_STD),
        };
        Ok(Self {
            down: Linear::new(&pb.pp("down"), dim, b)?,
            up: Linear::with_init(&pb.pp("up"), b, dim, up_init, Init::Zeros)?,
            act: cfg.activation,
            scale: cfg.residual_scale,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let delta = self.up.forward(&self.act.apply(&self.down.forward(x)?)?)?;
        Ok((x + (delta * self.scale)?)?)
    }
}

/// Geometry of a windowed partition of an `h × w` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowLayout {
    /// Pads each axis up to a multiple of `window`, splitting the padding
    /// symmetrically (extra row/column goes after).
    pub fn new(h: usize, w: usize, window: usize) -> Self {
        let ph = (window - h % window) % window;
        let pw = (window - w % window) % window;
        Self {
            h,
            w,
            window,
            pad_top: ph / 2,
            pad_left: pw / 2,
            padded_h: h + ph,
            padded_w: w + pw,
        }
    }

    pub fn is_padded(&self) -> bool {
        self.padded_h != self.h || self.padded_w != self.w
    }

    pub fn num_windows(&self) -> usize {
        (self.padded_h / self.window) * (self.padded_w / self.window)
    }

    /// Additive attention bias `(batch·num_windows, 1, 1, window²)` that hides
    /// padded key tokens, or `None` when nothing was padded.
    pub fn key_bias(&self, batch: usize, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
        if !self.is_padded() {
            return Ok(None);
        }
        let ws = self.window;
        let (nh, nw) = (self.padded_h / ws, self.padded_w / ws);
        let mut bias = Vec::with_capacity(batch * nh * nw * ws * ws);
        for _ in 0..batch {
            for wy in 0..nh {
                for wx in 0..nw {
                    for iy in 0..ws {
                        for ix in 0..ws {
                            let y = wy * ws + iy;
                            let x = wx * ws + ix;
                            let valid = (self.pad_top..self.pad_top + self.h).contains(&y)
                                && (self.pad_left..self.pad_left + self.w).contains(&x);
                            bias.push(if valid { 0.0 } else { -1e9 });
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(bias, (batch * nh * nw, 1, 1, ws * ws), device)?.to_dtype(dtype)?;
        Ok(Some(t))
    }
}

/// `(B, H, W, C)` → `(B·nW, ws, ws, C)` after symmetric zero padding.
pub fn window_partition(x: &Tensor, window: usize) -> Result<(Tensor, WindowLayout)> {
    let (b, h, w, c) = x.dims4()?;
    let layout = WindowLayout::new(h, w, window);
    let mut x = x.clone();
    if layout.padded_h != h {
        x = x.pad_with_zeros(1, layout.pad_top, layout.padded_h - h - layout.pad_top)?;
    }
    if layout.padded_w != w {
        x = x.pad_with_zeros(2, layout.pad_left, layout.padded_w - w - layout.pad_left)?;
    }
    let (nh, nw) = (layout.padded_h / window, layout.padded_w / window);
    let windows = x
        .reshape((b, nh, window, nw, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * nh * nw, window, window, c))?;
    Ok((windows, layout))
}

/// Inverse of [`window_partition`].
pub fn window_unpartition(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let (bn, ws, _, c) = windows.dims4()?;
    let (nh, nw) = (layout.padded_h / ws, layout.padded_w / ws);
    let b = bn / (nh * nw);
    let x = windows
        .reshape((b, nh, nw, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, layout.padded_h, layout.padded_w, c))?;
    let x = if layout.is_padded() {
        x.narrow(1, layout.pad_top, layout.h)?
            .narrow(2, layout.pad_left, layout.w)?
            .contiguous()?
    } else {
        x
    };
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    num_heads: usize,
}

impl SelfAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, num_heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim)?,
            num_heads,
        })
    }

    /// `x`: `(B, N, C)`; `bias` broadcastable to `(B, heads, N, N)`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.num_heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.num_heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let (q, k, v) = (qkv.get(0)?, qkv.get(1)?, qkv.get(2)?);
        let out = attention(&q, &k, &v, bias)?
            .transpose(1, 2)?
            .reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    adapters: Option<(Adapter, Adapter)>,
    /// `None` for global attention.
    window: Option<usize>,
}

impl Block {
    pub fn new(
        pb: &ParamBuilder,
        cfg: &EncoderConfig,
        index: usize,
        adapter: Option<&AdapterConfig>,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let adapters = match adapter {
            Some(a) => {
                let apb = pb.tagged(ParamTag::Adapter);
                Some((
                    Adapter::new(&apb.pp("adapter_attn"), d, a)?,
                    Adapter::new(&apb.pp("adapter_mlp"), d, a)?,
                ))
            }
            None => None,
        };
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), d)?,
            attn: SelfAttention::new(&pb.pp("attn"), d, cfg.num_heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), d)?,
            mlp: Mlp::new(&pb.pp("mlp"), d, cfg.mlp_dim(), Activation::Gelu)?,
            adapters,
            window: (!cfg.global_blocks.contains(&index)).then_some(cfg.window_size),
        })
    }

    pub fn is_global(&self) -> bool {
        self.window.is_none()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.is_some()
    }

    fn attend(&self, x: &Tensor, window: Option<usize>) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        match window {
            None => {
                let flat = x.reshape((b, h * w, c))?;
                Ok(self.attn.forward(&flat, None)?.reshape((b, h, w, c))?)
            }
            Some(ws) => {
                let (windows, layout) = window_partition(x, ws)?;
                let bn = windows.dim(0)?;
                let bias = layout.key_bias(b, x.dtype(), x.device())?;
                let flat = windows.reshape((bn, ws * ws, c))?;
                let out = self.attn.forward(&flat, bias.as_ref())?.reshape((bn, ws, ws, c))?;
                window_unpartition(&out, &layout)
            }
        }
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        self.forward_with(x, self.window)
    }

    /// Runs the block with an explicit attention layout, overriding its own.
    pub fn forward_with(&self, x: &TokenGrid, window: Option<usize>) -> Result<TokenGrid> {
        let x = x.tensor();
        let y1 = (x + self.attend(&self.norm1.forward(x)?, window)?)?;
        let y2 = match &self.adapters {
            Some((a, _)) => a.forward(&y1)?,
            None => y1,
        };
        let y3 = (&y2 + self.mlp.forward(&self.norm2.forward(&y2)?)?)?;
        let out = match &self.adapters {
            Some((_, a)) => a.forward(&y3)?,
            None => y3,
        };
        TokenGrid::new(out)
    }
}

#[derive(Debug, Clone)]
pub struct Neck {
    proj: Linear,
    norm: LayerNorm,
}

impl Neck {
    fn new(pb: &ParamBuilder, dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&pb.pp("proj"), dim, out)?,
            norm: LayerNorm::new(&pb.pp("norm"), out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.proj.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    patch_embed: PatchEmbed,
    blocks: Vec<Block>,
    neck: Neck,
    pub(crate) hooks: Option<CbamHooks>,
    pub(crate) cbam_bypass: bool,
}

impl ImageEncoder {
    /// Builds the base encoder (tag `base_encoder`) and, when `adapter` is
    /// given, two adapters per block (tag `adapter`).
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig, adapter: Option<&AdapterConfig>) -> Result<Self> {
        cfg.validate()?;
        if let Some(a) = adapter {
            a.validate()?;
        }
        let pb = pb.tagged(ParamTag::BaseEncoder);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&pb.pp(format!("blocks.{i}")), cfg, i, adapter))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: PatchEmbed::new(&pb.pp("patch_embed"), cfg)?,
            blocks,
            neck: Neck::new(&pb.pp("neck"), cfg.embed_dim, cfg.neck_dim)?,
            hooks: None,
            cbam_bypass: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn hooks(&self) -> Option<&CbamHooks> {
        self.hooks.as_ref()
    }

    pub fn set_cbam_bypass(&mut self, bypass: bool) {
        self.cbam_bypass = bypass;
    }

    fn active_hooks(&self) -> Option<&CbamHooks> {
        self.hooks.as_ref().filter(|_| !self.cbam_bypass)
    }

    pub fn patch_embed(&self, img: &Tensor) -> Result<TokenGrid> {
        self.patch_embed.forward(img)
    }

    /// Tokens after the last block, before the channel hook and neck.
    pub fn trunk(&self, img: &Tensor) -> Result<TokenGrid> {
        let hooks = self.active_hooks();
        let img = match hooks {
            Some(h) if h.spatial_on_pixels() => h.spatial.forward(img)?,
            _ => img.clone(),
        };
        let mut x = self.patch_embed(&img)?;
        if let Some(h) = hooks.filter(|h| !h.spatial_on_pixels()) {
            x = TokenGrid::new(h.spatial.forward(x.tensor())?)?;
        }
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// `(B, H, W, C)` image → `(B, h, w, neck_dim)` embedding.
    pub fn encode(&self, img: &Tensor) -> Result<TokenGrid> {
        let mut x = self.trunk(img)?.into_tensor();
        if let Some(h) = self.active_hooks() {
            x = h.channel.forward(&x)?;
        }
        TokenGrid::new(self.neck.forward(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;
    use proptest::prelude::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            in_chans: 3,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            window_size: 3,
            global_blocks: vec![1],
            mlp_ratio: 2.0,
            neck_dim: 8,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let pb = ParamBuilder::new(seed, DType::F64, &Device::Cpu);
        pb.param("x", shape, Init::Uniform(1.0)).unwrap().detach()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.global_blocks = vec![2];
        assert!(c.validate().is_err());
        EncoderConfig::desk().validate().unwrap();
        EncoderConfig::sam_vit_b_like().validate().unwrap();
    }

    #[test]
    fn patch_grid_side() {
        let mut cfg = tiny_cfg();
        cfg.image_size = 64;
        cfg.patch_size = 16;
        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let pe = PatchEmbed::new(&pb, &cfg).unwrap();
        let img = Tensor::zeros((1, 64, 64, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(pe.forward(&img).unwrap().dims(), (1, 4, 4, 16));
        let wrong = Tensor::zeros((1, 32, 64, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(pe.forward(&wrong).is_err());
    }

    #[test]
    fn patch_embed_param_count() {
        let cfg = tiny_cfg();
        let pb = ParamBuilder::census();
        PatchEmbed::new(&pb, &cfg).unwrap();
        let proj: usize = pb
            .entries()
            .iter()
            .filter(|(n, _, _)| n.starts_with("proj"))
            .map(|(_, _, s)| s.iter().product::<usize>())
            .sum();
        let (p, c, d) = (cfg.patch_size, cfg.in_chans, cfg.embed_dim);
        assert_eq!(proj, p * p * c * d + d);
    }

    #[test]
    fn zero_patch_embed_gives_zero_tokens() {
        let cfg = tiny_cfg();
        let pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let pe = PatchEmbed::new(&pb, &cfg).unwrap();
        let store = pb.into_store().unwrap();
        for p in store.iter() {
            store.assign(&p.name, &p.var.zeros_like().unwrap()).unwrap();
        }
        let img = Tensor::zeros((2, 32, 32, 3), DType::F64, &Device::Cpu).unwrap();
        let t = pe.forward(&img).unwrap();
        let s = t.tensor().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn zero_up_adapter_is_identity() {
        let pb = ParamBuilder::new(5, DType::F64, &Device::Cpu);
        let a = Adapter::new(&pb, 8, &AdapterConfig::default()).unwrap();
        let x = rand_tensor(&[2, 3, 3, 8], 9);
        let y = a.forward(&x).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn adapter_param_count_enumerated() {
        let cfg = AdapterConfig {
            bottleneck: Bottleneck::Dim(2),
            ..Default::default()
        };
        let pb = ParamBuilder::census();
        Adapter::new(&pb, 8, &cfg).unwrap();
        let n: usize = pb.entries().iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        assert_eq!(n, 42);
        assert_eq!(cfg.param_count(8), 42);
    }

    #[test]
    fn linear_adapter_algebra() {
        // Down = 1·I (d = b = 1), Up = 1, linear activation: out = x + s·x
        let cfg = AdapterConfig {
            bottleneck: Bottleneck::Dim(1),
            activation: Activation::Linear,
            residual_scale: 0.5,
            up_init: UpInit::Zero,
        };
        let pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let a = Adapter::new(&pb, 1, &cfg).unwrap();
        let store = pb.into_store().unwrap();
        let one = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        let zero = Tensor::new(&[0.0f64], &Device::Cpu).unwrap();
        store.assign("down.weight", &one).unwrap();
        store.assign("down.bias", &zero).unwrap();
        store.assign("up.weight", &one).unwrap();
        let x = Tensor::new(&[[[[3.0f64]]]], &Device::Cpu).unwrap();
        let y = a.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![3.0 + 0.5 * 3.0]);
    }

    #[test]
    fn single_token_window_equals_global() {
        let cfg = EncoderConfig {
            embed_dim: 12,
            num_heads: 3,
            window_size: 4,
            ..tiny_cfg()
        };
        let pb = ParamBuilder::new(3, DType::F64, &Device::Cpu);
        let block = Block::new(&pb, &cfg, 0, None).unwrap();
        let x = TokenGrid::new(rand_tensor(&[1, 1, 1, 12], 1)).unwrap();
        let w = block.forward_with(&x, Some(4)).unwrap();
        let g = block.forward_with(&x, None).unwrap();
        let diff = (w.tensor() - g.tensor())
            .unwrap()
            .abs()
            .unwrap()
            .max_keepdim(3)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn block_preserves_shape() {
        let cfg = tiny_cfg();
        let pb = ParamBuilder::new(1, DType::F32, &Device::Cpu);
        for idx in 0..2 {
            let block = Block::new(&pb.pp(format!("b{idx}")), &cfg, idx, Some(&AdapterConfig::default())).unwrap();
            let x = TokenGrid::new(Tensor::ones((2, 5, 7, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
            assert_eq!(block.forward(&x).unwrap().dims(), (2, 5, 7, 16));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn partition_round_trip(h in 1usize..11, w in 1usize..11, ws in 1usize..6, c in 1usize..4) {
            let x = rand_tensor(&[2, h, w, c], (h * 100 + w * 10 + ws) as u64);
            let (win, layout) = window_partition(&x, ws).unwrap();
            prop_assert_eq!(win.dims(), &[2 * layout.num_windows(), ws, ws, c]);
            let back = window_unpartition(&win, &layout).unwrap();
            prop_assert_eq!(
                x.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                back.flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
    }
}
