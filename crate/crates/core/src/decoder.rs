//! Point-prompt encoder and a two-way attention mask decoder emitting two
//! mask channels (disc, cup) from two learned output tokens.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, resize_bilinear_tensor, Activation, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamBuilder, ParamTag};
use crate::raster::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Background,
    Foreground,
}

impl PointLabel {
    fn index(&self) -> usize {
        match self {
            PointLabel::Background => 0,
            PointLabel::Foreground => 1,
        }
    }
}

/// A click in input-image pixel coordinates (`x` = column, `y` = row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

/// Uniformly random foreground pixel of `mask`, labelled foreground.
pub fn sample_point_prompt(mask: &Mask, rng: &mut impl Rng) -> Result<PointPrompt> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask("cannot sample a prompt from an empty mask".into()));
    }
    let k = rng.gen_range(0..n);
    let (row, col) = mask.foreground().nth(k).expect("k < count");
    Ok(PointPrompt {
        x: col as f64,
        y: row as f64,
        label: PointLabel::Foreground,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Internal width divisor of the cross-attention layers.
    pub downsample: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 2,
            num_heads: 4,
            mlp_dim: 256,
            downsample: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let internal = self.dim / self.downsample.max(1);
        if self.dim == 0 || self.num_heads == 0 || self.downsample == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        if self.dim % self.num_heads != 0 || internal % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} (and dim/downsample) must be divisible by heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.dim % 8 != 0 {
            return Err(Error::Config(format!("decoder dim {} must be a multiple of 8", self.dim)));
        }
        Ok(())
    }
}

/// Seed of the fixed Gaussian frequency matrix used for positional features.
const PE_SEED: u64 = 0x5eed_f00d;

/// Encodes point prompts and dense positional features.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    /// `(2, dim/2)` random Fourier frequencies; fixed, not trained.
    gaussian: Tensor,
    label_embed: Tensor,
    no_mask_embed: Tensor,
    input_h: usize,
    input_w: usize,
    dim: usize,
}

impl PromptEncoder {
    pub fn new(pb: &ParamBuilder, dim: usize, input_h: usize, input_w: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(PE_SEED);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let g: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let gaussian = Tensor::from_vec(g, (2, dim / 2), &pb.device())?.to_dtype(pb.dtype())?;
        Ok(Self {
            gaussian,
            label_embed: pb.param("label_embed", &[2, dim], Init::Normal(1.0))?,
            no_mask_embed: pb.param("no_mask_embed", &[dim], Init::Normal(1.0))?,
            input_h,
            input_w,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fourier features of coordinates already normalised to `[0, 1]`; `(N, 2)` → `(N, dim)`.
    fn fourier(&self, coords: &Tensor) -> Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let proj = (c.matmul(&self.gaussian)? * std::f64::consts::TAU)?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    fn check_point(&self, p: &PointPrompt) -> Result<()> {
        let ok = p.x.is_finite()
            && p.y.is_finite()
            && p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.input_w - 1) as f64
            && p.y <= (self.input_h - 1) as f64;
        if !ok {
            return Err(Error::invalid(format!(
                "prompt ({}, {}) outside {}x{} input",
                p.x, p.y, self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Sparse embeddings `(B, 1, dim)` for one prompt per sample.
    pub fn encode_points(&self, prompts: &[PointPrompt]) -> Result<Tensor> {
        let mut coords = Vec::with_capacity(prompts.len() * 2);
        let mut labels = Vec::with_capacity(prompts.len());
        for p in prompts {
            self.check_point(p)?;
            coords.push((p.x + 0.5) / self.input_w as f64);
            coords.push((p.y + 0.5) / self.input_h as f64);
            labels.push(p.label.index() as u32);
        }
        let dev = self.gaussian.device();
        let coords = Tensor::from_vec(coords, (prompts.len(), 2), dev)?.to_dtype(self.gaussian.dtype())?;
        let labels = Tensor::from_vec(labels, prompts.len(), dev)?;
        let pe = self.fourier(&coords)?;
        let lab = self.label_embed.index_select(&labels, 0)?;
        Ok((pe + lab)?.unsqueeze(1)?)
    }

    /// Single-prompt embedding `(1, dim)`.
    pub fn encode_prompt(&self, p: &PointPrompt) -> Result<Tensor> {
        Ok(self.encode_points(std::slice::from_ref(p))?.squeeze(0)?)
    }

    pub fn label_embedding(&self, label: PointLabel) -> Result<Tensor> {
        Ok(self.label_embed.get(label.index())?)
    }

    /// Positional features for an `h × w` token grid, `(h, w, dim)`.
    pub fn dense_pe(&self, h: usize, w: usize) -> Result<Tensor> {
        let mut coords = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                coords.push((j as f64 + 0.5) / w as f64);
                coords.push((i as f64 + 0.5) / h as f64);
            }
        }
        let dev = self.gaussian.device();
        let coords = Tensor::from_vec(coords, (h * w, 2), dev)?.to_dtype(self.gaussian.dtype())?;
        Ok(self.fourier(&coords)?.reshape((h, w, self.dim))?)
    }

    pub fn no_mask_embed(&self) -> &Tensor {
        &self.no_mask_embed
    }
}

#[derive(Debug, Clone)]
struct DecoderAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl DecoderAttention {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let internal = dim / downsample;
        Ok(Self {
            q: Linear::new(&pb.pp("q"), dim, internal)?,
            k: Linear::new(&pb.pp("k"), dim, internal)?,
            v: Linear::new(&pb.pp("v"), dim, internal)?,
            out: Linear::new(&pb.pp("out"), internal, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?)
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.split(&self.q.forward(q)?)?;
        let k = self.split(&self.k.forward(k)?)?;
        let v = self.split(&self.v.forward(v)?)?;
        let o = attention(&q, &k, &v, None)?;
        let (b, h, n, hd) = o.dims4()?;
        self.out.forward(&o.transpose(1, 2)?.reshape((b, n, h * hd))?)
    }
}

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: DecoderAttention,
    norm1: LayerNorm,
    cross_t2i: DecoderAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: DecoderAttention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(pb: &ParamBuilder, cfg: &DecoderConfig, skip_first_pe: bool) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            self_attn: DecoderAttention::new(&pb.pp("self_attn"), d, cfg.num_heads, 1)?,
            norm1: LayerNorm::new(&pb.pp("norm1"), d)?,
            cross_t2i: DecoderAttention::new(&pb.pp("cross_t2i"), d, cfg.num_heads, cfg.downsample)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), d)?,
            mlp: Mlp::new(&pb.pp("mlp"), d, cfg.mlp_dim, Activation::Relu)?,
            norm3: LayerNorm::new(&pb.pp("norm3"), d)?,
            cross_i2t: DecoderAttention::new(&pb.pp("cross_i2t"), d, cfg.num_heads, cfg.downsample)?,
            norm4: LayerNorm::new(&pb.pp("norm4"), d)?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let queries = (&queries + self.cross_t2i.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let queries = (&queries + self.mlp.forward(&queries)?)?;
        let queries = self.norm3.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let keys = (keys + self.cross_i2t.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

/// `(B, h, w, C)` → `(B, 2h, 2w, C_out)`: a stride-2, kernel-2 transposed
/// convolution written as a per-pixel linear map followed by pixel shuffle.
#[derive(Debug, Clone)]
struct UpsampleX2 {
    proj: Linear,
    out: usize,
}

impl UpsampleX2 {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, cin, 4 * cout)?,
            out: cout,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let c = self.out;
        Ok(self
            .proj
            .forward(x)?
            .reshape((b, h, w, 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, 2 * h, 2 * w, c))?)
    }
}

/// Hypernetwork MLP mapping an output token to mask-feature weights.
#[derive(Debug, Clone)]
struct HyperMlp {
    layers: Vec<Linear>,
}

impl HyperMlp {
    fn new(pb: &ParamBuilder, dim: usize, out: usize) -> Result<Self> {
        Ok(Self {
            layers: vec![
                Linear::new(&pb.pp("0"), dim, dim)?,
                Linear::new(&pb.pp("1"), dim, dim)?,
                Linear::new(&pb.pp("2"), dim, out)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

pub const NUM_MASKS: usize = 2;

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    cfg: DecoderConfig,
    mask_tokens: Tensor,
    layers: Vec<TwoWayBlock>,
    final_attn: DecoderAttention,
    final_norm: LayerNorm,
    up1: UpsampleX2,
    up_norm: LayerNorm,
    up2: UpsampleX2,
    hyper: Vec<HyperMlp>,
}

impl MaskDecoder {
    pub fn new(pb: &ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.depth)
            .map(|i| TwoWayBlock::new(&pb.pp(format!("layers.{i}")), cfg, i == 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            mask_tokens: pb.param("mask_tokens", &[NUM_MASKS, d], Init::Normal(1.0))?,
            layers,
            final_attn: DecoderAttention::new(&pb.pp("final_attn"), d, cfg.num_heads, cfg.downsample)?,
            final_norm: LayerNorm::new(&pb.pp("final_norm"), d)?,
            up1: UpsampleX2::new(&pb.pp("up1"), d, d / 4)?,
            up_norm: LayerNorm::new(&pb.pp("up_norm"), d / 4)?,
            up2: UpsampleX2::new(&pb.pp("up2"), d / 4, d / 8)?,
            hyper: (0..NUM_MASKS)
                .map(|i| HyperMlp::new(&pb.pp(format!("hyper.{i}")), d, d / 8))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Two-channel logits `(B, 2, out_h, out_w)`.
    ///
    /// `image_embedding` is `(B, h, w, dim)`, `sparse` is `(B, 1, dim)`,
    /// `dense_pe` is `(h, w, dim)` and `no_mask` is `(dim)`.
    pub fn forward(
        &self,
        image_embedding: &Tensor,
        dense_pe: &Tensor,
        sparse: &Tensor,
        no_mask: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let (b, h, w, d) = image_embedding.dims4()?;
        if d != self.cfg.dim {
            return Err(Error::shape(self.cfg.dim, d));
        }
        if sparse.dims() != [b, 1, d] {
            return Err(Error::shape((b, 1, d), sparse.dims()));
        }
        let src = image_embedding.broadcast_add(no_mask)?.reshape((b, h * w, d))?;
        let key_pe = dense_pe.reshape((1, h * w, d))?.broadcast_as((b, h * w, d))?.contiguous()?;
        let mask_tokens = self.mask_tokens.unsqueeze(0)?.broadcast_as((b, NUM_MASKS, d))?;
        let tokens = Tensor::cat(&[&mask_tokens, sparse], 1)?;

        let mut queries = tokens.clone();
        let mut keys = src;
        for layer in &self.layers {
            let (q, k) = layer.forward(&queries, &keys, &tokens, &key_pe)?;
            queries = q;
            keys = k;
        }
        let q = (&queries + &tokens)?;
        let k = (&keys + &key_pe)?;
        let queries = (&queries + self.final_attn.forward(&q, &k, &keys)?)?;
        let queries = self.final_norm.forward(&queries)?;

        let feat = keys.reshape((b, h, w, d))?;
        let up = self.up_norm.forward(&self.up1.forward(&feat)?)?.gelu()?;
        let up = self.up2.forward(&up)?.gelu()?;
        let (uh, uw, uc) = (4 * h, 4 * w, d / 8);
        let up = up.reshape((b, uh * uw, uc))?;

        let hyper_in = (0..NUM_MASKS)
            .map(|i| self.hyper[i].forward(&queries.narrow(1, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let hyper_in = Tensor::cat(&hyper_in, 1)?;
        let masks = hyper_in
            .matmul(&up.transpose(1, 2)?.contiguous()?)?
            .reshape((b, NUM_MASKS, uh, uw))?;
        resize_bilinear_tensor(&masks, out_h, out_w)
    }
}

/// Tags prompt-encoder and decoder builders consistently.
pub fn decoder_builders(pb: &ParamBuilder) -> (ParamBuilder, ParamBuilder) {
    (
        pb.pp("prompt_encoder").tagged(ParamTag::PromptEncoder),
        pb.pp("mask_decoder").tagged(ParamTag::MaskDecoder),
    )
}
