//! Joint disc/cup loss: two binary cross-entropies plus a containment prior
//! penalising cup probability mass that falls outside the disc.
//!
//! The host-side functions here work on `f64` slices and double as the
//! reference for the tensor form used in training ([`joint_loss_tensor`]).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::MaskPair;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub disc: f64,
    pub cup: f64,
    pub contain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            disc: 0.5,
            cup: 0.5,
            contain: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(disc: f64, cup: f64, contain: f64) -> Result<Self> {
        let w = Self { disc, cup, contain };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("disc", self.disc), ("cup", self.cup), ("contain", self.contain)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("loss weight {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_disk: f64,
    pub l_cup: f64,
    pub l_contain: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_disk: f64, l_cup: f64, l_contain: f64, w: &LossWeights) -> Self {
        Self {
            l_disk,
            l_cup,
            l_contain,
            total: w.disc * l_disk + w.cup * l_cup + w.contain * l_contain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainmentMode {
    /// `(1/N) Σ ŷ (1 − x̂)` over probabilities; the training form.
    Normalized,
    /// `Σ y (1 − x)` without normalisation; equals the violating-pixel count
    /// on binary masks.
    Count,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    if a == 0 {
        return Err(Error::invalid("loss over an empty map"));
    }
    Ok(())
}

/// Mean binary cross-entropy of `probs` against 0/1 `target`.
pub fn bce_loss(probs: &[f64], target: &[f64]) -> Result<f64> {
    check_len(probs.len(), target.len())?;
    let sum: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / probs.len() as f64)
}

pub fn containment_loss(cup: &[f64], disc: &[f64], mode: ContainmentMode) -> Result<f64> {
    check_len(cup.len(), disc.len())?;
    let sum: f64 = cup.iter().zip(disc).map(|(&y, &x)| y * (1.0 - x)).sum();
    Ok(match mode {
        ContainmentMode::Normalized => sum / cup.len() as f64,
        ContainmentMode::Count => sum,
    })
}

/// Two-channel logits on the host. Channel 0 is the disc, channel 1 the cup.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub height: usize,
    pub width: usize,
    pub disc: Vec<f64>,
    pub cup: Vec<f64>,
}

impl MaskLogits {
    pub fn new(height: usize, width: usize, disc: Vec<f64>, cup: Vec<f64>) -> Result<Self> {
        if disc.len() != height * width || cup.len() != height * width {
            return Err(Error::shape(height * width, (disc.len(), cup.len())));
        }
        if disc.iter().chain(&cup).any(|v| !v.is_finite()) {
            return Err(Error::invalid("mask logits contain non-finite values"));
        }
        Ok(Self {
            height,
            width,
            disc,
            cup,
        })
    }

    /// Reads sample `index` out of a `(B, 2, H, W)` logits tensor.
    pub fn from_tensor(logits: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = logits.dims4()?;
        if c != 2 {
            return Err(Error::shape("2 channels", c));
        }
        let sample = logits.get(index)?.to_dtype(DType::F64)?;
        let disc = sample.get(0)?.flatten_all()?.to_vec1::<f64>()?;
        let cup = sample.get(1)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(h, w, disc, cup)
    }

    pub fn probabilities(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.disc.iter().map(|&z| sigmoid(z)).collect(),
            self.cup.iter().map(|&z| sigmoid(z)).collect(),
        )
    }

    /// Thresholds both channels at probability 0.5.
    pub fn to_masks(&self) -> MaskPair {
        let to_mask = |v: &[f64]| {
            crate::raster::Mask::from_vec(self.height, self.width, v.iter().map(|&z| z > 0.0).collect())
                .expect("length checked at construction")
        };
        MaskPair {
            disc: to_mask(&self.disc),
            cup: to_mask(&self.cup),
        }
    }
}

fn mask_values(m: &crate::raster::Mask) -> Vec<f64> {
    m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn check_pair_shape(pred: &MaskLogits, target: &MaskPair) -> Result<()> {
    let shape = (pred.height, pred.width);
    if target.disc.shape() != shape || target.cup.shape() != shape {
        return Err(Error::shape(shape, (target.disc.shape(), target.cup.shape())));
    }
    Ok(())
}

/// Joint loss on host logits. Containment uses the normalised probability form.
pub fn joint_loss(pred: &MaskLogits, target: &MaskPair, w: &LossWeights) -> Result<LossBreakdown> {
    check_pair_shape(pred, target)?;
    let (pd, pc) = pred.probabilities();
    let l_disk = bce_loss(&pd, &mask_values(&target.disc))?;
    let l_cup = bce_loss(&pc, &mask_values(&target.cup))?;
    let l_contain = containment_loss(&pc, &pd, ContainmentMode::Normalized)?;
    Ok(LossBreakdown::combine(l_disk, l_cup, l_contain, w))
}

/// Closed-form gradient of the joint total with respect to the disc and cup
/// logits. Pixels whose probability sits in the clamp region get zero BCE
/// gradient.
pub fn joint_loss_grad(
    pred: &MaskLogits,
    target: &MaskPair,
    w: &LossWeights,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair_shape(pred, target)?;
    let n = (pred.height * pred.width) as f64;
    let (pd, pc) = pred.probabilities();
    let td = mask_values(&target.disc);
    let tc = mask_values(&target.cup);
    let bce_grad = |p: f64, t: f64| {
        if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
            0.0
        } else {
            (p - t) / n
        }
    };
    let mut gd = Vec::with_capacity(pd.len());
    let mut gc = Vec::with_capacity(pc.len());
    for i in 0..pd.len() {
        let (x, y) = (pd[i], pc[i]);
        gd.push(w.disc * bce_grad(x, td[i]) - w.contain * y * x * (1.0 - x) / n);
        gc.push(w.cup * bce_grad(y, tc[i]) + w.contain * (1.0 - x) * y * (1.0 - y) / n);
    }
    Ok((gd, gc))
}

/// Sigmoid via tanh; stays finite and differentiable for large |z|.
pub fn sigmoid_tensor(z: &Tensor) -> candle_core::Result<Tensor> {
    ((z * 0.5)?.tanh()? + 1.0)? * 0.5
}

fn bce_tensor(probs: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = ((1.0 - target)? * (1.0 - &p)?.log()?)?;
    (pos + neg)?.mean_all()?.neg()
}

/// Differentiable joint loss for a batch.
///
/// `logits` is `(B, 2, H, W)`; `disc` and `cup` targets are `(B, H, W)` with
/// 0/1 entries in the same dtype. Returns the scalar total and its breakdown.
pub fn joint_loss_tensor(
    logits: &Tensor,
    disc: &Tensor,
    cup: &Tensor,
    w: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let (b, c, h, wd) = logits.dims4()?;
    if c != 2 {
        return Err(Error::shape("2 logit channels", c));
    }
    for t in [disc, cup] {
        if t.dims() != [b, h, wd] {
            return Err(Error::shape((b, h, wd), t.dims()));
        }
    }
    let probs = sigmoid_tensor(logits)?;
    let pd = probs.narrow(1, 0, 1)?.squeeze(1)?;
    let pc = probs.narrow(1, 1, 1)?.squeeze(1)?;
    let l_disk = bce_tensor(&pd, disc)?;
    let l_cup = bce_tensor(&pc, cup)?;
    let l_contain = (&pc * (1.0 - &pd)?)?.mean_all()?;
    let total = ((l_disk.affine(w.disc, 0.0)? + l_cup.affine(w.cup, 0.0)?)?
        + l_contain.affine(w.contain, 0.0)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        l_disk: scalar(&l_disk)?,
        l_cup: scalar(&l_cup)?,
        l_contain: scalar(&l_contain)?,
        total: scalar(&total)?,
    };
    Ok((total, breakdown))
}
