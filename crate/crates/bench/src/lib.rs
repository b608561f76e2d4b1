//! Shared fixtures for the benchmarks.

use candle_core::{DType, Device, Tensor};
use discseg::data::{sample_rng, synthesize_sample, SyntheticConfig};
use discseg::{Mask, RunConfig, SampleRecord, SegModel};

/// One high-contrast synthetic fundus at `size` pixels.
pub fn fundus(size: usize) -> SampleRecord {
    let s = size as f64;
    let cfg = SyntheticConfig {
        image_size: size,
        disc_axis_range: (0.1875 * s, 0.234375 * s),
        ..Default::default()
    };
    synthesize_sample(&cfg, "bench", &mut sample_rng(0, 0)).unwrap().0
}

pub fn model(cfg: &RunConfig) -> SegModel {
    SegModel::new(&cfg.model(), cfg.seed, DType::F32, &Device::Cpu).unwrap()
}

/// Deterministic batch of images `(b, s, s, 3)` in [0, 1).
pub fn images(b: usize, s: usize) -> Tensor {
    let n = b * s * s * 3;
    let v: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
    Tensor::from_vec(v, (b, s, s, 3), &Device::Cpu).unwrap()
}

pub fn mask_tensor(masks: &[&Mask]) -> Tensor {
    let (h, w) = masks[0].shape();
    let v: Vec<f32> = masks.iter().flat_map(|m| m.data().iter().map(|&b| b as u8 as f32)).collect();
    Tensor::from_vec(v, (masks.len(), h, w), &Device::Cpu).unwrap()
}
