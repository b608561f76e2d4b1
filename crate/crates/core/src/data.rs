//! Dataset ingestion (REFUGE layout), synthetic fundus generation, splitting
//! and the crop → polar → resize → normalise chain.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   images/<stem>.png   RGB, 8 or 16 bit
//!   masks/<stem>.png    grayscale: 0 = cup, 1..=128 = disc rim, otherwise background
//! ```

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polar::{crop_roi, warp_mask_to_cartesian, warp_mask_to_polar, warp_to_polar, PolarGrid, RoiSpec};
use crate::raster::{CartesianRaster, Mask, MaskPair, PolarRaster};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: CartesianRaster,
    pub masks: MaskPair,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: CartesianRaster, masks: MaskPair) -> Result<Self> {
        let id = id.into();
        if (image.height(), image.width()) != masks.shape() {
            return Err(Error::shape((image.height(), image.width()), masks.shape()));
        }
        if image.channels() != 3 {
            return Err(Error::invalid(format!("sample '{id}' must have 3 channels")));
        }
        Ok(Self { id, image, masks })
    }
}

// ---------------------------------------------------------------------------
// synthetic data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    Low,
    #[default]
    High,
}

impl Contrast {
    /// (disc over background, cup over disc, vessel darkening factor)
    fn levels(&self) -> (f32, f32, f32) {
        match self {
            Contrast::High => (0.25, 0.2, 0.35),
            Contrast::Low => (0.05, 0.04, 0.12),
        }
    }
}

impl std::str::FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Contrast::Low),
            "high" => Ok(Contrast::High),
            other => Err(Error::invalid(format!("unknown contrast '{other}' (expected low or high)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_size: usize,
    /// Vertical semi-axis of the disc, pixels.
    pub disc_axis_range: (f64, f64),
    /// Cup/disc semi-axis ratio, drawn independently per axis.
    pub cdr_range: (f64, f64),
    pub contrast: Contrast,
    pub noise_sigma: f64,
    pub vessel_count: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            disc_axis_range: (48.0, 60.0),
            cdr_range: (0.3, 0.7),
            contrast: Contrast::High,
            noise_sigma: 0.02,
            vessel_count: 6,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.disc_axis_range;
        let (r0, r1) = self.cdr_range;
        if !(a0 >= 2.0 && a0 <= a1 && 2.2 * a1 < self.image_size as f64) {
            return Err(Error::Config(format!(
                "disc axis range ({a0}, {a1}) does not fit a {} image",
                self.image_size
            )));
        }
        if !(r0 > 0.0 && r0 <= r1 && r1 < 1.0) {
            return Err(Error::Config(format!("cup/disc ratio range ({r0}, {r1}) must lie in (0, 1)")));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generating parameters of one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub center: (f64, f64),
    /// (horizontal, vertical) semi-axes.
    pub disc_axes: (f64, f64),
    pub cup_axes: (f64, f64),
    /// Vertical cup/disc ratio.
    pub ratio: f64,
}

fn in_ellipse(x: f64, y: f64, c: (f64, f64), axes: (f64, f64)) -> bool {
    let dx = (x - c.0) / axes.0;
    let dy = (y - c.1) / axes.1;
    dx * dx + dy * dy <= 1.0
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

/// Nested-ellipse fundus with noise and dark vessel strokes.
pub fn synthesize_sample(
    cfg: &SyntheticConfig,
    id: impl Into<String>,
    rng: &mut impl Rng,
) -> Result<(SampleRecord, SyntheticTruth)> {
    cfg.validate()?;
    let s = cfg.image_size as f64;
    let center = (rng.gen_range(0.375 * s..=0.625 * s), rng.gen_range(0.375 * s..=0.625 * s));
    let av = rng.gen_range(cfg.disc_axis_range.0..=cfg.disc_axis_range.1);
    let disc_axes = (av * rng.gen_range(0.85..=1.0), av);
    let (r0, r1) = cfg.cdr_range;
    let (rh, rv) = (rng.gen_range(r0..=r1), rng.gen_range(r0..=r1));
    let cup_axes = (disc_axes.0 * rh, disc_axes.1 * rv);

    let (disc_gap, cup_gap, vessel_dark) = cfg.contrast.levels();
    let base = [0.55f32, 0.27, 0.12];
    let vessels: Vec<((f64, f64), (f64, f64), f64)> = (0..cfg.vessel_count)
        .map(|_| {
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let start = (
                center.0 + 0.2 * disc_axes.0 * th.cos(),
                center.1 + 0.2 * disc_axes.1 * th.sin(),
            );
            let bend = rng.gen_range(-0.3..0.3);
            let end = (center.0 + s * (th + bend).cos(), center.1 + s * (th + bend).sin());
            (start, end, rng.gen_range(1.0..2.5))
        })
        .collect();

    let n = cfg.image_size;
    let normal = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = Vec::with_capacity(n * n * 3);
    let mut disc = Mask::empty(n, n);
    let mut cup = Mask::empty(n, n);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64, i as f64);
            let in_disc = in_ellipse(x, y, center, disc_axes);
            let in_cup = in_ellipse(x, y, center, cup_axes);
            disc.set(i, j, in_disc);
            cup.set(i, j, in_cup);
            // gentle illumination falloff away from the disc
            let d = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt() / s;
            let shade = 1.0 - 0.25 * d as f32;
            let on_vessel = vessels.iter().any(|(a, b, w)| segment_distance((x, y), *a, *b) <= *w);
            for &b in base.iter() {
                let mut v = b * shade;
                if in_disc {
                    v += disc_gap;
                }
                if in_cup {
                    v += cup_gap;
                }
                if on_vessel {
                    v *= 1.0 - vessel_dark;
                }
                if cfg.noise_sigma > 0.0 {
                    v += normal.sample(rng) as f32;
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let image = CartesianRaster::from_vec(n, n, 3, data)?;
    let record = SampleRecord::new(id, image, MaskPair::new(disc, cup)?)?;
    Ok((
        record,
        SyntheticTruth {
            center,
            disc_axes,
            cup_axes,
            ratio: rv,
        },
    ))
}

/// Per-sample RNG derived from the dataset seed, so samples are independent
/// of generation order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn synthetic_id(index: usize) -> String {
    format!("synth_{index:04}")
}

pub fn synthesize_dataset(cfg: &SyntheticConfig, n: usize) -> Result<Vec<(SampleRecord, SyntheticTruth)>> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| synthesize_sample(cfg, synthetic_id(i), &mut sample_rng(cfg.seed, i as u64)))
        .collect()
}

/// Mean gray level of the disc rim minus that of a background ring of the
/// same outer radius scale around the disc.
pub fn measured_disc_gap(rec: &SampleRecord) -> Result<f64> {
    let m = &rec.masks;
    let roi = crate::polar::roi_from_mask(&m.disc, 1.5)?;
    let (mut rim, mut nr, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..m.disc.height() {
        for j in 0..m.disc.width() {
            let gray = (0..3).map(|c| rec.image.get(i, j, c) as f64).sum::<f64>() / 3.0;
            if m.disc.get(i, j) && !m.cup.get(i, j) {
                rim += gray;
                nr += 1;
            } else if !m.disc.get(i, j) {
                let r = ((j as f64 - roi.center_x).powi(2) + (i as f64 - roi.center_y).powi(2)).sqrt();
                if r <= roi.radius {
                    bg += gray;
                    nb += 1;
                }
            }
        }
    }
    if nr == 0 || nb == 0 {
        return Err(Error::EmptyMask("no rim or background pixels to compare".into()));
    }
    Ok(rim / nr as f64 - bg / nb as f64)
}

// ---------------------------------------------------------------------------
// disk layout

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_mask_png(masks: &MaskPair) -> image::GrayImage {
    let (h, w) = masks.shape();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let v = if masks.cup.get(i, j) {
            0
        } else if masks.disc.get(i, j) {
            128
        } else {
            255
        };
        image::Luma([v])
    })
}

pub fn raster_to_rgb8(img: &CartesianRaster) -> image::RgbImage {
    image::RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        image::Rgb([to_u8(img.get(i, j, 0)), to_u8(img.get(i, j, 1)), to_u8(img.get(i, j, 2))])
    })
}

pub fn write_sample(root: &Path, rec: &SampleRecord) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::at_path(d, e))?;
    }
    raster_to_rgb8(&rec.image).save(images.join(format!("{}.png", rec.id)))?;
    encode_mask_png(&rec.masks).save(masks.join(format!("{}.png", rec.id)))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Per-sample stream index under the dataset seed.
    pub stream: u64,
    pub truth: SyntheticTruth,
}

/// `manifest.json` written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: SyntheticConfig,
    pub samples: Vec<ManifestEntry>,
}

/// Synthesizes `n` records into `root` (REFUGE layout) plus a manifest.
pub fn write_synthetic_dataset(cfg: &SyntheticConfig, n: usize, root: &Path) -> Result<Manifest> {
    let data = synthesize_dataset(cfg, n)?;
    data.par_iter().try_for_each(|(rec, _)| write_sample(root, rec))?;
    let manifest = Manifest {
        generator: cfg.clone(),
        samples: data
            .into_iter()
            .enumerate()
            .map(|(i, (rec, truth))| ManifestEntry {
                id: rec.id,
                stream: i as u64,
                truth,
            })
            .collect(),
    };
    fs::create_dir_all(root).map_err(|e| Error::at_path(root, e))?;
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::at_path(&path, e))?;
    Ok(manifest)
}

/// Decodes a REFUGE-convention grayscale mask. Cup pixels outside the disc
/// are removed with a warning.
pub fn decode_mask(gray: &image::GrayImage, id: &str) -> Result<MaskPair> {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let cup = Mask::from_fn(h, w, |i, j| gray.get_pixel(j as u32, i as u32)[0] == 0);
    let disc = Mask::from_fn(h, w, |i, j| gray.get_pixel(j as u32, i as u32)[0] <= 128);
    fix_containment(disc, cup, id)
}

/// Intersects the cup with the disc, warning when that changes anything.
pub fn fix_containment(disc: Mask, cup: Mask, id: &str) -> Result<MaskPair> {
    let fixed = cup.intersect(&disc)?;
    if fixed.count() != cup.count() {
        log::warn!(
            "sample '{id}': {} cup pixels outside the disc removed",
            cup.count() - fixed.count()
        );
    }
    MaskPair::new(disc, fixed)
}

fn load_rgb(path: &Path) -> Result<CartesianRaster> {
    let img = image::open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    CartesianRaster::from_vec(h, w, 3, img.into_raw())
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::at_path(dir, e))? {
        let path = entry.map_err(|e| Error::at_path(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads every `images/<stem>.png` with its `masks/<stem>.png`, ordered by
/// stem. A root without an `images/` directory yields no records.
pub fn load_refuge_format(root: &Path) -> Result<Vec<SampleRecord>> {
    if !root.is_dir() {
        return Err(Error::Ingestion(format!("dataset root {} is not a directory", root.display())));
    }
    let images = root.join("images");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let stems = png_stems(&images)?;
    let masks = root.join("masks");
    let missing: Vec<&str> = stems
        .iter()
        .filter(|s| !masks.join(format!("{s}.png")).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion(format!("images without masks: {}", missing.join(", "))));
    }
    stems
        .par_iter()
        .map(|stem| {
            let image = load_rgb(&images.join(format!("{stem}.png")))?;
            let gray = image::open(masks.join(format!("{stem}.png")))?.to_luma8();
            if (gray.height() as usize, gray.width() as usize) != (image.height(), image.width()) {
                return Err(Error::Ingestion(format!(
                    "mask of '{stem}' is {}x{}, image is {}x{}",
                    gray.height(),
                    gray.width(),
                    image.height(),
                    image.width()
                )));
            }
            let pair = decode_mask(&gray, stem)?;
            SampleRecord::new(stem.clone(), image, pair)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// split

/// Seeded shuffle, then the first `⌊n·ratio⌋` items train and the rest test.
pub fn split<T>(records: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if records.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = records.len();
    let n_train = (n as f64 * ratio).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("each index once");
    let train: Vec<T> = order[..n_train].iter().map(&mut take).collect();
    let test: Vec<T> = order[n_train..].iter().map(&mut take).collect();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// preprocessing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: PolarGrid,
    pub margin: f64,
    /// Side of the square model input.
    pub input_size: usize,
    pub use_polar: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: PolarGrid::default(),
            margin: 1.5,
            input_size: 256,
            use_polar: true,
        }
    }
}

/// A record mapped into the model domain. `image` and `masks` are polar
/// (rows = radius) unless the pipeline runs with `use_polar` off, in which
/// case they hold the resized Cartesian crop.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub image: PolarRaster,
    pub masks: MaskPair,
    /// ROI in source-image coordinates.
    pub roi: RoiSpec,
    pub source_shape: (usize, usize),
    pub polar: bool,
}

pub fn preprocess(rec: &SampleRecord, cfg: &PipelineConfig) -> Result<PreparedSample> {
    let (crop, roi) = crop_roi(&rec.image, &rec.masks.disc, cfg.margin)?;
    let window = roi.crop_window();
    let disc = window.crop_mask(&rec.masks.disc);
    let cup = window.crop_mask(&rec.masks.cup);
    let s = cfg.input_size;
    let (image, disc, cup) = if cfg.use_polar {
        let local = roi.localized();
        let img = warp_to_polar(&crop, &local, &cfg.grid)?;
        let d = warp_mask_to_polar(&disc, &local, &cfg.grid)?;
        let c = warp_mask_to_polar(&cup, &local, &cfg.grid)?;
        (img.resize_bilinear(s, s), d.resize_nearest(s, s), c.resize_nearest(s, s))
    } else {
        (
            crop.resize_bilinear(s, s).retag(),
            disc.resize_nearest(s, s),
            cup.resize_nearest(s, s),
        )
    };
    Ok(PreparedSample {
        id: rec.id.clone(),
        image,
        masks: MaskPair::new(disc, cup)?,
        roi,
        source_shape: (rec.image.height(), rec.image.width()),
        polar: cfg.use_polar,
    })
}

/// Preprocesses in parallel; output order follows the input order.
pub fn preprocess_all(records: &[SampleRecord], cfg: &PipelineConfig) -> Result<Vec<PreparedSample>> {
    records.par_iter().map(|r| preprocess(r, cfg)).collect()
}

impl PreparedSample {
    /// Maps a model-domain mask back into the full source frame.
    pub fn mask_to_source(&self, m: &Mask) -> Result<Mask> {
        let window = self.roi.crop_window();
        let crop = if self.polar {
            warp_mask_to_cartesian(m, &self.roi.localized(), window.side, window.side)?
        } else {
            m.resize_nearest(window.side, window.side)
        };
        let (h, w) = self.source_shape;
        Ok(window.paste_mask(&crop, h, w))
    }

    pub fn to_source(&self, pred: &MaskPair) -> Result<MaskPair> {
        MaskPair::new(self.mask_to_source(&pred.disc)?, self.mask_to_source(&pred.cup)?)
    }
}

/// Per-channel intensity statistics of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(samples: &[PreparedSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("normalisation needs at least one training sample"))?;
        let c = first.image.channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for s in samples {
            if s.image.channels() != c {
                return Err(Error::shape(c, s.image.channels()));
            }
            for px in s.image.data().chunks_exact(c) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            n += s.image.height() * s.image.width();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, img: &PolarRaster) -> Result<Vec<f32>> {
        let c = img.channels();
        if c != self.mean.len() {
            return Err(Error::shape(self.mean.len(), c));
        }
        Ok(img
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| ((v as f64 - self.mean[k % c]) / self.std[k % c]) as f32)
            .collect())
    }
}

/// Normalised images stacked as `(B, S, S, C)`.
pub fn batch_images(samples: &[&PreparedSample], norm: &NormStats, dtype: DType, dev: &Device) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w, c) = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * h * w * c);
    for s in samples {
        if s.image.shape() != (h, w, c) {
            return Err(Error::shape((h, w, c), s.image.shape()));
        }
        data.extend(norm.apply(&s.image)?);
    }
    Ok(Tensor::from_vec(data, (samples.len(), h, w, c), dev)?.to_dtype(dtype)?)
}

/// Disc and cup targets stacked as `(B, S, S)` each.
pub fn batch_masks(samples: &[&PreparedSample], dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = first.masks.shape();
    let stack = |pick: fn(&MaskPair) -> &Mask| -> Result<Tensor> {
        let mut v = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            v.extend(pick(&s.masks).data().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        }
        Ok(Tensor::from_vec(v, (samples.len(), h, w), dev)?.to_dtype(dtype)?)
    };
    Ok((stack(|m| &m.disc)?, stack(|m| &m.cup)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{containment_loss, ContainmentMode};
    use crate::metrics::dice;

    fn quiet_cfg() -> SyntheticConfig {
        SyntheticConfig {
            image_size: 128,
            disc_axis_range: (20.0, 26.0),
            noise_sigma: 0.0,
            vessel_count: 0,
            ..Default::default()
        }
    }

    #[test]
    fn fixed_ratio_scales_axes_exactly() {
        let cfg = SyntheticConfig {
            cdr_range: (0.4, 0.4),
            ..quiet_cfg()
        };
        let (_, t) = synthesize_sample(&cfg, "a", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(t.cup_axes.0, 0.4 * t.disc_axes.0);
        assert_eq!(t.cup_axes.1, 0.4 * t.disc_axes.1);
    }

    #[test]
    fn synthetic_cup_is_contained() {
        for seed in 0..5 {
            let cfg = SyntheticConfig { seed, ..Default::default() };
            let (rec, _) = synthesize_sample(&cfg, "x", &mut sample_rng(seed, 0)).unwrap();
            let f = |m: &Mask| m.data().iter().map(|&b| b as u8 as f64).collect::<Vec<_>>();
            let c = containment_loss(&f(&rec.masks.cup), &f(&rec.masks.disc), ContainmentMode::Count).unwrap();
            assert_eq!(c, 0.0);
        }
    }

    #[test]
    fn low_contrast_gap_is_small() {
        let cfg = SyntheticConfig {
            contrast: Contrast::Low,
            ..Default::default()
        };
        for i in 0..4 {
            let (rec, _) = synthesize_sample(&cfg, "x", &mut sample_rng(1, i)).unwrap();
            let g = measured_disc_gap(&rec).unwrap();
            assert!(g <= 0.08, "gap {g}");
        }
        let (rec, _) = synthesize_sample(&SyntheticConfig::default(), "x", &mut sample_rng(1, 0)).unwrap();
        assert!(measured_disc_gap(&rec).unwrap() > 0.15);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (a, b) = split((0..1200).collect(), 0.8, 5).unwrap();
        assert_eq!((a.len(), b.len()), (960, 240));
        let (c, _) = split((0..10).collect::<Vec<_>>(), 0.8, 5).unwrap();
        assert_eq!(c.len(), 8);
        let (a2, _) = split((0..1200).collect::<Vec<_>>(), 0.8, 5).unwrap();
        assert_eq!(a, a2);
        let mut all: Vec<i32> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..1200).collect::<Vec<_>>());
        assert!(split(Vec::<i32>::new(), 0.8, 0).is_err());
        assert!(split(vec![1], 1.0, 0).is_err());
    }

    #[test]
    fn mask_decoding_convention() {
        let gray = image::GrayImage::from_fn(8, 8, |x, _| {
            image::Luma([match x {
                0..=1 => 0,
                2..=4 => 128,
                _ => 255,
            }])
        });
        let p = decode_mask(&gray, "t").unwrap();
        assert_eq!(p.cup.count(), 16);
        assert_eq!(p.disc.count(), 40);
        assert!(p.is_nested());
    }

    #[test]
    fn containment_fix_intersects() {
        let disc = Mask::from_fn(4, 4, |i, _| i < 2);
        let cup = Mask::from_fn(4, 4, |_, j| j == 0);
        let p = fix_containment(disc, cup, "t").unwrap();
        assert_eq!(p.cup.count(), 2);
    }

    #[test]
    fn polar_masks_are_bands_and_nested() {
        let (rec, _) = synthesize_sample(&quiet_cfg(), "p", &mut sample_rng(9, 0)).unwrap();
        let cfg = PipelineConfig {
            grid: PolarGrid::new(64, 64, Default::default()).unwrap(),
            input_size: 64,
            ..Default::default()
        };
        let p = preprocess(&rec, &cfg).unwrap();
        assert!(p.masks.is_nested());
        // the ROI center lies inside the disc, so row 0 is foreground everywhere
        assert!((0..64).all(|t| p.masks.disc.get(0, t)));
        let back = p.to_source(&p.masks).unwrap();
        assert!(dice(&back.disc, &rec.masks.disc).unwrap() > 0.9);
    }

    #[test]
    fn norm_stats_standardise() {
        let (rec, _) = synthesize_sample(&SyntheticConfig { image_size: 64, disc_axis_range: (10.0, 12.0), ..Default::default() }, "n", &mut sample_rng(2, 0)).unwrap();
        let p = preprocess(&rec, &PipelineConfig { input_size: 32, grid: PolarGrid::new(32, 32, Default::default()).unwrap(), ..Default::default() }).unwrap();
        let st = NormStats::fit(std::slice::from_ref(&p)).unwrap();
        let v = st.apply(&p.image).unwrap();
        for c in 0..3 {
            let ch: Vec<f64> = v.iter().skip(c).step_by(3).map(|&x| x as f64).collect();
            let m = ch.iter().sum::<f64>() / ch.len() as f64;
            assert!(m.abs() < 1e-4);
        }
    }
}
