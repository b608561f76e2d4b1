//! Cartesian ↔ polar conversion about an ROI center.
//!
//! Polar rasters put the radius on rows (row 0 is the ROI center) and the
//! angle on columns, so concentric boundaries become horizontal bands. The
//! radius axis spans `[0, roi.radius]` inclusive, the angle axis `[0, 2π)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{bilinear_clamped, nearest_clamped, CartesianRaster, Mask, PolarRaster};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSpec {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

impl RoiSpec {
    pub fn new(center_x: f64, center_y: f64, radius: f64) -> Result<Self> {
        if !(center_x.is_finite() && center_y.is_finite()) {
            return Err(Error::invalid("ROI center must be finite"));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid(format!("ROI radius must be > 0, got {radius}")));
        }
        Ok(Self {
            center_x,
            center_y,
            radius,
        })
    }

    /// ROI with its center at the origin; handy for point conversions.
    pub fn at_origin() -> Self {
        Self {
            center_x: 0.0,
            center_y: 0.0,
            radius: 1.0,
        }
    }

    fn check(&self) -> Result<()> {
        Self::new(self.center_x, self.center_y, self.radius).map(|_| ())
    }

    /// The square crop window this ROI selects from its source image.
    pub fn crop_window(&self) -> CropWindow {
        let side = (2.0 * self.radius).ceil().max(2.0) as usize;
        CropWindow {
            x0: (self.center_x - side as f64 / 2.0).round() as i64,
            y0: (self.center_y - side as f64 / 2.0).round() as i64,
            side,
        }
    }

    /// Same ROI expressed in the coordinates of its crop window.
    pub fn localized(&self) -> RoiSpec {
        let w = self.crop_window();
        RoiSpec {
            center_x: self.center_x - w.x0 as f64,
            center_y: self.center_y - w.y0 as f64,
            radius: self.radius,
        }
    }
}

/// Axis-aligned square window in source-image pixels. May extend past the
/// image border; out-of-image pixels read as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: i64,
    pub y0: i64,
    pub side: usize,
}

impl CropWindow {
    pub fn crop(&self, img: &CartesianRaster) -> CartesianRaster {
        let (h, w) = (img.height() as i64, img.width() as i64);
        CartesianRaster::from_fn(self.side, self.side, img.channels(), |i, j, c| {
            let (y, x) = (self.y0 + i as i64, self.x0 + j as i64);
            if (0..h).contains(&y) && (0..w).contains(&x) {
                img.get(y as usize, x as usize, c)
            } else {
                0.0
            }
        })
    }

    pub fn crop_mask(&self, mask: &Mask) -> Mask {
        let (h, w) = (mask.height() as i64, mask.width() as i64);
        Mask::from_fn(self.side, self.side, |i, j| {
            let (y, x) = (self.y0 + i as i64, self.x0 + j as i64);
            (0..h).contains(&y) && (0..w).contains(&x) && mask.get(y as usize, x as usize)
        })
    }

    /// Writes a crop-sized mask back into a full frame of `height × width`.
    pub fn paste_mask(&self, crop: &Mask, height: usize, width: usize) -> Mask {
        let mut out = Mask::empty(height, width);
        for (i, j) in crop.foreground() {
            let (y, x) = (self.y0 + i as i64, self.x0 + j as i64);
            if (0..height as i64).contains(&y) && (0..width as i64).contains(&x) {
                out.set(y as usize, x as usize, true);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            other => Err(Error::invalid(format!("unknown interpolation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub num_radii: usize,
    pub num_angles: usize,
    pub interpolation: Interpolation,
}

impl Default for PolarGrid {
    fn default() -> Self {
        Self {
            num_radii: 512,
            num_angles: 512,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl PolarGrid {
    pub fn new(num_radii: usize, num_angles: usize, interpolation: Interpolation) -> Result<Self> {
        let g = Self {
            num_radii,
            num_angles,
            interpolation,
        };
        g.check()?;
        Ok(g)
    }

    pub fn with_interpolation(self, interpolation: Interpolation) -> Self {
        Self {
            interpolation,
            ..self
        }
    }

    fn check(&self) -> Result<()> {
        if self.num_radii < 2 || self.num_angles < 2 {
            return Err(Error::invalid(format!(
                "polar grid needs at least 2 radii and 2 angles, got {}x{}",
                self.num_radii, self.num_angles
            )));
        }
        Ok(())
    }

    pub fn radius_step(&self, roi: &RoiSpec) -> f64 {
        roi.radius / (self.num_radii - 1) as f64
    }

    pub fn angle_step(&self) -> f64 {
        TAU / self.num_angles as f64
    }
}

/// Polar coordinates of `(x, y)` relative to the ROI center. θ ∈ [0, 2π).
pub fn cart_to_polar_point(x: f64, y: f64, roi: &RoiSpec) -> Result<(f64, f64)> {
    if !(x.is_finite() && y.is_finite()) {
        return Err(Error::invalid(format!("non-finite point ({x}, {y})")));
    }
    let dx = x - roi.center_x;
    let dy = y - roi.center_y;
    Ok((dx.hypot(dy), normalize_angle(dy.atan2(dx))))
}

pub fn polar_to_cart_point(r: f64, theta: f64, roi: &RoiSpec) -> Result<(f64, f64)> {
    if !(r.is_finite() && theta.is_finite()) {
        return Err(Error::invalid(format!("non-finite polar point ({r}, {theta})")));
    }
    if r < 0.0 {
        return Err(Error::invalid(format!("negative radius {r}")));
    }
    Ok((roi.center_x + r * theta.cos(), roi.center_y + r * theta.sin()))
}

fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Resamples a Cartesian image onto the polar grid about `roi`.
pub fn warp_to_polar(img: &CartesianRaster, roi: &RoiSpec, grid: &PolarGrid) -> Result<PolarRaster> {
    roi.check()?;
    grid.check()?;
    let dr = grid.radius_step(roi);
    let dt = grid.angle_step();
    let trig: Vec<(f64, f64)> = (0..grid.num_angles)
        .map(|t| {
            let th = t as f64 * dt;
            (th.cos(), th.sin())
        })
        .collect();
    let sample = match grid.interpolation {
        Interpolation::Bilinear => bilinear_clamped::<crate::raster::Cartesian>,
        Interpolation::Nearest => nearest_clamped::<crate::raster::Cartesian>,
    };
    Ok(PolarRaster::from_fn(
        grid.num_radii,
        grid.num_angles,
        img.channels(),
        |ri, ti, c| {
            let r = ri as f64 * dr;
            let (cos, sin) = trig[ti];
            sample(img, roi.center_x + r * cos, roi.center_y + r * sin, c)
        },
    ))
}

/// Binary masks are warped with nearest sampling so they stay binary.
pub fn warp_mask_to_polar(mask: &Mask, roi: &RoiSpec, grid: &PolarGrid) -> Result<Mask> {
    let grid = grid.with_interpolation(Interpolation::Nearest);
    Ok(warp_to_polar(&mask.to_raster(), roi, &grid)?.to_mask(0.5))
}

/// Inverse warp with bilinear sampling. Pixels outside the ROI circle are 0.
pub fn warp_to_cartesian(
    pimg: &PolarRaster,
    roi: &RoiSpec,
    out_h: usize,
    out_w: usize,
) -> Result<CartesianRaster> {
    warp_to_cartesian_with(pimg, roi, out_h, out_w, Interpolation::Bilinear)
}

pub fn warp_to_cartesian_with(
    pimg: &PolarRaster,
    roi: &RoiSpec,
    out_h: usize,
    out_w: usize,
    interpolation: Interpolation,
) -> Result<CartesianRaster> {
    if out_h < 1 || out_w < 1 {
        return Err(Error::invalid(format!("output size must be >= 1, got {out_h}x{out_w}")));
    }
    roi.check()?;
    let rows = pimg.height();
    let cols = pimg.width();
    if rows < 2 || cols < 2 {
        return Err(Error::invalid("polar raster needs at least 2x2 samples"));
    }
    let dr = roi.radius / (rows - 1) as f64;
    let dt = TAU / cols as f64;
    let channels = pimg.channels();
    Ok(CartesianRaster::from_fn(out_h, out_w, channels, |i, j, c| {
        let dx = j as f64 - roi.center_x;
        let dy = i as f64 - roi.center_y;
        let r = dx.hypot(dy);
        if r > roi.radius {
            return 0.0;
        }
        let fr = (r / dr).min((rows - 1) as f64);
        let ft = normalize_angle(dy.atan2(dx)) / dt;
        match interpolation {
            Interpolation::Nearest => {
                let ri = fr.round() as usize;
                let ti = (ft.round() as usize) % cols;
                pimg.get(ri, ti, c)
            }
            Interpolation::Bilinear => {
                let r0 = fr.floor() as usize;
                let r1 = (r0 + 1).min(rows - 1);
                let wr = fr - r0 as f64;
                let t0 = (ft.floor() as usize) % cols;
                let t1 = (t0 + 1) % cols;
                let wt = ft - ft.floor();
                let a = pimg.get(r0, t0, c) as f64 * (1.0 - wt) + pimg.get(r0, t1, c) as f64 * wt;
                let b = pimg.get(r1, t0, c) as f64 * (1.0 - wt) + pimg.get(r1, t1, c) as f64 * wt;
                (a * (1.0 - wr) + b * wr) as f32
            }
        }
    }))
}

/// Inverse-warps a binary polar mask. Bilinear resampling thresholded at 0.5.
pub fn warp_mask_to_cartesian(pmask: &Mask, roi: &RoiSpec, out_h: usize, out_w: usize) -> Result<Mask> {
    Ok(warp_to_cartesian(&pmask.to_raster(), roi, out_h, out_w)?.to_mask(0.5))
}

/// Crops the square ROI around the optic disc.
///
/// Center is the centroid of `disc_mask`; radius is `margin` times half the
/// larger bounding-box side (sides count pixels, so a single pixel has side 1).
/// The returned [`RoiSpec`] is in source-image coordinates; use
/// [`RoiSpec::localized`] for coordinates inside the crop.
pub fn crop_roi(
    img: &CartesianRaster,
    disc_mask: &Mask,
    margin: f64,
) -> Result<(CartesianRaster, RoiSpec)> {
    if (img.height(), img.width()) != disc_mask.shape() {
        return Err(Error::shape((img.height(), img.width()), disc_mask.shape()));
    }
    let roi = roi_from_mask(disc_mask, margin)?;
    Ok((roi.crop_window().crop(img), roi))
}

pub fn roi_from_mask(disc_mask: &Mask, margin: f64) -> Result<RoiSpec> {
    if !(margin.is_finite() && margin > 0.0) {
        return Err(Error::invalid(format!("margin must be > 0, got {margin}")));
    }
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    let (mut min_r, mut max_r, mut min_c, mut max_c) = (usize::MAX, 0, usize::MAX, 0);
    for (i, j) in disc_mask.foreground() {
        n += 1;
        sx += j as f64;
        sy += i as f64;
        min_r = min_r.min(i);
        max_r = max_r.max(i);
        min_c = min_c.min(j);
        max_c = max_c.max(j);
    }
    if n == 0 {
        return Err(Error::EmptyMask("disc mask has no foreground".into()));
    }
    let side = (max_r - min_r + 1).max(max_c - min_c + 1) as f64;
    let radius = margin * side / 2.0;
    if radius < 1.0 {
        return Err(Error::EmptyMask(format!(
            "ROI radius {radius} is below one pixel"
        )));
    }
    RoiSpec::new(sx / n as f64, sy / n as f64, radius)
}
