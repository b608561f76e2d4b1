//! Four-panel figures: source image, polar image, polar prediction and the
//! source image with predicted and annotated contours.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use crate::data::{raster_to_rgb8, PreparedSample, SampleRecord};
use crate::error::{Error, Result};
use crate::raster::{Mask, MaskPair, Raster};

pub const PANELS: usize = 4;

const PRED_DISC: Rgb<u8> = Rgb([40, 220, 60]);
const PRED_CUP: Rgb<u8> = Rgb([40, 120, 255]);
const TRUE_DISC: Rgb<u8> = Rgb([255, 200, 0]);
const TRUE_CUP: Rgb<u8> = Rgb([255, 40, 40]);

fn fit<D>(img: &Raster<D>, side: usize) -> RgbImage {
    let r = img.resize_bilinear(side, side).retag();
    raster_to_rgb8(&r)
}

/// Disc as mid gray, cup as white, background black.
fn mask_panel(m: &MaskPair, side: usize) -> RgbImage {
    let disc = m.disc.resize_nearest(side, side);
    let cup = m.cup.resize_nearest(side, side);
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let v = if cup.get(i, j) {
            255
        } else if disc.get(i, j) {
            128
        } else {
            0
        };
        Rgb([v, v, v])
    })
}

fn draw_contour(img: &mut RgbImage, m: &Mask, color: Rgb<u8>) {
    for (i, j) in m.boundary().foreground() {
        img.put_pixel(j as u32, i as u32, color);
    }
}

/// Side-by-side panel. `pred` is in the model domain (as returned by a
/// predictor); it is inverse-warped for the overlay. Every panel is as tall
/// as the source image.
pub fn render_panels(rec: &SampleRecord, prep: &PreparedSample, pred: &MaskPair) -> Result<RgbImage> {
    if rec.id != prep.id {
        return Err(Error::invalid(format!("sample '{}' paired with prepared '{}'", rec.id, prep.id)));
    }
    let (h, w) = prep.source_shape;
    let side = h.max(w);
    let source = prep.to_source(pred)?;
    let mut overlay = raster_to_rgb8(&rec.image);
    draw_contour(&mut overlay, &rec.masks.disc, TRUE_DISC);
    draw_contour(&mut overlay, &rec.masks.cup, TRUE_CUP);
    draw_contour(&mut overlay, &source.disc, PRED_DISC);
    draw_contour(&mut overlay, &source.cup, PRED_CUP);

    let tiles = [
        raster_to_rgb8(&rec.image),
        fit(&prep.image, side),
        mask_panel(pred, side),
        overlay,
    ];
    let mut out = RgbImage::new((side * PANELS) as u32, side as u32);
    for (k, tile) in tiles.iter().enumerate() {
        image::imageops::replace(&mut out, tile, (k * side) as i64, 0);
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
