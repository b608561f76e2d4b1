//! Overlap metrics, vertical diameters and the cup-to-disc ratio, plus the
//! dataset-level evaluation that produces a [`MetricReport`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::data::{preprocess_all, PipelineConfig, PreparedSample, SampleRecord};
use crate::error::{Error, Result};
use crate::raster::{Mask, MaskPair};

fn overlap_counts(a: &Mask, b: &Mask) -> Result<(usize, usize, usize)> {
    a.check_same_shape(b)?;
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    Ok((inter, na, nb))
}

/// `2|a∩b| / (|a| + |b|)`; 1.0 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|a∩b| / |a∪b|`; 1.0 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Largest per-column extent (last − first foreground row + 1); 0 if empty.
pub fn vertical_diameter(mask: &Mask) -> usize {
    (0..mask.width())
        .filter_map(|j| {
            let first = (0..mask.height()).find(|&i| mask.get(i, j))?;
            let last = (0..mask.height()).rev().find(|&i| mask.get(i, j))?;
            Some(last - first + 1)
        })
        .max()
        .unwrap_or(0)
}

/// Vertical cup diameter over vertical disc diameter.
pub fn cdr(disc: &Mask, cup: &Mask) -> Result<f64> {
    let vdd = vertical_diameter(disc);
    if vdd == 0 {
        return Err(Error::EmptyMask("CDR needs a nonempty disc".into()));
    }
    Ok(vertical_diameter(cup) as f64 / vdd as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub disc_dice: f64,
    pub disc_iou: f64,
    pub cup_dice: f64,
    pub cup_iou: f64,
    /// Absolute CDR error; `None` when the predicted disc is empty.
    pub cdr_error: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, pred: &MaskPair, truth: &MaskPair) -> Result<Self> {
        let cdr_error = match (cdr(&pred.disc, &pred.cup), cdr(&truth.disc, &truth.cup)) {
            (Ok(p), Ok(t)) => Some((p - t).abs()),
            _ => None,
        };
        Ok(Self {
            id: id.into(),
            disc_dice: dice(&pred.disc, &truth.disc)?,
            disc_iou: iou(&pred.disc, &truth.disc)?,
            cup_dice: dice(&pred.cup, &truth.cup)?,
            cup_iou: iou(&pred.cup, &truth.cup)?,
            cdr_error,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub disc_dice: f64,
    pub disc_iou: f64,
    pub cup_dice: f64,
    pub cup_iou: f64,
    pub mean_cdr_error: Option<f64>,
    pub count: usize,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty evaluation set"));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let cdr_errs: Vec<f64> = samples.iter().filter_map(|s| s.cdr_error).collect();
        Ok(Self {
            disc_dice: mean(|s| s.disc_dice),
            disc_iou: mean(|s| s.disc_iou),
            cup_dice: mean(|s| s.cup_dice),
            cup_iou: mean(|s| s.cup_iou),
            mean_cdr_error: (!cdr_errs.is_empty())
                .then(|| cdr_errs.iter().sum::<f64>() / cdr_errs.len() as f64),
            count: samples.len(),
            samples,
        })
    }

    /// Tab-separated summary with the Dice/IoU × disc/cup columns.
    pub fn to_table(&self) -> String {
        let mut s = String::from("method\tdisc_dice\tdisc_iou\tcup_dice\tcup_iou\tn\n");
        let _ = writeln!(
            s,
            "model\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.disc_dice, self.disc_iou, self.cup_dice, self.cup_iou, self.count
        );
        s
    }

    /// Per-sample rows, tab-separated.
    pub fn to_sample_table(&self) -> String {
        let mut s = String::from("id\tdisc_dice\tdisc_iou\tcup_dice\tcup_iou\tcdr_error\n");
        for m in &self.samples {
            let cdr = m.cdr_error.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                m.id, m.disc_dice, m.disc_iou, m.cup_dice, m.cup_iou, cdr
            );
        }
        s
    }
}

/// Anything that maps preprocessed samples to binary masks in the model
/// domain (thresholded at probability 0.5).
pub trait Predictor {
    fn predict(&self, samples: &[PreparedSample]) -> Result<Vec<MaskPair>>;
}

/// Preprocess → predict → inverse warp → metrics against the original
/// Cartesian annotations.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    records: &[SampleRecord],
    pipeline: &PipelineConfig,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let prepared = preprocess_all(records, pipeline)?;
    let preds = predictor.predict(&prepared)?;
    if preds.len() != prepared.len() {
        return Err(Error::InvalidState(format!(
            "predictor returned {} masks for {} samples",
            preds.len(),
            prepared.len()
        )));
    }
    let samples = prepared
        .par_iter()
        .zip(&preds)
        .zip(records)
        .map(|((p, pred), rec)| SampleMetrics::compute(rec.id.clone(), &p.to_source(pred)?, &rec.masks))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        Mask::from_fn(h, w, |i, j| on.contains(&(i, j)))
    }

    #[test]
    fn dice_and_iou_basic() {
        let a = m(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = m(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let e = Mask::empty(4, 4);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn enumerated_overlaps() {
        // |a| = |b| = 4, overlap 2 → dice 0.5; union 6 → iou 1/3
        let a = m(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let b = m(4, 4, &[(0, 2), (0, 3), (1, 0), (1, 1)]);
        let (mut inter, mut union) = (0, 0);
        for i in 0..4 {
            for j in 0..4 {
                inter += (a.get(i, j) && b.get(i, j)) as usize;
                union += (a.get(i, j) || b.get(i, j)) as usize;
            }
        }
        assert_eq!((inter, union), (2, 6));
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        assert!(dice(&Mask::empty(2, 2), &Mask::empty(2, 3)).is_err());
        assert!(iou(&Mask::empty(2, 2), &Mask::empty(3, 2)).is_err());
    }

    #[test]
    fn vertical_diameters() {
        let col = Mask::from_fn(12, 3, |i, j| j == 1 && (1..11).contains(&i));
        assert_eq!(vertical_diameter(&col), 10);
        assert_eq!(vertical_diameter(&Mask::empty(5, 5)), 0);
    }

    #[test]
    fn ellipse_vertical_diameter() {
        // vertical axis 40 px: semi-axis 20 about a half-pixel center so the
        // rasterization spans exactly 40 rows
        let (cy, cx) = (49.5, 50.0);
        let e = Mask::from_fn(100, 100, |i, j| {
            let dy = (i as f64 - cy) / 20.0;
            let dx = (j as f64 - cx) / 30.0;
            dx * dx + dy * dy <= 1.0
        });
        let d = vertical_diameter(&e) as i64;
        assert!((d - 40).abs() <= 1, "{d}");
    }

    #[test]
    fn cdr_cases() {
        let disc = Mask::from_fn(120, 20, |i, j| j == 5 && (10..110).contains(&i));
        assert_eq!(cdr(&disc, &disc).unwrap(), 1.0);
        assert_eq!(cdr(&disc, &Mask::empty(120, 20)).unwrap(), 0.0);
        let cup = Mask::from_fn(120, 20, |i, j| j == 5 && (40..80).contains(&i));
        assert!((cdr(&disc, &cup).unwrap() - 0.40).abs() <= 0.02);
        assert!(matches!(cdr(&Mask::empty(4, 4), &Mask::empty(4, 4)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn report_needs_samples() {
        assert!(MetricReport::from_samples(vec![]).is_err());
    }
}
