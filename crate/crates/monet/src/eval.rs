//! Matthews-correlation-coefficient scoring at image level (binary label
//! per image) and pixel level (confusion counts aggregated across the whole
//! set before the metric is computed once).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{MonetError, Result};

/// Binary mask over an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn positive_pixels(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Matthews correlation coefficient. Returns 0 when any factor of the
/// denominator is zero.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// Confusion counts summed over all pixels of all samples first; MCC is
/// computed once on the aggregate, never averaged per image.
pub fn evaluate_pixel<'a, I>(samples: I) -> Result<(ConfusionCounts, f64)>
where
    I: IntoIterator<Item = (&'a Mask, &'a Mask)>,
{
    let mut counts = ConfusionCounts::default();
    for (i, (pred, gt)) in samples.into_iter().enumerate() {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(MonetError::EvalSample {
                sample: format!("#{i}"),
                message: format!(
                    "predicted mask {}x{} vs ground truth {}x{}",
                    pred.width, pred.height, gt.width, gt.height
                ),
            });
        }
        for (p, g) in pred.data.iter().zip(&gt.data) {
            counts.add(*p, *g);
        }
    }
    let m = mcc(&counts);
    Ok((counts, m))
}

/// Default image-level area threshold: 16 pixels at a 256-pixel image side,
/// scaled as `(n / 64)^2`.
pub fn default_min_area(image_size: usize) -> u64 {
    let r = (image_size / 64).max(1) as u64;
    r * r
}

/// An image is predicted positive iff its mask has at least `min_area`
/// positive pixels (boundary inclusive); MCC over the resulting labels.
pub fn evaluate_image<'a, I>(samples: I, min_area: u64) -> (ConfusionCounts, f64)
where
    I: IntoIterator<Item = (&'a Mask, bool)>,
{
    let mut counts = ConfusionCounts::default();
    for (mask, label) in samples {
        counts.add(mask.positive_pixels() >= min_area, label);
    }
    let m = mcc(&counts);
    (counts, m)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryScores {
    pub image_mcc: f64,
    pub pixel_mcc: f64,
    pub image_counts: ConfusionCounts,
    pub pixel_counts: ConfusionCounts,
}

/// Scores for a whole evaluation run, overall and per free-form category.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_mcc: f64,
    pub pixel_mcc: f64,
    pub image_counts: ConfusionCounts,
    pub pixel_counts: ConfusionCounts,
    pub per_category: BTreeMap<String, CategoryScores>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,image_mcc,pixel_mcc\n");
        out.push_str(&format!("overall,{},{}\n", self.image_mcc, self.pixel_mcc));
        for (cat, s) in &self.per_category {
            out.push_str(&format!("{cat},{},{}\n", s.image_mcc, s.pixel_mcc));
        }
        out
    }
}

/// Ablation comparison table, sorted by pixel MCC, best first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantTable {
    pub rows: Vec<VariantRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub image_mcc: f64,
    pub pixel_mcc: f64,
}

pub fn compare_variants(reports: &[(String, EvalReport)]) -> Result<VariantTable> {
    if reports.len() < 2 {
        return Err(MonetError::InvalidConfig(
            "variant comparison needs at least two reports".to_string(),
        ));
    }
    let mut rows: Vec<VariantRow> = reports
        .iter()
        .map(|(name, r)| VariantRow {
            variant: name.clone(),
            image_mcc: r.image_mcc,
            pixel_mcc: r.pixel_mcc,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.pixel_mcc
            .partial_cmp(&a.pixel_mcc)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.variant.cmp(&b.variant))
    });
    Ok(VariantTable { rows })
}

impl VariantTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,image_mcc,pixel_mcc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.variant, r.image_mcc, r.pixel_mcc));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14} {:>10} {:>10}\n", "variant", "image", "pixel"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>10.4} {:>10.4}\n",
                r.variant, r.image_mcc, r.pixel_mcc
            ));
        }
        out
    }
}
