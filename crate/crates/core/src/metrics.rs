//! Faithfulness and localization metrics for explanation maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Model confidence in one class on the full image and on the explanation
/// map alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair {
    pub full: f64,
    pub explained: f64,
    pub class_index: usize,
    pub image_id: usize,
}

impl ConfidencePair {
    pub fn new(full: f64, explained: f64) -> Self {
        ConfidencePair {
            full,
            explained,
            class_index: 0,
            image_id: 0,
        }
    }

    /// Relative fall in confidence in percent, negative when confidence rose.
    pub fn relative_drop(&self) -> f64 {
        100.0 * (self.full - self.explained) / self.full
    }
}

fn check_pairs(pairs: &[ConfidencePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("no confidence pairs"));
    }
    for p in pairs {
        if !(0.0..=1.0).contains(&p.full) || !(0.0..=1.0).contains(&p.explained) {
            return Err(Error::invalid(format!(
                "confidences must lie in [0, 1], got ({}, {}) for image {}",
                p.full, p.explained, p.image_id
            )));
        }
    }
    Ok(())
}

/// `100/N · Σ_i max(0, Y_i − O_i) / Y_i`
pub fn average_drop(pairs: &[ConfidencePair]) -> Result<f64> {
    check_pairs(pairs)?;
    let mut sum = 0.0;
    for p in pairs {
        if p.full == 0.0 {
            return Err(Error::invalid(format!(
                "full-image confidence is zero for image {}",
                p.image_id
            )));
        }
        sum += (p.full - p.explained).max(0.0) / p.full;
    }
    Ok(sum * 100.0 / pairs.len() as f64)
}

/// Percentage of images whose confidence strictly increased.
pub fn pct_increase_confidence(pairs: &[ConfidencePair]) -> Result<f64> {
    check_pairs(pairs)?;
    let count = pairs.iter().filter(|p| p.explained > p.full).count();
    Ok(100.0 * count as f64 / pairs.len() as f64)
}

/// Head-to-head comparison of per-image drops. The method with the strictly
/// smaller drop wins an image; exact ties award half a win to each.
pub fn win_pct(drops_a: &[f64], drops_b: &[f64]) -> Result<(f64, f64)> {
    if drops_a.len() != drops_b.len() {
        return Err(Error::invalid(format!(
            "drop lists differ in length: {} vs {}",
            drops_a.len(),
            drops_b.len()
        )));
    }
    if drops_a.is_empty() {
        return Err(Error::invalid("no drops to compare"));
    }
    // Count in half-wins so the two shares are exact complements.
    let mut half_wins_a = 0usize;
    for (a, b) in drops_a.iter().zip(drops_b) {
        if a < b {
            half_wins_a += 2;
        } else if a == b {
            half_wins_a += 1;
        }
    }
    let total = 2 * drops_a.len();
    let pct_a = 100.0 * half_wins_a as f64 / total as f64;
    let pct_b = 100.0 * (total - half_wins_a) as f64 / total as f64;
    Ok((pct_a, pct_b))
}

/// Axis-aligned box in pixel coordinates, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub class_index: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize, class_index: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!(
                "degenerate box ({x0}, {y0})-({x1}, {y1})"
            )));
        }
        Ok(BoundingBox {
            x0,
            y0,
            x1,
            y1,
            class_index,
        })
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// `internal / (box_area + external)`, where `internal` and `external`
/// count non-zero mask pixels inside and outside the union of `boxes`, and
/// `box_area` is the area of that union.
pub fn localization_iou(mask: &Tensor, boxes: &[BoundingBox]) -> Result<f64> {
    let (h, w) = mask.hw()?;
    if boxes.is_empty() {
        return Err(Error::invalid(
            "localization needs at least one box for the class",
        ));
    }
    if let Some(b) = boxes.iter().find(|b| !b.fits(w, h)) {
        return Err(Error::invalid(format!("box {b:?} exceeds the {w}x{h} map")));
    }
    let mut inside = vec![false; h * w];
    for b in boxes {
        for y in b.y0..b.y1 {
            inside[y * w + b.x0..y * w + b.x1].fill(true);
        }
    }
    let box_area = inside.iter().filter(|&&v| v).count();
    let (mut internal, mut external) = (0usize, 0usize);
    for (&m, &ins) in mask.data().iter().zip(&inside) {
        if m != 0.0 {
            if ins {
                internal += 1;
            } else {
                external += 1;
            }
        }
    }
    Ok(internal as f64 / (box_area + external) as f64)
}

/// Empirical `θ`-quantile with linear interpolation between order
/// statistics (position `θ·(n−1)` in the sorted sample).
pub fn quantile(values: &[f64], theta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!(
            "quantile level must lie in [0, 1], got {theta}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = theta * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Keeps pixels whose map value is at or above the `θ`-quantile of the map.
/// Returns the `{0, 1}` mask and the surviving fraction.
pub fn occlusion_mask(map: &Tensor, theta: f64) -> Result<(Tensor, f64)> {
    let gamma = quantile(map.data(), theta)?;
    let mask = map.map(|v| if v < gamma { 0.0 } else { 1.0 });
    let frac = mask.sum() / mask.len() as f64;
    Ok((mask, frac))
}

/// One point of the occlusion curve, averaged over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub theta: f64,
    /// Mean of `100 · O / Y`.
    pub relative_confidence: f64,
    /// Mean fraction of pixels left unoccluded.
    pub area_fraction: f64,
}

pub fn validate_theta_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty theta grid"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("theta values must lie in [0, 1]"));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("theta grid must be sorted"));
    }
    Ok(())
}

/// Serialises ROC points as `theta,relative_confidence,area_fraction` CSV.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("theta,relative_confidence,area_fraction\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.theta, p.relative_confidence, p.area_fraction
        ));
    }
    out
}
