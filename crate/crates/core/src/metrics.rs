//! Segmentation metrics: Dice, IoU and Hausdorff distance.
//!
//! Conventions (recorded for reproducibility): both-empty comparisons score 1
//! for Dice/IoU; Hausdorff is undefined on empty masks and reported as
//! missing rather than 0; boundaries are extracted by 4-connectivity interior
//! erosion; distances are Euclidean in pixels.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// 2|∩| / (|A|+|B|); both empty → 1.
pub fn dice(pred: &[bool], truth: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    let inter = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count();
    let a = pred.iter().filter(|&&p| p).count();
    let b = truth.iter().filter(|&&t| t).count();
    if a + b == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (a + b) as f64
}

/// |∩| / |∪|; both empty → 1.
pub fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    let inter = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count();
    let union = pred.iter().zip(truth).filter(|(&p, &t)| p || t).count();
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Boundary pixels: foreground with at least one 4-neighbor outside the
/// foreground (image border counts as outside).
pub fn boundary_pixels(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let interior = y > 0
                && y + 1 < height
                && x > 0
                && x + 1 < width
                && mask[(y - 1) * width + x]
                && mask[(y + 1) * width + x]
                && mask[y * width + x - 1]
                && mask[y * width + x + 1];
            if !interior {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_hausdorff(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut worst = 0.0f64;
    for &(ay, ax) in from {
        let mut best = f64::INFINITY;
        for &(by, bx) in to {
            let dy = ay as f64 - by as f64;
            let dx = ax as f64 - bx as f64;
            let d2 = dy * dy + dx * dx;
            if d2 < best {
                best = d2;
                if best == 0.0 {
                    break;
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst.sqrt()
}

/// Symmetric Hausdorff distance between mask boundaries, Euclidean, in
/// pixels. Errors when either mask is empty (the metric is undefined there).
pub fn hausdorff(pred: &[bool], truth: &[bool], height: usize, width: usize) -> Result<f64> {
    let pb = boundary_pixels(pred, height, width);
    let tb = boundary_pixels(truth, height, width);
    if pb.is_empty() || tb.is_empty() {
        return Err(Error::UndefinedMetric(
            "hausdorff distance needs nonempty masks on both sides".into(),
        ));
    }
    Ok(f64::max(directed_hausdorff(&pb, &tb), directed_hausdorff(&tb, &pb)))
}

#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub iou: f64,
    /// None when undefined on at least one side for every sample.
    pub hausdorff: Option<f64>,
}

/// Aggregated evaluation over a sample set: per foreground class means plus
/// overall means. Hausdorff averages only the samples where it is defined.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hausdorff: Option<f64>,
    pub samples: usize,
}

pub fn evaluate(
    predictions: &[Vec<u8>],
    truths: &[Vec<u8>],
    heights_widths: &[(usize, usize)],
    num_classes: usize,
) -> MetricsReport {
    assert_eq!(predictions.len(), truths.len());
    let mut per_class = Vec::new();
    for class in 1..num_classes as u8 {
        let mut dice_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut hd_sum = 0.0;
        let mut hd_count = 0usize;
        for ((pred, truth), &(h, w)) in predictions.iter().zip(truths).zip(heights_widths) {
            let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
            let t: Vec<bool> = truth.iter().map(|&v| v == class).collect();
            dice_sum += dice(&p, &t);
            iou_sum += iou(&p, &t);
            if let Ok(hd) = hausdorff(&p, &t, h, w) {
                hd_sum += hd;
                hd_count += 1;
            }
        }
        let n = predictions.len() as f64;
        per_class.push(ClassMetrics {
            class,
            dice: dice_sum / n,
            iou: iou_sum / n,
            hausdorff: (hd_count > 0).then(|| hd_sum / hd_count as f64),
        });
    }
    let k = per_class.len().max(1) as f64;
    let mean_dice = per_class.iter().map(|c| c.dice).sum::<f64>() / k;
    let mean_iou = per_class.iter().map(|c| c.iou).sum::<f64>() / k;
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.hausdorff).collect();
    let mean_hausdorff = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    MetricsReport {
        per_class,
        mean_dice,
        mean_iou,
        mean_hausdorff,
        samples: predictions.len(),
    }
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dice,iou,hausdorff,samples\n");
        for c in &self.per_class {
            let hd = c.hausdorff.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(s, "{},{:.6},{:.6},{},{}", c.class, c.dice, c.iou, hd, self.samples).unwrap();
        }
        let hd = self.mean_hausdorff.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(s, "mean,{:.6},{:.6},{},{}", self.mean_dice, self.mean_iou, hd, self.samples).unwrap();
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>6} {:>10} {:>10} {:>12}", "class", "dice", "iou", "hausdorff").unwrap();
        for c in &self.per_class {
            let hd = c.hausdorff.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            writeln!(s, "{:>6} {:>10.4} {:>10.4} {:>12}", c.class, c.dice, c.iou, hd).unwrap();
        }
        let hd = self.mean_hausdorff.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        writeln!(s, "{:>6} {:>10.4} {:>10.4} {:>12}  ({} samples)", "mean", self.mean_dice, self.mean_iou, hd, self.samples)
            .unwrap();
        s
    }
}
