//! Combined loss: w_ce · cross-entropy + w_dice · (1 − soft Dice).
//!
//! Soft Dice uses per-class probability overlap with smoothing ε, averaged
//! over foreground classes by default (background configurable). Both terms
//! are built on the graph so gradients flow through the class softmax.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Smoothing for the soft-Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// Build the combined loss for logits shaped [K, H, W] against integer
/// labels. `w_ce`/`w_dice` must sum to one (validated by `TrainConfig`).
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    mask: &[u8],
    w_ce: f64,
    w_dice: f64,
    dice_include_background: bool,
) -> Result<LossTerms> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dim {
            op: "combined_loss",
            lhs: shape,
            rhs: vec![3],
        });
    }
    let (k, hw) = (shape[0], shape[1] * shape[2]);
    if mask.len() != hw {
        return Err(Error::Data(format!(
            "mask has {} pixels, logits cover {hw}",
            mask.len()
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&v| v as usize >= k) {
        return Err(Error::Data(format!("mask value {bad} outside class range 0..{k}")));
    }

    let flat = g.reshape(logits, &[k, hw])?;

    // one-hot target, classes along axis 0
    let mut onehot = vec![T::zero(); k * hw];
    for (px, &cls) in mask.iter().enumerate() {
        onehot[cls as usize * hw + px] = T::one();
    }
    let onehot = g.constant(Tensor::new(&[k, hw], onehot)?);

    // cross entropy: mean over pixels of -log p[target]
    let logp = g.log_softmax(flat, 0)?;
    let picked = g.mul(logp, onehot)?;
    let sum = g.sum_all(picked)?;
    let ce = g.mul_scalar(sum, T::from_f64(-1.0 / hw as f64))?;

    // soft dice per class: (2·Σ p_c y_c + ε) / (Σ p_c + Σ y_c + ε)
    let probs = g.softmax(flat, 0)?;
    let classes: Vec<usize> = if dice_include_background {
        (0..k).collect()
    } else {
        (1..k).collect()
    };
    if classes.is_empty() {
        return Err(Error::Config("no classes included in the dice term".into()));
    }
    let eps = T::from_f64(DICE_EPS);
    let mut dice_sum: Option<Var> = None;
    for &c in &classes {
        // row selector for class c
        let mut row = vec![T::zero(); k * hw];
        for v in row[c * hw..(c + 1) * hw].iter_mut() {
            *v = T::one();
        }
        let row = g.constant(Tensor::new(&[k, hw], row)?);
        let p_c = g.mul(probs, row)?;
        let p_sum = g.sum_all(p_c)?;

        let inter = {
            let masked = g.mul(probs, onehot)?;
            let class_masked = g.mul(masked, row)?;
            g.sum_all(class_masked)?
        };
        let y_count: f64 = mask.iter().filter(|&&v| v as usize == c).count() as f64;

        let num = g.mul_scalar(inter, T::from_f64(2.0))?;
        let num = g.add_scalar(num, eps)?;
        let den = g.add_scalar(p_sum, T::from_f64(y_count) + eps)?;
        let dice_c = g.div(num, den)?;
        dice_sum = Some(match dice_sum {
            Some(acc) => g.add(acc, dice_c)?,
            None => dice_c,
        });
    }
    let mean_dice = g.mul_scalar(dice_sum.unwrap(), T::from_f64(1.0 / classes.len() as f64))?;
    let neg = g.mul_scalar(mean_dice, T::from_f64(-1.0))?;
    let dice_loss = g.add_scalar(neg, T::one())?;

    let ce_w = g.mul_scalar(ce, T::from_f64(w_ce))?;
    let dice_w = g.mul_scalar(dice_loss, T::from_f64(w_dice))?;
    let total = g.add(ce_w, dice_w)?;
    Ok(LossTerms {
        total,
        ce,
        dice: dice_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_for(mask: &[u8], k: usize, h: usize, w: usize, strength: f64) -> Tensor<f64> {
        // strongly favor the labeled class at every pixel
        let mut data = vec![0.0; k * h * w];
        for (px, &cls) in mask.iter().enumerate() {
            data[cls as usize * h * w + px] = strength;
        }
        Tensor::new(&[k, h, w], data).unwrap()
    }

    #[test]
    fn confident_correct_prediction_has_tiny_loss() {
        let mask: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let mut g = Graph::<f64>::new();
        let logits = g.constant(logits_for(&mask, 2, 4, 4, 30.0));
        let terms = combined_loss(&mut g, logits, &mask, 0.5, 0.5, false).unwrap();
        assert!(g.value(terms.total).item() < 0.01);
    }

    #[test]
    fn uniform_logits_ce_is_ln2() {
        let mask = vec![0u8; 16];
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 4, 4]));
        let terms = combined_loss(&mut g, logits, &mask, 1.0, 0.0, false).unwrap();
        assert!((g.value(terms.ce).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_matches_pixel_counting_on_hard_predictions() {
        // predicted foreground: left half; true foreground: top half of an
        // 4×4 grid → |A| = 8, |B| = 8, |∩| = 4 → dice loss 1 − 2·4/16 = 0.5
        let (h, w) = (4, 4);
        let mut pred = vec![0u8; h * w];
        let mut truth = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                if x < w / 2 {
                    pred[y * w + x] = 1;
                }
                if y < h / 2 {
                    truth[y * w + x] = 1;
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let logits = g.constant(logits_for(&pred, 2, h, w, 40.0));
        let terms = combined_loss(&mut g, logits, &truth, 0.0, 1.0, false).unwrap();
        let expect = 1.0 - 2.0 * 4.0 / 16.0;
        assert!(
            (g.value(terms.dice).item() - expect).abs() < 1e-3,
            "{} vs {expect}",
            g.value(terms.dice).item()
        );
    }

    #[test]
    fn out_of_range_mask_is_data_error() {
        let mut mask = vec![0u8; 16];
        mask[3] = 5;
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(matches!(
            combined_loss(&mut g, logits, &mask, 0.5, 0.5, false),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mask: Vec<u8> = (0..16).map(|i| ((i / 3) % 2) as u8).collect();
        let base = Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.17).sin());
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let l = g.leaf(t.clone(), true);
            let terms = combined_loss(&mut g, l, &mask, 0.5, 0.5, false).unwrap();
            (g, l, terms.total)
        };
        let (g, l, total) = eval(&base);
        let grads = g.backward(total).unwrap();
        let analytic = grads.get(l).unwrap().to_vec();
        for i in (0..32).step_by(5) {
            let h = 1e-5;
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let (gp, _, tp) = eval(&plus);
            let (gm, _, tm) = eval(&minus);
            let numeric = (gp.value(tp).item() - gm.value(tm).item()) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-6);
            assert!(rel < 1e-4, "elem {i}: {} vs {numeric}", analytic[i]);
        }
    }
}
