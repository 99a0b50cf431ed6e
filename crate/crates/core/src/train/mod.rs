//! Training loop: per-batch graphs, deterministic gradient reduction, Adam
//! updates, and the two initialization strategies (joint and U-Net-pretrained).

pub mod adam;
pub mod augment;
pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Strategy, TrainConfig};
use crate::data::checkpoint::{load_checkpoint, Checkpoint};
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::model::{forward_logits, register_params, ParamStore};
use crate::par::map_ordered;
use crate::tensor::{Graph, Scalar};

// distinct sub-streams per seed
const SEED_ORDER: u64 = 0x6F72_6465;
const SEED_AUG: u64 = 0x6175_675F;

#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub iteration: usize,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainLoadReport {
    /// Tensors copied from the checkpoint's `unet.*` namespace.
    pub matched: usize,
    /// Checkpoint entries that were not eligible for transfer.
    pub skipped: Vec<String>,
}

pub struct FitResult {
    pub curve: Vec<CurvePoint>,
    /// (iteration, mean validation dice) at the configured cadence.
    pub val_dice: Vec<(usize, f64)>,
    pub pretrain: Option<PretrainLoadReport>,
}

/// Copy encoder/decoder weights by canonical name. Only `unet.*` entries
/// transfer; CCT/CCA tensors are never matched, and a shape mismatch aborts
/// naming the offending tensor.
pub fn load_pretrained_unet<T: Scalar>(
    params: &mut ParamStore<T>,
    ckpt: &Checkpoint,
) -> Result<PretrainLoadReport> {
    let mut matched = 0;
    let mut skipped = Vec::new();
    for (name, tensor) in &ckpt.entries {
        if name.starts_with("meta.") {
            continue;
        }
        if name.starts_with("unet.") {
            params.set(name, tensor.cast::<T>())?;
            matched += 1;
        } else {
            skipped.push(name.clone());
        }
    }
    Ok(PretrainLoadReport { matched, skipped })
}

/// Argmax over the class axis of one forward pass.
pub fn predict<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    sample: &SegmentationSample,
) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let leaves = register_params(&mut g, params, false);
    let logits = forward_logits(&mut g, &leaves, cfg, &sample.image_tensor::<T>())?;
    let value = g.value(logits);
    let shape = value.shape();
    let (k, hw) = (shape[0], shape[1] * shape[2]);
    let data = value.data();
    let mut out = vec![0u8; hw];
    for (px, o) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        for c in 1..k {
            if data[c * hw + px] > data[best * hw + px] {
                best = c;
            }
        }
        *o = best as u8;
    }
    Ok(out)
}

pub fn predict_all<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    samples: &[SegmentationSample],
) -> Result<Vec<Vec<u8>>> {
    map_ordered(samples.iter().collect(), |s| predict(params, cfg, s))
        .into_iter()
        .collect()
}

/// Mean foreground dice of predictions against labels.
pub fn mean_dice<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    samples: &[SegmentationSample],
) -> Result<f64> {
    let preds = predict_all(params, cfg, samples)?;
    let truths: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    let dims: Vec<(usize, usize)> = samples.iter().map(|s| (s.height, s.width)).collect();
    Ok(crate::metrics::evaluate(&preds, &truths, &dims, cfg.num_classes).mean_dice)
}

fn sample_step<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    sample: &SegmentationSample,
) -> Result<(f64, f64, f64, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let leaves = register_params(&mut g, params, true);
    let logits = forward_logits(&mut g, &leaves, cfg, &sample.image_tensor::<T>())?;
    let terms = loss::combined_loss(&mut g, logits, &sample.mask, tc.w_ce, tc.w_dice, tc.dice_include_background)?;
    let grads = g.backward(terms.total)?;
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let var = leaves.var(params.name_at(i));
        out.push(match grads.get(var) {
            Some(slice) => slice.to_vec(),
            None => vec![T::zero(); params.tensor_at(i).len()],
        });
    }
    Ok((
        g.value(terms.total).item().to_f64_val(),
        g.value(terms.ce).item().to_f64_val(),
        g.value(terms.dice).item().to_f64_val(),
        out,
    ))
}

/// Train in place. Deterministic for a fixed seed: parameter init, batch
/// order, augmentation draws and the gradient reduction order are all pinned.
pub fn fit<T: Scalar>(
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
) -> Result<FitResult> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }

    let pretrain = match tc.strategy {
        Strategy::Joint => None,
        Strategy::Pretrained => {
            let path = tc.pretrain_checkpoint.as_ref().expect("validated");
            let ckpt = load_checkpoint(path)?;
            Some(load_pretrained_unet(params, &ckpt)?)
        }
    };

    let mut rng_order = ChaCha8Rng::seed_from_u64(tc.seed ^ SEED_ORDER);
    let mut rng_aug = ChaCha8Rng::seed_from_u64(tc.seed ^ SEED_AUG);
    let mut pool: Vec<usize> = Vec::new();
    let mut opt = adam::Adam::new(params, tc.learning_rate);
    let mut curve = Vec::with_capacity(tc.max_iterations);
    let mut val_dice = Vec::new();

    for iteration in 1..=tc.max_iterations {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if pool.is_empty() {
                pool = (0..train_set.len()).collect();
                pool.shuffle(&mut rng_order);
            }
            let idx = pool.pop().expect("pool refilled");
            batch.push(augment::augment(&train_set[idx], tc, &mut rng_aug));
        }

        let results = map_ordered(batch, |s| sample_step(params, cfg, tc, &s));
        let mut grad_acc: Vec<Vec<T>> =
            (0..params.len()).map(|i| vec![T::zero(); params.tensor_at(i).len()]).collect();
        let mut totals = (0.0, 0.0, 0.0);
        let n = T::from_f64(1.0 / tc.batch_size as f64);
        for r in results {
            let (total, ce, dice, grads) = r?;
            totals.0 += total;
            totals.1 += ce;
            totals.2 += dice;
            for (acc, g) in grad_acc.iter_mut().zip(grads) {
                for (a, gv) in acc.iter_mut().zip(g) {
                    *a += gv * n;
                }
            }
        }
        let b = tc.batch_size as f64;
        let point = CurvePoint {
            iteration,
            total: totals.0 / b,
            ce: totals.1 / b,
            dice: totals.2 / b,
        };
        if !point.total.is_finite() {
            let term = if !point.ce.is_finite() { "ce" } else { "dice" };
            return Err(Error::NonFinite {
                context: format!("loss at iteration {iteration} ({term} term)"),
            });
        }
        opt.step(params, &grad_acc);
        curve.push(point);

        if tc.eval_every > 0 && !val_set.is_empty() && iteration % tc.eval_every == 0 {
            val_dice.push((iteration, mean_dice(params, cfg, val_set)?));
        }
    }

    Ok(FitResult {
        curve,
        val_dice,
        pretrain,
    })
}
