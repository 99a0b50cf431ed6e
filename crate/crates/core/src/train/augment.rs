//! Spatial augmentation: horizontal/vertical flips and 90° rotations, the
//! identical transform applied to image and mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::SegmentationSample;

fn hflip(s: &mut SegmentationSample) {
    let (h, w, c) = (s.height, s.width, s.channels);
    for ch in 0..c {
        for y in 0..h {
            s.image[ch * h * w + y * w..ch * h * w + (y + 1) * w].reverse();
        }
    }
    for y in 0..h {
        s.mask[y * w..(y + 1) * w].reverse();
    }
}

fn vflip(s: &mut SegmentationSample) {
    let (h, w, c) = (s.height, s.width, s.channels);
    for ch in 0..c {
        for y in 0..h / 2 {
            for x in 0..w {
                s.image.swap(ch * h * w + y * w + x, ch * h * w + (h - 1 - y) * w + x);
            }
        }
    }
    for y in 0..h / 2 {
        for x in 0..w {
            s.mask.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

/// Quarter-turn counterclockwise; needs a square raster.
fn rot90(s: &mut SegmentationSample) {
    let (h, w, c) = (s.height, s.width, s.channels);
    debug_assert_eq!(h, w);
    let n = h;
    let mut image = vec![0.0; s.image.len()];
    for ch in 0..c {
        for y in 0..n {
            for x in 0..n {
                image[ch * n * n + (n - 1 - x) * n + y] = s.image[ch * n * n + y * n + x];
            }
        }
    }
    let mut mask = vec![0u8; s.mask.len()];
    for y in 0..n {
        for x in 0..n {
            mask[(n - 1 - x) * n + y] = s.mask[y * n + x];
        }
    }
    s.image = image;
    s.mask = mask;
}

/// Randomly flip/rotate one sample. Draw order is fixed (hflip, vflip, rot90)
/// and disabled transforms draw nothing, so streams are reproducible.
pub fn augment(sample: &SegmentationSample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> SegmentationSample {
    let mut out = sample.clone();
    if cfg.aug_hflip && rng.gen_bool(0.5) {
        hflip(&mut out);
    }
    if cfg.aug_vflip && rng.gen_bool(0.5) {
        vflip(&mut out);
    }
    if cfg.aug_rot90 && sample.height == sample.width {
        let quarter_turns = rng.gen_range(0..4u32);
        for _ in 0..quarter_turns {
            rot90(&mut out);
        }
    }
    out
}
