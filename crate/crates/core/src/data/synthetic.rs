//! Synthetic blob corpus: 1–5 random ellipses/rectangles over a noisy
//! background, masks are the exact shape interiors. Deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SegmentationSample;

pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Vec<SegmentationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut image = vec![0.0f64; size * size];
            let mut mask = vec![0u8; size * size];
            for v in image.iter_mut() {
                *v = rng.gen_range(0.0..0.25);
            }
            let shapes = rng.gen_range(1..=5usize);
            for _ in 0..shapes {
                let is_ellipse = rng.gen_bool(0.5);
                let s = size as f64;
                let cx = rng.gen_range(0.2 * s..0.8 * s);
                let cy = rng.gen_range(0.2 * s..0.8 * s);
                let rx = rng.gen_range(0.08 * s..0.22 * s);
                let ry = rng.gen_range(0.08 * s..0.22 * s);
                let intensity = rng.gen_range(0.6..0.95);
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        let inside = if is_ellipse {
                            (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
                        } else {
                            dx.abs() <= rx && dy.abs() <= ry
                        };
                        if inside {
                            mask[y * size + x] = 1;
                            image[y * size + x] = intensity;
                        }
                    }
                }
            }
            // per-pixel texture over everything
            for v in image.iter_mut() {
                *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            }
            SegmentationSample {
                id: format!("synth{i:04}"),
                channels: 1,
                height: size,
                width: size,
                image,
                mask,
            }
        })
        .collect()
}
