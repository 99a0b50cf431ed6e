//! Dataset ingestion, synthetic corpus generation and checkpoint persistence.

pub mod checkpoint;
pub mod io;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One image/mask pair. Image values live in [0,1], stored channel-major
/// (C×H×W) to match the tensor layout; masks hold integer class labels.
#[derive(Clone, Debug)]
pub struct SegmentationSample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

impl SegmentationSample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.image.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("sample image shape")
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&v| v != 0).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub num_classes: usize,
    /// Remap 8-bit mask value 255 to class 1 on binary tasks.
    pub binarize: bool,
}

/// Load paired `<id>.img.png|pgm` / `<id>.mask.png|pgm` files, sorted by id.
pub fn load_dataset(dir: &Path, opts: LoadOptions) -> Result<Vec<SegmentationSample>> {
    #[derive(Default)]
    struct Pair {
        img: Option<std::path::PathBuf>,
        mask: Option<std::path::PathBuf>,
    }
    let mut pairs: BTreeMap<String, Pair> = BTreeMap::new();

    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        for (suffix, is_img) in [
            (".img.png", true),
            (".img.pgm", true),
            (".mask.png", false),
            (".mask.pgm", false),
        ] {
            if let Some(id) = name.strip_suffix(suffix) {
                let slot = pairs.entry(id.to_string()).or_default();
                if is_img {
                    slot.img = Some(path.clone());
                } else {
                    slot.mask = Some(path.clone());
                }
            }
        }
    }

    let mut samples = Vec::with_capacity(pairs.len());
    for (id, pair) in pairs {
        let img_path = pair.img.ok_or(Error::MissingPair {
            id: id.clone(),
            kind: "image",
        })?;
        let mask_path = pair.mask.ok_or(Error::MissingPair {
            id: id.clone(),
            kind: "mask",
        })?;
        let img = io::read_image(&img_path)?;
        let mask = io::read_image(&mask_path)?;
        if mask.channels != 1 {
            return Err(Error::Data(format!("{id}: mask must be single-channel")));
        }
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(Error::Data(format!(
                "{id}: image {}x{} does not match mask {}x{}",
                img.width, img.height, mask.width, mask.height
            )));
        }
        // interleaved u8 → channel-major [0,1]
        let (w, h, c) = (img.width, img.height, img.channels);
        let mut image = vec![0.0f64; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    image[ch * h * w + y * w + x] = img.pixels[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        let mut labels = Vec::with_capacity(mask.pixels.len());
        for &v in &mask.pixels {
            let label = if (v as usize) < opts.num_classes {
                v
            } else if v == 255 && opts.binarize && opts.num_classes == 2 {
                1
            } else {
                return Err(Error::Data(format!(
                    "{id}: mask value {v} outside class range 0..{}",
                    opts.num_classes
                )));
            };
            labels.push(label);
        }
        samples.push(SegmentationSample {
            id,
            channels: c,
            height: h,
            width: w,
            image,
            mask: labels,
        });
    }
    Ok(samples)
}

/// Write a dataset as paired PGM files (images scaled to 0..255, masks as raw
/// class labels).
pub fn write_dataset(dir: &Path, samples: &[SegmentationSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        if s.channels != 1 {
            return Err(Error::Data(format!("{}: pgm export is grayscale-only", s.id)));
        }
        let img: Vec<u8> = s
            .image
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        io::write_pgm(&dir.join(format!("{}.img.pgm", s.id)), s.width, s.height, &img)?;
        io::write_pgm(&dir.join(format!("{}.mask.pgm", s.id)), s.width, s.height, &s.mask)?;
    }
    Ok(())
}

/// Deterministic index split: the first `ceil(n·(1-holdout))` go to train.
/// `holdout = 0` trains and evaluates on everything.
pub fn split_indices(n: usize, holdout_frac: f64) -> (Vec<usize>, Vec<usize>) {
    if holdout_frac <= 0.0 {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all);
    }
    let train_n = ((n as f64) * (1.0 - holdout_frac)).ceil() as usize;
    let train_n = train_n.clamp(1, n);
    let train: Vec<usize> = (0..train_n).collect();
    let val: Vec<usize> = (train_n..n).collect();
    if val.is_empty() {
        (train.clone(), train)
    } else {
        (train, val)
    }
}
