//! Four-level U-Net encoder/decoder with pluggable skip connections.
//!
//! Blocks are two (conv3×3 → per-channel norm → ReLU) stages; downsampling is
//! 2×2 max-pool, upsampling is nearest-neighbor followed by a convolution.
//! When a level's skip is absent the decoder block's first convolution simply
//! takes half the input channels; no dead channels are padded in.

use super::{cca, Leaves};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Encoder outputs: one feature map per skip level plus the bottleneck.
/// `levels[i]` has `channels()[i]` channels at spatial extent H/2^i.
pub struct EncoderFeatures {
    pub levels: [Var; 4],
    pub bottleneck: Var,
}

fn conv_norm_relu<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    prefix: &str,
    idx: usize,
    x: Var,
) -> Result<Var> {
    let w = p.var(&format!("{prefix}.conv{idx}.weight"));
    let b = p.var(&format!("{prefix}.conv{idx}.bias"));
    let y = g.conv2d(x, w, Some(b), 1, 1)?;
    let gain = p.var(&format!("{prefix}.norm{idx}.gain"));
    let offset = p.var(&format!("{prefix}.norm{idx}.offset"));
    let y = g.instance_norm_2d(y, gain, offset)?;
    g.relu(y)
}

fn block<T: Scalar>(g: &mut Graph<T>, p: &Leaves, prefix: &str, x: Var) -> Result<Var> {
    let y = conv_norm_relu(g, p, prefix, 1, x)?;
    conv_norm_relu(g, p, prefix, 2, y)
}

/// Encoder: E_i at channels C_i and spatial H/2^{i-1}, bottleneck at 2·C₄, H/16.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    image: Var,
) -> Result<EncoderFeatures> {
    let shape = g.shape(image).to_vec();
    cfg.validate(shape[1], shape[2])?;

    let e1 = block(g, p, "unet.enc1", image)?;
    let p1 = g.max_pool2(e1)?;
    let e2 = block(g, p, "unet.enc2", p1)?;
    let p2 = g.max_pool2(e2)?;
    let e3 = block(g, p, "unet.enc3", p2)?;
    let p3 = g.max_pool2(e3)?;
    let e4 = block(g, p, "unet.enc4", p3)?;
    let p4 = g.max_pool2(e4)?;
    let bottleneck = block(g, p, "unet.bottleneck", p4)?;

    Ok(EncoderFeatures {
        levels: [e1, e2, e3, e4],
        bottleneck,
    })
}

/// What the decoder fuses at each level.
pub enum SkipSource {
    /// Plain copy of an encoder feature map.
    Copy(Var),
    /// No lateral input at this level.
    Absent,
    /// CCT output to be recalibrated against the upsampled decoder feature.
    Gated(Var),
}

/// Decoder with per-level skip sources. Emits num_classes×H×W logits.
pub fn decode_with_sources<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    bottleneck: Var,
    sources: [SkipSource; 4],
    mut mask_trace: Option<&mut Vec<(usize, Var)>>,
) -> Result<Var> {
    let mut x = bottleneck;
    let mut sources = sources;
    for level in (1..=4).rev() {
        let prefix = format!("unet.dec{level}");
        let up = g.upsample_nearest(x, 2)?;
        let w = p.var(&format!("{prefix}.up.weight"));
        let b = p.var(&format!("{prefix}.up.bias"));
        let up = g.conv2d(up, w, Some(b), 1, 1)?;
        let gain = p.var(&format!("{prefix}.up_norm.gain"));
        let offset = p.var(&format!("{prefix}.up_norm.offset"));
        let up = g.instance_norm_2d(up, gain, offset)?;
        let d_up = g.relu(up)?;

        let fused = match std::mem::replace(&mut sources[level - 1], SkipSource::Absent) {
            SkipSource::Absent => d_up,
            SkipSource::Copy(skip) => {
                check_skip_shape(g, level, skip, d_up)?;
                g.concat(&[skip, d_up], 0)?
            }
            SkipSource::Gated(o) => {
                check_skip_shape(g, level, o, d_up)?;
                let gated = cca::cca_gate(g, p, cfg, level, o, d_up)?;
                if let Some(trace) = mask_trace.as_deref_mut() {
                    trace.push((level, gated.mask));
                }
                cca::fuse(g, level, gated.output, d_up)?
            }
        };
        x = block(g, p, &prefix, fused)?;
    }

    let w = p.var("unet.head.weight");
    let b = p.var("unet.head.bias");
    g.conv2d(x, w, Some(b), 0, 1)
}

/// Decoder in the shape the skip analysis uses: an optional plain feature map
/// per level (`Some` = copy, `None` = removed).
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    bottleneck: Var,
    skips: [Option<Var>; 4],
) -> Result<Var> {
    let sources = skips.map(|s| match s {
        Some(v) => SkipSource::Copy(v),
        None => SkipSource::Absent,
    });
    decode_with_sources(g, p, cfg, bottleneck, sources, None)
}

fn check_skip_shape<T: Scalar>(g: &Graph<T>, level: usize, skip: Var, d_up: Var) -> Result<()> {
    if g.shape(skip) != g.shape(d_up) {
        return Err(Error::Fusion {
            level,
            msg: format!(
                "skip shape {:?} does not match decoder feature {:?}",
                g.shape(skip),
                g.shape(d_up)
            ),
        });
    }
    Ok(())
}
