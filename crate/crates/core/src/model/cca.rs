//! Channel-wise cross attention gate.
//!
//! Pooled summaries of the transformer output and the upsampled decoder
//! feature pass through one square linear map each; their sum, squashed by a
//! sigmoid, recalibrates the transformer channels before concatenation.
//! No dimensionality reduction anywhere — both maps are C×C.

use super::Leaves;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

pub struct GateOutput {
    /// Recalibrated map, same shape as the transformer input.
    pub output: Var,
    /// Per-channel sigmoid mask, shape [C].
    pub mask: Var,
}

/// Ô = sigmoid(L₁·G(O) + L₂·G(D)) ⊙ O, broadcast per channel.
/// With `cca_relu` set, the sum passes through a ReLU before the sigmoid.
pub fn cca_gate<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    level: usize,
    o: Var,
    d_up: Var,
) -> Result<GateOutput> {
    if g.shape(o) != g.shape(d_up) {
        return Err(Error::Fusion {
            level,
            msg: format!(
                "gate inputs differ: {:?} vs {:?}",
                g.shape(o),
                g.shape(d_up)
            ),
        });
    }
    let c = g.shape(o)[0];
    let g_o = g.global_avg_pool(o)?;
    let g_o = g.reshape(g_o, &[c, 1])?;
    let g_d = g.global_avg_pool(d_up)?;
    let g_d = g.reshape(g_d, &[c, 1])?;
    let l1 = p.var(&format!("cca{level}.l1"));
    let l2 = p.var(&format!("cca{level}.l2"));
    let a = g.matmul(l1, g_o)?;
    let b = g.matmul(l2, g_d)?;
    let mut m = g.add(a, b)?;
    if cfg.cca_relu {
        m = g.relu(m)?;
    }
    let mask2 = g.sigmoid(m)?;
    let mask = g.reshape(mask2, &[c])?;
    let output = g.scale_channels(o, mask)?;
    Ok(GateOutput { output, mask })
}

/// Channel concatenation [gated ; decoder_up]; spatial extents must agree.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, level: usize, gated: Var, d_up: Var) -> Result<Var> {
    let (a, b) = (g.shape(gated), g.shape(d_up));
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return Err(Error::Fusion {
            level,
            msg: format!("cannot concatenate {a:?} with {b:?}"),
        });
    }
    g.concat(&[gated, d_up], 0)
}
