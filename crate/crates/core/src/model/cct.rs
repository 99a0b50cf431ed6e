//! Channel-wise cross fusion transformer.
//!
//! The four encoder scales are tokenized with patch sizes P, P/2, P/4, P/8 so
//! every level yields the same token count d, with channels untouched. Tokens
//! from the key levels concatenate into one d×C_Σ set; each query level
//! attends to it along the channel axis (similarity is C_i×C_Σ, not d×d),
//! head outputs are averaged, and an MLP with a residual finishes each of the
//! L layers. Final tokens are folded back into feature maps.

use std::collections::BTreeMap;

use super::{Leaves, SimRecord};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

use super::unet::EncoderFeatures;

pub struct CctOutputs {
    /// Per level (index 0 = level 1): reconstructed map for query levels,
    /// the untouched encoder feature for bypassed ones.
    pub per_level: [Var; 4],
    pub sims: Vec<SimRecord>,
}

/// Reshape one encoder map into d tokens of C_i channels: patch-average
/// (or the learned depthwise variant), flatten the grid, add the positional
/// embedding.
pub fn tokenize<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    level: usize,
    feature: Var,
) -> Result<Var> {
    let shape = g.shape(feature).to_vec();
    let patch = cfg.patch_at(level);
    if shape[1] % patch != 0 || shape[2] % patch != 0 {
        return Err(Error::Config(format!(
            "level {level} spatial {}x{} not divisible by patch {patch}",
            shape[1], shape[2]
        )));
    }
    let pooled = if cfg.learned_embed {
        let w = p.var(&format!("cct.embed{level}.weight"));
        g.dwconv_patch(feature, w, patch)?
    } else {
        g.avg_pool(feature, patch)?
    };
    let c = shape[0];
    let d = (shape[1] / patch) * (shape[2] / patch);
    let flat = g.reshape(pooled, &[c, d])?;
    let tokens = g.transpose(flat)?;
    if cfg.pos_embed {
        let pos = p.var(&format!("cct.pos{level}"));
        g.add(tokens, pos)
    } else {
        Ok(tokens)
    }
}

/// Channel-axis concatenation of token sets, level order preserved.
pub fn concat_tokens<T: Scalar>(g: &mut Graph<T>, tokens: &[Var]) -> Result<Var> {
    g.concat(tokens, 1)
}

/// One cross-attention head. Queries come from one level's tokens, keys and
/// values from the concatenated set; attention runs along the channel axis.
///
/// Returns channel-major CA (C_i×d) plus the post-softmax similarity matrix
/// and the projected queries used by the residual path.
fn attention_head<T: Scalar>(
    g: &mut Graph<T>,
    t_level: Var,
    t_all: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<(Var, Var, Var)> {
    let c_sum = g.shape(t_all)[1];
    let q_tm = g.matmul(t_level, w_q)?; // d×C_i
    let q = g.transpose(q_tm)?; // C_i×d
    let k_tm = g.matmul(t_all, w_k)?; // d×C_Σ == Kᵀ
    let logits = g.matmul(q, k_tm)?; // C_i×C_Σ
    let scaled = g.mul_scalar(logits, T::from_f64(1.0 / (c_sum as f64).sqrt()))?;
    let normed = g.instance_norm(scaled)?;
    let sim = g.softmax(normed, 1)?;
    let v_tm = g.matmul(t_all, w_v)?; // d×C_Σ
    let v = g.transpose(v_tm)?; // C_Σ×d
    let ca = g.matmul(sim, v)?; // C_i×d
    Ok((ca, sim, q))
}

/// Single-head channel-wise cross attention: CA_i = σ[ψ(Q_i Kᵀ/√C_Σ)]·V with
/// Q_i = (T_i W_Q)ᵀ, K = (T_Σ W_K)ᵀ, V = (T_Σ W_V)ᵀ. Output is C_i×d.
pub fn cross_attention_head<T: Scalar>(
    g: &mut Graph<T>,
    t_level: Var,
    t_all: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<Var> {
    let (ca, _, _) = attention_head(g, t_level, t_all, w_q, w_k, w_v)?;
    Ok(ca)
}

/// Head-averaged attention: MCA_i = (Σ_n CA_iⁿ)/N, and the same average of
/// the projected queries for the residual.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    t_level: Var,
    t_all: Var,
    heads: &[(Var, Var, Var)],
    mut sims: Option<(&mut Vec<SimRecord>, usize, usize)>,
) -> Result<(Var, Var)> {
    let n = heads.len();
    let mut ca_sum: Option<Var> = None;
    let mut q_sum: Option<Var> = None;
    for (hi, &(w_q, w_k, w_v)) in heads.iter().enumerate() {
        let (ca, sim, q) = attention_head(g, t_level, t_all, w_q, w_k, w_v)?;
        if let Some((records, level, layer)) = sims.as_mut() {
            records.push(SimRecord {
                level: *level,
                layer: *layer,
                head: hi + 1,
                var: sim,
            });
        }
        ca_sum = Some(match ca_sum {
            Some(acc) => g.add(acc, ca)?,
            None => ca,
        });
        q_sum = Some(match q_sum {
            Some(acc) => g.add(acc, q)?,
            None => q,
        });
    }
    let inv = T::from_f64(1.0 / n as f64);
    let mca = g.mul_scalar(ca_sum.expect("at least one head"), inv)?;
    let q_bar = g.mul_scalar(q_sum.expect("at least one head"), inv)?;
    Ok((mca, q_bar))
}

/// One transformer layer over all query levels. `tokens` maps tokenized
/// levels to their current d×C_i matrices and is updated in place for query
/// levels; key levels that are not queries pass through unchanged.
pub fn cct_layer<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    layer: usize,
    tokens: &mut BTreeMap<usize, Var>,
    mut sims: Option<&mut Vec<SimRecord>>,
) -> Result<()> {
    let lp = format!("cct.layer{layer}");

    // key/value stream from this layer's entry tokens
    let key_tokens: Vec<Var> = cfg.key_levels.iter().map(|l| tokens[l]).collect();
    let t_all_raw = concat_tokens(g, &key_tokens)?;
    let kv_gain = p.var(&format!("{lp}.ln_kv.gain"));
    let kv_offset = p.var(&format!("{lp}.ln_kv.offset"));
    let t_all = g.layer_norm_rows(t_all_raw, kv_gain, kv_offset)?;

    for &level in &cfg.query_levels {
        let t_raw = tokens[&level];
        let q_gain = p.var(&format!("{lp}.ln_q{level}.gain"));
        let q_offset = p.var(&format!("{lp}.ln_q{level}.offset"));
        let t_ln = g.layer_norm_rows(t_raw, q_gain, q_offset)?;

        let heads: Vec<(Var, Var, Var)> = (1..=cfg.heads)
            .map(|h| {
                (
                    p.var(&format!("cct.head{h}.q{level}")),
                    p.var(&format!("cct.head{h}.k")),
                    p.var(&format!("cct.head{h}.v")),
                )
            })
            .collect();
        let sim_sink = sims.as_deref_mut().map(|r| (r, level, layer));
        let (mca, q_bar) = multi_head_attention(g, t_ln, t_all, &heads, sim_sink)?;

        // O = MCA + MLP(LN(Q̄ + MCA)), all channel mixing per token
        let u = g.add(q_bar, mca)?; // C_i×d
        let u_tm = g.transpose(u)?; // d×C_i
        let m_gain = p.var(&format!("{lp}.ln_mlp{level}.gain"));
        let m_offset = p.var(&format!("{lp}.ln_mlp{level}.offset"));
        let u_ln = g.layer_norm_rows(u_tm, m_gain, m_offset)?;
        let w1 = p.var(&format!("{lp}.mlp{level}.w1"));
        let b1 = p.var(&format!("{lp}.mlp{level}.b1"));
        let w2 = p.var(&format!("{lp}.mlp{level}.w2"));
        let b2 = p.var(&format!("{lp}.mlp{level}.b2"));
        let h1 = g.matmul(u_ln, w1)?;
        let h1 = g.add_vec(h1, b1, 1)?;
        let act = g.gelu(h1)?;
        let h2 = g.matmul(act, w2)?;
        let h2 = g.add_vec(h2, b2, 1)?;
        let mca_tm = g.transpose(mca)?; // d×C_i
        let out = g.add(mca_tm, h2)?;
        tokens.insert(level, out);
    }
    Ok(())
}

/// Fold a level's final tokens back into a C_i×H_i×W_i map: grid reshape,
/// nearest upsampling by the level's patch size, 3×3 conv, ReLU.
pub fn reconstruct<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    level: usize,
    tokens: Var,
    spatial: (usize, usize),
) -> Result<Var> {
    let patch = cfg.patch_at(level);
    let (h, w) = spatial;
    let (gh, gw) = (h / patch, w / patch);
    let shape = g.shape(tokens).to_vec(); // d×C
    let c = shape[1];
    let channel_major = g.transpose(tokens)?;
    let grid = g.reshape(channel_major, &[c, gh, gw])?;
    let up = g.upsample_nearest(grid, patch)?;
    let w_conv = p.var(&format!("cct.recon{level}.weight"));
    let b_conv = p.var(&format!("cct.recon{level}.bias"));
    let conv = g.conv2d(up, w_conv, Some(b_conv), 1, 1)?;
    g.relu(conv)
}

/// Full CCT pipeline: tokenize → L layers → reconstruct. Levels outside
/// `query_levels` bypass the transformer and pass E_i through unchanged;
/// `key_levels` controls which token sets feed the shared key/value stream.
pub fn cct_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Leaves,
    cfg: &ModelConfig,
    enc: &EncoderFeatures,
    trace: bool,
) -> Result<CctOutputs> {
    if cfg.query_levels.is_empty() || cfg.key_levels.is_empty() {
        return Err(Error::Config(
            "query_levels and key_levels must be nonempty for the ctrans route".into(),
        ));
    }
    let mut tokens = BTreeMap::new();
    for &level in &cfg.tokenized_levels() {
        let t = tokenize(g, p, cfg, level, enc.levels[level - 1])?;
        tokens.insert(level, t);
    }

    let mut sims = Vec::new();
    for layer in 1..=cfg.cct_layers {
        cct_layer(g, p, cfg, layer, &mut tokens, trace.then_some(&mut sims))?;
    }

    let mut per_level = [enc.levels[0], enc.levels[1], enc.levels[2], enc.levels[3]];
    for level in 1..=4 {
        if cfg.query_levels.contains(&level) {
            let shape = g.shape(enc.levels[level - 1]).to_vec();
            per_level[level - 1] =
                reconstruct(g, p, cfg, level, tokens[&level], (shape[1], shape[2]))?;
        }
    }
    Ok(CctOutputs { per_level, sims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, register_params};
    use crate::tensor::Tensor;

    fn rngish(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(99);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn token_counts_equal_across_levels() {
        let cfg = ModelConfig {
            base_channels: 4,
            heads: 2,
            cct_layers: 2,
            ..Default::default()
        };
        let params = init_params::<f64>(&cfg, 64, 64, 1).unwrap();
        let mut g = Graph::new();
        let leaves = register_params(&mut g, &params, false);
        let img = g.constant(rngish(&[1, 64, 64], 7));
        let enc = super::super::unet::encode(&mut g, &leaves, &cfg, img).unwrap();
        let mut counts = Vec::new();
        for level in 1..=4 {
            let t = tokenize(&mut g, &leaves, &cfg, level, enc.levels[level - 1]).unwrap();
            counts.push(g.shape(t)[0]);
            assert_eq!(g.shape(t)[1], cfg.channels()[level - 1]);
        }
        // P=8 on 64×64 → (64/8)² = 64 tokens at every level
        assert_eq!(counts, vec![64, 64, 64, 64]);
    }

    #[test]
    fn concat_order_recovers_by_slicing() {
        let mut g = Graph::<f64>::new();
        let t1 = g.constant(rngish(&[4, 2], 1));
        let t2 = g.constant(rngish(&[4, 2], 2));
        let t3 = g.constant(rngish(&[4, 2], 3));
        let t4 = g.constant(rngish(&[4, 2], 4));
        let cat = concat_tokens(&mut g, &[t1, t2, t3, t4]).unwrap();
        assert_eq!(g.shape(cat), &[4, 8]);
        for (i, &t) in [t1, t2, t3, t4].iter().enumerate() {
            let part = g.value(cat).slice_axis(1, 2 * i, 2).unwrap();
            assert_eq!(&part, g.value(t));
        }
    }

    #[test]
    fn similarity_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let t_level = g.constant(rngish(&[16, 4], 5));
        let t_all = g.constant(rngish(&[16, 10], 6));
        let w_q = g.constant(rngish(&[4, 4], 7));
        let w_k = g.constant(rngish(&[10, 10], 8));
        let w_v = g.constant(rngish(&[10, 10], 9));
        let (ca, sim, _) = attention_head(&mut g, t_level, t_all, w_q, w_k, w_v).unwrap();
        assert_eq!(g.shape(sim), &[4, 10]);
        assert_eq!(g.shape(ca), &[4, 16]);
        let sv = g.value(sim).data();
        for r in 0..4 {
            let s: f64 = sv[r * 10..(r + 1) * 10].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_average_value_rows() {
        // zero query projection → constant similarity logits → uniform
        // softmax → every CA row equals the mean of V's rows
        let mut g = Graph::<f64>::new();
        let t_level = g.constant(rngish(&[6, 3], 10));
        let t_all = g.constant(rngish(&[6, 5], 11));
        let w_q = g.constant(Tensor::zeros(&[3, 3]));
        let w_k = g.constant(rngish(&[5, 5], 12));
        let w_v = g.constant(rngish(&[5, 5], 13));
        let ca = cross_attention_head(&mut g, t_level, t_all, w_q, w_k, w_v).unwrap();
        // V = (T_Σ W_V)ᵀ is C_Σ×d; mean over its rows is a d-vector
        let v_tm = g.matmul(t_all, w_v).unwrap();
        let vt = g.transpose(v_tm).unwrap();
        let vv = g.value(vt);
        let d = 6;
        for col in 0..d {
            let mean: f64 = (0..5).map(|r| vv.data()[r * d + col]).sum::<f64>() / 5.0;
            for row in 0..3 {
                let got = g.value(ca).data()[row * d + col];
                assert!((got - mean).abs() < 1e-9, "{got} vs {mean}");
            }
        }
    }

    #[test]
    fn single_head_average_is_identity() {
        let mut g = Graph::<f64>::new();
        let t_level = g.constant(rngish(&[8, 4], 20));
        let t_all = g.constant(rngish(&[8, 6], 21));
        let head = (
            g.constant(rngish(&[4, 4], 22)),
            g.constant(rngish(&[6, 6], 23)),
            g.constant(rngish(&[6, 6], 24)),
        );
        let (mca, _) = multi_head_attention(&mut g, t_level, t_all, &[head], None).unwrap();
        let ca = cross_attention_head(&mut g, t_level, t_all, head.0, head.1, head.2).unwrap();
        assert_eq!(g.value(mca), g.value(ca));
    }

    #[test]
    fn identical_heads_average_to_single_head() {
        let mut g = Graph::<f64>::new();
        let t_level = g.constant(rngish(&[8, 4], 30));
        let t_all = g.constant(rngish(&[8, 6], 31));
        let head = (
            g.constant(rngish(&[4, 4], 32)),
            g.constant(rngish(&[6, 6], 33)),
            g.constant(rngish(&[6, 6], 34)),
        );
        let heads = vec![head; 4];
        let (mca, _) = multi_head_attention(&mut g, t_level, t_all, &heads, None).unwrap();
        let ca = cross_attention_head(&mut g, t_level, t_all, head.0, head.1, head.2).unwrap();
        let diff = g.value(mca).max_abs_diff(g.value(ca));
        assert!(diff < 1e-12, "max diff {diff}");
    }
}
