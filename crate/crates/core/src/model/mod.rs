//! Model parameters and the full forward pass.
//!
//! Parameter tensors live in a [`ParamStore`] keyed by canonical names
//! (`unet.*`, `cct.*`, `cca*.*`). The store's insertion order doubles as the
//! RNG draw order, so a seed pins every weight; the U-Net/CTrans namespace
//! split is what lets a plain U-Net checkpoint transfer into the full model.

pub mod cca;
pub mod cct;
pub mod unet;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SkipMode};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Ordered, name-indexed parameter set.
#[derive(Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                if self.tensors[i].shape() != tensor.shape() {
                    return Err(Error::Load(format!(
                        "shape mismatch for '{}': {:?} vs {:?}",
                        name,
                        self.tensors[i].shape(),
                        tensor.shape()
                    )));
                }
                self.tensors[i] = tensor;
                Ok(())
            }
            None => Err(Error::Load(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }
}

enum Init {
    /// Kaiming-uniform for convolutions feeding ReLUs: U(±sqrt(6/fan_in)).
    Kaiming { fan_in: usize },
    /// Xavier-uniform for linear/attention maps: U(±sqrt(6/(fan_in+fan_out))).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Const(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_spec(name: String, co: usize, ci: usize, k: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![co, ci, k, k],
        init: Init::Kaiming { fan_in: ci * k * k },
    }
}

fn linear_spec(name: String, rows: usize, cols: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![rows, cols],
        init: Init::Xavier {
            fan_in: rows,
            fan_out: cols,
        },
    }
}

fn vec_spec(name: String, n: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![n],
        init,
    }
}

/// Conv + norm pair inside an encoder/decoder block.
fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize) {
    for (idx, ci) in [(1, c_in), (2, c_out)] {
        out.push(conv_spec(format!("{prefix}.conv{idx}.weight"), c_out, ci, 3));
        out.push(vec_spec(format!("{prefix}.conv{idx}.bias"), c_out, Init::Zeros));
        out.push(vec_spec(format!("{prefix}.norm{idx}.gain"), c_out, Init::Ones));
        out.push(vec_spec(format!("{prefix}.norm{idx}.offset"), c_out, Init::Zeros));
    }
}

/// The complete parameter layout for a configuration, in canonical order.
/// Everything about the model's size is a pure function of the config.
fn param_specs(cfg: &ModelConfig, height: usize, width: usize) -> Vec<ParamSpec> {
    let ch = cfg.channels();
    let mut specs = Vec::new();

    // encoder
    let mut c_in = cfg.in_channels;
    for (l, &c) in ch.iter().enumerate() {
        block_specs(&mut specs, &format!("unet.enc{}", l + 1), c_in, c);
        c_in = c;
    }
    block_specs(&mut specs, "unet.bottleneck", ch[3], cfg.bottleneck_channels());

    // decoder, deep to shallow
    for level in (1..=4).rev() {
        let c = ch[level - 1];
        let prefix = format!("unet.dec{level}");
        specs.push(conv_spec(format!("{prefix}.up.weight"), c, 2 * c, 3));
        specs.push(vec_spec(format!("{prefix}.up.bias"), c, Init::Zeros));
        specs.push(vec_spec(format!("{prefix}.up_norm.gain"), c, Init::Ones));
        specs.push(vec_spec(format!("{prefix}.up_norm.offset"), c, Init::Zeros));
        let arity = if cfg.route(level) == SkipMode::None { 1 } else { 2 };
        block_specs(&mut specs, &prefix, arity * c, c);
    }
    specs.push(ParamSpec {
        name: "unet.head.weight".into(),
        shape: vec![cfg.num_classes, ch[0], 1, 1],
        init: Init::Kaiming { fan_in: ch[0] },
    });
    specs.push(vec_spec("unet.head.bias".into(), cfg.num_classes, Init::Zeros));

    if cfg.any_ctrans() {
        let d = (height / cfg.patch_size) * (width / cfg.patch_size);
        let c_sum = cfg.key_width();

        for &l in &cfg.tokenized_levels() {
            let c = ch[l - 1];
            if cfg.pos_embed {
                specs.push(ParamSpec {
                    name: format!("cct.pos{l}"),
                    shape: vec![d, c],
                    init: Init::Zeros,
                });
            }
            if cfg.learned_embed {
                let p = cfg.patch_at(l);
                specs.push(ParamSpec {
                    name: format!("cct.embed{l}.weight"),
                    shape: vec![c, p, p],
                    init: Init::Const(1.0 / (p * p) as f64),
                });
            }
        }
        // attention projections, shared across layers, independent per head
        for head in 1..=cfg.heads {
            for &l in &cfg.query_levels {
                let c = ch[l - 1];
                specs.push(linear_spec(format!("cct.head{head}.q{l}"), c, c));
            }
            specs.push(linear_spec(format!("cct.head{head}.k"), c_sum, c_sum));
            specs.push(linear_spec(format!("cct.head{head}.v"), c_sum, c_sum));
        }
        // per-layer norms and MLPs
        for layer in 1..=cfg.cct_layers {
            let lp = format!("cct.layer{layer}");
            for &l in &cfg.query_levels {
                let c = ch[l - 1];
                specs.push(vec_spec(format!("{lp}.ln_q{l}.gain"), c, Init::Ones));
                specs.push(vec_spec(format!("{lp}.ln_q{l}.offset"), c, Init::Zeros));
            }
            specs.push(vec_spec(format!("{lp}.ln_kv.gain"), c_sum, Init::Ones));
            specs.push(vec_spec(format!("{lp}.ln_kv.offset"), c_sum, Init::Zeros));
            for &l in &cfg.query_levels {
                let c = ch[l - 1];
                let hidden = cfg.mlp_ratio * c;
                specs.push(vec_spec(format!("{lp}.ln_mlp{l}.gain"), c, Init::Ones));
                specs.push(vec_spec(format!("{lp}.ln_mlp{l}.offset"), c, Init::Zeros));
                specs.push(linear_spec(format!("{lp}.mlp{l}.w1"), c, hidden));
                specs.push(vec_spec(format!("{lp}.mlp{l}.b1"), hidden, Init::Zeros));
                specs.push(linear_spec(format!("{lp}.mlp{l}.w2"), hidden, c));
                specs.push(vec_spec(format!("{lp}.mlp{l}.b2"), c, Init::Zeros));
            }
        }
        // token reconstruction back to feature maps
        for &l in &cfg.query_levels {
            let c = ch[l - 1];
            specs.push(conv_spec(format!("cct.recon{l}.weight"), c, c, 3));
            specs.push(vec_spec(format!("cct.recon{l}.bias"), c, Init::Zeros));
        }
        // CCA gates for every ctrans-routed level
        for level in 1..=4 {
            if cfg.route(level) == SkipMode::CTrans {
                let c = ch[level - 1];
                specs.push(linear_spec(format!("cca{level}.l1"), c, c));
                specs.push(linear_spec(format!("cca{level}.l2"), c, c));
            }
        }
    }
    specs
}

/// Initialize every parameter from a seed. Draws happen in canonical order
/// with f64 precision, so f32 and f64 stores sample identical values.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, height: usize, width: usize, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg, height, width) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
            }
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Const(c) => vec![T::from_f64(c); n],
        };
        store.insert(spec.name, Tensor::new(&spec.shape, data)?);
    }
    Ok(store)
}

/// Parameter leaves registered on a graph for one forward pass.
pub struct Leaves {
    vars: HashMap<String, Var>,
}

impl Leaves {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not registered"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Put every parameter on the tape, in store order.
pub fn register_params<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    requires_grad: bool,
) -> Leaves {
    let mut vars = HashMap::new();
    for (name, tensor) in params.iter() {
        vars.insert(name.to_string(), g.leaf(tensor.clone(), requires_grad));
    }
    Leaves { vars }
}

/// A recorded similarity matrix: `var` points at the post-softmax C_i×C_Σ map.
pub struct SimRecord {
    pub level: usize,
    pub layer: usize,
    pub head: usize,
    pub var: Var,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Similarity matrices per (level, layer, head); populated when traced.
    pub sims: Vec<SimRecord>,
    /// CCA channel masks per ctrans level; populated when traced.
    pub masks: Vec<(usize, Var)>,
}

/// Full forward pass: encoder, optional CCT/CCA skip route, decoder.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    leaves: &Leaves,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    trace: bool,
) -> Result<ForwardOutput> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(Error::Dim {
            op: "forward",
            lhs: shape,
            rhs: vec![cfg.in_channels],
        });
    }
    cfg.validate(shape[1], shape[2])?;

    let img = g.constant(image.clone());
    let enc = unet::encode(g, leaves, cfg, img)?;

    let mut sims = Vec::new();
    let mut masks = Vec::new();
    let mut sources: [unet::SkipSource; 4] = [
        unet::SkipSource::Absent,
        unet::SkipSource::Absent,
        unet::SkipSource::Absent,
        unet::SkipSource::Absent,
    ];

    if cfg.any_ctrans() {
        let cct_out = cct::cct_forward(g, leaves, cfg, &enc, trace)?;
        sims = cct_out.sims;
        for level in 1..=4 {
            sources[level - 1] = match cfg.route(level) {
                SkipMode::Copy => unet::SkipSource::Copy(enc.levels[level - 1]),
                SkipMode::None => unet::SkipSource::Absent,
                SkipMode::CTrans => unet::SkipSource::Gated(cct_out.per_level[level - 1]),
            };
        }
    } else {
        for level in 1..=4 {
            sources[level - 1] = match cfg.route(level) {
                SkipMode::Copy => unet::SkipSource::Copy(enc.levels[level - 1]),
                _ => unet::SkipSource::Absent,
            };
        }
    }

    let logits = unet::decode_with_sources(g, leaves, cfg, enc.bottleneck, sources, trace.then_some(&mut masks))?;
    Ok(ForwardOutput { logits, sims, masks })
}

/// Convenience wrapper matching the plain/uctransnet mode switch.
pub fn forward_logits<T: Scalar>(
    g: &mut Graph<T>,
    leaves: &Leaves,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<Var> {
    Ok(forward(g, leaves, cfg, image, false)?.logits)
}
