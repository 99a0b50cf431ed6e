//! Run configuration: architecture, training and experiment settings, plus
//! the line-oriented `key = value` spec format the CLI consumes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Dtype;

/// How a single skip level is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    /// Plain copy of the encoder feature into the decoder (original U-Net).
    Copy,
    /// Level removed; the decoder block sees only the upsampled path.
    None,
    /// Routed through the channel transformer and the CCA gate.
    CTrans,
}

impl SkipMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SkipMode::Copy),
            "none" => Ok(SkipMode::None),
            "ctrans" => Ok(SkipMode::CTrans),
            other => Err(Error::Config(format!("unknown skip mode '{other}'"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            SkipMode::Copy => "copy",
            SkipMode::None => "none",
            SkipMode::CTrans => "ctrans",
        }
    }
}

/// Top-level forward mode: `Plain` honors the per-level skip flags,
/// `UcTransNet` forces every level through CCT + CCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Plain,
    UcTransNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Joint,
    Pretrained,
}

/// Full architecture description. The channel ladder doubles per level
/// (C, 2C, 4C, 8C with a 16C bottleneck), so one base width pins it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    /// Level-1 patch size; deeper levels use P/2, P/4, P/8 so all four token
    /// grids cover the same image areas. Must be a multiple of 8.
    pub patch_size: usize,
    pub heads: usize,
    pub cct_layers: usize,
    pub mlp_ratio: usize,
    pub skip_mode: [SkipMode; 4],
    /// 1-based encoder levels whose tokens act as attention queries.
    pub query_levels: Vec<usize>,
    /// 1-based encoder levels concatenated into the key/value token set.
    pub key_levels: Vec<usize>,
    pub pos_embed: bool,
    /// Learned depthwise patch embedding instead of plain patch averaging.
    pub learned_embed: bool,
    /// Insert a ReLU between the CCA mask sum and the sigmoid.
    pub cca_relu: bool,
    pub dtype: Dtype,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::UcTransNet,
            in_channels: 1,
            num_classes: 2,
            base_channels: 16,
            patch_size: 8,
            heads: 4,
            cct_layers: 4,
            mlp_ratio: 4,
            skip_mode: [SkipMode::Copy; 4],
            query_levels: vec![1, 2, 3, 4],
            key_levels: vec![1, 2, 3, 4],
            pos_embed: true,
            learned_embed: false,
            cca_relu: false,
            dtype: Dtype::F32,
        }
    }
}

impl ModelConfig {
    /// Channels at the four skip levels.
    pub fn channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn bottleneck_channels(&self) -> usize {
        16 * self.base_channels
    }

    /// Patch size at a 1-based level: P, P/2, P/4, P/8.
    pub fn patch_at(&self, level: usize) -> usize {
        self.patch_size >> (level - 1)
    }

    /// Effective wiring of a level under the current mode.
    pub fn route(&self, level: usize) -> SkipMode {
        match self.mode {
            Mode::UcTransNet => SkipMode::CTrans,
            Mode::Plain => self.skip_mode[level - 1],
        }
    }

    pub fn any_ctrans(&self) -> bool {
        (1..=4).any(|l| self.route(l) == SkipMode::CTrans)
    }

    /// Levels that get tokenized: queries plus key/value sources.
    pub fn tokenized_levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (1..=4)
            .filter(|l| self.query_levels.contains(l) || self.key_levels.contains(l))
            .collect();
        v.sort_unstable();
        v
    }

    /// Width of the concatenated key/value token set.
    pub fn key_width(&self) -> usize {
        let ch = self.channels();
        self.key_levels.iter().map(|&l| ch[l - 1]).sum()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.base_channels == 0 || self.heads == 0 || self.cct_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "base_channels, heads, cct_layers and mlp_ratio must be positive".into(),
            ));
        }
        if height % 16 != 0 || width % 16 != 0 {
            return Err(Error::Config(format!(
                "input {height}x{width} not divisible by 16 (four pooling stages)"
            )));
        }
        if self.patch_size % 8 != 0 || self.patch_size == 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 8 so every level keeps an integral patch",
                self.patch_size
            )));
        }
        if height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input {height}x{width} not divisible by patch_size {}",
                self.patch_size
            )));
        }
        for set in [&self.query_levels, &self.key_levels] {
            if set.iter().any(|&l| l == 0 || l > 4) {
                return Err(Error::Config("levels must be within 1..=4".into()));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::Config("duplicate levels in level set".into()));
            }
        }
        if self.any_ctrans() && (self.query_levels.is_empty() || self.key_levels.is_empty()) {
            return Err(Error::Config(
                "query_levels and key_levels must be nonempty when any skip uses ctrans".into(),
            ));
        }
        Ok(())
    }
}

/// Optimization settings. The seed fully determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub w_ce: f64,
    pub w_dice: f64,
    pub aug_hflip: bool,
    pub aug_vflip: bool,
    pub aug_rot90: bool,
    pub strategy: Strategy,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub dice_include_background: bool,
    /// Validation cadence in iterations; 0 means final evaluation only.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 4,
            max_iterations: 300,
            seed: 42,
            w_ce: 0.5,
            w_dice: 0.5,
            aug_hflip: true,
            aug_vflip: true,
            aug_rot90: true,
            strategy: Strategy::Joint,
            pretrain_checkpoint: None,
            dice_include_background: false,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.w_ce + self.w_dice - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "loss weights must sum to 1, got w_ce={} w_dice={}",
                self.w_ce, self.w_dice
            )));
        }
        if self.w_ce < 0.0 || self.w_dice < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.strategy == Strategy::Pretrained && self.pretrain_checkpoint.is_none() {
            return Err(Error::Config(
                "strategy=pretrained requires pretrain_checkpoint".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Dir(PathBuf),
}

/// One experiment: model + training + data + output location.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub source: DataSource,
    pub synthetic_n: usize,
    pub image_size: usize,
    pub data_seed: u64,
    pub holdout_frac: f64,
    /// Remap 8-bit mask value 255 to class 1 on binary tasks.
    pub binarize: bool,
    pub out_dir: PathBuf,
    /// Query/key sweep for the qk ablation, labels like `Q123` / `K12`.
    pub qk_sweep: Vec<String>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            source: DataSource::Synthetic,
            synthetic_n: 16,
            image_size: 64,
            data_seed: 7,
            holdout_frac: 0.25,
            binarize: true,
            out_dir: PathBuf::from("runs/out"),
            qk_sweep: default_qk_sweep(),
        }
    }
}

pub fn default_qk_sweep() -> Vec<String> {
    ["Q1", "Q12", "Q123", "Q1234", "Q234", "K1", "K12", "K123", "K1234"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_levels(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn levels_str(levels: &[usize]) -> String {
    levels
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Parse a skip wiring: either a per-level list `copy,none,ctrans,copy` or a
/// shorthand label (`all`, `none`, `L3`, `wo_L3`, `ctrans`).
pub fn parse_skip_wiring(v: &str) -> Result<[SkipMode; 4]> {
    if v.contains(',') {
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("skip_mode needs 4 entries, got {}", parts.len())));
        }
        let mut out = [SkipMode::Copy; 4];
        for (i, p) in parts.iter().enumerate() {
            out[i] = SkipMode::parse(p)?;
        }
        return Ok(out);
    }
    let lower = v.to_ascii_lowercase();
    match lower.as_str() {
        "all" => Ok([SkipMode::Copy; 4]),
        "none" => Ok([SkipMode::None; 4]),
        "ctrans" => Ok([SkipMode::CTrans; 4]),
        _ => {
            if let Some(rest) = lower.strip_prefix("wo_l") {
                let l: usize = parse_num("skip_mode", rest)?;
                if !(1..=4).contains(&l) {
                    return Err(Error::Config(format!("skip level {l} out of range")));
                }
                let mut out = [SkipMode::Copy; 4];
                out[l - 1] = SkipMode::None;
                Ok(out)
            } else if let Some(rest) = lower.strip_prefix('l') {
                let l: usize = parse_num("skip_mode", rest)?;
                if !(1..=4).contains(&l) {
                    return Err(Error::Config(format!("skip level {l} out of range")));
                }
                let mut out = [SkipMode::None; 4];
                out[l - 1] = SkipMode::Copy;
                Ok(out)
            } else {
                Err(Error::Config(format!("unknown skip wiring '{v}'")))
            }
        }
    }
}

impl ExperimentSpec {
    /// Apply one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => {
                self.model.mode = match v {
                    "plain" => Mode::Plain,
                    "uctransnet" => Mode::UcTransNet,
                    _ => return Err(Error::Config(format!("mode must be plain|uctransnet, got '{v}'"))),
                }
            }
            "in_channels" => self.model.in_channels = parse_num(key, v)?,
            "num_classes" => self.model.num_classes = parse_num(key, v)?,
            "base_channels" => self.model.base_channels = parse_num(key, v)?,
            "patch_size" => self.model.patch_size = parse_num(key, v)?,
            "heads" => self.model.heads = parse_num(key, v)?,
            "cct_layers" => self.model.cct_layers = parse_num(key, v)?,
            "mlp_ratio" => self.model.mlp_ratio = parse_num(key, v)?,
            "skip_mode" => self.model.skip_mode = parse_skip_wiring(v)?,
            "query_levels" => self.model.query_levels = parse_levels(key, v)?,
            "key_levels" => self.model.key_levels = parse_levels(key, v)?,
            "pos_embed" => self.model.pos_embed = parse_bool(key, v)?,
            "learned_embed" => self.model.learned_embed = parse_bool(key, v)?,
            "cca_relu" => self.model.cca_relu = parse_bool(key, v)?,
            "dtype" => {
                self.model.dtype = match v {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(Error::Config(format!("dtype must be f32|f64, got '{v}'"))),
                }
            }
            "lr" | "learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "iterations" => self.train.max_iterations = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "w_ce" => self.train.w_ce = parse_num(key, v)?,
            "w_dice" => self.train.w_dice = parse_num(key, v)?,
            "aug_hflip" => self.train.aug_hflip = parse_bool(key, v)?,
            "aug_vflip" => self.train.aug_vflip = parse_bool(key, v)?,
            "aug_rot90" => self.train.aug_rot90 = parse_bool(key, v)?,
            "strategy" => {
                self.train.strategy = match v {
                    "joint" => Strategy::Joint,
                    "pretrained" => Strategy::Pretrained,
                    _ => return Err(Error::Config(format!("strategy must be joint|pretrained, got '{v}'"))),
                }
            }
            "pretrain_checkpoint" => {
                self.train.pretrain_checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "dice_include_background" => self.train.dice_include_background = parse_bool(key, v)?,
            "eval_every" => self.train.eval_every = parse_num(key, v)?,
            "data_source" => {
                self.source = if v == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Dir(PathBuf::from(v))
                }
            }
            "synthetic_n" => self.synthetic_n = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "holdout_frac" => self.holdout_frac = parse_num(key, v)?,
            "binarize" => self.binarize = parse_bool(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "qk_sweep" => {
                self.qk_sweep = v.split('|').map(|s| s.trim().to_string()).collect();
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a whole spec file: `key = value` lines, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected 'key = value'", path.display(), lineno + 1))
            })?;
            spec.apply(key.trim(), value.trim())?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.image_size, self.image_size)?;
        self.train.validate()?;
        if let DataSource::Synthetic = self.source {
            if self.synthetic_n == 0 {
                return Err(Error::Config("synthetic_n must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::Config("holdout_frac must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical serialization: fixed key order, one assignment per line.
    /// Feeding this back through the parser reproduces the spec, and its CRC
    /// is the provenance hash stamped into every emitted CSV.
    pub fn canonical(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mode = match m.mode {
            Mode::Plain => "plain",
            Mode::UcTransNet => "uctransnet",
        };
        writeln!(s, "mode = {mode}").unwrap();
        writeln!(s, "in_channels = {}", m.in_channels).unwrap();
        writeln!(s, "num_classes = {}", m.num_classes).unwrap();
        writeln!(s, "base_channels = {}", m.base_channels).unwrap();
        writeln!(s, "patch_size = {}", m.patch_size).unwrap();
        writeln!(s, "heads = {}", m.heads).unwrap();
        writeln!(s, "cct_layers = {}", m.cct_layers).unwrap();
        writeln!(s, "mlp_ratio = {}", m.mlp_ratio).unwrap();
        let wiring: Vec<&str> = m.skip_mode.iter().map(|sm| sm.as_str()).collect();
        writeln!(s, "skip_mode = {}", wiring.join(",")).unwrap();
        writeln!(s, "query_levels = {}", levels_str(&m.query_levels)).unwrap();
        writeln!(s, "key_levels = {}", levels_str(&m.key_levels)).unwrap();
        writeln!(s, "pos_embed = {}", m.pos_embed).unwrap();
        writeln!(s, "learned_embed = {}", m.learned_embed).unwrap();
        writeln!(s, "cca_relu = {}", m.cca_relu).unwrap();
        writeln!(s, "dtype = {}", m.dtype).unwrap();
        writeln!(s, "lr = {}", t.learning_rate).unwrap();
        writeln!(s, "batch_size = {}", t.batch_size).unwrap();
        writeln!(s, "iterations = {}", t.max_iterations).unwrap();
        writeln!(s, "seed = {}", t.seed).unwrap();
        writeln!(s, "w_ce = {}", t.w_ce).unwrap();
        writeln!(s, "w_dice = {}", t.w_dice).unwrap();
        writeln!(s, "aug_hflip = {}", t.aug_hflip).unwrap();
        writeln!(s, "aug_vflip = {}", t.aug_vflip).unwrap();
        writeln!(s, "aug_rot90 = {}", t.aug_rot90).unwrap();
        let strategy = match t.strategy {
            Strategy::Joint => "joint",
            Strategy::Pretrained => "pretrained",
        };
        writeln!(s, "strategy = {strategy}").unwrap();
        writeln!(
            s,
            "pretrain_checkpoint = {}",
            t.pretrain_checkpoint.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
        )
        .unwrap();
        writeln!(s, "dice_include_background = {}", t.dice_include_background).unwrap();
        writeln!(s, "eval_every = {}", t.eval_every).unwrap();
        let source = match &self.source {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Dir(p) => p.display().to_string(),
        };
        writeln!(s, "data_source = {source}").unwrap();
        writeln!(s, "synthetic_n = {}", self.synthetic_n).unwrap();
        writeln!(s, "image_size = {}", self.image_size).unwrap();
        writeln!(s, "data_seed = {}", self.data_seed).unwrap();
        writeln!(s, "holdout_frac = {}", self.holdout_frac).unwrap();
        writeln!(s, "binarize = {}", self.binarize).unwrap();
        // out_dir is an output sink, not part of the experiment identity
        writeln!(s, "qk_sweep = {}", self.qk_sweep.join("|")).unwrap();
        s
    }

    /// CRC32 of the canonical serialization, as stamped into CSV headers.
    pub fn hash(&self) -> u32 {
        crate::crc::crc32(self.canonical().as_bytes())
    }
}
