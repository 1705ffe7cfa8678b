//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Every
//! key has a default, unknown keys are errors, and [`RunConfig::to_text`]
//! renders the fully resolved configuration in a fixed key order.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rif::{FusionKind, FUSABLE_LEVELS};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Subset of {2, 3, 4}, ascending.
    pub layers: Vec<usize>,
    /// Window side for levels 2..4; `None` selects the default schedule.
    pub windows: Option<[usize; 3]>,
    pub num_refs: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kind: FusionKind::None,
            layers: FUSABLE_LEVELS.to_vec(),
            windows: None,
            num_refs: 3,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub channels: [usize; 4],
    pub decoder_width: usize,
    pub text_dim: usize,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stem_channels: 8,
            channels: [16, 32, 64, 128],
            decoder_width: crate::rfa::DEFAULT_DECODER_WIDTH,
            text_dim: 64,
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Spatial side of each pyramid level.
    pub fn level_sizes(&self) -> [usize; 4] {
        let s = self.input_size;
        [s / 4, s / 8, s / 16, s / 32]
    }

    pub fn windows(&self) -> [usize; 3] {
        let sz = self.level_sizes();
        self.fusion
            .windows
            .unwrap_or_else(|| crate::rif::default_windows([sz[1], sz[2], sz[3]]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.stem_channels == 0 || self.channels.contains(&0) || self.decoder_width == 0 || self.text_dim == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        for &l in &self.fusion.layers {
            if !FUSABLE_LEVELS.contains(&l) {
                return Err(Error::Config(format!(
                    "fusion.layers may only contain 2, 3, 4; got {l}"
                )));
            }
        }
        if self.fusion.kind == FusionKind::Image {
            if self.fusion.num_refs == 0 {
                return Err(Error::Config("image fusion needs fusion.num_refs >= 1".into()));
            }
            for &l in &self.fusion.layers {
                if !self.channels[l - 1].is_multiple_of(self.fusion.heads.max(1)) || self.fusion.heads == 0 {
                    return Err(Error::Config(format!(
                        "level {l} width {} is not divisible by {} heads",
                        self.channels[l - 1],
                        self.fusion.heads
                    )));
                }
            }
            let sizes = self.level_sizes();
            for (i, &k) in self.windows().iter().enumerate() {
                if self.fusion.layers.contains(&(i + 2)) {
                    crate::owca::window_count(sizes[i + 1], k)
                        .map_err(|e| Error::Config(format!("fusion.windows level {}: {e}", i + 2)))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub poly_power: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Random horizontal flips of each training sample.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr_init: 1.5e-4,
            poly_power: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            flip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub categories: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub refs_per_category: usize,
    pub sentences: usize,
    pub strength: f64,
    /// Upper bound on unlabeled look-alike blobs per scene.
    pub decoys: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: 8,
            train_per_category: 40,
            test_per_category: 16,
            refs_per_category: 5,
            sentences: 5,
            strength: 0.85,
            decoys: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Keys accepted by [`RunConfig::set`], in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "input_size",
    "encoder.stem_channels",
    "encoder.channels",
    "decoder.width",
    "fusion.kind",
    "fusion.layers",
    "fusion.windows",
    "fusion.num_refs",
    "fusion.heads",
    "fusion.text_dim",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.poly_power",
    "train.beta1",
    "train.beta2",
    "train.flip",
    "data.categories",
    "data.train_per_category",
    "data.test_per_category",
    "data.refs_per_category",
    "data.sentences",
    "data.strength",
    "data.decoys",
];

/// Keys that determine the network's shape; stored with checkpoints.
pub const MODEL_KEYS: &[&str] = &[
    "input_size",
    "encoder.stem_channels",
    "encoder.channels",
    "decoder.width",
    "fusion.kind",
    "fusion.layers",
    "fusion.windows",
    "fusion.num_refs",
    "fusion.heads",
    "fusion.text_dim",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "input_size" => m.input_size = parse(key, v)?,
            "encoder.stem_channels" => m.stem_channels = parse(key, v)?,
            "encoder.channels" => {
                let c = parse_list(key, v)?;
                m.channels = c
                    .try_into()
                    .map_err(|_| Error::Config("encoder.channels needs exactly four widths".into()))?;
            }
            "decoder.width" => m.decoder_width = parse(key, v)?,
            "fusion.kind" => m.fusion.kind = FusionKind::parse(v)?,
            "fusion.layers" => {
                let mut l = parse_list(key, v)?;
                l.sort_unstable();
                l.dedup();
                m.fusion.layers = l;
            }
            "fusion.windows" => {
                m.fusion.windows =
                    if v == "auto" {
                        None
                    } else {
                        Some(parse_list(key, v)?.try_into().map_err(|_| {
                            Error::Config("fusion.windows needs three sizes (levels 2,3,4) or auto".into())
                        })?)
                    }
            }
            "fusion.num_refs" => m.fusion.num_refs = parse(key, v)?,
            "fusion.heads" => m.fusion.heads = parse(key, v)?,
            "fusion.text_dim" => m.text_dim = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr_init = parse(key, v)?,
            "train.poly_power" => t.poly_power = parse(key, v)?,
            "train.beta1" => t.adam_beta1 = parse(key, v)?,
            "train.beta2" => t.adam_beta2 = parse(key, v)?,
            "train.flip" => t.flip = parse_bool(key, v)?,
            "data.categories" => d.categories = parse(key, v)?,
            "data.train_per_category" => d.train_per_category = parse(key, v)?,
            "data.test_per_category" => d.test_per_category = parse(key, v)?,
            "data.refs_per_category" => d.refs_per_category = parse(key, v)?,
            "data.sentences" => d.sentences = parse(key, v)?,
            "data.strength" => d.strength = parse(key, v)?,
            "data.decoys" => d.decoys = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        Ok(match key {
            "seed" => self.seed.to_string(),
            "input_size" => m.input_size.to_string(),
            "encoder.stem_channels" => m.stem_channels.to_string(),
            "encoder.channels" => join(&m.channels),
            "decoder.width" => m.decoder_width.to_string(),
            "fusion.kind" => m.fusion.kind.as_str().to_string(),
            "fusion.layers" => join(&m.fusion.layers),
            "fusion.windows" => m.fusion.windows.map_or("auto".into(), |w| join(&w)),
            "fusion.num_refs" => m.fusion.num_refs.to_string(),
            "fusion.heads" => m.fusion.heads.to_string(),
            "fusion.text_dim" => m.text_dim.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => format!("{:e}", t.lr_init),
            "train.poly_power" => t.poly_power.to_string(),
            "train.beta1" => t.adam_beta1.to_string(),
            "train.beta2" => t.adam_beta2.to_string(),
            "train.flip" => t.flip.to_string(),
            "data.categories" => d.categories.to_string(),
            "data.train_per_category" => d.train_per_category.to_string(),
            "data.test_per_category" => d.test_per_category.to_string(),
            "data.refs_per_category" => d.refs_per_category.to_string(),
            "data.sentences" => d.sentences.to_string(),
            "data.strength" => d.strength.to_string(),
            "data.decoys" => d.decoys.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    fn render(&self, keys: &[&str]) -> String {
        let mut s = String::new();
        for k in keys {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn to_text(&self) -> String {
        self.render(KEYS)
    }

    pub fn model_text(&self) -> String {
        self.render(MODEL_KEYS)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.strength) {
            return Err(Error::Config("data.strength must lie in [0, 1]".into()));
        }
        if self.model.fusion.kind == FusionKind::Image && self.model.fusion.num_refs > self.data.refs_per_category {
            return Err(Error::Config(format!(
                "fusion.num_refs = {} exceeds data.refs_per_category = {}",
                self.model.fusion.num_refs, self.data.refs_per_category
            )));
        }
        Ok(())
    }
}
