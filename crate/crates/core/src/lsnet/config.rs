//! Line-oriented `key=value` configuration.
//!
//! Blank lines and `#` comments are ignored. Nested settings use dotted keys,
//! e.g. `level.1.k=25` or `train.epochs=60`. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::fma::PoolMode;
use crate::neighbors::{default_split, Projection, SplitSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelConfig {
    pub d_out: usize,
    pub k: usize,
    pub ratio: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub levels: Vec<LevelConfig>,
    pub branches: Vec<Projection>,
    pub fma_pool: PoolMode,
    /// Width of the pointwise stem applied to raw input features.
    pub stem_width: usize,
    pub head_width: usize,
    /// Color channels appended to the xyz input features.
    pub color_channels: usize,
    pub block_size: usize,
    /// Overrides `default_split(k)` at every level when set.
    pub split: Option<SplitSpec>,
    pub class_names: Vec<String>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 4,
            levels: [32, 64, 128, 256]
                .iter()
                .map(|&d_out| LevelConfig {
                    d_out,
                    k: 16,
                    ratio: 4,
                })
                .collect(),
            branches: vec![Projection::XY, Projection::Full3D],
            fma_pool: PoolMode::Max,
            stem_width: 8,
            head_width: 64,
            color_channels: 0,
            block_size: 4096,
            split: None,
            class_names: Vec::new(),
        }
    }
}

impl NetworkConfig {
    pub fn split_for(&self, k: usize) -> SplitSpec {
        self.split.unwrap_or_else(|| default_split(k))
    }

    pub fn input_channels(&self) -> usize {
        3 + self.color_channels
    }

    pub fn class_name(&self, c: usize) -> String {
        self.class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| c.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("at least one level is required".into()));
        }
        if self.block_size < 1 || self.stem_width < 1 || self.head_width < 1 {
            return Err(Error::Config("block_size, stem and head widths must be positive".into()));
        }
        if self.branches.is_empty() || self.branches.len() > 4 {
            return Err(Error::Config("1 to 4 branches are required".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.ratio < 1 || l.k < 1 {
                return Err(Error::Config(format!("level {i}: k and ratio must be at least 1")));
            }
            if l.d_out == 0 || l.d_out % self.branches.len() != 0 {
                return Err(Error::Config(format!(
                    "level {i}: d_out {} not divisible by {} branches",
                    l.d_out,
                    self.branches.len()
                )));
            }
            self.split_for(l.k).check(l.k)?;
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Random rotation about the vertical axis plus coordinate jitter.
    pub augment: bool,
    pub data: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            steps_per_epoch: 1,
            lr0: 0.01,
            lr_decay: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            augment: false,
            data: Vec::new(),
            out_dir: PathBuf::from("lsnet_out"),
            resume: false,
        }
    }
}

impl TrainConfig {
    /// `lr0 * lr_decay^epoch`, epochs counted from zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.steps_per_epoch < 1 {
            return Err(Error::Config("epochs, batch_size and steps_per_epoch must be positive".into()));
        }
        let positive = [self.lr0, self.lr_decay, self.beta1, self.beta2, self.adam_eps];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("optimizer hyperparameters must be positive".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("beta1 and beta2 must be below 1".into()));
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Parses a configuration file body into network and training settings.
pub fn parse_config(text: &str) -> Result<(NetworkConfig, TrainConfig)> {
    let mut net = NetworkConfig::default();
    let mut train = TrainConfig::default();
    let mut level_count: Option<usize> = None;
    let mut level_keys: Vec<(usize, String, String)> = Vec::new();
    let mut s1: Option<usize> = None;
    let mut s2: Option<usize> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "num_classes" => net.num_classes = parse(key, value)?,
            "block_size" => net.block_size = parse(key, value)?,
            "branches" => {
                net.branches = list(value).map(str::parse).collect::<Result<_>>()?;
            }
            "fma_pool" => net.fma_pool = value.parse()?,
            "stem_width" => net.stem_width = parse(key, value)?,
            "head_width" => net.head_width = parse(key, value)?,
            "color_channels" => net.color_channels = parse(key, value)?,
            "class_names" => net.class_names = list(value).map(String::from).collect(),
            "levels" => level_count = Some(parse(key, value)?),
            "split.s1" => s1 = Some(parse(key, value)?),
            "split.s2" => s2 = Some(parse(key, value)?),
            "data" => train.data = list(value).map(PathBuf::from).collect(),
            "out_dir" => train.out_dir = PathBuf::from(value),
            "train.epochs" => train.epochs = parse(key, value)?,
            "train.batch_size" => train.batch_size = parse(key, value)?,
            "train.steps_per_epoch" => train.steps_per_epoch = parse(key, value)?,
            "train.lr0" => train.lr0 = parse(key, value)?,
            "train.lr_decay" => train.lr_decay = parse(key, value)?,
            "train.beta1" => train.beta1 = parse(key, value)?,
            "train.beta2" => train.beta2 = parse(key, value)?,
            "train.eps" => train.adam_eps = parse(key, value)?,
            "train.seed" => train.seed = parse(key, value)?,
            "train.augment" => train.augment = parse_bool(key, value)?,
            "train.resume" => train.resume = parse_bool(key, value)?,
            _ => {
                let parts: Vec<&str> = key.split('.').collect();
                match parts[..] {
                    ["level", idx, field] => {
                        let idx: usize = parse(key, idx)?;
                        level_keys.push((idx, field.to_string(), value.to_string()));
                    }
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
        }
    }

    let count = level_count.unwrap_or_else(|| {
        let max_idx = level_keys.iter().map(|(i, _, _)| i + 1).max().unwrap_or(0);
        max_idx.max(net.levels.len())
    });
    net.levels = (0..count)
        .map(|i| {
            net.levels.get(i).cloned().unwrap_or(LevelConfig {
                d_out: 32 << i.min(10),
                k: 16,
                ratio: 4,
            })
        })
        .collect();
    for (idx, field, value) in level_keys {
        let key = format!("level.{idx}.{field}");
        let level = net
            .levels
            .get_mut(idx)
            .ok_or_else(|| Error::Config(format!("{key}: only {count} levels configured")))?;
        match field.as_str() {
            "d_out" => level.d_out = parse(&key, &value)?,
            "k" => level.k = parse(&key, &value)?,
            "ratio" => level.ratio = parse(&key, &value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }
    net.split = match (s1, s2) {
        (None, None) => None,
        (Some(s1), Some(s2)) => Some(SplitSpec { s1, s2 }),
        _ => return Err(Error::Config("split.s1 and split.s2 must be set together".into())),
    };
    net.validate()?;
    train.validate()?;
    Ok((net, train))
}

/// Renders settings in the format accepted by [`parse_config`].
pub fn render_config(net: &NetworkConfig, train: &TrainConfig) -> String {
    let mut s = String::new();
    let branches: Vec<&str> = net.branches.iter().map(|b| b.name()).collect();
    let _ = writeln!(s, "num_classes={}", net.num_classes);
    if !net.class_names.is_empty() {
        let _ = writeln!(s, "class_names={}", net.class_names.join(","));
    }
    let _ = writeln!(s, "block_size={}", net.block_size);
    let _ = writeln!(s, "branches={}", branches.join(","));
    let _ = writeln!(s, "fma_pool={}", net.fma_pool);
    let _ = writeln!(s, "stem_width={}", net.stem_width);
    let _ = writeln!(s, "head_width={}", net.head_width);
    let _ = writeln!(s, "color_channels={}", net.color_channels);
    let _ = writeln!(s, "levels={}", net.levels.len());
    for (i, l) in net.levels.iter().enumerate() {
        let _ = writeln!(s, "level.{i}.d_out={}", l.d_out);
        let _ = writeln!(s, "level.{i}.k={}", l.k);
        let _ = writeln!(s, "level.{i}.ratio={}", l.ratio);
    }
    if let Some(sp) = net.split {
        let _ = writeln!(s, "split.s1={}\nsplit.s2={}", sp.s1, sp.s2);
    }
    let data: Vec<String> = train.data.iter().map(|p| p.display().to_string()).collect();
    let _ = writeln!(s, "data={}", data.join(","));
    let _ = writeln!(s, "out_dir={}", train.out_dir.display());
    let _ = writeln!(s, "train.epochs={}", train.epochs);
    let _ = writeln!(s, "train.batch_size={}", train.batch_size);
    let _ = writeln!(s, "train.steps_per_epoch={}", train.steps_per_epoch);
    let _ = writeln!(s, "train.lr0={}", train.lr0);
    let _ = writeln!(s, "train.lr_decay={}", train.lr_decay);
    let _ = writeln!(s, "train.beta1={}", train.beta1);
    let _ = writeln!(s, "train.beta2={}", train.beta2);
    let _ = writeln!(s, "train.eps={}", train.adam_eps);
    let _ = writeln!(s, "train.seed={}", train.seed);
    let _ = writeln!(s, "train.augment={}", train.augment);
    let _ = writeln!(s, "train.resume={}", train.resume);
    s
}
