//! Flat `key = value` run configuration.
//!
//! Keys may be written dotted (`train.lr = 0.001`) or grouped under a `[train]` header.
//! Lines starting with `#` or `;` are comments. Later assignments win.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use facemtl::data::{color_name, parse_color, MaskRanges, Texture};
use facemtl::model::{ModelSpec, Sharing};
use facemtl::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    /// Unset means the command's own default.
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelSpec,
    /// Reject encoders outside the 250k-350k parameter window.
    pub enforce_budget: bool,
    pub train: TrainConfig,
    /// Also save `epoch_NNNN.mmtl` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub mask: MaskRanges,
    /// Some `model.*` key was given explicitly, so a checkpoint must agree with it.
    pub model_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            output_dir: None,
            seed: 0,
            model: ModelSpec::default(),
            enforce_budget: true,
            train: TrainConfig::default(),
            checkpoint_every: 0,
            mask: MaskRanges::default(),
            model_explicit: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("`{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{value}`"),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if key.starts_with("model.") {
            self.model_explicit = true;
        }
        match key {
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "output_dir" => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "model.sharing" => self.model.sharing = parse::<Sharing>(key, value)?,
            "model.non_local" => self.model.use_non_local = parse_bool(key, value)?,
            "model.channels" => {
                let v: Vec<usize> = list(value).map(|s| parse(key, s)).collect::<Result<_>>()?;
                self.model.encoder_channels = v
                    .try_into()
                    .map_err(|_| anyhow!("`{key}`: expected three comma-separated widths"))?;
            }
            "model.head_hidden" => self.model.head_hidden = parse(key, value)?,
            "model.enforce_budget" => self.enforce_budget = parse_bool(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.lr" => self.train.adam.lr = parse(key, value)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, value)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, value)?,
            "train.eps" => self.train.adam.eps = parse(key, value)?,
            "train.soft_lambda" => self.train.soft_lambda = parse(key, value)?,
            "train.shuffle" => self.train.shuffle = parse_bool(key, value)?,
            "train.prime_age_bias" => self.train.prime_age_bias = parse_bool(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "mask.coverage_min" => self.mask.coverage_min = parse(key, value)?,
            "mask.coverage_max" => self.mask.coverage_max = parse(key, value)?,
            "mask.colors" => {
                self.mask.colors = list(value)
                    .map(|c| parse_color(c).map_err(|e| anyhow!("`{key}`: {e}")))
                    .collect::<Result<_>>()?
            }
            "mask.textures" => {
                self.mask.textures = list(value)
                    .map(|t| t.parse::<Texture>().map_err(|e| anyhow!("`{key}`: {e}")))
                    .collect::<Result<_>>()?
            }
            "mask.top_jitter" => self.mask.top_jitter = parse(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", n + 1))?;
            let key = key.trim();
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&full, value).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mask.validate()?;
        Ok(())
    }

    /// Every key with its effective value; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let m = &self.model;
        let t = &self.train;
        let k = &self.mask;
        let mut s = String::new();
        let _ = writeln!(s, "dataset_root = {}", self.dataset_root.display());
        let _ = writeln!(
            s,
            "output_dir = {}",
            self.output_dir.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "sharing = {}", m.sharing);
        let _ = writeln!(s, "non_local = {}", m.use_non_local);
        let _ = writeln!(s, "channels = {}", join(m.encoder_channels.iter().map(|c| c.to_string()).collect()));
        let _ = writeln!(s, "head_hidden = {}", m.head_hidden);
        let _ = writeln!(s, "enforce_budget = {}", self.enforce_budget);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "lr = {:?}", t.adam.lr);
        let _ = writeln!(s, "beta1 = {:?}", t.adam.beta1);
        let _ = writeln!(s, "beta2 = {:?}", t.adam.beta2);
        let _ = writeln!(s, "eps = {:?}", t.adam.eps);
        let _ = writeln!(s, "soft_lambda = {:?}", t.soft_lambda);
        let _ = writeln!(s, "shuffle = {}", t.shuffle);
        let _ = writeln!(s, "prime_age_bias = {}", t.prime_age_bias);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "\n[mask]");
        let _ = writeln!(s, "coverage_min = {:?}", k.coverage_min);
        let _ = writeln!(s, "coverage_max = {:?}", k.coverage_max);
        let _ = writeln!(s, "colors = {}", join(k.colors.iter().map(|c| color_name(*c)).collect()));
        let _ = writeln!(s, "textures = {}", join(k.textures.iter().map(|t| t.to_string()).collect()));
        let _ = writeln!(s, "top_jitter = {:?}", k.top_jitter);
        s
    }
}
