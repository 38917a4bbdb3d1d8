//! `key = value` run configuration.
//!
//! One flat namespace covers the site, dataset, model, training, baseline,
//! inference and evaluation settings. `#` starts a comment. Lists are comma
//! separated and may contain inclusive ranges such as `3..=32`. Optional
//! reals accept `none`. Unknown keys and malformed values are errors that
//! name the offending key.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::baselines::DiscriminativeConfig;
use crate::error::{Error, Result};
use crate::eval::SweepSpec;
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::sitegen::{Point, SiteConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub site: SiteConfig,
    pub n_users: usize,
    pub train_fraction: f64,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Budget set of the dense-regime model used by the generalization protocol.
    pub dense_budget_set: Vec<usize>,
    pub disc: DiscriminativeConfig,
    pub infer: InferenceConfig,
    pub sweep: SweepSpec,
}

impl Default for Config {
    fn default() -> Self {
        let site = SiteConfig::default();
        let n = site.n_antennas;
        Self {
            site,
            n_users: 10_000,
            train_fraction: 0.8,
            data_seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dense_budget_set: (3..=n).collect(),
            disc: DiscriminativeConfig::for_antennas(n),
            infer: InferenceConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| Error::config(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("key `{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    match value.to_ascii_lowercase().as_str() {
        "none" | "" => Ok(None),
        _ => parse(key, value).map(Some),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

/// Integer list with optional inclusive `a..=b` ranges.
fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = item.split_once("..=") {
            let (a, b): (usize, usize) = (parse(key, a.trim())?, parse(key, b.trim())?);
            if a > b {
                return Err(Error::config(format!("key `{key}`: empty range `{item}`")));
            }
            out.extend(a..=b);
        } else {
            out.push(parse(key, item)?);
        }
    }
    if out.is_empty() {
        return Err(Error::config(format!("key `{key}`: empty list")));
    }
    Ok(out)
}

impl Config {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "n_antennas" => {
                let n = parse(key, v)?;
                self.site.n_antennas = n;
                self.model.seq_len = n;
            }
            "spacing_ratio" => self.site.spacing_ratio = parse(key, v)?,
            "n_paths" => self.site.n_paths = parse(key, v)?,
            "n_scatterers" => self.site.n_scatterers = parse(key, v)?,
            "area_x_min" => self.site.area.x_min = parse(key, v)?,
            "area_x_max" => self.site.area.x_max = parse(key, v)?,
            "area_y_min" => self.site.area.y_min = parse(key, v)?,
            "area_y_max" => self.site.area.y_max = parse(key, v)?,
            "bs_x" => self.site.bs_position = Point::new(parse(key, v)?, self.site.bs_position.y),
            "bs_y" => self.site.bs_position = Point::new(self.site.bs_position.x, parse(key, v)?),
            "los_probability" => self.site.los_probability = parse(key, v)?,
            "pathloss_exponent" => self.site.pathloss_exponent = parse(key, v)?,
            "path_decay" => self.site.path_decay = parse(key, v)?,
            "scatter_gain" => self.site.scatter_gain = parse(key, v)?,
            "site_seed" => self.site.seed = parse(key, v)?,
            "n_users" => self.n_users = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,

            "embed_dim" => self.model.embed_dim = parse(key, v)?,
            "n_blocks" => self.model.n_blocks = parse(key, v)?,
            "n_heads" => self.model.n_heads = parse(key, v)?,
            "ffn_multiplier" => self.model.ffn_multiplier = parse(key, v)?,
            "n_channels" => self.model.n_channels = parse(key, v)?,
            "seq_len" => self.model.seq_len = parse(key, v)?,
            "cond_dim" => self.model.cond_dim = parse(key, v)?,

            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "stage1_epochs" => self.train.stage1_epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "p" => self.train.p = parse(key, v)?,
            "p_full" => self.train.p_full = parse(key, v)?,
            "budget_set" => self.train.budget_set = parse_usize_list(key, v)?,
            "ema_decay" => self.train.ema_decay = parse(key, v)?,
            "dense_budget_set" => self.dense_budget_set = parse_usize_list(key, v)?,
            "seed" => {
                let s: u64 = parse(key, v)?;
                self.train.seed = s;
                self.infer.seed = s;
                self.sweep.seed = s;
                self.disc.seed = s;
            }

            "disc_hidden_dims" => self.disc.hidden_dims = parse_usize_list(key, v)?,
            "disc_epochs" => self.disc.epochs = parse(key, v)?,
            "disc_batch_size" => self.disc.batch_size = parse(key, v)?,
            "disc_learning_rate" => self.disc.learning_rate = parse(key, v)?,
            "disc_weight_decay" => self.disc.weight_decay = parse(key, v)?,

            "steps" => self.infer.steps = parse(key, v)?,
            "brainstorm" => self.infer.brainstorm = parse(key, v)?,
            "probe_budget" => self.infer.probe_budget = parse(key, v)?,
            "use_ema" => self.infer.use_ema = parse_bool(key, v)?,
            "selection_noise_snr_db" => self.infer.selection_noise_snr_db = parse_opt_f64(key, v)?,
            "prompt_snr_db" => self.infer.prompt_snr_db = parse_opt_f64(key, v)?,

            "sweep_budgets" => self.sweep.budgets = parse_usize_list(key, v)?,
            "sweep_brainstorm" => self.sweep.brainstorm = parse_usize_list(key, v)?,
            "sweep_steps" => self.sweep.steps = parse_usize_list(key, v)?,
            "overhead_steps" => self.sweep.overhead_steps = parse_usize_list(key, v)?,
            "snr_grid" => {
                self.sweep.snr_db = parse_list::<String>(key, v)?.iter().map(|s| parse_opt_f64(key, s)).collect::<Result<_>>()?
            }
            "q_grid" => self.sweep.q_grid = parse_usize_list(key, v)?,
            "fixed_q" => self.sweep.fixed_q = parse(key, v)?,
            "noise_q" => self.sweep.noise_q = parse(key, v)?,
            "fixed_m" => self.sweep.fixed_m = parse(key, v)?,
            "fixed_steps" => self.sweep.fixed_steps = parse(key, v)?,
            "n_test_users" => self.sweep.n_test_users = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every line of `text` on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// `KEY=VALUE` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(format!("override `{kv}` is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        for o in overrides {
            c.apply_override(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.site.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.disc.validate()?;
        let n = self.site.n_antennas;
        if self.model.seq_len != n {
            return Err(Error::config(format!("seq_len {} differs from n_antennas {n}", self.model.seq_len)));
        }
        self.infer.validate(n)?;
        self.sweep.validate(n)?;
        for (name, set) in [("budget_set", &self.train.budget_set), ("dense_budget_set", &self.dense_budget_set)] {
            if let Some(q) = set.iter().find(|&&q| q == 0 || q > n) {
                return Err(Error::config(format!("{name} entry {q} outside [1, {n}]")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || self.n_users < 2 {
            return Err(Error::config("need n_users >= 2 and 0 < train_fraction < 1"));
        }
        Ok(())
    }
}
