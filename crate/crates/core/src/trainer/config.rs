use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;

/// Components that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// No KG propagation: `L` is forced to 0 and diversified pooling runs
    /// once on the layer-0 item rows.
    pub no_kg: bool,
    /// Relation embeddings replaced by all-ones during propagation.
    pub no_relation_encoding: bool,
    /// Users pooled by plain mean instead of diversity weights.
    pub no_del: bool,
    /// Alignment and uniformity weights forced to zero.
    pub no_cau: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["no_kg", "no_relation_encoding", "no_del", "no_cau"];

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_kg" => self.no_kg = true,
            "no_relation_encoding" => self.no_relation_encoding = true,
            "no_del" => self.no_del = true,
            "no_cau" => self.no_cau = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [self.no_kg, self.no_relation_encoding, self.no_del, self.no_cau];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Named baseline configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// BPR matrix factorisation: no propagation of any kind.
    Mf,
    /// Light graph convolution only.
    LightGcn,
    /// Full model.
    KgDiverse,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Preset::Mf),
            "lightgcn" => Ok(Preset::LightGcn),
            "kg-diverse" => Ok(Preset::KgDiverse),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected mf, lightgcn or kg-diverse)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Mf => "mf",
            Preset::LightGcn => "lightgcn",
            Preset::KgDiverse => "kg-diverse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub kg_layers: usize,
    pub lgc_layers: usize,
    pub learning_rate: f64,
    pub lambda_align: f64,
    pub lambda_uniform: f64,
    pub lambda_reg: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    pub max_epochs: usize,
    pub ablations: Ablations,
    pub deterministic: bool,
    /// Average the BPR term over the batch instead of summing it.
    pub bpr_mean: bool,
    /// Unit-normalise rows before the uniformity term.
    pub uniform_normalize: bool,
    /// Anchor draws per step for the alignment term; 0 means batch size.
    pub align_pairs: usize,
    /// Cap on distinct items entering the uniformity term per step.
    pub uniform_sample: usize,
    /// Cut-off of the validation recall used for early stopping.
    pub valid_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            kg_layers: 2,
            lgc_layers: 3,
            learning_rate: 1e-3,
            lambda_align: 0.5,
            lambda_uniform: 0.5,
            lambda_reg: 1e-5,
            batch_size: 1024,
            seed: 2024,
            patience: 10,
            max_epochs: 500,
            ablations: Ablations::default(),
            deterministic: false,
            bpr_mean: false,
            uniform_normalize: false,
            align_pairs: 0,
            uniform_sample: 512,
            valid_k: 20,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = TrainConfig::default();
        c.apply_preset(preset);
        c
    }

    /// Overwrites the architecture fields a preset pins down.
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Mf => {
                self.kg_layers = 0;
                self.lgc_layers = 0;
                self.lambda_align = 0.0;
                self.lambda_uniform = 0.0;
            }
            Preset::LightGcn => {
                self.kg_layers = 0;
                if self.lgc_layers == 0 {
                    self.lgc_layers = 3;
                }
                self.lambda_align = 0.0;
                self.lambda_uniform = 0.0;
            }
            Preset::KgDiverse => {}
        }
    }

    /// KG propagation depth after ablations.
    pub fn effective_kg_layers(&self) -> usize {
        if self.ablations.no_kg {
            0
        } else {
            self.kg_layers
        }
    }

    /// `(λ_align, λ_uniform)` after ablations.
    pub fn effective_cau(&self) -> (f64, f64) {
        if self.ablations.no_cau {
            (0.0, 0.0)
        } else {
            (self.lambda_align, self.lambda_uniform)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        for (name, v) in [
            ("lambda_align", self.lambda_align),
            ("lambda_uniform", self.lambda_uniform),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.valid_k == 0 {
            return bad("valid_k must be at least 1");
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dim" => self.dim = parse_num(key, value)?,
            "kg_layers" => self.kg_layers = parse_num(key, value)?,
            "lgc_layers" => self.lgc_layers = parse_num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse_num(key, value)?,
            "lambda_align" => self.lambda_align = parse_num(key, value)?,
            "lambda_uniform" => self.lambda_uniform = parse_num(key, value)?,
            "lambda_reg" | "weight_decay" => self.lambda_reg = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "bpr_mean" => self.bpr_mean = parse_bool(key, value)?,
            "uniform_normalize" => self.uniform_normalize = parse_bool(key, value)?,
            "align_pairs" => self.align_pairs = parse_num(key, value)?,
            "uniform_sample" => self.uniform_sample = parse_num(key, value)?,
            "valid_k" => self.valid_k = parse_num(key, value)?,
            "preset" => self.apply_preset(value.parse()?),
            "ablate" => {
                for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    self.ablations.set(name)?;
                }
            }
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Applies every entry of a parsed key/value map. `preset` goes first so
    /// explicit keys override it.
    pub fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        if let Some(p) = map.get("preset") {
            self.apply_preset(p.parse()?);
        }
        for (k, v) in map.iter().filter(|(k, _)| k.as_str() != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let map = kv::parse(text).map_err(Error::Config)?;
        let mut c = TrainConfig::default();
        c.apply_map(&map)?;
        Ok(c)
    }

    /// Fully resolved settings, one `key=value` per line; parses back to
    /// an identical config.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("dim", self.dim.to_string());
        line("kg_layers", self.kg_layers.to_string());
        line("lgc_layers", self.lgc_layers.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line("lambda_align", self.lambda_align.to_string());
        line("lambda_uniform", self.lambda_uniform.to_string());
        line("lambda_reg", self.lambda_reg.to_string());
        line("batch_size", self.batch_size.to_string());
        line("seed", self.seed.to_string());
        line("patience", self.patience.to_string());
        line("max_epochs", self.max_epochs.to_string());
        line("ablate", self.ablations.active().join(","));
        line("deterministic", self.deterministic.to_string());
        line("bpr_mean", self.bpr_mean.to_string());
        line("uniform_normalize", self.uniform_normalize.to_string());
        line("align_pairs", self.align_pairs.to_string());
        line("uniform_sample", self.uniform_sample.to_string());
        line("valid_k", self.valid_k.to_string());
        out
    }
}
