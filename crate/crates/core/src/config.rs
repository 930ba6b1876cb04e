//! Sectioned TOML configuration with `section.key=value` overrides.
//!
//! ```toml
//! [run]
//! name = "demo"
//!
//! [model]
//! d = 32
//!
//! [train]
//! epochs = 40
//! seeds = [0, 1, 2]
//! ```
//!
//! Precedence is override > file > built-in default, and every section may
//! be omitted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{cross_pairs, DataFormat, InteractionPair, StreamConfig, StreamId, SyntheticSpec, DEFAULT_IQR_FLOOR};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::pipeline::{EvalConfig, RunConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    /// Run directories are created as `<out_dir>/<name>`.
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "default".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    /// Record files relative to `dir`; each record carries its own split.
    pub files: Vec<String>,
    /// `auto` (by extension), `csv` or `jsonl`.
    pub format: String,
    pub iqr_floor: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            files: vec!["train.csv".into(), "val.csv".into(), "test.csv".into()],
            format: "auto".into(),
            iqr_floor: DEFAULT_IQR_FLOOR,
        }
    }
}

impl DataSection {
    pub fn paths(&self) -> Vec<PathBuf> {
        self.files.iter().map(|f| self.dir.join(f)).collect()
    }

    pub fn format_for(&self, path: &Path) -> Result<DataFormat> {
        match self.format.as_str() {
            "auto" => Ok(DataFormat::from_path(path)),
            other => other.parse(),
        }
    }
}

/// Stream widths plus interaction products. Each `interactions` entry is
/// either one pair (`"a0*p1"`) or a whole cross product (`"a*p"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub d_a: usize,
    pub d_p: usize,
    pub d_s: usize,
    pub text_embedding_dim: usize,
    pub interactions: Vec<String>,
}

impl Default for StreamSection {
    fn default() -> Self {
        let d = StreamConfig::default();
        Self {
            d_a: d.d_a,
            d_p: d.d_p,
            d_s: d.d_s,
            text_embedding_dim: d.text_embedding_dim,
            interactions: vec!["a*p".into()],
        }
    }
}

impl StreamSection {
    pub fn resolve(&self) -> Result<StreamConfig> {
        let mut cfg = StreamConfig {
            d_a: self.d_a,
            d_p: self.d_p,
            d_s: self.d_s,
            text_embedding_dim: self.text_embedding_dim,
            interaction_pairs: Vec::new(),
        };
        for entry in &self.interactions {
            let sides: Vec<&str> = entry.split('*').map(str::trim).collect();
            let whole = |s: &str| {
                let mut c = s.chars();
                match (c.next(), c.next()) {
                    (Some(ch), None) => StreamId::from_code(ch),
                    _ => None,
                }
            };
            match sides.as_slice() {
                [l, r] if whole(l).is_some() && whole(r).is_some() => {
                    let pairs = cross_pairs(&cfg, whole(l).unwrap(), whole(r).unwrap())?;
                    cfg.interaction_pairs.extend(pairs);
                }
                _ => cfg.interaction_pairs.push(entry.parse::<InteractionPair>()?),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub stream: StreamSection,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticSpec,
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`run.name=demo`).
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to `table`.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` must be section.key")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Reads `path` (if any) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let streams = self.stream.resolve()?;
        self.run_config().validate()?;
        self.synthetic.validate(&streams)?;
        if !(self.data.iqr_floor > 0.0) {
            return Err(Error::Config("data: iqr_floor must be positive".into()));
        }
        if self.data.format != "auto" {
            self.data.format.parse::<DataFormat>()?;
        }
        Ok(())
    }

    pub fn streams(&self) -> Result<StreamConfig> {
        self.stream.resolve()
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(&self.run.name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
