//! Run configuration: one TOML file with `seed` and the `[data]`, `[model]`,
//! `[train]` and `[eval]` sections.
//!
//! Missing keys take the desk defaults, unknown keys are rejected with the
//! closest valid key, and `FORGESEG_<SECTION>__<KEY>` environment variables
//! override file values (`FORGESEG_SEED` for the top-level seed).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::forge::{CorpusConfig, Split};
use crate::metrics::EvalThresholds;
use crate::model::{EncoderKind, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "FORGESEG_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold_det: f64,
    pub threshold_seg: f64,
    pub split: Split,
    /// Number of fake samples rendered by the cam stage.
    pub cam_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold_det: 0.5, threshold_seg: 0.5, split: Split::Test, cam_samples: 8 }
    }
}

impl EvalConfig {
    pub fn thresholds(&self) -> EvalThresholds {
        EvalThresholds { detection: self.threshold_det, segmentation: self.threshold_seg }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = CorpusConfig::default();
        let size = data.image_size;
        Self {
            seed: 7,
            data,
            model: ModelConfig {
                encoder_kind: EncoderKind::PlainConv,
                input_size: [size, size, 3],
                decoder_stages: 3,
                feature_channels: 16,
                head_hidden: 32,
                norm_groups: 4,
                middle_blocks: 0,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                steps: 1000,
                batch_size: 16,
                optimizer: OptimizerConfig { learning_rate: 1e-3, ..OptimizerConfig::default() },
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Keys that are valid but absent from the serialised defaults.
const OPTIONAL_KEYS: &[&str] = &["train.seed"];
/// Accepted spellings mapped to their canonical key.
const ALIASES: &[(&str, &str)] = &[("data.size", "data.image_size")];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &'static str| move |e: Error| Error::config(section, e.to_string());
        self.data.validate().map_err(ctx("data"))?;
        self.model.validate().map_err(ctx("model"))?;
        self.train.validate().map_err(ctx("train"))?;
        self.eval.thresholds().validate().map_err(ctx("eval"))?;
        let [h, w, c] = self.model.input_size;
        if h != self.data.image_size || w != self.data.image_size {
            return Err(Error::config(
                "model.input_size",
                format!(
                    "model.input_size {h}x{w} does not match data.image_size {}",
                    self.data.image_size
                ),
            ));
        }
        if c != 3 && c != 1 {
            return Err(Error::config("model.input_size", format!("{c} channels; expected 1 or 3")));
        }
        for b in self.train.branch.branches() {
            if !self.model.has(b) {
                return Err(Error::config(
                    "train.branch",
                    format!("branch mode {} needs model.branches to include {b:?}", self.train.branch.as_str()),
                ));
            }
        }
        for (key, seed) in [("seed", Some(self.seed)), ("train.seed", self.train.seed)] {
            if seed.is_some_and(|s| s > i64::MAX as u64) {
                return Err(Error::config(key, "seeds must fit in a signed 64-bit integer"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Training seed: explicit `train.seed`, else derived from the run seed.
    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or_else(|| crate::seed::derive(self.seed, "train"))
    }
}

fn collect_keys(prefix: &str, v: &Value, out: &mut Vec<String>) {
    if let Value::Table(t) = v {
        for (k, child) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            collect_keys(&key, child, out);
            out.push(key);
        }
    }
}

/// Nearest valid key among the siblings of `key`.
fn closest<'a>(key: &str, candidates: &'a [String]) -> Option<&'a str> {
    let (parent, leaf) = key.rsplit_once('.').unwrap_or(("", key));
    candidates
        .iter()
        .filter_map(|c| {
            let (p, l) = c.rsplit_once('.').unwrap_or(("", c));
            (p == parent).then(|| (strsim::jaro_winkler(leaf, l), c))
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.as_str())
}

fn check_keys(prefix: &str, user: &Value, defaults: &Value, valid: &[String]) -> Result<()> {
    let Value::Table(t) = user else { return Ok(()) };
    for (k, child) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let known = valid.contains(&key)
            || OPTIONAL_KEYS.contains(&key.as_str())
            || ALIASES.iter().any(|(a, _)| *a == key);
        if !known {
            let hint = match closest(&key, valid) {
                Some(c) => format!("unknown key; did you mean `{c}`?"),
                None => "unknown key".to_string(),
            };
            return Err(Error::config(key, hint));
        }
        if let Some(Value::Table(_)) = lookup(defaults, &key) {
            if !child.is_table() {
                return Err(Error::config(key, "expected a table"));
            }
            check_keys(&key, child, defaults, valid)?;
        }
    }
    Ok(())
}

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |cur, k| cur.get(k))
}

fn remove(v: &mut Value, dotted: &str) -> Option<Value> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop()?;
    let mut cur = v;
    for p in parts {
        cur = cur.get_mut(p)?;
    }
    cur.as_table_mut()?.remove(last)
}

fn insert(v: &mut Value, dotted: &str, value: Value) {
    let mut cur = v;
    let parts: Vec<&str> = dotted.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        let t = cur.as_table_mut().expect("config root is a table");
        cur = t.entry(p.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .expect("config section is a table")
        .insert(parts[parts.len() - 1].to_string(), value);
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_env_value(raw: &str) -> Value {
    match toml::from_str::<BTreeMap<String, Value>>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Parses config text, applying `env` overrides (name, value) on top.
pub fn parse_config_with_env<I>(text: &str, env: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut user: Value = text
        .parse::<toml::Table>()
        .map(Value::Table)
        .map_err(|e| Error::config("<file>", e.message().to_string()))?;
    let defaults = Value::try_from(RunConfig::default()).map_err(|e| Error::Serde(e.to_string()))?;
    let mut valid = Vec::new();
    collect_keys("", &defaults, &mut valid);

    for (name, raw) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
        let key = rest.to_lowercase().replace("__", ".");
        insert(&mut user, &key, parse_env_value(&raw));
    }
    check_keys("", &user, &defaults, &valid)?;
    for (alias, canonical) in ALIASES {
        if let Some(v) = remove(&mut user, alias) {
            if lookup(&user, canonical).is_some() {
                return Err(Error::config(*alias, format!("both `{alias}` and `{canonical}` are set")));
            }
            insert(&mut user, canonical, v);
        }
    }
    // the model resolution follows the data unless set explicitly
    if lookup(&user, "model.input_size").is_none() {
        if let Some(size) = lookup(&user, "data.image_size").cloned() {
            let channels = Value::Integer(3);
            insert(&mut user, "model.input_size", Value::Array(vec![size.clone(), size, channels]));
        }
    }

    let mut merged = defaults;
    merge(&mut merged, user);
    let config: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().message().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with_env(text, std::iter::empty())
}

/// Reads, defaults and validates a config file; process environment
/// overrides apply.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_with_env(&text, std::env::vars())
}
