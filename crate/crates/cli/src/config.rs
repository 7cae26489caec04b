//! Run configuration: JSON file, dot-path overrides, content hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use transpotter::data::SyntheticConfig;
use transpotter::evaluation::EvalConfig;
use transpotter::model::ModelConfig;
use transpotter::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by `synth` and read by `train`/`eval`.
    pub data: PathBuf,
    /// Parent of content-addressed training runs.
    pub runs: PathBuf,
    /// Manifest and lexicon names inside `data`.
    pub train_manifest: String,
    pub test_manifest: String,
    pub lexicon: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            runs: "runs".into(),
            train_manifest: "train.jsonl".into(),
            test_manifest: "test.jsonl".into(),
            lexicon: "lexicon.dict".into(),
        }
    }
}

/// Everything a command needs. `seed` is copied into the synthetic and
/// training sections when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// A desk-scale preset: the model and schedule are sized for the default
    /// synthetic corpus on one CPU core.
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SyntheticConfig::default(),
            model: ModelConfig {
                d_model: 64,
                heads: 4,
                text_layers: 2,
                video_layers: 2,
                joint_layers: 2,
                input_dim: 64,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                lambda: 0.2,
                epochs: 250,
                phrase_prob: 0.3,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then `(dot.path, value)` overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut value, user, "")?;
        }
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_scalar(raw))?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| anyhow::anyhow!("config: {e}"))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Overlays `src` onto `dst`; objects merge key by key and anything else
/// replaces. Unknown keys surface later as deserialization errors.
fn merge(dst: &mut Value, src: Value, at: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!("config: unknown key `{path}`"),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// JSON literal when the text parses as one, otherwise a string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(o) => o,
            _ => bail!("config: `{}` is not a section", parts[..i].join(".")),
        };
        let Some(next) = obj.get_mut(*part) else {
            bail!("config: unknown key `{key}`");
        };
        cur = next;
    }
    *cur = value;
    Ok(())
}

/// Splits `--a.b value` and `--a.b=value` pairs off the argument list.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(flag) if flag.contains('.') && !flag.starts_with('.') => {
                if let Some((k, v)) = flag.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let Some(v) = it.next() else {
                        bail!("override --{flag} needs a value");
                    };
                    overrides.push((flag.to_string(), v));
                }
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
