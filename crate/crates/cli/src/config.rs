//! Resolved run configuration and its layered construction:
//! defaults < preset < config file < flags.

use std::path::Path;

use bacon_core::data::BlobSpec;
use bacon_core::distill::DistillConfig;
use bacon_core::eval::EvalConfig;
use bacon_core::featurenet::FeatureNetConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Failure;

pub const DATA_ROOT_ENV: &str = "BACON_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    LossTerms,
    Lambda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the dataset files; falls back to `BACON_DATA_ROOT`.
    pub root: Option<String>,
    pub blobs: BlobSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub epsilons: Vec<f64>,
    pub samples: usize,
    pub dim: usize,
    /// JSON distribution spec; unit Gaussians in `dim` dimensions when unset.
    pub spec: Option<String>,
    pub jensen_trials: usize,
    /// Agreement tolerance in combined standard errors.
    pub agreement_k: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub grid: GridKind,
    /// `start:stop:step` or a comma list; used by the lambda grid.
    pub values: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub data: DataConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset, dataset: DatasetKind) -> Self {
        let (mut distill, mut eval) = match preset {
            Preset::Desk => (DistillConfig::desk(10), EvalConfig::desk()),
            Preset::Paper => (DistillConfig::paper(10), EvalConfig::paper()),
        };
        let blobs = BlobSpec::default();
        match dataset {
            DatasetKind::Mnist => {}
            DatasetKind::Cifar10 => {
                distill.net = distill.net.with_input(3, 32, 32);
                eval.classifier = eval.classifier.with_input(3, 32, 32);
            }
            DatasetKind::Blobs => {
                let [c, h, w] = blobs.shape;
                let mlp = FeatureNetConfig::mlp(c * h * w, vec![64], blobs.classes);
                distill.net = mlp.clone();
                eval.classifier = mlp;
            }
        }
        RunConfig {
            preset,
            jobs: 0,
            data: DataConfig {
                dataset,
                root: None,
                blobs,
            },
            distill,
            eval,
            verify: VerifyConfig {
                epsilons: vec![0.5, 1.0, 2.0, 4.0],
                samples: 20_000,
                dim: 2,
                spec: None,
                jensen_trials: 10_000,
                agreement_k: 3.0,
                seed: 0,
            },
            ablate: AblateConfig {
                grid: GridKind::LossTerms,
                values: "0:1:0.1".into(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.distill.validate().map_err(Failure::from)?;
        self.eval.validate().map_err(Failure::from)?;
        let v = &self.verify;
        if v.epsilons.is_empty() || v.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Failure::Usage("verify.epsilons must be a non-empty list of positive values".into()));
        }
        if v.dim == 0 {
            return Err(Failure::Usage("verify.dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_root(&self) -> Option<String> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var(DATA_ROOT_ENV).ok().filter(|s| !s.is_empty()))
    }
}

/// Reads a TOML config file into a JSON tree.
pub fn read_file(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    serde_json::to_value(table).map_err(|e| Failure::Usage(e.to_string()))
}

/// Overlays `top` onto `base`. Every key in `top` must already exist in
/// `base`, so typos fail instead of being ignored.
pub fn merge(base: &mut Value, top: &Value, path: &str) -> Result<(), Failure> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| Failure::Usage(format!("unknown config key `{here}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &here)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, t) => {
            *b = t.clone();
            Ok(())
        }
    }
}

/// Turns a dotted path and value into a nested object.
pub fn nested(path: &str, value: Value) -> Value {
    path.rsplit('.').fold(value, |acc, key| {
        let mut m = Map::new();
        m.insert(key.to_string(), acc);
        Value::Object(m)
    })
}

/// Parses `a.b.c=value`, reading the value as a TOML literal and falling
/// back to a bare string.
pub fn parse_assignment(text: &str) -> Result<(String, Value), Failure> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got {text:?}")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Failure::Usage(format!("--set expects key=value, got {text:?}")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key")).map_err(|e| Failure::Usage(e.to_string()))?,
        Err(_) => Value::String(raw.trim().to_string()),
    };
    Ok((key.to_string(), value))
}

/// Builds the resolved config. `file` is the parsed config file and
/// `flags` the dotted-path overrides collected from the command line.
pub fn resolve(
    preset_flag: Option<Preset>,
    dataset_flag: Option<DatasetKind>,
    file: Option<Value>,
    flags: &[(String, Value)],
) -> Result<RunConfig, Failure> {
    let pick = |key: &str| file.as_ref().and_then(|f| f.get(key).cloned());
    let preset = match (preset_flag, pick("preset")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| Failure::Usage(format!("preset: {e}")))?,
        (None, None) => Preset::Desk,
    };
    let file_dataset = file
        .as_ref()
        .and_then(|f| f.get("data"))
        .and_then(|d| d.get("dataset"))
        .cloned();
    let dataset = match (dataset_flag, file_dataset) {
        (Some(d), _) => d,
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| Failure::Usage(format!("data.dataset: {e}")))?,
        (None, None) => DatasetKind::Mnist,
    };
    let mut tree = serde_json::to_value(RunConfig::preset(preset, dataset)).expect("config serializes");
    if let Some(f) = &file {
        merge(&mut tree, f, "")?;
    }
    for (path, value) in flags {
        merge(&mut tree, &nested(path, value.clone()), "")?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Failure::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
