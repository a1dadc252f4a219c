use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use distillkit::data::BlobConfig;
use distillkit::distill::DistillConfig;
use distillkit::eval::EvalConfig;
use distillkit::nets::NetSpec;
use distillkit::train::TrainConfig;
use distillkit::util::{rng_for, sha256_hex};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fail::Fail;

pub const SCHEMA_VERSION: u32 = 1;

// Streams for seeds derived from the top-level seed.
const SEED_BLOB_MEANS: u64 = 101;
const SEED_TRAIN_SPLIT: u64 = 102;
const SEED_TEST_SPLIT: u64 = 103;
const SEED_SCORES: u64 = 104;
const SEED_EXPERTS: u64 = 105;
const SEED_DISTILL: u64 = 106;
const SEED_EVAL: u64 = 107;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub name: String,
    /// Every random choice in the run is derived from this value.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub net: NetSpec,
    pub scores: ScoresConfig,
    pub experts: ExpertsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub coverage: CoverageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        blobs: BlobConfig,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// Test images are standardized with the training statistics.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Forgetting,
    El2n,
    Import,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoresConfig {
    pub method: ScoreMethod,
    pub train: TrainConfig,
    /// Networks averaged for EL2N.
    #[serde(default = "one")]
    pub el2n_runs: usize,
    /// CSV for `import`, relative to the config file.
    #[serde(default)]
    pub import_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertsConfig {
    pub count: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    /// Fraction of the equalized epoch budget used by the `few` sweep.
    pub few_fraction: f64,
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            betas: (0..10).map(|k| k as f64 / 10.0).collect(),
            few_fraction: 0.15,
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: usize,
    #[serde(default)]
    pub protocol: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seeds: 5,
            protocol: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Test,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    /// Real samples whose coverage is measured; the radius always comes from
    /// the training features.
    pub reference: Reference,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            reference: Reference::Test,
        }
    }
}

fn one() -> usize {
    1
}

fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    rng_for(seed, stream, index).next_u64()
}

impl RunConfig {
    pub fn blob_means_seed(&self) -> u64 {
        derive(self.seed, SEED_BLOB_MEANS, 0)
    }

    pub fn train_split_seed(&self) -> u64 {
        derive(self.seed, SEED_TRAIN_SPLIT, 0)
    }

    pub fn test_split_seed(&self) -> u64 {
        derive(self.seed, SEED_TEST_SPLIT, 0)
    }

    pub fn expert_seeds(&self) -> Vec<u64> {
        (0..self.experts.count as u64).map(|i| derive(self.seed, SEED_EXPERTS, i)).collect()
    }

    pub fn el2n_seeds(&self) -> Vec<u64> {
        (0..self.scores.el2n_runs as u64).map(|i| derive(self.seed, SEED_SCORES, i + 1)).collect()
    }

    pub fn eval_seeds(&self, k: usize) -> Vec<u64> {
        (0..k as u64).map(|i| derive(self.seed, SEED_EVAL, i)).collect()
    }

    /// Fills every derived seed field from `seed`.
    pub fn derive_seeds(&mut self) {
        let means = self.blob_means_seed();
        if let DatasetConfig::Blobs { blobs, .. } = &mut self.dataset {
            blobs.seed = means;
        }
        self.scores.train.seed = derive(self.seed, SEED_SCORES, 0);
        self.experts.train.seed = derive(self.seed, SEED_EXPERTS, u64::MAX);
        self.distill.seed = derive(self.seed, SEED_DISTILL, 0);
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        sha256_hex(canonical(&v).as_bytes())[..16].to_string()
    }

    pub fn to_pretty(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut s = serde_json::to_string_pretty(&sorted(&v)).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(Fail::config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            bail!(Fail::config(format!("name: {:?} is not a plain directory name", self.name)));
        }
        if self.experts.count == 0 {
            bail!(Fail::config("experts.count: at least one expert is required"));
        }
        if self.eval.seeds == 0 || self.sweep.seeds == 0 {
            bail!(Fail::config("eval.seeds and sweep.seeds must be positive"));
        }
        if self.scores.method == ScoreMethod::Import && self.scores.import_path.is_none() {
            bail!(Fail::config("scores.import_path: required when scores.method is import"));
        }
        let classes = self.net.num_classes;
        self.net.validate().map_err(|e| Fail::config(format!("net: {e}")))?;
        self.distill.validate(classes).map_err(|e| Fail::config(format!("distill: {e}")))?;
        if let DatasetConfig::Blobs { blobs, .. } = &self.dataset {
            if blobs.classes != classes || blobs.shape != self.net.input_shape {
                bail!(Fail::config(
                    "dataset.blobs: classes and shape must match net.num_classes and net.input_shape"
                ));
            }
        }
        Ok(())
    }
}

/// Parses a config, naming the offending key on failure, and resolves the
/// derived seeds. Seed fields may be present only if they already hold the
/// derived value, as in a stored config.
pub fn parse(text: &str, origin: &Path) -> anyhow::Result<RunConfig> {
    let raw: Value = serde_json::from_str(text)
        .map_err(|e| Fail::config(format!("{}: invalid JSON: {e}", origin.display())))?;
    let mut cfg: RunConfig = serde_path_to_error(&raw)
        .map_err(|e| Fail::config(format!("{}: {e}", origin.display())))?;
    cfg.derive_seeds();
    let resolved = serde_json::to_value(&cfg)?;
    for key in [
        "/dataset/blobs/seed",
        "/scores/train/seed",
        "/experts/train/seed",
        "/distill/seed",
    ] {
        if let (Some(given), Some(want)) = (raw.pointer(key), resolved.pointer(key)) {
            if given != want {
                bail!(Fail::config(format!(
                    "{}: {} is derived from the top-level seed; remove it",
                    origin.display(),
                    key.trim_start_matches('/').replace('/', ".")
                )));
            }
        }
    }
    if let Some(p) = &mut cfg.scores.import_path {
        if p.is_relative() {
            if let Some(dir) = origin.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fail::missing(format!("{}: {e}", path.display())))?;
    parse(&text, path).with_context(|| format!("loading {}", path.display()))
}

/// Deserializes while tracking the path of the first bad key.
fn serde_path_to_error(v: &Value) -> Result<RunConfig, String> {
    match RunConfig::deserialize(v) {
        Ok(c) => Ok(c),
        Err(e) => Err(match locate(v, &e.to_string()) {
            Some(path) => format!("{path}: {e}"),
            None => e.to_string(),
        }),
    }
}

/// Finds where an unknown or missing field lives, by name, for the message.
fn locate(v: &Value, msg: &str) -> Option<String> {
    let field = msg.split('`').nth(1)?;
    let mut stack = vec![(String::new(), v)];
    while let Some((path, node)) = stack.pop() {
        if let Value::Object(map) = node {
            if map.contains_key(field) {
                return Some(if path.is_empty() { field.to_string() } else { format!("{path}.{field}") });
            }
            for (k, child) in map {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                stack.push((p, child));
            }
        }
    }
    None
}

fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), sorted(&m[k]))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
        other => other.clone(),
    }
}

fn canonical(v: &Value) -> String {
    serde_json::to_string(&sorted(v)).expect("value serializes")
}
