//! Run configuration: flat dotted-key TOML, `--set key=value` overrides and
//! the resolved snapshot written next to every run's outputs.

use std::path::{Path, PathBuf};

use hmamba::metrics::{EvalOptions, Split};
use hmamba::model::ModelConfig;
use hmamba::train::{OptimizerKind, TrainConfig, DEFAULT_CLIP_NORM};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

/// Schema version of the configuration file.
pub const CONFIG_VERSION: u32 = 1;

/// Environment variable selecting the root of relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "HMAMBA_OUTPUT_ROOT";

/// Snapshot file name inside an output directory.
pub const SNAPSHOT: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub gradcheck: GradcheckSection,
    pub synth: SynthSection,
    pub output: OutputSection,
    /// Whether the `model` section was given explicitly rather than
    /// defaulted.
    #[serde(skip)]
    pub model_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            gradcheck: GradcheckSection::default(),
            synth: SynthSection::default(),
            output: OutputSection::default(),
            model_explicit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Record measured wall-clock seconds in the training log; when off the
    /// field is written as `0` so logs are byte-reproducible.
    pub log_timing: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 42,
            log_timing: false,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: self.optimizer,
            lr: self.lr,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Interaction CSV or serialized dataset (`.json`).
    pub path: Option<PathBuf>,
    pub min_user_len: usize,
    pub min_item_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            min_user_len: 3,
            min_item_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub ks: Vec<usize>,
    pub exclude_history: bool,
    /// Exclusive upper bounds of training-length buckets.
    pub buckets: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            checkpoint: None,
            split: d.split,
            ks: d.ks,
            exclude_history: d.exclude_history,
            buckets: d.buckets,
            batch_size: d.batch_size,
        }
    }
}

impl EvalSection {
    pub fn to_options(&self) -> EvalOptions {
        EvalOptions {
            split: self.split,
            ks: self.ks.clone(),
            exclude_history: self.exclude_history,
            buckets: self.buckets.clone(),
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    /// Model variants plus `attention` for the quadratic reference.
    pub variants: Vec<String>,
    pub warmup: usize,
    pub reps: usize,
    pub d: usize,
    pub d_state: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            variants: ["full", "half", "euclidean", "attention"].map(String::from).to_vec(),
            warmup: 3,
            reps: 10,
            d: 32,
            d_state: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub variants: Vec<String>,
    pub d: usize,
    pub d_state: usize,
    pub max_seq_len: usize,
    pub n_items: usize,
    pub k: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            variants: ["full", "half"].map(String::from).to_vec(),
            d: 4,
            d_state: 4,
            max_seq_len: 6,
            n_items: 20,
            k: 1.0,
            step: hmamba::train::FD_STEP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub depth: usize,
    pub branching: usize,
    pub users: usize,
    pub len: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            seed: 7,
            depth: 3,
            branching: 3,
            users: 500,
            len: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults overlaid with a config file and `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let model_explicit = table.contains_key("model");
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.model_explicit = model_explicit;
        Ok(cfg)
    }

    /// Flat `section.key = value` rendering, one key per line.
    pub fn to_flat_toml(&self) -> Result<String, CliError> {
        let value = Value::try_from(self).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut out = String::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    /// Output directory of a command, rooted at `$HMAMBA_OUTPUT_ROOT` when
    /// relative.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        let dir = self
            .output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command));
        if dir.is_absolute() {
            dir
        } else {
            match std::env::var_os(OUTPUT_ROOT_ENV) {
                Some(root) => PathBuf::from(root).join(dir),
                None => dir,
            }
        }
    }

    /// Writes the resolved snapshot into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, self.to_flat_toml()?)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&other.to_string());
            out.push('\n');
        }
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal and falls
/// back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    set_path(table, key, value)
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("invalid key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "model.variant = \"half\"\nmodel.d = 16\ntrain.epochs = 3\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["train.lr=0.01".into(), "eval.ks=[5, 10]".into()]).unwrap();
        assert_eq!(cfg.model.variant, hmamba::model::Variant::Half);
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.eval.ks, vec![5, 10]);
        assert_eq!(cfg.model.d_state, 32);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.data.path = Some(PathBuf::from("/tmp/x.csv"));
        cfg.train.lr = 0.1 + 0.2;
        let flat = cfg.to_flat_toml().unwrap();
        assert!(flat.lines().all(|l| !l.starts_with('[')));
        assert!(flat.contains("model.variant = \"full\""));
        let dir = tempfile::tempdir().unwrap();
        let p = cfg.write_snapshot(dir.path()).unwrap();
        let back = RunConfig::load(Some(&p), &[]).unwrap();
        assert!(back.model_explicit);
        assert_eq!(back.to_flat_toml().unwrap(), flat);
        assert_eq!(RunConfig { model_explicit: false, ..back }, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        for o in ["model.bogus=1", "model.variant=\"bogus\"", "noequals", "train.epochs=\"x\""] {
            assert!(matches!(RunConfig::load(None, &[o.into()]), Err(CliError::Usage(_))), "{o}");
        }
    }
}
