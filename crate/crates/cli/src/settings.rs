//! Flat `key = value` run configuration.
//!
//! A single namespace of typed keys covers dataset generation, backbone
//! pretraining, and continual-learning runs. A config file assigns any
//! subset of them, command-line flags override file values, and anything
//! left unset falls back to the defaults in [`KEYS`]. Unknown keys are
//! rejected outright so a stale or misspelled config fails loudly instead
//! of silently running something else.
//!
//! The same format doubles as the run manifest: every command writes its
//! fully-resolved settings back out as `key = value` lines (derived,
//! read-only facts ride along as `# derived:` comments), so a manifest can
//! be fed straight back in through `--config` to replay the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pop_core::data::DatasetSpec;
use pop_core::driver::{RunConfig, Schedule};
use pop_core::objective::LossWeights;
use pop_core::prompts::FusionMethod;
use pop_core::scalar::Precision;
use pop_core::vit::{BackboneConfig, PretrainConfig, PromptMode};
use pop_core::{PopError, Result};

/// Every recognized key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    // dataset generation
    ("image_size", "32"),
    ("pretrain_classes", "20"),
    ("cl_classes", "20"),
    ("train_per_class", "200"),
    ("test_per_class", "50"),
    ("noise_std", "0.05"),
    ("jitter", "1.0"),
    ("data_seed", "0"),
    // backbone shape
    ("patch_size", "8"),
    ("embed_dim", "64"),
    ("depth", "4"),
    ("heads", "4"),
    ("mlp_ratio", "4"),
    // backbone pretraining
    ("pretrain_epochs", "30"),
    ("pretrain_batch", "64"),
    ("pretrain_lr", "0.001"),
    ("pretrain_milestones", "20,26"),
    ("pretrain_lr_decay", "0.1"),
    ("pretrain_weight_decay", "0.000001"),
    ("pretrain_seed", "1"),
    // continual-learning run
    ("tasks", "5"),
    ("mode", "spt"),
    ("fusion", "mean-and-cat"),
    ("prompt_rows", "1"),
    ("pop_rows", "1"),
    ("buffer", "200"),
    ("kshot", "0"),
    ("buffer_only", "false"),
    ("lambda_task", "1"),
    ("lambda_aux", "1"),
    ("epochs", "16"),
    ("milestones", "8,13"),
    ("lr_decay", "0.1"),
    ("tuning_epochs", "3"),
    ("batch", "64"),
    ("lr", "0.0005"),
    ("weight_decay", "0.000001"),
    ("seeds", "1"),
    ("precision", "f32"),
    // artifact paths; an empty metrics_dir falls back to POP_METRICS_DIR
    // and then to "metrics"
    ("dataset", "dataset.pop"),
    ("backbone", "backbone.ckpt"),
    ("metrics_dir", ""),
];

/// Keys that determine dataset content. Two configs agreeing on these
/// produce byte-identical datasets.
pub const GEN_KEYS: &[&str] = &[
    "image_size",
    "pretrain_classes",
    "cl_classes",
    "train_per_class",
    "test_per_class",
    "noise_std",
    "jitter",
    "data_seed",
];

/// Keys that determine the pretrained backbone (dataset keys included:
/// the backbone is a function of what it was trained on).
pub const PRETRAIN_KEYS: &[&str] = &[
    "image_size",
    "pretrain_classes",
    "cl_classes",
    "train_per_class",
    "test_per_class",
    "noise_std",
    "jitter",
    "data_seed",
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "pretrain_epochs",
    "pretrain_batch",
    "pretrain_lr",
    "pretrain_milestones",
    "pretrain_lr_decay",
    "pretrain_weight_decay",
    "pretrain_seed",
    "precision",
];

/// Keys that define a continual run's identity: everything except
/// artifact locations and the seed list. Seed sweeps of one config share
/// a config hash (the seed goes into the run id instead), and moving
/// files around changes nothing.
pub fn run_hash_keys() -> Vec<&'static str> {
    KEYS.iter()
        .map(|&(k, _)| k)
        .filter(|k| !matches!(*k, "seeds" | "metrics_dir" | "dataset" | "backbone"))
        .collect()
}

/// A fully-populated assignment of [`KEYS`]; values stay as strings until
/// a typed accessor parses them, so error messages can name the key.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|&(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Settings { values }
    }
}

fn known_key(key: &str) -> bool {
    KEYS.iter().any(|&(k, _)| k == key)
}

impl Settings {
    /// Assign one key, rejecting names outside [`KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known_key(key) {
            return Err(PopError::config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from settings"))
    }

    /// Apply `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys, missing `=`, and repeated
    /// assignments are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PopError::config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key) {
                return Err(PopError::config(format!(
                    "line {}: key `{key}` assigned twice",
                    lineno + 1
                )));
            }
            self.set(key, value)?;
            seen.push(key);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PopError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut s = Settings::default();
        s.apply_text(&text)?;
        Ok(s)
    }

    // ── typed accessors ──────────────────────────────────────────────

    pub fn usize_of(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| bad_value(key, self.get(key), "a non-negative integer"))
    }

    pub fn u64_of(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| bad_value(key, self.get(key), "a non-negative integer"))
    }

    pub fn f64_of(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| bad_value(key, self.get(key), "a number"))
    }

    pub fn bool_of(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(bad_value(key, v, "true or false")),
        }
    }

    /// Comma-separated integer list; the empty string is the empty list.
    pub fn usize_list_of(&self, key: &str) -> Result<Vec<usize>> {
        self.list_of(key)
    }

    pub fn u64_list_of(&self, key: &str) -> Result<Vec<u64>> {
        self.list_of(key)
    }

    fn list_of<N: std::str::FromStr>(&self, key: &str) -> Result<Vec<N>> {
        let raw = self.get(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<N>()
                    .map_err(|_| bad_value(key, raw, "a comma-separated integer list"))
            })
            .collect()
    }

    // ── derived configs ──────────────────────────────────────────────

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            image_size: self.usize_of("image_size")?,
            channels: 3,
            pretrain_classes: self.usize_of("pretrain_classes")?,
            cl_classes: self.usize_of("cl_classes")?,
            train_per_class: self.usize_of("train_per_class")?,
            test_per_class: self.usize_of("test_per_class")?,
            noise_std: self.f64_of("noise_std")?,
            jitter: self.f64_of("jitter")?,
            seed: self.u64_of("data_seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let cfg = BackboneConfig {
            image_size: self.usize_of("image_size")?,
            patch_size: self.usize_of("patch_size")?,
            channels: 3,
            embed_dim: self.usize_of("embed_dim")?,
            depth: self.usize_of("depth")?,
            heads: self.usize_of("heads")?,
            mlp_ratio: self.usize_of("mlp_ratio")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            epochs: self.usize_of("pretrain_epochs")?,
            batch: self.usize_of("pretrain_batch")?,
            lr: self.f64_of("pretrain_lr")?,
            milestones: self.usize_list_of("pretrain_milestones")?,
            lr_decay: self.f64_of("pretrain_lr_decay")?,
            weight_decay: self.f64_of("pretrain_weight_decay")?,
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mode: PromptMode = self
            .get("mode")
            .parse()
            .map_err(|_| bad_value("mode", self.get("mode"), "spt or dpt"))?;
        let fusion: FusionMethod = self.get("fusion").parse()?;
        let kshot = match self.usize_of("kshot")? {
            0 => None,
            k => Some(k),
        };
        let schedule = Schedule {
            epochs: self.usize_of("epochs")?,
            milestones: self.usize_list_of("milestones")?,
            lr_decay: self.f64_of("lr_decay")?,
            tuning_epochs: self.usize_of("tuning_epochs")?,
            batch: self.usize_of("batch")?,
            lr: self.f64_of("lr")?,
            weight_decay: self.f64_of("weight_decay")?,
        };
        let cfg = RunConfig {
            mode,
            fusion,
            prompt_rows: self.usize_of("prompt_rows")?,
            pop_rows: self.usize_of("pop_rows")?,
            buffer_capacity: self.usize_of("buffer")?,
            kshot,
            buffer_only: self.bool_of("buffer_only")?,
            weights: LossWeights {
                lambda_task: self.f64_of("lambda_task")?,
                lambda_aux: self.f64_of("lambda_aux")?,
            },
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds = self.u64_list_of("seeds")?;
        if seeds.is_empty() {
            return Err(PopError::config("seeds must name at least one seed"));
        }
        Ok(seeds)
    }

    pub fn precision(&self) -> Result<Precision> {
        self.get("precision")
            .parse()
            .map_err(|_| bad_value("precision", self.get("precision"), "f32 or f64"))
    }

    // ── manifests & hashing ──────────────────────────────────────────

    /// JSON object over a key subset, for content hashing.
    pub fn subset_json(&self, keys: &[&str]) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = keys
            .iter()
            .map(|&k| (k.to_string(), serde_json::Value::from(self.get(k))))
            .collect();
        serde_json::Value::Object(map)
    }

    /// The manifest text: derived facts as comments, then every key in
    /// sorted order. Feeding this file back through `--config` replays
    /// the run.
    pub fn manifest(&self, derived: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (k, v) in derived {
            let _ = writeln!(out, "# derived: {k} = {v}");
        }
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn bad_value(key: &str, value: &str, wanted: &str) -> PopError {
    PopError::config(format!("key `{key}`: `{value}` is not {wanted}"))
}

/// Read the `# derived: key = value` comment lines back out of a manifest.
pub fn manifest_derived(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# derived:") {
            if let Some((k, v)) = rest.split_once('=') {
                out.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    out
}
