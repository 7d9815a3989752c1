//! Experiment configuration: a versioned TOML document, schema-checked on
//! load. Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetCfg,
    pub model: ModelCfg,
    #[serde(default)]
    pub fl: Option<FlCfg>,
    #[serde(default)]
    pub attack: Option<AttackCfg>,
    #[serde(default)]
    pub evaluation: EvalCfg,
    #[serde(default)]
    pub downstream: Option<DownstreamCfg>,
    #[serde(default)]
    pub seeds: SeedsCfg,
    #[serde(default)]
    pub output: OutputCfg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    /// "synthetic", "mnist", or "cifar10".
    pub source: String,
    /// Dataset root for on-disk sources; FEDLEAK_DATA_DIR overrides.
    #[serde(default)]
    pub root: Option<String>,
    #[serde(default = "default_input")]
    pub input: [usize; 3],
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Synthetic only: images generated for the train split.
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_input() -> [usize; 3] {
    [1, 28, 28]
}
fn default_classes() -> usize {
    10
}
fn default_train_size() -> usize {
    4096
}
fn default_test_size() -> usize {
    1024
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    /// "mnist_dnn", "tiny_mlp", or "linear_probe".
    pub kind: String,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlCfg {
    /// "fedsgd" or "fedavg".
    pub algorithm: String,
    pub rounds: usize,
    pub clients: usize,
    #[serde(default = "default_client_lr")]
    pub client_lr: f64,
    /// Minibatch size; 0 means full local shard.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub local_epochs: usize,
    /// Cap on local minibatch steps per round (0 = epoch-bounded). Overrides
    /// local_epochs when set.
    #[serde(default)]
    pub local_steps: usize,
    /// "iid" or "noniid".
    #[serde(default = "default_partition")]
    pub partition: String,
    #[serde(default = "default_bias")]
    pub bias: f64,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Test images per evaluation; 0 = all.
    #[serde(default)]
    pub eval_subset: usize,
}

fn default_client_lr() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}
fn default_partition() -> String {
    "iid".into()
}
fn default_bias() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCfg {
    /// "binning", "trap", "loki", or "gi".
    pub kind: String,
    /// Measurement width for the linear-layer attacks.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_csf")]
    pub csf: f64,
    /// Victim batches to attack.
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "default_attack_batch")]
    pub batch_size: usize,
    /// A reconstruction counts as leaked at or above this PSNR.
    #[serde(default = "default_psnr_threshold")]
    pub psnr_threshold: f64,
    /// Calibration images for cutoff placement.
    #[serde(default = "default_calibration")]
    pub calibration_size: usize,
    /// FedAvg local steps observed by the loki attack (0 = plain FedSGD).
    #[serde(default)]
    pub local_steps: usize,
    #[serde(default)]
    pub local_batch: usize,
    // gradient inversion:
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_gi_lr")]
    pub lr: f64,
    #[serde(default = "default_tv")]
    pub tv_weight: f64,
    #[serde(default = "default_one")]
    pub restarts: usize,
    /// "oracle" or "recovered".
    #[serde(default = "default_label_mode")]
    pub label_mode: String,
    /// Batch sizes for the inversion sweep.
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
}

fn default_k() -> usize {
    128
}
fn default_csf() -> f64 {
    500.0
}
fn default_batches() -> usize {
    10
}
fn default_attack_batch() -> usize {
    64
}
fn default_psnr_threshold() -> f64 {
    35.0
}
fn default_calibration() -> usize {
    1024
}
fn default_iterations() -> usize {
    3000
}
fn default_gi_lr() -> f64 {
    0.01
}
fn default_tv() -> f64 {
    1e-6
}
fn default_label_mode() -> String {
    "oracle".into()
}
fn default_batch_sizes() -> Vec<usize> {
    vec![8, 16, 32]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCfg {
    /// Leaked images below this pixel range are dropped before export.
    #[serde(default)]
    pub min_quality: f64,
    /// Also score SSIM in attack reports (slower).
    #[serde(default)]
    pub ssim: bool,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg { min_quality: 0.0, ssim: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamCfg {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_train_batch")]
    pub batch_size: usize,
    #[serde(default = "default_train_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning rate when continuing from FL weights.
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    /// Fraction of the leaked set used for training.
    #[serde(default = "default_fraction")]
    pub leak_fraction: f64,
}

fn default_epochs() -> usize {
    10
}
fn default_train_batch() -> usize {
    32
}
fn default_train_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_finetune_lr() -> f64 {
    0.005
}
fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsCfg {
    #[serde(default = "default_master")]
    pub master: u64,
}

impl Default for SeedsCfg {
    fn default() -> Self {
        SeedsCfg { master: default_master() }
    }
}

fn default_master() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

impl Default for OutputCfg {
    fn default() -> Self {
        OutputCfg { dir: default_out_dir() }
    }
}

fn default_out_dir() -> String {
    "out".into()
}

impl ExperimentConfig {
    /// Parses and validates; the raw file text comes back too so manifests
    /// can echo exactly what was run.
    pub fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version: got {}, this build understands {}",
                self.schema_version,
                SCHEMA_VERSION
            );
        }
        match self.dataset.source.as_str() {
            "synthetic" | "mnist" | "cifar10" => {}
            other => bail!("dataset.source: unknown source {:?}", other),
        }
        if self.dataset.input.iter().any(|&d| d == 0) {
            bail!("dataset.input: all dimensions must be positive");
        }
        if self.dataset.classes < 2 {
            bail!("dataset.classes: need at least 2 classes");
        }
        if self.dataset.source == "synthetic"
            && (self.dataset.train_size == 0 || self.dataset.test_size == 0)
        {
            bail!("dataset.train_size/test_size: must be positive for synthetic data");
        }
        match self.model.kind.as_str() {
            "mnist_dnn" | "tiny_mlp" | "linear_probe" => {}
            other => bail!("model.kind: unknown model {:?}", other),
        }
        if self.model.kind == "mnist_dnn" && self.dataset.input != [1, 28, 28] {
            bail!("model.kind: mnist_dnn expects dataset.input = [1, 28, 28]");
        }
        if self.model.kind == "tiny_mlp" && self.model.hidden == 0 {
            bail!("model.hidden: must be positive for tiny_mlp");
        }
        if let Some(fl) = &self.fl {
            match fl.algorithm.as_str() {
                "fedsgd" | "fedavg" => {}
                other => bail!("fl.algorithm: unknown algorithm {:?}", other),
            }
            if fl.rounds == 0 || fl.clients == 0 {
                bail!("fl.rounds/clients: must be positive");
            }
            if fl.client_lr <= 0.0 {
                bail!("fl.client_lr: must be positive");
            }
            match fl.partition.as_str() {
                "iid" => {}
                "noniid" => {
                    if !(0.0..=1.0).contains(&fl.bias) {
                        bail!("fl.bias: must lie in [0, 1]");
                    }
                }
                other => bail!("fl.partition: unknown scheme {:?}", other),
            }
            if fl.algorithm == "fedavg" && fl.local_epochs == 0 && fl.local_steps == 0 {
                bail!("fl.local_epochs: must be positive for fedavg");
            }
            if fl.local_steps > 0 && fl.batch_size == 0 {
                bail!("fl.batch_size: must be positive when local_steps caps local training");
            }
        }
        if let Some(a) = &self.attack {
            match a.kind.as_str() {
                "binning" | "trap" | "loki" => {
                    if a.k < 2 {
                        bail!("attack.k: need at least 2 measurement rows");
                    }
                    if a.batch_size == 0 {
                        bail!("attack.batch_size: must be positive");
                    }
                    if a.kind != "trap" && a.calibration_size < 2 * a.k {
                        bail!(
                            "attack.calibration_size: need at least 2k = {} images",
                            2 * a.k
                        );
                    }
                    if a.kind == "loki" && a.csf <= 0.0 {
                        bail!("attack.csf: must be positive");
                    }
                    if a.local_steps > 0 && a.local_batch == 0 {
                        bail!("attack.local_batch: must be positive when local_steps > 0");
                    }
                }
                "gi" => {
                    if a.batch_sizes.is_empty() {
                        bail!("attack.batch_sizes: need at least one batch size");
                    }
                    if a.iterations == 0 || a.restarts == 0 {
                        bail!("attack.iterations/restarts: must be positive");
                    }
                    match a.label_mode.as_str() {
                        "oracle" | "recovered" => {}
                        other => bail!("attack.label_mode: unknown mode {:?}", other),
                    }
                }
                other => bail!("attack.kind: unknown attack {:?}", other),
            }
            if a.batches == 0 {
                bail!("attack.batches: must be positive");
            }
            if a.psnr_threshold <= 0.0 {
                bail!("attack.psnr_threshold: must be positive");
            }
        }
        if let Some(d) = &self.downstream {
            if d.epochs == 0 || d.batch_size == 0 {
                bail!("downstream.epochs/batch_size: must be positive");
            }
            if d.lr <= 0.0 || d.finetune_lr <= 0.0 {
                bail!("downstream.lr/finetune_lr: must be positive");
            }
            if !(0.0 < d.leak_fraction && d.leak_fraction <= 1.0) {
                bail!("downstream.leak_fraction: must lie in (0, 1]");
            }
        }
        if self.output.dir.is_empty() {
            bail!("output.dir: must not be empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
[dataset]
source = "synthetic"
[model]
kind = "tiny_mlp"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.classes, 10);
        assert_eq!(cfg.seeds.master, 7);
        assert_eq!(cfg.output.dir, "out");
        assert!(cfg.attack.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let bad = format!("{}\n[fl]\nalgorithm = \"fedsgd\"\nrounds = 1\nclients = 1\nbatch_sizee = 3\n", MINIMAL);
        let err = toml::from_str::<ExperimentConfig>(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch_sizee"), "error should name the bad key: {}", msg);
    }

    #[test]
    fn wrong_schema_version_fails_validation() {
        let cfg: ExperimentConfig =
            toml::from_str(&MINIMAL.replace("schema_version = 1", "schema_version = 9")).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn validation_errors_name_the_offending_path() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.attack = Some(AttackCfg {
            kind: "binning".into(),
            k: 1,
            csf: default_csf(),
            batches: default_batches(),
            batch_size: default_attack_batch(),
            psnr_threshold: default_psnr_threshold(),
            calibration_size: default_calibration(),
            local_steps: 0,
            local_batch: 0,
            iterations: default_iterations(),
            lr: default_gi_lr(),
            tv_weight: default_tv(),
            restarts: 1,
            label_mode: default_label_mode(),
            batch_sizes: default_batch_sizes(),
        });
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().starts_with("attack.k"), "{}", err);
    }
}
