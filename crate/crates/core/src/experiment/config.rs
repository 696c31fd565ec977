use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, synth_shapes, ImageDataset};
use crate::error::{Error, Result};
use crate::tensor::Prng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Convnet,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    Instance,
    Group,
    Bin,
    /// AFN with per-instance statistics.
    Asr,
    Afn,
}

impl NormKind {
    pub const ALL: [NormKind; 7] = [
        NormKind::Batch,
        NormKind::Layer,
        NormKind::Instance,
        NormKind::Group,
        NormKind::Bin,
        NormKind::Asr,
        NormKind::Afn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::Instance => "instance",
            NormKind::Group => "group",
            NormKind::Bin => "bin",
            NormKind::Asr => "asr",
            NormKind::Afn => "afn",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown norm `{s}` (expected batch, layer, instance, group, bin, asr or afn)"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdNesterov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synth {
        train_n: usize,
        test_n: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn default_image_size() -> usize {
    16
}

impl DatasetSpec {
    /// `(train, test)`. Synthetic splits come from separate streams of the
    /// dataset seed, so they never depend on the model seed.
    pub fn resolve(&self) -> Result<(ImageDataset, ImageDataset)> {
        match self {
            DatasetSpec::Synth {
                train_n,
                test_n,
                image_size,
                seed,
            } => {
                let root = Prng::new(*seed);
                let mut train = synth_shapes(&mut root.fork(10), *train_n, *image_size)?;
                let mut test = synth_shapes(&mut root.fork(11), *test_n, *image_size)?;
                train.name = "synth_train".into();
                test.name = "synth_test".into();
                Ok((train, test))
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?;
                if let Some(n) = train_limit {
                    train = train.head(*n);
                }
                if let Some(n) = test_limit {
                    test = test.head(*n);
                }
                Ok((train, test))
            }
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = self
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
    }
}

/// One training run, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub arch: Arch,
    pub norm: NormKind,
    /// Conv widths for the ConvNet, hidden widths for the MLP.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Width of the first fully connected ConvNet layer.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Multiply the rate by 0.1 every this many epochs; 0 disables decay.
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub corruption_eval: bool,
    #[serde(default)]
    pub eval_seed: u64,
    pub dataset: DatasetSpec,
}

fn default_name() -> String {
    "run".into()
}
fn default_channels() -> Vec<usize> {
    vec![16, 32]
}
fn default_hidden() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    128
}
fn default_eval_batch() -> usize {
    256
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative IDX paths are taken relative to the config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.dataset.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 || self.hidden == 0 {
            return bad("epochs, batch sizes and hidden width must be positive".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channel widths must be positive, got {:?}", self.channels));
        }
        if self.arch == Arch::Convnet && self.channels.len() != 2 {
            return bad(format!(
                "the ConvNet has two conv blocks, got {} channel widths",
                self.channels.len()
            ));
        }
        if let DatasetSpec::Synth { train_n, test_n, image_size, .. } = self.dataset {
            if train_n == 0 || test_n == 0 || image_size < 8 {
                return bad("synthetic dataset needs train_n, test_n >= 1 and image_size >= 8".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
norm = "afn"
[dataset]
kind = "synth"
train_n = 64
test_n = 32
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.channels, vec![16, 32]);
        assert_eq!(cfg.hidden, 100);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.batch_size, 128);
        assert!(cfg.corruption_eval);
        assert_eq!(
            cfg.dataset,
            DatasetSpec::Synth {
                train_n: 64,
                test_n: 32,
                image_size: 16,
                seed: 0
            }
        );
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_norm_and_fields_are_config_errors() {
        let text = MINIMAL.replace("afn", "switchable");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = format!("colour = 3\n{MINIMAL}");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
        assert!(matches!("switchable".parse::<NormKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        for line in ["lr = -1.0", "lr = 0.0", "epochs = 0", "batch_size = 0", "momentum = 1.0", "channels = [16]", "channels = [0, 4]"] {
            let text = format!("{line}\n{MINIMAL}");
            assert!(
                matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))),
                "{line}"
            );
        }
    }

    #[test]
    fn synth_splits_are_disjoint_streams() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let (train, test) = cfg.dataset.resolve().unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(test.len(), 32);
        assert_ne!(train.head(32).images(), test.images());
    }

    #[test]
    fn idx_paths_are_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
norm = "batch"
[dataset]
kind = "idx"
train_images = "a.idx"
train_labels = "b.idx"
test_images = "/abs/c.idx"
test_labels = "d.idx"
"#;
        let path = dir.path().join("run.cfg");
        fs::write(&path, text).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        match cfg.dataset {
            DatasetSpec::Idx { train_images, test_images, .. } => {
                assert_eq!(train_images, dir.path().join("a.idx"));
                assert_eq!(test_images, PathBuf::from("/abs/c.idx"));
            }
            _ => panic!("expected idx"),
        }
    }
}
