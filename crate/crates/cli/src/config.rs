use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use candle_core::DType;
use hashjscc::data::{
    load_manifest, make_synthetic, DatasetManifest, ImageDataset, InMemoryDataset, ManifestDataset, Split,
};
use hashjscc::dhd::{DhdConfig, DhdObjective, DhdTrainConfig, TransformPair};
use hashjscc::jscc::JsccConfig;
use hashjscc::metrics::PsnrAveraging;
use hashjscc::perceptual::ScorerSpec;
use hashjscc::relay::ChainSpec;
use hashjscc::training::{TrainConfig, TrainMode, FULL_SCALE_BATCH_SIZES};
use hashjscc::vq::QuantRate;
use serde::{Deserialize, Serialize};

/// Everything one experiment needs; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataConfig,
    pub jscc: JsccConfig,
    pub dhd: DhdSection,
    pub train: TrainSection,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated shapes; splits use distinct generator seeds.
    Synthetic {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Manifest files with paths relative to `root`.
    Manifest {
        root: PathBuf,
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        n_cls: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhdSection {
    pub backbone_widths: Vec<usize>,
    pub n_e: usize,
    pub n_h: usize,
    #[serde(default)]
    pub objective: DhdObjective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub pretrained_backbone: Option<PathBuf>,
    #[serde(default)]
    pub transforms: TransformPair,
}

fn default_lambda() -> f64 {
    0.06
}
fn default_lr0() -> f64 {
    1e-4
}
fn default_lr_decay() -> f64 {
    0.95
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> Option<usize> {
    Some(15)
}
fn default_batch_sizes() -> Vec<usize> {
    FULL_SCALE_BATCH_SIZES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    /// Mini-batch size indexed by relay count; the last entry covers longer chains.
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub shared_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_list: Vec<f64>,
    pub r_list: Vec<usize>,
    #[serde(default = "default_quant_list")]
    pub quant_list: Vec<QuantRate>,
}

fn default_quant_list() -> Vec<QuantRate> {
    QuantRate::sweep().to_vec()
}

fn default_eval_batch() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub scorer: ScorerSpec,
    #[serde(default)]
    pub psnr_averaging: PsnrAveraging,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            scorer: ScorerSpec::default(),
            psnr_averaging: PsnrAveraging::default(),
            batch_size: default_eval_batch(),
        }
    }
}

pub struct Splits {
    pub train: Box<dyn ImageDataset>,
    pub val: Box<dyn ImageDataset>,
    pub test: Box<dyn ImageDataset>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.jscc.validate()?;
        self.dhd_config().validate()?;
        self.dhd.transforms.validate()?;
        ensure!(!self.sweep.snr_list.is_empty(), "sweep.snr_list is empty");
        ensure!(!self.sweep.r_list.is_empty(), "sweep.r_list is empty");
        ensure!(self.sweep.snr_list.iter().all(|s| s.is_finite()), "sweep.snr_list holds a non-finite SNR");
        ensure!(!self.train.batch_sizes.is_empty(), "train.batch_sizes is empty");
        ensure!(self.eval.batch_size > 0, "eval.batch_size must be positive");
        for &r in &self.sweep.r_list {
            self.train_config(self.sweep.snr_list[0], r).validate()?;
        }
        if let DataConfig::Synthetic { n_train, n_val, n_test, .. } = self.data {
            ensure!(n_train > 0 && n_val > 0 && n_test > 0, "synthetic splits must be non-empty");
        }
        Ok(())
    }

    pub fn n_cls(&self) -> usize {
        match &self.data {
            DataConfig::Synthetic { .. } => hashjscc::data::SYNTHETIC_N_CLS,
            DataConfig::Manifest { n_cls, .. } => *n_cls,
        }
    }

    pub fn dhd_config(&self) -> DhdConfig {
        DhdConfig {
            channels: self.jscc.channels,
            height: self.jscc.height,
            width: self.jscc.width,
            backbone_widths: self.dhd.backbone_widths.clone(),
            n_e: self.dhd.n_e,
            n_h: self.dhd.n_h,
            n_cls: self.n_cls(),
            objective: self.dhd.objective,
        }
    }

    pub fn dhd_train_config(&self) -> DhdTrainConfig {
        DhdTrainConfig {
            epochs: self.dhd.epochs,
            batch_size: self.dhd.batch_size,
            lr: self.dhd.lr,
            seed: self.seed,
            pretrained_backbone: self.dhd.pretrained_backbone.clone(),
            transforms: self.dhd.transforms.clone(),
        }
    }

    pub fn chain_spec(&self, snr_db: f64, relays: usize) -> ChainSpec {
        ChainSpec {
            jscc: self.jscc.clone(),
            relays,
            shared_weights: self.train.shared_weights,
            snr_db,
        }
    }

    pub fn train_config(&self, snr_db: f64, relays: usize) -> TrainConfig {
        let sizes = &self.train.batch_sizes;
        TrainConfig {
            lambda: self.train.lambda,
            snr_db,
            relays,
            batch_size: sizes[relays.min(sizes.len() - 1)],
            lr0: self.train.lr0,
            lr_decay: self.train.lr_decay,
            epochs: self.train.epochs,
            patience: self.train.patience,
            seed: self.seed,
            mode: self.train.mode,
            shared_weights: self.train.shared_weights,
        }
    }

    pub fn splits(&self) -> anyhow::Result<Splits> {
        let (c, h, w) = self.jscc.image_shape();
        match &self.data {
            DataConfig::Synthetic {
                n_train,
                n_val,
                n_test,
                seed,
            } => {
                let make = |n: usize, split: u64| -> anyhow::Result<Box<dyn ImageDataset>> {
                    let ds: InMemoryDataset = make_synthetic(n, c, h, w, seed.wrapping_mul(3).wrapping_add(split))?;
                    Ok(Box::new(ds))
                };
                Ok(Splits {
                    train: make(*n_train, 0)?,
                    val: make(*n_val, 1)?,
                    test: make(*n_test, 2)?,
                })
            }
            DataConfig::Manifest {
                root,
                train,
                val,
                test,
                n_cls,
            } => {
                let load = |p: &Path, split| -> anyhow::Result<DatasetManifest> {
                    Ok(load_manifest(p, split, Some(*n_cls))?)
                };
                let (tr, va, te) = (load(train, Split::Train)?, load(val, Split::Val)?, load(test, Split::Test)?);
                hashjscc::data::check_disjoint(&[&tr, &va, &te])?;
                let wrap = |m| -> Box<dyn ImageDataset> { Box::new(ManifestDataset::new(m, root, (c, h, w))) };
                Ok(Splits {
                    train: wrap(tr),
                    val: wrap(va),
                    test: wrap(te),
                })
            }
        }
    }
}

/// Applies command-line overrides and checks the result.
pub fn resolve(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mode: Option<TrainMode>,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Directory name of one SNR, e.g. `snr-5` or `snr2.5`.
pub fn snr_tag(snr_db: f64) -> String {
    format!("snr{snr_db}")
}

/// Writes the effective configuration into `dir`.
pub fn write_config(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

pub fn device() -> anyhow::Result<candle_core::Device> {
    match std::env::var("HASHJSCC_DEVICE").ok().as_deref() {
        None | Some("") | Some("cpu") => Ok(candle_core::Device::Cpu),
        Some(other) => bail!("unsupported device {other:?}; this build runs on \"cpu\" only"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
seed = 1
out_dir = "out"

[data]
kind = "synthetic"
n_train = 8
n_val = 4
n_test = 4

[jscc]
channels = 3
height = 8
width = 8
c_out = 4
hidden = 8

[dhd]
backbone_widths = [4, 8]
n_e = 16
n_h = 16
epochs = 1
batch_size = 4
lr = 1e-3

[train]
mode = "baseline-mse"
epochs = 1

[sweep]
snr_list = [-5.0, -10.0, -15.0]
r_list = [0, 1, 2, 3]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(DESK).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sweep.quant_list.len(), 5);
        assert_eq!(cfg.train.lambda, 0.06);
        assert_eq!(cfg.train_config(-5.0, 2).batch_size, 8);
        let again: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = DESK.replace("lr = 1e-3", "lr = 1e-3\nlearning_rate = 1");
        assert!(toml::from_str::<ExperimentConfig>(&typo).is_err());
    }

    #[test]
    fn snr_tags() {
        assert_eq!(snr_tag(-5.0), "snr-5");
        assert_eq!(snr_tag(2.5), "snr2.5");
    }
}
