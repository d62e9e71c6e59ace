//! Hash-module objective over batches and the training loop.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::losses::{bce_q_loss_tensor, hash_proxy_loss_tensor, sdh_loss_tensor};
use super::{binarize, hamming_distance, DhdConfig, DhdLossParts, DhdModule, DhdObjective, TransformPair};
use crate::data::{epoch_order, gather, ImageDataset};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::seed::{self, Stream};

fn label_tensor(labels: &[Vec<u8>], dtype: DType, device: &Device) -> Result<Tensor> {
    let n_cls = labels.first().map_or(0, Vec::len);
    let flat: Vec<f32> = labels.iter().flatten().map(|v| *v as f32).collect();
    Ok(Tensor::from_vec(flat, (labels.len(), n_cls), device)?.to_dtype(dtype)?)
}

/// Objective on one batch: proxy loss plus weighted self-distillation and quantization terms,
/// each averaged over the batch. Views are drawn from `pair` with a generator seeded by
/// `aug_seed`; `train` selects batch statistics in normalization layers.
pub fn dhd_loss(
    module: &DhdModule,
    images: &[ImageTensor],
    labels: &[Vec<u8>],
    pair: &TransformPair,
    objective: &DhdObjective,
    aug_seed: u64,
    train: bool,
) -> Result<(Tensor, DhdLossParts)> {
    objective.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "batch has {} images and {} label rows",
            images.len(),
            labels.len()
        )));
    }
    let mut rng = seed::rng(aug_seed);
    let mut teacher = Vec::with_capacity(images.len());
    let mut student = Vec::with_capacity(images.len());
    for img in images {
        let (t, s) = pair.views(img, &mut rng)?;
        teacher.push(t);
        student.push(s);
    }
    let (dtype, device) = (module.dtype(), module.device().clone());
    let h_t = module.hash_tensor(&ImageTensor::stack(&teacher, dtype, &device)?, train)?;
    let h_s = module.hash_tensor(&ImageTensor::stack(&student, dtype, &device)?, train)?;
    let c = label_tensor(labels, dtype, &device)?;
    let hp = hash_proxy_loss_tensor(&c, &h_t, module.proxies(), objective.tau)?;
    let sdh = sdh_loss_tensor(&h_t, &h_s)?;
    let bceq = bce_q_loss_tensor(&h_t, objective.sigma_g)?;
    let total = ((&hp + (&sdh * objective.lambda_sdh)?)? + (&bceq * objective.lambda_bceq)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let parts = DhdLossParts {
        hp: scalar(&hp)?,
        sdh: scalar(&sdh)?,
        bceq: scalar(&bceq)?,
        total: scalar(&total)?,
    };
    Ok((total, parts))
}

/// Image-weighted mean objective over a dataset in inference mode with fixed views.
pub fn evaluate_dhd_loss(
    module: &DhdModule,
    ds: &dyn ImageDataset,
    pair: &TransformPair,
    objective: &DhdObjective,
    batch_size: usize,
    seed: u64,
) -> Result<DhdLossParts> {
    let mut acc = DhdLossParts { hp: 0.0, sdh: 0.0, bceq: 0.0, total: 0.0 };
    let order: Vec<usize> = (0..ds.len()).collect();
    for (b, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let (images, labels) = gather(ds, chunk)?;
        let (_, p) = dhd_loss(module, &images, &labels, pair, objective, seed::derive(seed, Stream::Eval, &[b as u64]), false)?;
        let w = chunk.len() as f64;
        acc.hp += p.hp * w;
        acc.sdh += p.sdh * w;
        acc.bceq += p.bceq * w;
        acc.total += p.total * w;
    }
    let n = ds.len().max(1) as f64;
    Ok(DhdLossParts {
        hp: acc.hp / n,
        sdh: acc.sdh / n,
        bceq: acc.bceq / n,
        total: acc.total / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhdTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Safetensors file with `backbone.*` tensors used to initialize the feature extractor.
    #[serde(default)]
    pub pretrained_backbone: Option<PathBuf>,
    #[serde(default)]
    pub transforms: TransformPair,
}

impl Default for DhdTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            pretrained_backbone: None,
            transforms: TransformPair::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhdEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct DhdTrainReport {
    pub module: DhdModule,
    /// Validation objective of the freshly initialized module.
    pub initial_val_loss: f64,
    pub history: Vec<DhdEpoch>,
}

impl DhdTrainReport {
    pub fn final_val_loss(&self) -> f64 {
        self.history.last().map_or(self.initial_val_loss, |e| e.val_loss)
    }
}

/// Trains a hash module with Adam. A non-finite batch loss aborts with
/// [`Error::Diverged`] naming the epoch and step.
pub fn train_dhd(
    train: &dyn ImageDataset,
    val: &dyn ImageDataset,
    model: &DhdConfig,
    config: &DhdTrainConfig,
    dtype: DType,
    device: &Device,
) -> Result<DhdTrainReport> {
    model.validate()?;
    config.transforms.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("hash-module training needs non-empty train and val sets".into()));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let module = DhdModule::new(model, dtype, device, config.seed)?;
    if let Some(path) = &config.pretrained_backbone {
        module.load_backbone(path)?;
    }
    let objective = model.objective;
    let eval_seed = seed::derive(config.seed, Stream::Eval, &[]);
    let initial = evaluate_dhd_loss(&module, val, &config.transforms, &objective, config.batch_size, eval_seed)?;
    let mut opt = Adam::new(module.trainable_vars(), config.lr)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (images, labels) = gather(train, chunk)?;
            let aug = seed::derive(config.seed, Stream::Augment, &[epoch as u64, step as u64]);
            let (loss, parts) = dhd_loss(&module, &images, &labels, &config.transforms, &objective, aug, true)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("hash-module loss {parts:?}"),
                });
            }
            opt.backward_step(&loss)?;
            sum += parts.total * chunk.len() as f64;
        }
        let val_loss = evaluate_dhd_loss(&module, val, &config.transforms, &objective, config.batch_size, eval_seed)?.total;
        tracing::info!(epoch, train_loss = sum / train.len() as f64, val_loss, "hash module epoch");
        history.push(DhdEpoch {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
        });
    }
    Ok(DhdTrainReport {
        module,
        initial_val_loss: initial.total,
        history,
    })
}

/// Mean Hamming distance between binarized hashes of image pairs sharing at least one label
/// and of pairs sharing none, over every unordered pair of the dataset.
pub fn class_hamming_means(module: &DhdModule, ds: &dyn ImageDataset) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (images, labels) = gather(ds, &idx)?;
    let bits = module
        .hash_batch(&images)?
        .iter()
        .map(binarize)
        .collect::<Vec<_>>();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..bits.len() {
        for j in i + 1..bits.len() {
            let d = hamming_distance(&bits[i], &bits[j])? as f64;
            if labels[i].iter().zip(&labels[j]).any(|(a, b)| *a > 0 && *b > 0) {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::InvalidArgument("dataset needs both matching and non-matching pairs".into()));
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}
