//! Training of decode-and-forward chains against pixel MSE plus hash alignment under a frozen
//! hash module, with per-epoch checkpoints, a metric log, early stopping and resume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{epoch_order, gather, ImageDataset};
use crate::dhd::{sdh_loss, sdh_loss_tensor, DhdModule};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::psnr;
use crate::optim::Adam;
use crate::relay::DfChain;
use crate::seed::{self, Stream};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_loss,val_psnr_db,val_hash_cos";

/// Mini-batch size by relay count `r = 0..=3`.
pub const FULL_SCALE_BATCH_SIZES: [usize; 4] = [20, 10, 8, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Pixel MSE only.
    BaselineMse,
    /// MSE plus `λ·(1 − cos)` between hashes of source and reconstruction.
    #[default]
    ProposedDhd,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::BaselineMse => "baseline-mse",
            TrainMode::ProposedDhd => "proposed-dhd",
        })
    }
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub snr_db: f64,
    /// Relay count `r`.
    pub relays: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub shared_weights: bool,
}

impl TrainConfig {
    /// Full-scale hyperparameters for one grid point.
    pub fn full_scale(snr_db: f64, relays: usize, mode: TrainMode, seed: u64) -> Self {
        Self {
            lambda: default_lambda(),
            snr_db,
            relays,
            batch_size: FULL_SCALE_BATCH_SIZES.get(relays).copied().unwrap_or(6),
            lr0: default_lr0(),
            lr_decay: default_lr_decay(),
            epochs: default_epochs(),
            patience: default_patience(),
            seed,
            mode,
            shared_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr0 must be positive and lr_decay in (0, 1]".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive when set".into()));
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Freezes a trained hash module for use inside the composite objective.
pub fn freeze(module: DhdModule) -> DhdModule {
    module.freeze()
}

fn require_frozen(dhd: &DhdModule) -> Result<()> {
    if !dhd.is_frozen() {
        return Err(Error::Contract("the hash module must be frozen before it enters the JSCC objective".into()));
    }
    Ok(())
}

/// `MSE(S, Ŝ) + λ·(1 − cos(H(S), H(Ŝ)))` for one image pair.
pub fn composite_loss(s: &ImageTensor, s_hat: &ImageTensor, dhd: &DhdModule, lambda: f64) -> Result<f64> {
    require_frozen(dhd)?;
    let mse = s.mse(s_hat)?;
    Ok(mse + lambda * sdh_loss(&dhd.hash(s)?, &dhd.hash(s_hat)?)?)
}

/// Batched objective terms.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: Tensor,
    pub mse: Tensor,
    /// Hash-alignment term `1 − cos`, absent in baseline mode.
    pub sdh: Option<Tensor>,
}

/// Batch objective for `(B, C, H, W)` sources and reconstructions. MSE is the mean over all
/// elements; the hash term is the batch mean. Baseline mode never evaluates the hash module.
pub fn composite_loss_tensor(
    s: &Tensor,
    s_hat: &Tensor,
    dhd: Option<&DhdModule>,
    lambda: f64,
    mode: TrainMode,
) -> Result<CompositeLoss> {
    if s.dims() != s_hat.dims() {
        return Err(Error::InvalidArgument(format!("shape mismatch {:?} vs {:?}", s.dims(), s_hat.dims())));
    }
    let mse = (s - s_hat)?.sqr()?.mean_all()?;
    match mode {
        TrainMode::BaselineMse => Ok(CompositeLoss {
            total: mse.clone(),
            mse,
            sdh: None,
        }),
        TrainMode::ProposedDhd => {
            let dhd = dhd.ok_or_else(|| Error::Config("proposed-dhd mode needs a hash module".into()))?;
            require_frozen(dhd)?;
            let h = dhd.hash_tensor(&s.detach(), false)?;
            let h_hat = dhd.hash_tensor(s_hat, false)?;
            let sdh = sdh_loss_tensor(&h, &h_hat)?;
            Ok(CompositeLoss {
                total: (&mse + (&sdh * lambda)?)?,
                mse,
                sdh: Some(sdh),
            })
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One epoch's entry in the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr_db: f64,
    pub val_hash_cos: Option<f64>,
}

impl EpochMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_loss,
            self.val_psnr_db,
            self.val_hash_cos.map(|v| v.to_string()).unwrap_or_default()
        )
    }

    fn parse(line: &str, path: &Path, lineno: usize) -> Result<Self> {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        Ok(Self {
            epoch: f[0].parse().map_err(|_| err(format!("bad epoch {:?}", f[0])))?,
            lr: num(f[1])?,
            train_loss: num(f[2])?,
            val_loss: num(f[3])?,
            val_psnr_db: num(f[4])?,
            val_hash_cos: if f[5].is_empty() { None } else { Some(num(f[5])?) },
        })
    }
}

pub fn read_metric_log(path: &Path) -> Result<Vec<EpochMetrics>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "missing metric log header".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| EpochMetrics::parse(l, path, i + 2))
        .collect()
}

fn write_metric_log(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.csv_row()).expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Validation summary of a chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValMetrics {
    pub loss: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub hash_cos: Option<f64>,
    /// Mean over hash components of the across-image variance of reconstruction hashes.
    pub hash_variance: Option<f64>,
}

/// Gradient-step driver for one chain; holds the optimizer state.
pub struct DfTrainer<'a> {
    chain: DfChain,
    dhd: Option<&'a DhdModule>,
    opt: Adam,
    config: TrainConfig,
}

impl<'a> DfTrainer<'a> {
    pub fn new(chain: DfChain, dhd: Option<&'a DhdModule>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if chain.relays() != config.relays {
            return Err(Error::Config(format!(
                "chain has {} relays, training config {}",
                chain.relays(),
                config.relays
            )));
        }
        if let Some(d) = dhd {
            require_frozen(d)?;
            let c = d.config();
            if (c.channels, c.height, c.width) != chain.spec().jscc.image_shape() {
                return Err(Error::Config("hash module and codec disagree on the image shape".into()));
            }
            if d.dtype() != chain.dtype() {
                return Err(Error::Config("hash module and codec use different precisions".into()));
            }
        } else if config.mode == TrainMode::ProposedDhd {
            return Err(Error::Config("proposed-dhd mode needs a frozen hash module".into()));
        }
        let opt = Adam::new(chain.store().named_vars(), config.lr0)?;
        Ok(Self {
            chain,
            dhd,
            opt,
            config: config.clone(),
        })
    }

    pub fn chain(&self) -> &DfChain {
        &self.chain
    }

    pub fn into_chain(self) -> DfChain {
        self.chain
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.opt
    }

    /// Noise seeds `[hop][row]` for training batch `batch` of `epoch`.
    pub fn train_seeds(&self, epoch: usize, batch: usize, rows: usize) -> Vec<Vec<u64>> {
        (0..self.chain.n_hops())
            .map(|hop| {
                (0..rows)
                    .map(|row| {
                        seed::derive(
                            self.config.seed,
                            Stream::Noise,
                            &[epoch as u64, batch as u64, hop as u64, row as u64],
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// One optimizer step on a batch; returns `(total, mse)` before the update.
    pub fn step(&mut self, images: &[ImageTensor], epoch: usize, batch: usize) -> Result<(f64, f64)> {
        let x = ImageTensor::stack(images, self.chain.dtype(), self.chain.device())?;
        let seeds = self.train_seeds(epoch, batch, images.len());
        let (out, _) = self.chain.forward_batch(&x, &seeds)?;
        let loss = composite_loss_tensor(&x, &out, self.dhd, self.config.lambda, self.config.mode)?;
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: batch,
                detail: format!("non-finite loss; mse = {}", scalar(&loss.mse)?),
            });
        }
        self.opt.backward_step(&loss.total)?;
        Ok((total, scalar(&loss.mse)?))
    }

    /// Objective and image metrics on a fixed validation set. Image `i` sees the noise seed
    /// `derive(seed, Eval, [hop, i])` at every evaluation.
    pub fn evaluate(&self, val: &dyn ImageDataset) -> Result<ValMetrics> {
        if val.is_empty() {
            return Err(Error::InvalidArgument("empty validation set".into()));
        }
        let (mut loss, mut mse, mut psnr_sum, mut psnr_n) = (0.0, 0.0, 0.0, 0usize);
        let mut hash_cos = 0.0;
        let mut hashes: Vec<Vec<f64>> = Vec::new();
        let idx: Vec<usize> = (0..val.len()).collect();
        for chunk in idx.chunks(self.config.batch_size) {
            let (images, _) = gather(val, chunk)?;
            let x = ImageTensor::stack(&images, self.chain.dtype(), self.chain.device())?;
            let seeds: Vec<Vec<u64>> = (0..self.chain.n_hops())
                .map(|hop| chunk.iter().map(|&i| seed::derive(self.config.seed, Stream::Eval, &[hop as u64, i as u64])).collect())
                .collect();
            let (out, _) = self.chain.forward_batch(&x, &seeds)?;
            let l = composite_loss_tensor(&x, &out, self.dhd, self.config.lambda, self.config.mode)?;
            let w = chunk.len() as f64;
            loss += scalar(&l.total)? * w;
            mse += scalar(&l.mse)? * w;
            let recon = ImageTensor::unstack(&out)?;
            for (s, r) in images.iter().zip(&recon) {
                let p = psnr(s, r)?;
                if p.is_finite() {
                    psnr_sum += p;
                    psnr_n += 1;
                }
            }
            if let Some(d) = self.dhd {
                let h = d.hash_tensor(&x, false)?;
                let h_hat = d.hash_tensor(&out, false)?;
                let cos = crate::dhd::cosine_similarity_tensor(&h, &h_hat)?;
                hash_cos += scalar(&cos.sum_all()?)?;
                hashes.extend(h_hat.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            }
        }
        let n = val.len() as f64;
        let hash_variance = (!hashes.is_empty()).then(|| {
            let dims = hashes[0].len();
            (0..dims)
                .map(|j| {
                    let mean = hashes.iter().map(|h| h[j]).sum::<f64>() / n;
                    hashes.iter().map(|h| (h[j] - mean).powi(2)).sum::<f64>() / n
                })
                .sum::<f64>()
                / dims as f64
        });
        Ok(ValMetrics {
            loss: loss / n,
            mse: mse / n,
            psnr_db: if psnr_n == 0 { f64::INFINITY } else { psnr_sum / psnr_n as f64 },
            hash_cos: self.dhd.map(|_| hash_cos / n),
            hash_variance,
        })
    }
}

/// Gradient norms of the hash-alignment term of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashPathGradients {
    /// With respect to the destination decoder output.
    pub decoder_output: f64,
    /// With respect to the source images entering the first encoder.
    pub encoder_input: f64,
}

fn grad_norm(grads: &candle_core::backprop::GradStore, v: &Var, at: &str) -> Result<f64> {
    let g = grads
        .get(v)
        .ok_or_else(|| Error::Contract(format!("no gradient reached the {at} through the hash path")))?;
    scalar(&g.sqr()?.sum_all()?.sqrt()?)
}

/// Backpropagates `1 − cos(H(S), H(Ŝ))` alone through the frozen hash module into the chain.
pub fn hash_path_gradients(
    chain: &DfChain,
    dhd: &DhdModule,
    images: &[ImageTensor],
    seeds: &[Vec<u64>],
) -> Result<HashPathGradients> {
    require_frozen(dhd)?;
    let x = ImageTensor::stack(images, chain.dtype(), chain.device())?;
    let h = dhd.hash_tensor(&x, false)?.detach();

    let (out, _) = chain.forward_batch(&x, seeds)?;
    let out = Var::from_tensor(&out.detach())?;
    let grads = sdh_loss_tensor(&h, &dhd.hash_tensor(out.as_tensor(), false)?)?.backward()?;
    let decoder_output = grad_norm(&grads, &out, "decoder output")?;

    let input = Var::from_tensor(&x)?;
    let (out, _) = chain.forward_batch(input.as_tensor(), seeds)?;
    let grads = sdh_loss_tensor(&h, &dhd.hash_tensor(&out, false)?)?.backward()?;
    let encoder_input = grad_norm(&grads, &input, "encoder input")?;
    Ok(HashPathGradients {
        decoder_output,
        encoder_input,
    })
}

/// Outcome of [`train_df_system`].
#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Chain with the weights of the last completed epoch.
    pub chain: DfChain,
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn epoch_stem(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}"))
    }

    pub fn optimizer_state(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.adam.safetensors"))
    }

    pub fn best_stem(&self) -> PathBuf {
        self.dir.join("best")
    }

    /// Highest epoch with a complete checkpoint (weights, sidecar and optimizer state).
    pub fn last_epoch(&self) -> Option<usize> {
        let entries = std::fs::read_dir(&self.dir).ok()?;
        entries
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                let n = name.strip_prefix("epoch_")?.strip_suffix(".toml")?;
                n.parse::<usize>().ok()
            })
            .filter(|&e| {
                checkpoint::weights_path(&self.epoch_stem(e)).exists() && self.optimizer_state(e).exists()
            })
            .max()
    }
}

fn epoch_meta(cfg: &TrainConfig, m: &EpochMetrics) -> CheckpointMeta {
    let mut meta = CheckpointMeta::new("df-chain", cfg.seed);
    meta.epoch = Some(m.epoch);
    meta.metrics.insert("lr".into(), m.lr);
    meta.metrics.insert("train_loss".into(), m.train_loss);
    meta.metrics.insert("val_loss".into(), m.val_loss);
    meta.metrics.insert("val_psnr_db".into(), m.val_psnr_db);
    if let Some(c) = m.val_hash_cos {
        meta.metrics.insert("val_hash_cos".into(), c);
    }
    meta
}

/// Trains `chain` end to end with loss at the destination only.
///
/// Every epoch writes `epoch_NNNN` weights and optimizer state plus a metric-log row into
/// `out_dir`; the epoch with the lowest validation objective is copied to `best`. With
/// `resume`, training continues after the last complete epoch checkpoint and reproduces the
/// uninterrupted run.
pub fn train_df_system(
    chain: DfChain,
    dhd: Option<&DhdModule>,
    train: &dyn ImageDataset,
    val: &dyn ImageDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let paths = RunPaths::new(out_dir);
    let mut trainer = DfTrainer::new(chain, dhd, cfg)?;
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut start = 0;
    if resume {
        if let Some(last) = paths.last_epoch() {
            let stem = paths.epoch_stem(last);
            let meta = checkpoint::read_meta(&stem)?;
            if meta.config_as::<crate::relay::ChainSpec>()? != *trainer.chain.spec() {
                return Err(Error::Config(format!("{} was written for a different chain", stem.display())));
            }
            let mut store = trainer.chain.store().clone();
            checkpoint::load_checkpoint(&stem, &mut store)?;
            trainer.opt.load_state(&paths.optimizer_state(last))?;
            history = read_metric_log(&paths.metrics())?;
            history.retain(|m| m.epoch <= last);
            if history.len() != last + 1 {
                return Err(Error::Corruption(format!(
                    "metric log holds {} epochs, checkpoint is at epoch {last}",
                    history.len()
                )));
            }
            start = last + 1;
            tracing::info!(epoch = last, dir = %out_dir.display(), "resuming");
        }
    }
    let best = |h: &[EpochMetrics]| {
        h.iter()
            .fold(None::<(usize, f64)>, |acc, m| match acc {
                Some((_, v)) if v <= m.val_loss => acc,
                _ => Some((m.epoch, m.val_loss)),
            })
    };
    let mut stopped_early = false;
    for epoch in start..cfg.epochs {
        if let (Some(p), Some((b, _))) = (cfg.patience, best(&history)) {
            if epoch - b > p {
                stopped_early = true;
                break;
            }
        }
        let lr = lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch);
        trainer.opt.set_lr(lr);
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, _) = gather(train, chunk)?;
            let (total, _) = trainer.step(&images, epoch, b)?;
            sum += total * chunk.len() as f64;
        }
        let v = trainer.evaluate(val)?;
        if !v.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: 0,
                detail: format!("non-finite validation loss {v:?}"),
            });
        }
        if v.hash_variance == Some(0.0) {
            return Err(Error::Diverged {
                epoch,
                step: 0,
                detail: "reconstruction hashes collapsed to a single point".into(),
            });
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: sum / train.len() as f64,
            val_loss: v.loss,
            val_psnr_db: v.psnr_db,
            val_hash_cos: v.hash_cos,
        };
        tracing::info!(epoch, train_loss = m.train_loss, val_loss = m.val_loss, val_psnr_db = m.val_psnr_db, "epoch");
        let is_best = best(&history).is_none_or(|(_, bv)| m.val_loss < bv);
        history.push(m);
        let meta = epoch_meta(cfg, &m);
        trainer.chain.save(&paths.epoch_stem(epoch), meta.clone())?;
        trainer.opt.save_state(&paths.optimizer_state(epoch))?;
        if is_best {
            trainer.chain.save(&paths.best_stem(), meta)?;
        }
        write_metric_log(&paths.metrics(), &history)?;
    }
    let (best_epoch, best_val_loss) = best(&history).ok_or_else(|| Error::Config("no epochs to train".into()))?;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
        chain: trainer.into_chain(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, ImageDataset};
    use crate::dhd::{DhdConfig, DhdObjective};
    use crate::jscc::JsccConfig;
    use crate::relay::ChainSpec;
    use candle_core::Device;

    fn dhd(dtype: DType) -> DhdModule {
        let cfg = DhdConfig {
            channels: 3,
            height: 8,
            width: 8,
            backbone_widths: vec![4, 8],
            n_e: 16,
            n_h: 64,
            n_cls: 6,
            objective: DhdObjective::default(),
        };
        DhdModule::new(&cfg, dtype, &Device::Cpu, 5).unwrap()
    }

    fn spec(relays: usize) -> ChainSpec {
        ChainSpec {
            jscc: JsccConfig {
                channels: 3,
                height: 8,
                width: 8,
                c_out: 4,
                hidden: 8,
                res_blocks: 1,
            },
            relays,
            shared_weights: false,
            snr_db: -5.0,
        }
    }

    fn cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 3,
            lr0: 1e-3,
            ..TrainConfig::full_scale(-5.0, 0, mode, 3)
        }
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at_epoch(1e-4, 0.95, 0), 1e-4);
        assert!((lr_at_epoch(1e-4, 0.95, 1) - 9.5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(1e-4, 0.95, 10) - 5.987369392383789e-5).abs() < 1e-12);
        assert_eq!(TrainConfig::full_scale(-5.0, 2, TrainMode::ProposedDhd, 0).batch_size, 8);
    }

    #[test]
    fn composite_loss_examples() {
        let ds = make_synthetic(2, 3, 8, 8, 1).unwrap();
        let (s, t) = (ds.image(0).unwrap(), ds.image(1).unwrap());
        let m = dhd(DType::F64);
        assert!(matches!(composite_loss(&s, &t, &m, 0.06), Err(Error::Contract(_))));
        let m = freeze(m);
        assert!(composite_loss(&s, &s, &m, 0.06).unwrap().abs() < 1e-12);
        assert_eq!(composite_loss(&s, &t, &m, 0.0).unwrap(), s.mse(&t).unwrap());
        let oracle = s.mse(&t).unwrap() + 0.06 * sdh_loss(&m.hash(&s).unwrap(), &m.hash(&t).unwrap()).unwrap();
        assert!((composite_loss(&s, &t, &m, 0.06).unwrap() - oracle).abs() < 1e-12);
        let x = s.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let y = t.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let batched = composite_loss_tensor(&x, &y, Some(&m), 0.06, TrainMode::ProposedDhd).unwrap();
        assert!((scalar(&batched.total).unwrap() - oracle).abs() < 1e-9);
        let base = composite_loss_tensor(&x, &y, None, 0.06, TrainMode::BaselineMse).unwrap();
        assert!(base.sdh.is_none());
    }

    #[test]
    fn gradient_reaches_input_through_frozen_hash() {
        let m = freeze(dhd(DType::F64));
        let ds = make_synthetic(2, 3, 8, 8, 2).unwrap();
        let s = ds.image(0).unwrap().to_tensor(DType::F64, &Device::Cpu).unwrap();
        let v = Var::from_tensor(&ds.image(1).unwrap().to_tensor(DType::F64, &Device::Cpu).unwrap()).unwrap();
        let loss = composite_loss_tensor(&s, v.as_tensor(), Some(&m), 1.0, TrainMode::ProposedDhd).unwrap();
        let sdh_only = loss.sdh.unwrap();
        let g = sdh_only.backward().unwrap().get(&v).unwrap().sqr().unwrap().sum_all().unwrap();
        assert!(g.to_scalar::<f64>().unwrap() > 0.0);
        let before = m.checksum().unwrap();
        loss.total.backward().unwrap();
        assert!(m.trainable_vars().is_empty());
        assert_eq!(m.checksum().unwrap(), before);
    }

    #[test]
    fn trainer_rejects_unfrozen_or_missing_hash_module() {
        let chain = DfChain::new(&spec(0), DType::F32, &Device::Cpu, 1).unwrap();
        let m = dhd(DType::F32);
        assert!(matches!(DfTrainer::new(chain.clone(), Some(&m), &cfg(TrainMode::ProposedDhd)), Err(Error::Contract(_))));
        assert!(matches!(DfTrainer::new(chain.clone(), None, &cfg(TrainMode::ProposedDhd)), Err(Error::Config(_))));
        assert!(DfTrainer::new(chain, None, &cfg(TrainMode::BaselineMse)).is_ok());
    }

    #[test]
    fn modes_diverge_only_after_the_first_step() {
        let ds = make_synthetic(4, 3, 8, 8, 9).unwrap();
        let (images, _) = gather(&ds, &[0, 1, 2, 3]).unwrap();
        let m = freeze(dhd(DType::F32));
        let chain = DfChain::new(&spec(0), DType::F32, &Device::Cpu, 1).unwrap();
        let mut a = DfTrainer::new(chain.clone(), Some(&m), &cfg(TrainMode::BaselineMse)).unwrap();
        let chain_b = DfChain::new(&spec(0), DType::F32, &Device::Cpu, 1).unwrap();
        let mut b = DfTrainer::new(chain_b, Some(&m), &cfg(TrainMode::ProposedDhd)).unwrap();
        assert_eq!(a.chain().checksum().unwrap(), b.chain().checksum().unwrap());
        let (_, mse_a) = a.step(&images, 0, 0).unwrap();
        let (_, mse_b) = b.step(&images, 0, 0).unwrap();
        assert_eq!(mse_a, mse_b);
        assert_ne!(a.chain().checksum().unwrap(), b.chain().checksum().unwrap());
    }

    #[test]
    fn training_run_logs_checkpoints_and_resumes_identically() {
        let train = make_synthetic(16, 3, 8, 8, 1).unwrap();
        let val = make_synthetic(8, 3, 8, 8, 2).unwrap();
        let m = freeze(dhd(DType::F32));
        let c = cfg(TrainMode::ProposedDhd);
        let full = tempfile::tempdir().unwrap();
        let chain = DfChain::new(&spec(0), DType::F32, &Device::Cpu, 1).unwrap();
        let report = train_df_system(chain, Some(&m), &train, &val, &c, full.path(), false).unwrap();
        assert_eq!(report.history.len(), 3);
        assert!(report.history.iter().all(|h| h.val_hash_cos.is_some()));
        let paths = RunPaths::new(full.path());
        assert_eq!(paths.last_epoch(), Some(2));
        assert!(checkpoint::weights_path(&paths.best_stem()).exists());

        let part = tempfile::tempdir().unwrap();
        let short = TrainConfig { epochs: 2, ..c.clone() };
        let chain = DfChain::new(&spec(0), DType::F32, &Device::Cpu, 1).unwrap();
        train_df_system(chain, Some(&m), &train, &val, &short, part.path(), false).unwrap();
        let chain = DfChain::new(&spec(0), DType::F32, &Device::Cpu, 1).unwrap();
        let resumed = train_df_system(chain, Some(&m), &train, &val, &c, part.path(), true).unwrap();
        assert_eq!(resumed.chain.checksum().unwrap(), report.chain.checksum().unwrap());
        assert_eq!(
            std::fs::read_to_string(paths.metrics()).unwrap(),
            std::fs::read_to_string(RunPaths::new(part.path()).metrics()).unwrap()
        );
    }
}
