use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use candle_core::Device;
use hashjscc::checkpoint::{self, CheckpointMeta};
use hashjscc::data::{gather, ImageDataset};
use hashjscc::dhd::{train_dhd, DhdModule};
use hashjscc::metrics::{aggregate, hash_metrics, psnr, write_results, EvalRecord, Setting};
use hashjscc::perceptual::{try_score, PerceptualScorer};
use hashjscc::relay::{collect_channel_outputs, DfChain, QfPipeline};
use hashjscc::seed::{self, Stream};
use hashjscc::training::{train_df_system, RunPaths, TrainMode};
use hashjscc::vq::{fit_codebook, Codebook, QuantRate};
use hashjscc::Error;

use crate::config::{device, snr_tag, write_config, ExperimentConfig};

pub fn dhd_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("dhd")
}

pub fn dhd_stem(cfg: &ExperimentConfig) -> PathBuf {
    dhd_dir(cfg).join("dhd")
}

pub fn run_dir(cfg: &ExperimentConfig, snr_db: f64, relays: usize) -> PathBuf {
    cfg.out_dir
        .join("df")
        .join(cfg.train.mode.to_string())
        .join(format!("{}_r{relays}", snr_tag(snr_db)))
}

pub fn codebook_path(cfg: &ExperimentConfig, snr_db: f64, rate: &QuantRate) -> PathBuf {
    cfg.out_dir
        .join("vq")
        .join(cfg.train.mode.to_string())
        .join(snr_tag(snr_db))
        .join(format!("{}.hjvq", rate.tag()))
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("eval").join(cfg.train.mode.to_string())
}

fn load_dhd(cfg: &ExperimentConfig, dev: &Device) -> anyhow::Result<Option<DhdModule>> {
    let stem = dhd_stem(cfg);
    if !checkpoint::meta_path(&stem).exists() {
        return Ok(None);
    }
    let (module, _) = DhdModule::load(&stem, cfg.precision.dtype(), dev)?;
    Ok(Some(module.freeze()))
}

fn require_dhd(cfg: &ExperimentConfig, dev: &Device) -> anyhow::Result<DhdModule> {
    load_dhd(cfg, dev)?.ok_or_else(|| {
        anyhow::Error::from(Error::MissingArtifact(checkpoint::meta_path(&dhd_stem(cfg))))
            .context("proposed-dhd mode needs a trained hash module; run `hashjscc train-dhd` first")
    })
}

fn load_best_chain(cfg: &ExperimentConfig, snr_db: f64, relays: usize, dev: &Device) -> anyhow::Result<DfChain> {
    let stem = RunPaths::new(&run_dir(cfg, snr_db, relays)).best_stem();
    if !checkpoint::meta_path(&stem).exists() {
        return Err(Error::MissingArtifact(checkpoint::meta_path(&stem)))
            .with_context(|| format!("no trained chain for SNR {snr_db} dB, r = {relays}; run `hashjscc train-df`"));
    }
    let (chain, _) = DfChain::load(&stem, cfg.precision.dtype(), dev)?;
    Ok(chain)
}

pub fn train_dhd_cmd(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let dev = device()?;
    let splits = cfg.splits()?;
    let dir = dhd_dir(cfg);
    write_config(cfg, &dir)?;
    let report = train_dhd(
        splits.train.as_ref(),
        splits.val.as_ref(),
        &cfg.dhd_config(),
        &cfg.dhd_train_config(),
        cfg.precision.dtype(),
        &dev,
    )?;
    let mut log = String::from("epoch,train_loss,val_loss\n");
    for e in &report.history {
        log.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
    }
    std::fs::write(dir.join("metrics.csv"), log)?;
    let mut meta = CheckpointMeta::new("dhd", cfg.seed);
    meta.epoch = report.history.last().map(|e| e.epoch);
    meta.metrics.insert("initial_val_loss".into(), report.initial_val_loss);
    meta.metrics.insert("final_val_loss".into(), report.final_val_loss());
    meta.metrics.insert("n_cls".into(), cfg.n_cls() as f64);
    report.module.save(&dhd_stem(cfg), meta)?;
    tracing::info!(
        checksum = %report.module.checksum()?,
        val_loss = report.final_val_loss(),
        "hash module written to {}",
        dir.display()
    );
    Ok(())
}

fn clear_run(dir: &Path) -> anyhow::Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("epoch_") || name.starts_with("best.") || name == "metrics.csv" {
            std::fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}

/// Filters restricting a sweep to some grid points, e.g. one per process.
#[derive(Debug, Clone, Default)]
pub struct GridFilter {
    pub snr: Option<f64>,
    pub r: Option<usize>,
}

impl GridFilter {
    fn keep(&self, snr: f64, r: usize) -> bool {
        self.snr.is_none_or(|s| s == snr) && self.r.is_none_or(|x| x == r)
    }
}

pub fn train_df_cmd(cfg: &ExperimentConfig, resume: bool, filter: &GridFilter) -> anyhow::Result<()> {
    let dev = device()?;
    let dhd = match cfg.train.mode {
        TrainMode::ProposedDhd => Some(require_dhd(cfg, &dev)?),
        TrainMode::BaselineMse => load_dhd(cfg, &dev)?,
    };
    let splits = cfg.splits()?;
    for &snr in &cfg.sweep.snr_list {
        for &r in &cfg.sweep.r_list {
            if !filter.keep(snr, r) {
                continue;
            }
            let dir = run_dir(cfg, snr, r);
            if !resume {
                clear_run(&dir)?;
            }
            write_config(cfg, &dir)?;
            tracing::info!(snr_db = snr, r, mode = %cfg.train.mode, "training chain");
            let chain = DfChain::new(&cfg.chain_spec(snr, r), cfg.precision.dtype(), &dev, cfg.seed)?;
            let tc = cfg.train_config(snr, r);
            let report = train_df_system(chain, dhd.as_ref(), splits.train.as_ref(), splits.val.as_ref(), &tc, &dir, resume)
                .with_context(|| format!("training SNR {snr} dB, r = {r}"))?;
            tracing::info!(
                best_epoch = report.best_epoch,
                best_val_loss = report.best_val_loss,
                stopped_early = report.stopped_early,
                "finished {}",
                dir.display()
            );
        }
    }
    Ok(())
}

pub fn fit_vq_cmd(cfg: &ExperimentConfig, max_images: Option<usize>) -> anyhow::Result<()> {
    let dev = device()?;
    let splits = cfg.splits()?;
    let root = cfg.out_dir.join("vq").join(cfg.train.mode.to_string());
    write_config(cfg, &root)?;
    let (_, h, w) = cfg.jscc.image_shape();
    let mut index = String::from("snr_db,n_q,b,bpp,n_centers,iterations,distortion,file\n");
    for &snr in &cfg.sweep.snr_list {
        let chain = load_best_chain(cfg, snr, 0, &dev)?;
        let codec = chain.hop(0);
        let mut outputs = collect_channel_outputs(codec, splits.val.as_ref(), snr, cfg.seed, cfg.eval.batch_size)?;
        if let Some(m) = max_images {
            outputs.truncate(m);
        }
        for rate in &cfg.sweep.quant_list {
            let fit = fit_codebook(&outputs, *rate, cfg.seed)?;
            let book = fit.codebook.with_provenance(codec.k() as u64, snr);
            let path = codebook_path(cfg, snr, rate);
            std::fs::create_dir_all(path.parent().expect("codebook path has a parent"))?;
            book.save(&path)?;
            let bpp = rate.bpp(codec.k() as u64, h as u64, w as u64)?;
            index.push_str(&format!(
                "{snr},{},{},{},{},{},{},{}\n",
                rate.n_q(),
                rate.b(),
                ratio_f64(*bpp.numer(), *bpp.denom()),
                book.n_centers(),
                fit.iterations,
                fit.distortion_history.last().copied().unwrap_or(0.0),
                path.strip_prefix(&root).unwrap_or(&path).display()
            ));
            tracing::info!(snr_db = snr, rate = %rate.tag(), iterations = fit.iterations, "codebook written");
        }
    }
    std::fs::write(root.join("codebooks.csv"), index)?;
    Ok(())
}

fn ratio_f64(n: u64, d: u64) -> f64 {
    n as f64 / d as f64
}

struct Scoring<'a> {
    dhd: Option<&'a DhdModule>,
    scorer: Option<&'a dyn PerceptualScorer>,
}

impl Scoring<'_> {
    fn records(
        &self,
        sources: &[hashjscc::image::ImageTensor],
        recon: &[hashjscc::image::ImageTensor],
        template: &EvalRecord,
    ) -> anyhow::Result<Vec<EvalRecord>> {
        let hashes = match self.dhd {
            Some(d) => Some((d.hash_batch(sources)?, d.hash_batch(recon)?)),
            None => None,
        };
        let mut out = Vec::with_capacity(sources.len());
        for (i, (s, r)) in sources.iter().zip(recon).enumerate() {
            let (hash_cos, hamming) = match &hashes {
                Some((h, h_hat)) => {
                    let (c, d) = hash_metrics(&h[i], &h_hat[i])?;
                    (Some(c), Some(d))
                }
                None => (None, None),
            };
            out.push(EvalRecord {
                mse: s.mse(r)?,
                psnr_db: psnr(s, r)?,
                lpips: try_score(self.scorer, s, r),
                hash_cos,
                hamming,
                n_images: 1,
                ..template.clone()
            });
        }
        Ok(out)
    }
}

fn eval_setup(cfg: &ExperimentConfig, dev: &Device) -> anyhow::Result<(Option<DhdModule>, Option<Box<dyn PerceptualScorer>>)> {
    let dhd = load_dhd(cfg, dev)?;
    if dhd.is_none() {
        tracing::warn!("no hash module at {}; hash metrics left empty", dhd_dir(cfg).display());
    }
    let scorer = cfg.eval.scorer.build(cfg.jscc.channels);
    Ok((dhd, scorer))
}

fn test_seed(cfg: &ExperimentConfig, hop: usize, i: usize) -> u64 {
    seed::derive(cfg.seed, Stream::Eval, &[1, hop as u64, i as u64])
}

pub fn eval_df_cmd(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dev = device()?;
    let splits = cfg.splits()?;
    let test = splits.test.as_ref();
    let (dhd, scorer) = eval_setup(cfg, &dev)?;
    let scoring = Scoring {
        dhd: dhd.as_ref(),
        scorer: scorer.as_deref(),
    };
    let mut rows = Vec::new();
    for &snr in &cfg.sweep.snr_list {
        for &r in &cfg.sweep.r_list {
            let chain = load_best_chain(cfg, snr, r, &dev)?;
            let template = template(cfg, Setting::Df, snr, Some(r), None, scorer.as_deref());
            let mut records = Vec::with_capacity(test.len());
            for chunk in indices(test).chunks(cfg.eval.batch_size) {
                let (images, _) = gather(test, chunk)?;
                let seeds: Vec<Vec<u64>> = (0..chain.n_hops())
                    .map(|hop| chunk.iter().map(|&i| test_seed(cfg, hop, i)).collect())
                    .collect();
                let x = hashjscc::image::ImageTensor::stack(&images, chain.dtype(), chain.device())?;
                let (out, _) = chain.forward_batch(&x, &seeds)?;
                let recon = hashjscc::image::ImageTensor::unstack(&out)?;
                records.extend(scoring.records(&images, &recon, &template)?);
            }
            let agg = aggregate(&records, cfg.eval.psnr_averaging)?;
            log_point(&agg.record, agg.infinite_psnr);
            rows.push(agg.record);
        }
    }
    finish_eval(cfg, "df_results.csv", &rows)
}

pub fn eval_qf_cmd(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dev = device()?;
    let splits = cfg.splits()?;
    let test = splits.test.as_ref();
    let (dhd, scorer) = eval_setup(cfg, &dev)?;
    let scoring = Scoring {
        dhd: dhd.as_ref(),
        scorer: scorer.as_deref(),
    };
    let (_, h, w) = cfg.jscc.image_shape();
    let mut rows = Vec::new();
    for &snr in &cfg.sweep.snr_list {
        let chain = load_best_chain(cfg, snr, 0, &dev)?;
        for rate in &cfg.sweep.quant_list {
            let path = codebook_path(cfg, snr, rate);
            if !path.exists() {
                return Err(Error::MissingArtifact(path)).context("run `hashjscc fit-vq` first");
            }
            let book = Codebook::load(&path)?;
            let qf = QfPipeline::new(chain.hop(0).clone(), book, snr)?;
            let bpp = rate.bpp(chain.hop(0).k() as u64, h as u64, w as u64)?;
            let bpp = ratio_f64(*bpp.numer(), *bpp.denom());
            let template = template(cfg, Setting::Qf, snr, None, Some(bpp), scorer.as_deref());
            let mut records = Vec::with_capacity(test.len());
            for chunk in indices(test).chunks(cfg.eval.batch_size) {
                let (images, _) = gather(test, chunk)?;
                let seeds: Vec<u64> = chunk.iter().map(|&i| test_seed(cfg, 0, i)).collect();
                let recon = qf.qf_forward_batch(&images, &seeds)?;
                records.extend(scoring.records(&images, &recon, &template)?);
            }
            let agg = aggregate(&records, cfg.eval.psnr_averaging)?;
            log_point(&agg.record, agg.infinite_psnr);
            rows.push(agg.record);
        }
    }
    finish_eval(cfg, "qf_results.csv", &rows)
}

fn indices(ds: &dyn ImageDataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

fn template(
    cfg: &ExperimentConfig,
    setting: Setting,
    snr_db: f64,
    r: Option<usize>,
    bpp: Option<f64>,
    scorer: Option<&dyn PerceptualScorer>,
) -> EvalRecord {
    EvalRecord {
        setting,
        snr_db,
        r,
        bpp,
        mse: 0.0,
        psnr_db: 0.0,
        lpips: None,
        hash_cos: None,
        hamming: None,
        n_images: 1,
        scorer_id: scorer.map(|s| s.id()),
        seed: cfg.seed,
    }
}

fn log_point(r: &EvalRecord, infinite: usize) {
    tracing::info!(
        setting = %r.setting,
        snr_db = r.snr_db,
        r = ?r.r,
        bpp = ?r.bpp,
        psnr_db = r.psnr_db,
        lpips = ?r.lpips,
        hash_cos = ?r.hash_cos,
        infinite_psnr = infinite,
        "evaluated"
    );
}

fn finish_eval(cfg: &ExperimentConfig, file: &str, rows: &[EvalRecord]) -> anyhow::Result<PathBuf> {
    let dir = eval_dir(cfg);
    write_config(cfg, &dir)?;
    let path = dir.join(file);
    write_results(&path, rows)?;
    tracing::info!("results written to {}", path.display());
    Ok(path)
}

pub fn convert_cmd(
    image_list: &Path,
    labels_dir: &Path,
    concepts: &[String],
    sizes: [usize; 3],
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    if concepts.is_empty() {
        bail!("at least one concept is required");
    }
    let [train, val, test] = hashjscc::data::convert_nus_wide(image_list, labels_dir, concepts, sizes, seed, out)?;
    tracing::info!(
        train = train.entries.len(),
        val = val.entries.len(),
        test = test.entries.len(),
        "manifests written to {}",
        out.display()
    );
    Ok(())
}
