//! Reconstruction metrics, per-image evaluation records, aggregation, and the results CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dhd::{binarize, cosine_similarity, hamming_distance, HashVector};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const RESULTS_HEADER: &str = "setting,snr_db,r,bpp,psnr_db,lpips,hash_cos,hamming,n_images,scorer_id,seed";

/// `−10·log10(MSE)` for unit-peak images; `+∞` when the MSE is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(s: &ImageTensor, s_hat: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(s.mse(s_hat)?))
}

/// How per-image results are combined into one PSNR figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsnrAveraging {
    /// Mean of per-image PSNR in dB.
    #[default]
    PerImage,
    /// PSNR of the mean per-image MSE.
    PooledMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Df,
    Qf,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Df => "df",
            Setting::Qf => "qf",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "df" => Ok(Setting::Df),
            "qf" => Ok(Setting::Qf),
            other => Err(Error::InvalidArgument(format!("unknown setting {other:?}"))),
        }
    }
}

/// Metrics of one image, or the mean over a test set after [`aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub setting: Setting,
    pub snr_db: f64,
    /// Relay count for DF rows.
    pub r: Option<usize>,
    /// Quantizer rate for QF rows.
    pub bpp: Option<f64>,
    pub mse: f64,
    pub psnr_db: f64,
    /// Absent when no perceptual scorer is available.
    pub lpips: Option<f64>,
    pub hash_cos: Option<f64>,
    /// Mean number of differing hash bits.
    pub hamming: Option<f64>,
    pub n_images: usize,
    pub scorer_id: Option<String>,
    pub seed: u64,
}

/// Cosine similarity of source and reconstruction hashes and the Hamming distance of their
/// binarized forms.
pub fn hash_metrics(h: &HashVector, h_hat: &HashVector) -> Result<(f64, f64)> {
    let cos = cosine_similarity(h.as_slice(), h_hat.as_slice())?;
    let d = hamming_distance(&binarize(h), &binarize(h_hat))?;
    Ok((cos, d as f64))
}

/// Result of [`aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub record: EvalRecord,
    /// Records with infinite PSNR left out of the per-image PSNR mean.
    pub infinite_psnr: usize,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Arithmetic mean of every metric over records of one sweep point.
pub fn aggregate(records: &[EvalRecord], averaging: PsnrAveraging) -> Result<Aggregate> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate an empty record set".into()))?;
    if records
        .iter()
        .any(|r| r.setting != first.setting || r.snr_db != first.snr_db || r.r != first.r || r.bpp != first.bpp)
    {
        return Err(Error::InvalidArgument("records span more than one sweep point".into()));
    }
    let n_images: usize = records.iter().map(|r| r.n_images).sum();
    let mse = records.iter().map(|r| r.mse).sum::<f64>() / records.len() as f64;
    let finite: Vec<f64> = records.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
    let infinite_psnr = records.len() - finite.len();
    let psnr_db = match averaging {
        PsnrAveraging::PerImage if finite.is_empty() => f64::INFINITY,
        PsnrAveraging::PerImage => finite.iter().sum::<f64>() / finite.len() as f64,
        PsnrAveraging::PooledMse => psnr_from_mse(mse),
    };
    let mut scorers: Vec<&str> = records.iter().filter_map(|r| r.scorer_id.as_deref()).collect();
    scorers.dedup();
    if scorers.len() > 1 {
        return Err(Error::InvalidArgument(format!("records mix perceptual scorers {scorers:?}")));
    }
    Ok(Aggregate {
        record: EvalRecord {
            mse,
            psnr_db,
            lpips: mean_present(records.iter().map(|r| r.lpips)),
            hash_cos: mean_present(records.iter().map(|r| r.hash_cos)),
            hamming: mean_present(records.iter().map(|r| r.hamming)),
            n_images,
            scorer_id: scorers.first().map(|s| s.to_string()),
            ..first.clone()
        },
        infinite_psnr,
    })
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One CSV row matching [`RESULTS_HEADER`]; absent values are empty fields.
pub fn format_row(r: &EvalRecord) -> Result<String> {
    let scorer = r.scorer_id.clone().unwrap_or_default();
    if scorer.contains([',', '"', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!("scorer id {scorer:?} is not CSV-safe")));
    }
    Ok(format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.setting,
        fmt_f64(r.snr_db),
        r.r.map(|v| v.to_string()).unwrap_or_default(),
        fmt_opt(r.bpp),
        fmt_f64(r.psnr_db),
        fmt_opt(r.lpips),
        fmt_opt(r.hash_cos),
        fmt_opt(r.hamming),
        r.n_images,
        scorer,
        r.seed
    ))
}

pub fn write_results(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(out, "{}", format_row(r)?).expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a results file written by [`write_results`]. The per-row MSE is reconstructed
/// from the PSNR column.
pub fn read_results(path: &Path) -> Result<Vec<EvalRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing or unexpected header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(err(format!("expected 11 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}"))) };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        let psnr_db = num(f[4])?;
        out.push(EvalRecord {
            setting: f[0].parse().map_err(|_| err(format!("bad setting {:?}", f[0])))?,
            snr_db: num(f[1])?,
            r: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| err(format!("bad r {:?}", f[2])))?) },
            bpp: opt(f[3])?,
            mse: 10f64.powf(-psnr_db / 10.0),
            psnr_db,
            lpips: opt(f[5])?,
            hash_cos: opt(f[6])?,
            hamming: opt(f[7])?,
            n_images: f[8].parse().map_err(|_| err(format!("bad n_images {:?}", f[8])))?,
            scorer_id: (!f[9].is_empty()).then(|| f[9].to_string()),
            seed: f[10].parse().map_err(|_| err(format!("bad seed {:?}", f[10])))?,
        });
    }
    Ok(out)
}
