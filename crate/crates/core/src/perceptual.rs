//! Perceptual distance scorers.
//!
//! The perceptual network itself is out of scope: scorers are pluggable. Two are provided, a
//! deterministic random-feature distance with the structure of LPIPS (unit-normalized deep
//! features, squared differences, spatial mean, summed over layers) for desk-scale trends,
//! and an adapter that calls an external program, e.g. a wrapper around a reference LPIPS
//! implementation.

use std::path::PathBuf;
use std::process::Command;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::save_png;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed::{self, Stream};

pub trait PerceptualScorer: Send + Sync {
    /// Identity recorded next to every score.
    fn id(&self) -> String;

    /// Distance between two images; zero for identical inputs.
    fn score(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Which scorer an experiment uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScorerSpec {
    None,
    RandomFeatures {
        #[serde(default)]
        seed: u64,
    },
    /// Runs `program args… <a.png> <b.png>` and reads one number from standard output.
    Command {
        id: String,
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec::RandomFeatures { seed: 0 }
    }
}

impl ScorerSpec {
    /// `None` when the spec disables scoring or the scorer cannot be set up; the metric is
    /// then reported as absent.
    pub fn build(&self, channels: usize) -> Option<Box<dyn PerceptualScorer>> {
        match self {
            ScorerSpec::None => None,
            ScorerSpec::RandomFeatures { seed } => match RandomFeatureScorer::new(channels, *seed) {
                Ok(s) => Some(Box::new(s)),
                Err(e) => {
                    tracing::warn!(error = %e, "perceptual scorer unavailable");
                    None
                }
            },
            ScorerSpec::Command { id, program, args } => Some(Box::new(ExternalCommandScorer {
                id: id.clone(),
                program: program.clone(),
                args: args.clone(),
            })),
        }
    }
}

const WIDTHS: [usize; 3] = [16, 32, 64];

/// Distance over three fixed random convolution layers with ReLU, drawn from a seed.
#[derive(Debug, Clone)]
pub struct RandomFeatureScorer {
    layers: Vec<Conv2d>,
    channels: usize,
    seed: u64,
}

impl RandomFeatureScorer {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("scorer needs at least one channel".into()));
        }
        let mut layers = Vec::new();
        let mut in_ch = channels;
        for (i, &w) in WIDTHS.iter().enumerate() {
            let fan_in = in_ch * 9;
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            let mut rng = seed::rng(seed::derive(seed, Stream::Scorer, &[i as u64]));
            let weight: Vec<f32> = (0..w * fan_in).map(|_| normal.sample(&mut rng)).collect();
            let weight = Tensor::from_vec(weight, (w, in_ch, 3, 3), &Device::Cpu)?;
            let cfg = Conv2dConfig {
                padding: 1,
                stride: if i == 0 { 1 } else { 2 },
                ..Default::default()
            };
            layers.push(Conv2d::new(weight, None, cfg));
            in_ch = w;
        }
        Ok(Self { layers, channels, seed })
    }

    fn features(&self, img: &ImageTensor) -> Result<Vec<Tensor>> {
        let mut x = img.to_tensor(DType::F32, &Device::Cpu)?.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(&x)?.relu()?;
            let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            out.push(x.broadcast_div(&norm)?);
        }
        Ok(out)
    }
}

impl PerceptualScorer for RandomFeatureScorer {
    fn id(&self) -> String {
        format!("random-features-v1-s{}", self.seed)
    }

    fn score(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if a.shape() != b.shape() || a.channels() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "scorer expects two {}-channel images of one shape, got {:?} and {:?}",
                self.channels,
                a.shape(),
                b.shape()
            )));
        }
        if a == b {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (fa, fb) in self.features(a)?.iter().zip(self.features(b)?) {
            let d = (fa - fb)?.sqr()?.sum(1)?.mean(D::Minus1)?.mean(D::Minus1)?.sum_all()?;
            total += d.to_scalar::<f32>()? as f64;
        }
        Ok(total)
    }
}

/// Scores through an external program that prints the distance of two PNG files.
#[derive(Debug, Clone)]
pub struct ExternalCommandScorer {
    pub id: String,
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl PerceptualScorer for ExternalCommandScorer {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn score(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        let dir = tempfile::tempdir()?;
        let (pa, pb) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_png(a, &pa)?;
        save_png(b, &pb)?;
        let out = Command::new(&self.program).args(&self.args).arg(&pa).arg(&pb).output()?;
        if !out.status.success() {
            return Err(Error::Io(std::io::Error::other(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ))));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|_| Error::Io(std::io::Error::other(format!("scorer printed {:?}, expected a number", text.trim()))))
    }
}

/// Score, or `None` with a warning when the scorer fails.
pub fn try_score(scorer: Option<&dyn PerceptualScorer>, a: &ImageTensor, b: &ImageTensor) -> Option<f64> {
    let s = scorer?;
    match s.score(a, b) {
        Ok(v) => Some(v),
        Err(e) => {
            tracing::warn!(scorer = %s.id(), error = %e, "perceptual score unavailable");
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::gaussian_noise;
    use crate::data::{make_synthetic, ImageDataset};

    fn noisy(img: &ImageTensor, var: f64, seed: u64) -> ImageTensor {
        let n = gaussian_noise(img.len(), 2.0 * var, seed);
        let data = img.as_slice().iter().zip(n).map(|(v, e)| (*v as f64 + e).clamp(0.0, 1.0) as f32).collect();
        ImageTensor::new(img.channels(), img.height(), img.width(), data).unwrap()
    }

    #[test]
    fn identity_symmetry_and_monotonicity() {
        let scorer = RandomFeatureScorer::new(3, 0).unwrap();
        let ds = make_synthetic(3, 3, 16, 16, 2).unwrap();
        for i in 0..3 {
            let s = ds.image(i).unwrap();
            assert_eq!(scorer.score(&s, &s).unwrap(), 0.0);
            let light = noisy(&s, 0.001, i as u64);
            let heavy = noisy(&s, 0.05, i as u64);
            let a = scorer.score(&s, &light).unwrap();
            assert!((a - scorer.score(&light, &s).unwrap()).abs() < 1e-6);
            assert!(scorer.score(&s, &heavy).unwrap() > a);
        }
        assert!(scorer.score(&ds.image(0).unwrap(), &ImageTensor::filled(1, 16, 16, 0.0).unwrap()).is_err());
    }

    #[test]
    fn scorer_spec_parsing_and_absence() {
        let spec: ScorerSpec = toml::from_str("kind = \"random-features\"\nseed = 3").unwrap();
        assert_eq!(spec.build(3).unwrap().id(), "random-features-v1-s3");
        assert!(ScorerSpec::None.build(3).is_none());
        let missing = ScorerSpec::Command {
            id: "lpips".into(),
            program: "/nonexistent/scorer".into(),
            args: vec![],
        }
        .build(3);
        let img = ImageTensor::filled(3, 4, 4, 0.5).unwrap();
        assert_eq!(try_score(missing.as_deref(), &img, &img), None);
    }

    #[cfg(unix)]
    #[test]
    fn external_command_output_is_parsed() {
        let scorer = ExternalCommandScorer {
            id: "echo".into(),
            program: "sh".into(),
            args: vec!["-c".into(), "test -s \"$0\" && test -s \"$1\" && echo 0.25".into()],
        };
        let img = ImageTensor::filled(3, 4, 4, 0.5).unwrap();
        assert_eq!(scorer.score(&img, &img).unwrap(), 0.25);
    }
}
