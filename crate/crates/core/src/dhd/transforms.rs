//! Stochastic image augmentations for the teacher and student views.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// One augmentation step. Every step preserves the image shape and keeps values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Augment {
    /// Crop covering a random area fraction in `[min_scale, 1]` with aspect ratio in
    /// `[3/4, 4/3]`, resized back to the input size bilinearly.
    RandomResizedCrop { min_scale: f64 },
    HorizontalFlip { p: f64 },
    /// Brightness, contrast and saturation factors drawn from `[1 − s, 1 + s]`.
    ColorJitter { brightness: f64, contrast: f64, saturation: f64, p: f64 },
    Grayscale { p: f64 },
    /// Separable Gaussian blur with standard deviation drawn from `[sigma_min, sigma_max]` pixels.
    GaussianBlur { sigma_min: f64, sigma_max: f64, p: f64 },
}

impl Augment {
    pub fn kind(&self) -> &'static str {
        match self {
            Augment::RandomResizedCrop { .. } => "random_resized_crop",
            Augment::HorizontalFlip { .. } => "horizontal_flip",
            Augment::ColorJitter { .. } => "color_jitter",
            Augment::Grayscale { .. } => "grayscale",
            Augment::GaussianBlur { .. } => "gaussian_blur",
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = match *self {
            Augment::RandomResizedCrop { min_scale } => min_scale > 0.0 && min_scale <= 1.0,
            Augment::HorizontalFlip { p } | Augment::Grayscale { p } => prob(p),
            Augment::ColorJitter { brightness, contrast, saturation, p } => {
                prob(p) && [brightness, contrast, saturation].iter().all(|s| (0.0..1.0).contains(s))
            }
            Augment::GaussianBlur { sigma_min, sigma_max, p } => prob(p) && sigma_min > 0.0 && sigma_max >= sigma_min,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation parameters: {self:?}")))
        }
    }

    pub fn apply(&self, image: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let (c, h, w) = image.shape();
        let src = image.as_slice();
        let out = match *self {
            Augment::RandomResizedCrop { min_scale } => {
                let area = (h * w) as f64 * rng.random_range(min_scale..=1.0);
                let log_ratio = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
                let ratio = log_ratio.exp();
                let cw = ((area * ratio).sqrt().round() as usize).clamp(1, w);
                let ch = ((area / ratio).sqrt().round() as usize).clamp(1, h);
                let y0 = rng.random_range(0..=h - ch);
                let x0 = rng.random_range(0..=w - cw);
                resize_region(src, c, h, w, (y0, x0, ch, cw))
            }
            Augment::HorizontalFlip { p } => {
                if rng.random::<f64>() >= p {
                    return Ok(image.clone());
                }
                let mut out = src.to_vec();
                for ci in 0..c {
                    for y in 0..h {
                        let row = &mut out[(ci * h + y) * w..(ci * h + y + 1) * w];
                        row.reverse();
                    }
                }
                out
            }
            Augment::ColorJitter { brightness, contrast, saturation, p } => {
                if rng.random::<f64>() >= p {
                    return Ok(image.clone());
                }
                let mut factor = |s: f64| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
                let (fb, fc, fs) = (factor(brightness) as f32, factor(contrast) as f32, factor(saturation) as f32);
                let mut out: Vec<f32> = src.iter().map(|v| (v * fb).clamp(0.0, 1.0)).collect();
                let gray = luma(&out, c, h, w);
                let mean = gray.iter().sum::<f32>() / gray.len() as f32;
                for v in out.iter_mut() {
                    *v = (mean + fc * (*v - mean)).clamp(0.0, 1.0);
                }
                if c == 3 {
                    let gray = luma(&out, c, h, w);
                    for ci in 0..c {
                        for (i, g) in gray.iter().enumerate() {
                            let v = &mut out[ci * h * w + i];
                            *v = (g + fs * (*v - g)).clamp(0.0, 1.0);
                        }
                    }
                }
                out
            }
            Augment::Grayscale { p } => {
                if c != 3 || rng.random::<f64>() >= p {
                    return Ok(image.clone());
                }
                let gray = luma(src, c, h, w);
                gray.iter().cycle().take(c * h * w).cloned().collect()
            }
            Augment::GaussianBlur { sigma_min, sigma_max, p } => {
                if rng.random::<f64>() >= p {
                    return Ok(image.clone());
                }
                let sigma = rng.random_range(sigma_min..=sigma_max);
                gaussian_blur(src, c, h, w, sigma)
            }
        };
        ImageTensor::new(c, h, w, out)
    }
}

fn luma(data: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    if c != 3 {
        return data[..n].to_vec();
    }
    (0..n)
        .map(|i| (0.299 * data[i] + 0.587 * data[n + i] + 0.114 * data[2 * n + i]).clamp(0.0, 1.0))
        .collect()
}

fn resize_region(src: &[f32], c: usize, h: usize, w: usize, (y0, x0, ch, cw): (usize, usize, usize, usize)) -> Vec<f32> {
    let mut out = vec![0.0f32; c * h * w];
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let (yi, ty) = (fy.floor() as usize, (fy - fy.floor()) as f32);
        let yj = (yi + 1).min(ch - 1);
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let (xi, tx) = (fx.floor() as usize, (fx - fx.floor()) as f32);
            let xj = (xi + 1).min(cw - 1);
            for ci in 0..c {
                let at = |yy: usize, xx: usize| src[(ci * h + y0 + yy) * w + x0 + xx];
                let top = at(yi, xi) * (1.0 - tx) + at(yi, xj) * tx;
                let bottom = at(yj, xi) * (1.0 - tx) + at(yj, xj) * tx;
                out[(ci * h + y) * w + x] = (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn gaussian_blur(src: &[f32], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; src.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[(ci * h + y) * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[(ci * h + y) * w + clampi(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v: f32 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[(ci * h + clampi(y as isize + k as isize - radius, h)) * w + x])
                    .sum();
                out[(ci * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Ordered sequence of augmentation steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPipeline {
    pub ops: Vec<Augment>,
}

impl TransformPipeline {
    pub fn kinds(&self) -> BTreeSet<&'static str> {
        self.ops.iter().map(Augment::kind).collect()
    }

    pub fn apply(&self, image: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let mut out = image.clone();
        for op in &self.ops {
            out = op.apply(&out, rng)?;
        }
        Ok(out)
    }
}

/// Teacher and student augmentation pipelines; the teacher view is the less distorted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPair {
    pub teacher: TransformPipeline,
    pub student: TransformPipeline,
}

impl Default for TransformPair {
    /// Teacher: resized crop (scale ≥ 0.5) and flip. Student: the teacher steps plus color
    /// jitter, grayscale and blur.
    fn default() -> Self {
        let teacher = vec![
            Augment::RandomResizedCrop { min_scale: 0.5 },
            Augment::HorizontalFlip { p: 0.5 },
        ];
        let mut student = teacher.clone();
        student.extend([
            Augment::ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4, p: 0.8 },
            Augment::Grayscale { p: 0.2 },
            Augment::GaussianBlur { sigma_min: 0.1, sigma_max: 2.0, p: 0.5 },
        ]);
        Self {
            teacher: TransformPipeline { ops: teacher },
            student: TransformPipeline { ops: student },
        }
    }
}

impl TransformPair {
    /// Checks parameters and that the teacher's step kinds form a strict subset of the
    /// student's.
    pub fn new(teacher: TransformPipeline, student: TransformPipeline) -> Result<Self> {
        let pair = Self { teacher, student };
        pair.validate()?;
        Ok(pair)
    }

    /// Both views equal the input. Exempt from the subset rule; used for evaluation.
    pub fn identity() -> Self {
        Self {
            teacher: TransformPipeline::default(),
            student: TransformPipeline::default(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.teacher.ops.is_empty() && self.student.ops.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for op in self.teacher.ops.iter().chain(&self.student.ops) {
            op.validate()?;
        }
        if self.is_identity() {
            return Ok(());
        }
        let t = self.teacher.kinds();
        let s = self.student.kinds();
        if !(t.is_subset(&s) && t.len() < s.len()) {
            return Err(Error::Config(format!(
                "teacher steps {t:?} must be a strict subset of student steps {s:?}"
            )));
        }
        Ok(())
    }

    /// Teacher and student views of one image; the two views use independent draws.
    pub fn views(&self, image: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, ImageTensor)> {
        let t = self.teacher.apply(image, rng)?;
        let s = self.student.apply(image, rng)?;
        Ok((t, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn gradient_image() -> ImageTensor {
        let (c, h, w) = (3, 8, 12);
        let data = (0..c * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        ImageTensor::new(c, h, w, data).unwrap()
    }

    #[test]
    fn default_pair_is_valid_and_ordered() {
        let pair = TransformPair::default();
        pair.validate().unwrap();
        assert!(pair.teacher.kinds().is_subset(&pair.student.kinds()));
        let swapped = TransformPair::new(pair.student.clone(), pair.teacher.clone());
        assert!(swapped.is_err());
        assert!(TransformPair::new(pair.teacher.clone(), pair.teacher.clone()).is_err());
    }

    #[test]
    fn every_step_preserves_shape_and_range() {
        let img = gradient_image();
        let pair = TransformPair::default();
        let mut rng = seed::rng(7);
        for _ in 0..20 {
            let (t, s) = pair.views(&img, &mut rng).unwrap();
            assert_eq!(t.shape(), img.shape());
            assert_eq!(s.shape(), img.shape());
            assert!(s.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn full_crop_and_certain_flip() {
        let img = gradient_image();
        let mut rng = seed::rng(1);
        let crop = Augment::RandomResizedCrop { min_scale: 1.0 };
        // A full-area crop with a non-unit aspect ratio is clamped to the frame.
        let out = crop.apply(&img, &mut rng).unwrap();
        assert_eq!(out.shape(), img.shape());
        let flip = Augment::HorizontalFlip { p: 1.0 };
        let twice = flip.apply(&flip.apply(&img, &mut rng).unwrap(), &mut rng).unwrap();
        assert_eq!(twice, img);
        assert_eq!(flip.apply(&img, &mut rng).unwrap().get(0, 0, 0), img.get(0, 0, 11));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ImageTensor::filled(3, 8, 8, 0.25).unwrap();
        let blur = Augment::GaussianBlur { sigma_min: 1.0, sigma_max: 1.0, p: 1.0 };
        let out = blur.apply(&img, &mut seed::rng(0)).unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn identity_pair_returns_input() {
        let img = gradient_image();
        let (t, s) = TransformPair::identity().views(&img, &mut seed::rng(0)).unwrap();
        assert_eq!(t, img);
        assert_eq!(s, img);
    }
}
