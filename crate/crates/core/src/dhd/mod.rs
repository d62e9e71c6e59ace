//! Deep hash distillation: a convolutional feature extractor followed by a fully connected
//! tanh hash head, trainable class proxies, the three training losses, and binary-hash
//! arithmetic for retrieval.

mod losses;
mod train;
mod transforms;

pub use losses::{
    bce_q_loss, bce_q_loss_tensor, cosine_similarity, cosine_similarity_tensor, hash_proxy_loss,
    hash_proxy_loss_tensor, sdh_loss, sdh_loss_tensor, DhdLossParts, DhdObjective, LIKELIHOOD_EPS,
};
pub use train::{class_hamming_means, dhd_loss, evaluate_dhd_loss, train_dhd, DhdEpoch, DhdTrainConfig, DhdTrainReport};
pub use transforms::{Augment, TransformPair, TransformPipeline};

use std::path::Path;

use candle_core::{DType, Device, Module, ModuleT, Tensor, Var};
use candle_nn::{BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, Init, Linear};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, ParamStore};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Continuous hash with every component strictly inside `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashVector {
    values: Vec<f64>,
}

impl HashVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("hash vector must be non-empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.abs() < 1.0)) {
            return Err(Error::InvalidArgument(format!("hash component {v} outside (-1, 1)")));
        }
        Ok(Self { values })
    }

    /// Accepts raw tanh outputs; components that saturated to ±1 in single precision are
    /// moved one single-precision ulp inside the interval.
    pub fn from_tanh_output(values: Vec<f64>) -> Result<Self> {
        let limit = 1.0 - f32::EPSILON as f64;
        Self::new(values.into_iter().map(|v| v.clamp(-limit, limit)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Sign-quantized hash over `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryHash {
    bits: Vec<i8>,
}

impl BinaryHash {
    pub fn from_signs(bits: Vec<i8>) -> Result<Self> {
        if bits.iter().any(|b| *b != 1 && *b != -1) {
            return Err(Error::InvalidArgument("binary hash entries must be ±1".into()));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.bits
    }

    pub fn dot(&self, other: &BinaryHash) -> Result<i64> {
        if self.len() != other.len() {
            return Err(Error::InvalidArgument(format!(
                "hash lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.bits.iter().zip(&other.bits).map(|(a, b)| (*a as i64) * (*b as i64)).sum())
    }

    /// Hex export: `+1` is a set bit, most significant bit first, two hex characters per 8
    /// bits; a trailing partial byte is zero-padded.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self
            .bits
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, b)| if *b > 0 { acc | (0x80 >> i) } else { acc })
            })
            .collect();
        hex::encode(bytes)
    }

    pub fn from_hex(text: &str, n_bits: usize) -> Result<Self> {
        let bytes = hex::decode(text.trim()).map_err(|e| Error::Corruption(format!("bad hash hex: {e}")))?;
        if bytes.len() != n_bits.div_ceil(8) {
            return Err(Error::Corruption(format!(
                "{} hex bytes cannot hold exactly {n_bits} bits",
                bytes.len()
            )));
        }
        let bits = (0..n_bits)
            .map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 })
            .collect();
        Ok(Self { bits })
    }
}

/// `bits_i = +1` if `h_i ≥ 0`, else `-1`.
pub fn binarize(h: &HashVector) -> BinaryHash {
    BinaryHash {
        bits: h.values.iter().map(|v| if *v >= 0.0 { 1 } else { -1 }).collect(),
    }
}

pub fn hamming_distance(a: &BinaryHash, b: &BinaryHash) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "hash lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhdConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output widths of the stride-2 convolution stages of the feature extractor.
    pub backbone_widths: Vec<usize>,
    /// Feature dimension `N_E`.
    pub n_e: usize,
    /// Hash length `N_H`.
    pub n_h: usize,
    /// Number of classes `N_cls`.
    pub n_cls: usize,
    #[serde(default)]
    pub objective: DhdObjective,
}

impl DhdConfig {
    /// 3×256×256 input, `N_E = 2048`, `N_H = 64`, `N_cls = 21`.
    pub fn full_scale() -> Self {
        Self {
            channels: 3,
            height: 256,
            width: 256,
            backbone_widths: vec![64, 128, 256, 512, 1024],
            n_e: 2048,
            n_h: 64,
            n_cls: 21,
            objective: DhdObjective::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("hash module input dimensions must be positive".into()));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::Config("backbone needs at least one stage of positive width".into()));
        }
        if self.n_e == 0 || self.n_h == 0 || self.n_cls == 0 {
            return Err(Error::Config("n_e, n_h and n_cls must be positive".into()));
        }
        self.objective.validate()
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct Backbone {
    stages: Vec<Stage>,
    proj: Conv2d,
    proj_bn: BatchNorm,
}

impl Backbone {
    /// `(B, C, H, W)` in `[0, 1]` to `(B, N_E)` features.
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.affine(2.0, -1.0)?;
        for s in &self.stages {
            h = s.bn.forward_t(&s.conv.forward(&h)?, train)?.relu()?;
        }
        let h = self.proj_bn.forward_t(&self.proj.forward(&h)?, train)?.relu()?;
        Ok(h.mean(3)?.mean(2)?)
    }
}

/// Hash network `H(·) = H_θ(E_θ(·))` with its class proxies.
#[derive(Debug, Clone)]
pub struct DhdModule {
    config: DhdConfig,
    store: ParamStore,
    backbone: Backbone,
    head: Linear,
    proxies: Tensor,
    frozen: bool,
}

impl DhdModule {
    pub fn new(config: &DhdConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, device);
        let vb = store.builder();
        let bn_cfg = BatchNormConfig::default();
        let down = Conv2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let bb = vb.pp("backbone");
        let mut stages = Vec::new();
        let mut in_ch = config.channels;
        for (i, &w) in config.backbone_widths.iter().enumerate() {
            let s = bb.pp(format!("stage{i}"));
            stages.push(Stage {
                conv: candle_nn::conv2d_no_bias(in_ch, w, 3, down, s.pp("conv"))?,
                bn: candle_nn::batch_norm(w, bn_cfg, s.pp("bn"))?,
            });
            in_ch = w;
        }
        let backbone = Backbone {
            stages,
            proj: candle_nn::conv2d_no_bias(in_ch, config.n_e, 1, Default::default(), bb.pp("proj"))?,
            proj_bn: candle_nn::batch_norm(config.n_e, bn_cfg, bb.pp("proj_bn"))?,
        };
        let head = candle_nn::linear(config.n_e, config.n_h, vb.pp("head"))?;
        let proxies = vb.get_with_hints((config.n_cls, config.n_h), "proxies", Init::Randn { mean: 0., stdev: 1. })?;
        store.reinit(seed)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
            proxies,
            frozen: false,
        })
    }

    pub fn config(&self) -> &DhdConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `(N_cls, N_H)` proxy matrix.
    pub fn proxies(&self) -> &Tensor {
        &self.proxies
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Excludes every parameter from optimization and pins normalization layers to their
    /// running statistics. Gradients still flow through the network to its input.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Parameters an optimizer may update: empty once frozen; running statistics never.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        if self.frozen {
            return Vec::new();
        }
        self.store
            .named_vars()
            .into_iter()
            .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
            .collect()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let want = [self.config.channels, self.config.height, self.config.width];
        if dims.len() != 4 || dims[1..] != want {
            return Err(Error::Config(format!(
                "hash module expects (B, {}, {}, {}) input, got {dims:?}",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// `(B, C, H, W)` to `(B, N_E)` features.
    pub fn features_tensor(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x.dims())?;
        self.backbone.forward(x, train && !self.frozen)
    }

    /// `(B, C, H, W)` to `(B, N_H)` hashes in `(-1, 1)`. `train` selects batch statistics in
    /// normalization layers and is ignored once frozen.
    pub fn hash_tensor(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let z = self.features_tensor(x, train)?;
        Ok(self.head.forward(&z)?.tanh()?)
    }

    /// Hash of a single image in inference mode.
    pub fn hash(&self, image: &ImageTensor) -> Result<HashVector> {
        let x = image.to_tensor(self.dtype(), self.device())?;
        let h = self.hash_tensor(&x, false)?;
        HashVector::from_tanh_output(crate::jscc::row_f64(&h, 0)?)
    }

    /// Hashes of a batch of images in inference mode.
    pub fn hash_batch(&self, images: &[ImageTensor]) -> Result<Vec<HashVector>> {
        let x = ImageTensor::stack(images, self.dtype(), self.device())?;
        let h = self.hash_tensor(&x, false)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        h.into_iter().map(HashVector::from_tanh_output).collect()
    }

    /// Proxy rows as plain vectors.
    pub fn proxy_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.proxies.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn save(&self, stem: &Path, mut meta: CheckpointMeta) -> Result<()> {
        meta.kind = "dhd".into();
        meta.metrics.entry("n_h".into()).or_insert(self.config.n_h as f64);
        meta.metrics.entry("n_e".into()).or_insert(self.config.n_e as f64);
        meta.metrics.entry("n_cls".into()).or_insert(self.config.n_cls as f64);
        let meta = meta.with_config(&self.config)?;
        checkpoint::save_checkpoint(stem, &self.store, &meta)
    }

    /// Restores a module saved with [`DhdModule::save`]; the result is not frozen.
    pub fn load(stem: &Path, dtype: DType, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let meta = checkpoint::read_meta(stem)?;
        if meta.kind != "dhd" {
            return Err(Error::Config(format!("{} is a {} checkpoint", stem.display(), meta.kind)));
        }
        let config: DhdConfig = meta.config_as()?;
        let mut module = Self::new(&config, dtype, device, 0)?;
        let meta = checkpoint::load_checkpoint(stem, &mut module.store)?;
        Ok((module, meta))
    }

    /// Initializes the feature extractor from a safetensors file holding `backbone.*` tensors.
    pub fn load_backbone(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, self.device())?;
        for (name, var) in self.store.vars_with_prefix("backbone.") {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("pretrained weights lack {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "pretrained {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_config() -> DhdConfig {
        DhdConfig {
            channels: 3,
            height: 8,
            width: 8,
            backbone_widths: vec![4, 8],
            n_e: 16,
            n_h: 64,
            n_cls: 6,
            objective: DhdObjective::default(),
        }
    }

    fn random_image(s: u64) -> ImageTensor {
        let mut rng = seed::rng(s);
        ImageTensor::new(3, 8, 8, (0..192).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn hash_shape_range_and_determinism() {
        let m = DhdModule::new(&tiny_config(), DType::F64, &Device::Cpu, 1).unwrap();
        let img = random_image(2);
        let h = m.hash(&img).unwrap();
        assert_eq!(h.len(), 64);
        assert!(h.as_slice().iter().all(|v| v.abs() < 1.0));
        assert_eq!(h, m.hash(&img).unwrap());
        let bad = ImageTensor::filled(3, 16, 16, 0.5).unwrap();
        assert!(matches!(m.hash(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_continuous_in_the_input() {
        let m = DhdModule::new(&tiny_config(), DType::F64, &Device::Cpu, 3).unwrap();
        let img = random_image(4);
        let nudged: Vec<f32> = img
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { (v + 1e-6).min(1.0) } else { (v - 1e-6).max(0.0) })
            .collect();
        let nudged = ImageTensor::new(3, 8, 8, nudged).unwrap();
        let d = sdh_loss(&m.hash(&img).unwrap(), &m.hash(&nudged).unwrap()).unwrap();
        assert!(d < 1e-3, "cosine distance {d}");
    }

    #[test]
    fn binarize_ties_and_hamming() {
        let h = HashVector::new(vec![0.3, -0.7]).unwrap();
        assert_eq!(binarize(&h).as_slice(), &[1, -1]);
        assert_eq!(binarize(&HashVector::new(vec![0.0]).unwrap()).as_slice(), &[1]);
        let b = binarize(&h);
        assert_eq!(hamming_distance(&b, &b).unwrap(), 0);
        let a = BinaryHash::from_signs(vec![1; 64]).unwrap();
        let neg = BinaryHash::from_signs(vec![-1; 64]).unwrap();
        assert_eq!(hamming_distance(&a, &neg).unwrap(), 64);
        assert!(hamming_distance(&a, &b).is_err());
        assert!(HashVector::new(vec![1.0]).is_err());
        assert!(BinaryHash::from_signs(vec![0]).is_err());
    }

    #[test]
    fn hex_export() {
        let mut bits = vec![-1i8; 16];
        bits[0] = 1;
        bits[15] = 1;
        let b = BinaryHash::from_signs(bits).unwrap();
        assert_eq!(b.to_hex(), "8001");
        assert_eq!(BinaryHash::from_hex("8001", 16).unwrap(), b);
        assert!(BinaryHash::from_hex("80", 16).is_err());
        let odd = BinaryHash::from_signs(vec![1, 1, 1]).unwrap();
        assert_eq!(odd.to_hex(), "e0");
        assert_eq!(BinaryHash::from_hex("e0", 3).unwrap(), odd);
    }

    #[test]
    fn frozen_module_has_no_trainable_vars() {
        let m = DhdModule::new(&tiny_config(), DType::F32, &Device::Cpu, 1).unwrap();
        let n = m.trainable_vars().len();
        assert!(n > 0);
        assert!(m.trainable_vars().iter().all(|(k, _)| !k.contains("running")));
        let m = m.freeze();
        assert!(m.is_frozen());
        assert!(m.trainable_vars().is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DhdModule::new(&tiny_config(), DType::F32, &Device::Cpu, 9).unwrap();
        m.save(&dir.path().join("dhd"), CheckpointMeta::new("dhd", 9)).unwrap();
        let (back, meta) = DhdModule::load(&dir.path().join("dhd"), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.checksum().unwrap(), m.checksum().unwrap());
        assert_eq!(meta.metrics["n_h"], 64.0);
        let img = random_image(1);
        assert_eq!(back.hash(&img).unwrap(), m.hash(&img).unwrap());
    }

    #[test]
    fn pretrained_backbone_loading() {
        let dir = tempfile::tempdir().unwrap();
        let a = DhdModule::new(&tiny_config(), DType::F32, &Device::Cpu, 1).unwrap();
        let b = DhdModule::new(&tiny_config(), DType::F32, &Device::Cpu, 2).unwrap();
        let path = dir.path().join("bb.safetensors");
        let tensors: std::collections::HashMap<String, Tensor> = a
            .store()
            .vars_with_prefix("backbone.")
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, &path).unwrap();
        b.load_backbone(&path).unwrap();
        let fa = a.features_tensor(&random_image(5).to_tensor(DType::F32, &Device::Cpu).unwrap(), false).unwrap();
        let fb = b.features_tensor(&random_image(5).to_tensor(DType::F32, &Device::Cpu).unwrap(), false).unwrap();
        assert_eq!(fa.to_vec2::<f32>().unwrap(), fb.to_vec2::<f32>().unwrap());
        assert!(b.load_backbone(&dir.path().join("none.safetensors")).is_err());
    }

    proptest! {
        #[test]
        fn cosine_hamming_identity(signs in proptest::collection::vec(any::<bool>(), 64), other in proptest::collection::vec(any::<bool>(), 64)) {
            let a = BinaryHash::from_signs(signs.iter().map(|s| if *s { 1 } else { -1 }).collect()).unwrap();
            let b = BinaryHash::from_signs(other.iter().map(|s| if *s { 1 } else { -1 }).collect()).unwrap();
            let d = hamming_distance(&a, &b).unwrap();
            let brute = signs.iter().zip(&other).filter(|(x, y)| x != y).count();
            prop_assert_eq!(d, brute);
            prop_assert_eq!(d as i64, (64 - a.dot(&b).unwrap()) / 2);
            let fa: Vec<f64> = a.as_slice().iter().map(|v| *v as f64).collect();
            let fb: Vec<f64> = b.as_slice().iter().map(|v| *v as f64).collect();
            let cos = cosine_similarity(&fa, &fb).unwrap();
            prop_assert!((cos - (1.0 - 2.0 * d as f64 / 64.0)).abs() < 1e-12);
        }
    }
}
