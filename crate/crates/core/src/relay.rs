//! Relay protocols: decode-and-forward chains and the quantize-and-forward pipeline.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelCodeword};
use crate::checkpoint::{self, CheckpointMeta, ParamStore};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::jscc::{JsccCodec, JsccConfig};
use crate::seed::{self, Stream};
use crate::vq::Codebook;

/// Shape of a decode-and-forward chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub jscc: JsccConfig,
    /// Number of relays `r`; the chain has `r + 1` hops.
    pub relays: usize,
    /// All hops use one parameter set.
    #[serde(default)]
    pub shared_weights: bool,
    pub snr_db: f64,
}

/// Result of sending one image through a chain.
#[derive(Debug, Clone)]
pub struct DfOutput {
    pub output: ImageTensor,
    /// Reconstruction after every hop; the last entry is `output`.
    pub intermediates: Vec<ImageTensor>,
}

/// `r + 1` point-to-point JSCC links in series, each hop decoding to an image and re-encoding.
#[derive(Debug, Clone)]
pub struct DfChain {
    spec: ChainSpec,
    hops: Vec<JsccCodec>,
    store: ParamStore,
    sigma_sq: f64,
}

impl DfChain {
    /// Parameters live under `hop{i}.` (only `hop0.` when weights are shared).
    pub fn new(spec: &ChainSpec, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        spec.jscc.validate()?;
        let sigma_sq = channel::snr_to_noise_variance(spec.snr_db)?;
        let store = ParamStore::new(dtype, device);
        let vb = store.builder();
        let distinct = if spec.shared_weights { 1 } else { spec.relays + 1 };
        let codecs = (0..distinct)
            .map(|i| JsccCodec::new(&spec.jscc, vb.pp(format!("hop{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let hops = (0..=spec.relays).map(|i| codecs[i.min(distinct - 1)].clone()).collect();
        store.reinit(seed)?;
        Ok(Self {
            spec: spec.clone(),
            hops,
            store,
            sigma_sq,
        })
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn relays(&self) -> usize {
        self.spec.relays
    }

    pub fn n_hops(&self) -> usize {
        self.hops.len()
    }

    pub fn hop(&self, i: usize) -> &JsccCodec {
        &self.hops[i]
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

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// Overrides the per-hop noise variance implied by the configured SNR.
    pub fn set_noise_variance(&mut self, sigma_sq: f64) -> Result<()> {
        if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
            return Err(Error::InvalidArgument(format!("noise variance must be finite and ≥ 0, got {sigma_sq}")));
        }
        self.sigma_sq = sigma_sq;
        Ok(())
    }

    /// Runs `(B, C, H, W)` images through every hop. `seeds[hop][row]` seeds the noise of
    /// each hop and image. Returns the destination output and the reconstruction after every
    /// hop, all differentiable with respect to the chain parameters.
    pub fn forward_batch(&self, x: &Tensor, seeds: &[Vec<u64>]) -> Result<(Tensor, Vec<Tensor>)> {
        if seeds.len() != self.n_hops() {
            return Err(Error::InvalidArgument(format!(
                "need noise seeds for {} hops, got {}",
                self.n_hops(),
                seeds.len()
            )));
        }
        let mut current = x.clone();
        let mut intermediates = Vec::with_capacity(self.n_hops());
        for (codec, hop_seeds) in self.hops.iter().zip(seeds) {
            let tx = codec.encode_tensor(&current)?;
            let rx = channel::awgn_tensor(&tx, self.sigma_sq, hop_seeds)?;
            current = codec.decode_tensor(&rx)?;
            intermediates.push(current.clone());
        }
        Ok((current, intermediates))
    }

    /// One image through the chain with one noise seed per hop.
    pub fn df_forward(&self, image: &ImageTensor, seeds: &[u64]) -> Result<DfOutput> {
        let x = image.to_tensor(self.dtype(), self.device())?;
        let per_hop: Vec<Vec<u64>> = seeds.iter().map(|s| vec![*s]).collect();
        let (_, inter) = self.forward_batch(&x, &per_hop)?;
        let intermediates = inter
            .iter()
            .map(|t| Ok(ImageTensor::unstack(t)?.remove(0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DfOutput {
            output: intermediates.last().expect("at least one hop").clone(),
            intermediates,
        })
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn save(&self, stem: &Path, meta: CheckpointMeta) -> Result<()> {
        let mut meta = meta.with_config(&self.spec)?;
        meta.kind = "df-chain".into();
        checkpoint::save_checkpoint(stem, &self.store, &meta)
    }

    pub fn load(stem: &Path, dtype: DType, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let meta = checkpoint::read_meta(stem)?;
        if meta.kind != "df-chain" {
            return Err(Error::Config(format!("{} is a {} checkpoint", stem.display(), meta.kind)));
        }
        let spec: ChainSpec = meta.config_as()?;
        let mut chain = Self::new(&spec, dtype, device, 0)?;
        let meta = checkpoint::load_checkpoint(stem, &mut chain.store)?;
        Ok((chain, meta))
    }
}

/// First hop over the noisy channel, then quantization of the raw channel output and a
/// noiseless forward of the index bits to the destination decoder.
#[derive(Debug, Clone)]
pub struct QfPipeline {
    codec: JsccCodec,
    codebook: Codebook,
    sigma_sq: f64,
}

impl QfPipeline {
    /// Fails with a configuration error when the codebook was fitted on outputs of another
    /// length, at another SNR, or uses blocks that do not tile `2k`.
    pub fn new(codec: JsccCodec, codebook: Codebook, snr_db: f64) -> Result<Self> {
        let two_k = 2 * codec.k();
        if two_k % codebook.n_q() != 0 {
            return Err(Error::Config(format!(
                "block length {} does not divide 2k = {two_k}",
                codebook.n_q()
            )));
        }
        if let Some(k) = codebook.source_k() {
            if k as usize != codec.k() {
                return Err(Error::Config(format!("codebook fitted for k = {k}, codec has k = {}", codec.k())));
            }
        }
        if let Some(s) = codebook.snr_db() {
            if (s - snr_db).abs() > 1e-9 {
                return Err(Error::Config(format!("codebook fitted at {s} dB, pipeline runs at {snr_db} dB")));
            }
        }
        Ok(Self {
            sigma_sq: channel::snr_to_noise_variance(snr_db)?,
            codec,
            codebook,
        })
    }

    pub fn codec(&self) -> &JsccCodec {
        &self.codec
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// Destination reconstructions for a batch, one first-hop noise seed per image.
    pub fn qf_forward_batch(&self, images: &[ImageTensor], seeds: &[u64]) -> Result<Vec<ImageTensor>> {
        let x = ImageTensor::stack(images, self.codec.dtype(), self.codec.device())?;
        let tx = self.codec.encode_tensor(&x)?;
        let rx = channel::awgn_tensor(&tx, self.sigma_sq, seeds)?;
        let rows = rx.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut flat = Vec::with_capacity(rows.len() * 2 * self.codec.k());
        for row in &rows {
            let q = self.codebook.quantize(row)?;
            flat.extend(self.codebook.dequantize(&q)?);
        }
        let y_hat = Tensor::from_vec(flat, (rows.len(), 2 * self.codec.k()), self.codec.device())?
            .to_dtype(self.codec.dtype())?;
        ImageTensor::unstack(&self.codec.decode_tensor(&y_hat)?)
    }

    pub fn qf_forward(&self, image: &ImageTensor, seed: u64) -> Result<ImageTensor> {
        Ok(self.qf_forward_batch(std::slice::from_ref(image), &[seed])?.remove(0))
    }
}

/// Noisy channel outputs `y = f(S) + n` for every image of `ds`, in dataset order. Image `i`
/// uses the noise seed `derive(seed, Noise, [i])`.
pub fn collect_channel_outputs(
    codec: &JsccCodec,
    ds: &dyn ImageDataset,
    snr_db: f64,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let sigma_sq = channel::snr_to_noise_variance(snr_db)?;
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = chunk.iter().map(|&i| ds.image(i)).collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = chunk.iter().map(|&i| seed::derive(seed, Stream::Noise, &[i as u64])).collect();
        let x = ImageTensor::stack(&images, codec.dtype(), codec.device())?;
        let rx = channel::awgn_tensor(&codec.encode_tensor(&x)?, sigma_sq, &seeds)?;
        out.extend(rx.to_dtype(DType::F32)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

/// Single-image DF `r = 0` pass expressed through the scalar channel API.
pub fn point_to_point(codec: &JsccCodec, image: &ImageTensor, sigma_sq: f64, seed: u64) -> Result<ImageTensor> {
    let y: ChannelCodeword = channel::awgn(&codec.encode(image)?, sigma_sq, seed)?;
    codec.decode(&y)
}
