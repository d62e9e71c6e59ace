//! DeepJSCC encoder/decoder pair.
//!
//! The encoder maps a `C×H×W` image to `C_out` feature maps at `H/4 × W/4` (two stride-2
//! convolutions with PReLU and residual blocks), pairs the first `C_out/2` maps (real parts)
//! with the last `C_out/2` maps (imaginary parts) into `k` complex symbols, and normalizes the
//! codeword to unit average power. The decoder mirrors it with two stride-2 transposed
//! convolutions and ends in a sigmoid so reconstructions stay in `[0, 1]`.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, PReLU, VarBuilder};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelCodeword};
use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsccConfig {
    /// Image channels `C`.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Encoder output feature maps; must be even.
    pub c_out: usize,
    /// Width of the hidden convolutional layers.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Residual blocks after each resampling stage.
    #[serde(default = "default_res_blocks")]
    pub res_blocks: usize,
}

fn default_hidden() -> usize {
    256
}

fn default_res_blocks() -> usize {
    1
}

impl JsccConfig {
    /// 3×256×256 images at bandwidth ratio 1/3.
    pub fn full_scale() -> Self {
        Self {
            channels: 3,
            height: 256,
            width: 256,
            c_out: 32,
            hidden: default_hidden(),
            res_blocks: default_res_blocks(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config("codec dimensions must be positive".into()));
        }
        if self.c_out == 0 || self.c_out % 2 != 0 {
            return Err(Error::Config(format!("c_out must be even and positive, got {}", self.c_out)));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "height and width must be divisible by 4, got {}×{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Complex channel uses per image: `(C_out/2)·(H/4)·(W/4)`.
    pub fn k(&self) -> usize {
        (self.c_out / 2) * (self.height / 4) * (self.width / 4)
    }

    /// Bandwidth ratio `k / (C·H·W)`.
    pub fn rho(&self) -> Ratio<usize> {
        Ratio::new(self.k(), self.channels * self.height * self.width)
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    act: PReLU,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(ch: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv1: candle_nn::conv2d(ch, ch, 3, cfg, vb.pp("conv1"))?,
            act: candle_nn::prelu(Some(ch), vb.pp("act"))?,
            conv2: candle_nn::conv2d(ch, ch, 3, cfg, vb.pp("conv2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.act.forward(&self.conv1.forward(x)?)?)?;
        Ok((x + h)?)
    }
}

fn res_stack(ch: usize, n: usize, vb: VarBuilder) -> Result<Vec<ResBlock>> {
    (0..n).map(|i| ResBlock::new(ch, vb.pp(format!("res{i}")))).collect()
}

fn run_stack(blocks: &[ResBlock], mut x: Tensor) -> Result<Tensor> {
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

#[derive(Debug, Clone)]
struct Encoder {
    down1: Conv2d,
    act1: PReLU,
    stage1: Vec<ResBlock>,
    down2: Conv2d,
    act2: PReLU,
    stage2: Vec<ResBlock>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    stem: Conv2d,
    act0: PReLU,
    stage1: Vec<ResBlock>,
    up1: ConvTranspose2d,
    act1: PReLU,
    stage2: Vec<ResBlock>,
    up2: ConvTranspose2d,
}

/// Encoder `f` and decoder `d` of one hop.
#[derive(Debug, Clone)]
pub struct JsccCodec {
    config: JsccConfig,
    encoder: Encoder,
    decoder: Decoder,
    dtype: DType,
    device: Device,
}

impl JsccCodec {
    /// Declares the codec's parameters under `vb` (`enc.*`, `dec.*`).
    pub fn new(config: &JsccConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let (c, hid) = (config.channels, config.hidden);
        let down = Conv2dConfig {
            stride: 2,
            padding: 2,
            ..Default::default()
        };
        let same = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let up = ConvTranspose2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let e = vb.pp("enc");
        let encoder = Encoder {
            down1: candle_nn::conv2d(c, hid, 5, down, e.pp("down1"))?,
            act1: candle_nn::prelu(Some(hid), e.pp("act1"))?,
            stage1: res_stack(hid, config.res_blocks, e.pp("stage1"))?,
            down2: candle_nn::conv2d(hid, hid, 5, down, e.pp("down2"))?,
            act2: candle_nn::prelu(Some(hid), e.pp("act2"))?,
            stage2: res_stack(hid, config.res_blocks, e.pp("stage2"))?,
            head: candle_nn::conv2d(hid, config.c_out, 3, same, e.pp("head"))?,
        };
        let d = vb.pp("dec");
        let decoder = Decoder {
            stem: candle_nn::conv2d(config.c_out, hid, 3, same, d.pp("stem"))?,
            act0: candle_nn::prelu(Some(hid), d.pp("act0"))?,
            stage1: res_stack(hid, config.res_blocks, d.pp("stage1"))?,
            up1: candle_nn::conv_transpose2d(hid, hid, 4, up, d.pp("up1"))?,
            act1: candle_nn::prelu(Some(hid), d.pp("act1"))?,
            stage2: res_stack(hid, config.res_blocks, d.pp("stage2"))?,
            up2: candle_nn::conv_transpose2d(hid, c, 4, up, d.pp("up2"))?,
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            dtype: vb.dtype(),
            device: vb.device().clone(),
        })
    }

    /// A codec with its own parameter store, initialized from `seed`.
    pub fn init(config: &JsccConfig, dtype: DType, device: &Device, seed: u64) -> Result<(Self, ParamStore)> {
        let store = ParamStore::new(dtype, device);
        let codec = Self::new(config, store.builder())?;
        store.reinit(seed)?;
        Ok((codec, store))
    }

    pub fn config(&self) -> &JsccConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    /// `(B, C, H, W)` images to `(B, 2k)` power-normalized interleaved codewords.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if (c, h, w) != self.config.image_shape() {
            return Err(Error::Config(format!(
                "codec expects {:?} images, got {:?}",
                self.config.image_shape(),
                (c, h, w)
            )));
        }
        let e = &self.encoder;
        let z = e.act1.forward(&e.down1.forward(x)?)?;
        let z = run_stack(&e.stage1, z)?;
        let z = e.act2.forward(&e.down2.forward(&z)?)?;
        let z = run_stack(&e.stage2, z)?;
        let z = e.head.forward(&z)?;
        let n = self.k();
        // channel halves -> (re, im) pairs
        let z = z.reshape((b, 2, n))?.transpose(1, 2)?.contiguous()?.reshape((b, 2 * n))?;
        channel::normalize_power_tensor(&z)
    }

    /// `(B, 2k)` channel outputs to `(B, C, H, W)` reconstructions in `[0, 1]`.
    pub fn decode_tensor(&self, y: &Tensor) -> Result<Tensor> {
        let (b, len) = y.dims2()?;
        let n = self.k();
        if len != 2 * n {
            return Err(Error::Config(format!(
                "codec expects codewords of {} reals, got {len}",
                2 * n
            )));
        }
        let (h4, w4) = (self.config.height / 4, self.config.width / 4);
        let z = y
            .reshape((b, n, 2))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, self.config.c_out, h4, w4))?;
        let d = &self.decoder;
        let s = d.act0.forward(&d.stem.forward(&z)?)?;
        let s = run_stack(&d.stage1, s)?;
        let s = d.act1.forward(&d.up1.forward(&s)?)?;
        let s = run_stack(&d.stage2, s)?;
        let s = d.up2.forward(&s)?;
        Ok(candle_nn::ops::sigmoid(&s)?)
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<ChannelCodeword> {
        if image.shape() != self.config.image_shape() {
            return Err(Error::Config(format!(
                "codec expects {:?} images, got {:?}",
                self.config.image_shape(),
                image.shape()
            )));
        }
        let x = self.encode_tensor(&image.to_tensor(self.dtype, &self.device)?)?;
        ChannelCodeword::from_interleaved(row_f64(&x, 0)?)
    }

    pub fn decode(&self, y: &ChannelCodeword) -> Result<ImageTensor> {
        if y.k() != self.k() {
            return Err(Error::Config(format!(
                "codec expects k = {}, got a codeword with k = {}",
                self.k(),
                y.k()
            )));
        }
        let t = Tensor::from_slice(y.as_slice(), (1, y.as_slice().len()), &self.device)?.to_dtype(self.dtype)?;
        let out = self.decode_tensor(&t)?;
        Ok(ImageTensor::unstack(&out)?.remove(0))
    }
}

pub(crate) fn row_f64(t: &Tensor, row: usize) -> Result<Vec<f64>> {
    Ok(t.get(row)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
