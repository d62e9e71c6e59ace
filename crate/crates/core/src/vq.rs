//! Block vector quantization of real channel outputs for quantize-and-forward relaying.
//!
//! A channel output `y ∈ R^{2k}` is cut into `2k/N_Q` blocks of `N_Q` reals. Every block is
//! replaced by the index of its nearest codebook center, written with `N_Q·b` bits.

use std::io::{Read, Write};
use std::path::Path;

use bitvec::prelude::*;
use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Largest supported index width.
pub const MAX_BITS_PER_BLOCK: u32 = 24;
/// Lloyd iteration cap.
pub const MAX_ITERATIONS: usize = 100;
/// Lloyd stops once no center moves farther than this.
pub const CONVERGENCE_TOL: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"HJVQ";
const FORMAT_VERSION: u16 = 1;

/// Block length `N_Q` and bits per real element `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RateRepr", into = "RateRepr")]
pub struct QuantRate {
    n_q: u32,
    b: Ratio<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateRepr {
    n_q: u32,
    /// Written as `"3/4"` or `"2"`.
    b: String,
}

impl TryFrom<RateRepr> for QuantRate {
    type Error = Error;

    fn try_from(r: RateRepr) -> Result<Self> {
        let b: Ratio<u32> = r
            .b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse bits per element {:?}", r.b)))?;
        QuantRate::new(r.n_q, b)
    }
}

impl From<QuantRate> for RateRepr {
    fn from(q: QuantRate) -> Self {
        Self { n_q: q.n_q, b: q.b.to_string() }
    }
}

impl QuantRate {
    /// Requires `N_Q ≥ 1` and `N_Q·b` an integer no larger than [`MAX_BITS_PER_BLOCK`].
    /// `b = 0` is the degenerate single-center rate.
    pub fn new(n_q: u32, b: Ratio<u32>) -> Result<Self> {
        if n_q == 0 {
            return Err(Error::Config("block length must be positive".into()));
        }
        let bits = b * n_q;
        if !bits.is_integer() {
            return Err(Error::Config(format!("N_Q·b = {n_q}·{b} is not an integer")));
        }
        if bits.to_integer() > MAX_BITS_PER_BLOCK {
            return Err(Error::Config(format!(
                "{} bits per block exceeds the supported {MAX_BITS_PER_BLOCK}",
                bits.to_integer()
            )));
        }
        Ok(Self { n_q, b })
    }

    /// The five operating points of the rate sweep, from 1.5 to 4 bpp at `ρ = 1/3`.
    pub fn sweep() -> [QuantRate; 5] {
        let r = |n, num, den| QuantRate::new(n, Ratio::new(num, den)).expect("valid sweep rate");
        [r(4, 3, 4), r(2, 1, 1), r(4, 5, 4), r(2, 3, 2), r(2, 2, 1)]
    }

    pub fn n_q(&self) -> u32 {
        self.n_q
    }

    pub fn b(&self) -> Ratio<u32> {
        self.b
    }

    pub fn bits_per_block(&self) -> u32 {
        (self.b * self.n_q).to_integer()
    }

    pub fn n_centers(&self) -> usize {
        1usize << self.bits_per_block()
    }

    /// `2·k·b / (H·W)` bits per pixel.
    pub fn bpp(&self, k: u64, height: u64, width: u64) -> Result<Ratio<u64>> {
        bits_per_pixel(k, self.n_q, self.b, height, width)
    }

    /// Filesystem-safe label such as `nq4_b3-4`.
    pub fn tag(&self) -> String {
        format!("nq{}_b{}-{}", self.n_q, self.b.numer(), self.b.denom())
    }
}

impl std::fmt::Display for QuantRate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(N_Q={}, b={})", self.n_q, self.b)
    }
}

/// `(2k/N_Q)·N_Q·b / (H·W)`, exactly.
pub fn bits_per_pixel(k: u64, n_q: u32, b: Ratio<u32>, height: u64, width: u64) -> Result<Ratio<u64>> {
    if k == 0 || n_q == 0 || height == 0 || width == 0 || *b.denom() == 0 {
        return Err(Error::InvalidArgument("rate arguments must be positive".into()));
    }
    let blocks = Ratio::new(2 * k, n_q as u64);
    let bits_per_block = Ratio::new(*b.numer() as u64 * n_q as u64, *b.denom() as u64);
    Ok(blocks * bits_per_block / Ratio::from_integer(height * width))
}

/// Fitted set of `2^{N_Q·b}` centers in `R^{N_Q}`; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    rate: QuantRate,
    centers: Vec<f32>,
    seed: u64,
    /// Codeword length `k` of the channel outputs the centers were fitted on.
    source_k: Option<u64>,
    snr_db: Option<f64>,
}

impl Codebook {
    /// Builds a codebook from explicit row-major centers.
    pub fn from_centers(rate: QuantRate, centers: Vec<f32>) -> Result<Self> {
        let expected = rate.n_centers() * rate.n_q as usize;
        if centers.len() != expected {
            return Err(Error::Config(format!(
                "{rate} needs {} centers ({expected} values), got {} values",
                rate.n_centers(),
                centers.len()
            )));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("codebook centers must be finite".into()));
        }
        Ok(Self {
            rate,
            centers,
            seed: 0,
            source_k: None,
            snr_db: None,
        })
    }

    /// Records what the centers were fitted on.
    pub fn with_provenance(mut self, source_k: u64, snr_db: f64) -> Self {
        self.source_k = Some(source_k);
        self.snr_db = Some(snr_db);
        self
    }

    pub fn rate(&self) -> QuantRate {
        self.rate
    }

    pub fn n_q(&self) -> usize {
        self.rate.n_q as usize
    }

    pub fn n_centers(&self) -> usize {
        self.rate.n_centers()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_k(&self) -> Option<u64> {
        self.source_k
    }

    pub fn snr_db(&self) -> Option<f64> {
        self.snr_db
    }

    pub fn centers(&self) -> &[f32] {
        &self.centers
    }

    pub fn center(&self, index: usize) -> &[f32] {
        let n = self.n_q();
        &self.centers[index * n..(index + 1) * n]
    }

    /// Nearest center by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, block: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.n_centers() {
            let d: f64 = self
                .center(j)
                .iter()
                .zip(block)
                .map(|(c, v)| (*c as f64 - v).powi(2))
                .sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }

    pub fn quantize(&self, y: &[f64]) -> Result<QuantizedPayload> {
        let n = self.n_q();
        if y.is_empty() || y.len() % n != 0 || y.len() % 2 != 0 {
            return Err(Error::Config(format!(
                "channel output of length {} cannot be cut into blocks of {n}",
                y.len()
            )));
        }
        if let Some(k) = self.source_k {
            if y.len() as u64 != 2 * k {
                return Err(Error::Config(format!(
                    "codebook was fitted on length-{} outputs, got length {}",
                    2 * k,
                    y.len()
                )));
            }
        }
        let indices = y.chunks(n).map(|b| self.nearest(b) as u32).collect();
        Ok(QuantizedPayload {
            indices,
            bits_per_index: self.rate.bits_per_block(),
            source_k: y.len() / 2,
        })
    }

    pub fn dequantize(&self, q: &QuantizedPayload) -> Result<Vec<f64>> {
        if q.bits_per_index != self.rate.bits_per_block() {
            return Err(Error::Config(format!(
                "payload uses {}-bit indices, codebook {}",
                q.bits_per_index,
                self.rate.bits_per_block()
            )));
        }
        let mut out = Vec::with_capacity(q.indices.len() * self.n_q());
        for &i in &q.indices {
            if i as usize >= self.n_centers() {
                return Err(Error::Corruption(format!(
                    "index {i} out of range for {} centers",
                    self.n_centers()
                )));
            }
            out.extend(self.center(i as usize).iter().map(|c| *c as f64));
        }
        Ok(out)
    }

    /// Writes the binary codebook file: a fixed header followed by little-endian `f32` centers.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let to_u16 = |v: u32, what: &str| {
            u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the file header")))
        };
        let mut buf = Vec::with_capacity(48 + 4 * self.centers.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&to_u16(self.rate.n_q, "n_q")?.to_le_bytes());
        buf.extend_from_slice(&to_u16(*self.rate.b.numer(), "b numerator")?.to_le_bytes());
        buf.extend_from_slice(&to_u16(*self.rate.b.denom(), "b denominator")?.to_le_bytes());
        buf.extend_from_slice(&self.source_k.unwrap_or(0).to_le_bytes());
        buf.extend_from_slice(&self.snr_db.unwrap_or(f64::NAN).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.n_centers() as u32).to_le_bytes());
        for c in &self.centers {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::Corruption(format!("{}: {msg}", path.display()));
        let mut cur = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated codebook file"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("not a codebook file"));
        }
        let u16_at = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
        let version = u16_at(take(2)?);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported codebook format version {version}")));
        }
        let n_q = u16_at(take(2)?) as u32;
        let num = u16_at(take(2)?) as u32;
        let den = u16_at(take(2)?) as u32;
        let k = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let snr = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let n_centers = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        if den == 0 {
            return Err(bad("zero denominator in header"));
        }
        let rate = QuantRate::new(n_q, Ratio::new(num, den)).map_err(|e| bad(&e.to_string()))?;
        if n_centers != rate.n_centers() {
            return Err(bad(&format!("header lists {n_centers} centers, rate implies {}", rate.n_centers())));
        }
        let body = take(4 * n_centers * n_q as usize)?;
        if !cur.is_empty() {
            return Err(bad("trailing bytes after centers"));
        }
        let centers = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut cb = Self::from_centers(rate, centers).map_err(|e| bad(&e.to_string()))?;
        cb.seed = seed;
        cb.source_k = (k > 0).then_some(k);
        cb.snr_db = (!snr.is_nan()).then_some(snr);
        Ok(cb)
    }
}

/// Block indices of one quantized channel output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPayload {
    pub indices: Vec<u32>,
    pub bits_per_index: u32,
    pub source_k: usize,
}

impl QuantizedPayload {
    /// `(2k/N_Q)·N_Q·b = 2k·b`.
    pub fn total_bits(&self) -> u64 {
        self.indices.len() as u64 * self.bits_per_index as u64
    }

    /// Packs indices back to back, most significant bit first within each byte. The final
    /// byte is zero-padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bits: BitVec<u8, Msb0> = BitVec::with_capacity(self.total_bits() as usize);
        let w = self.bits_per_index as usize;
        for &i in &self.indices {
            let word = i.to_be_bytes();
            let view = word.view_bits::<Msb0>();
            bits.extend_from_bitslice(&view[32 - w..]);
        }
        bits.into_vec()
    }

    pub fn from_bytes(bytes: &[u8], n_indices: usize, bits_per_index: u32, source_k: usize) -> Result<Self> {
        let w = bits_per_index as usize;
        if w > 32 {
            return Err(Error::InvalidArgument(format!("unsupported index width {w}")));
        }
        let needed = n_indices * w;
        if bytes.len() != needed.div_ceil(8) {
            return Err(Error::Corruption(format!(
                "payload has {} bytes, {n_indices} indices of {w} bits need {}",
                bytes.len(),
                needed.div_ceil(8)
            )));
        }
        let bits = bytes.view_bits::<Msb0>();
        let indices = (0..n_indices)
            .map(|i| if w == 0 { 0 } else { bits[i * w..(i + 1) * w].load_be::<u32>() })
            .collect();
        Ok(Self {
            indices,
            bits_per_index,
            source_k,
        })
    }
}

/// Outcome of a Lloyd fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub codebook: Codebook,
    /// Mean squared block-to-center distance after each assignment step.
    pub distortion_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn assign(blocks: &[f64], n: usize, centers: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let m = centers.len() / n;
    let mut total = 0.0;
    for (i, block) in blocks.chunks(n).enumerate() {
        let mut best = (0, f64::INFINITY);
        for j in 0..m {
            let d = sq_dist(block, &centers[j * n..(j + 1) * n]);
            if d < best.1 {
                best = (j, d);
            }
        }
        labels[i] = best.0;
        dists[i] = best.1;
        total += best.1;
    }
    total / labels.len() as f64
}

/// K-means++ seeding: the first center is a uniformly drawn block, each further center a block
/// drawn with probability proportional to its squared distance to the nearest chosen center.
fn seed_centers(blocks: &[f64], n: usize, m: usize, rng: &mut impl Rng) -> Vec<f64> {
    let count = blocks.len() / n;
    let mut centers = Vec::with_capacity(m * n);
    let first = rng.random_range(0..count);
    centers.extend_from_slice(&blocks[first * n..(first + 1) * n]);
    let mut nearest: Vec<f64> = blocks.chunks(n).map(|b| sq_dist(b, &centers[..n])).collect();
    for _ in 1..m {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = count - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..count)
        };
        let c = blocks[pick * n..(pick + 1) * n].to_vec();
        for (d, b) in nearest.iter_mut().zip(blocks.chunks(n)) {
            *d = d.min(sq_dist(b, &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

/// Fits `2^{N_Q·b}` centers to the blocks of `samples` with Lloyd's algorithm.
///
/// Stops after [`MAX_ITERATIONS`] rounds or once the largest center displacement falls below
/// [`CONVERGENCE_TOL`]. An empty cluster is reseeded at the block farthest from its current
/// center. Deterministic in `seed`.
pub fn fit_codebook<S: AsRef<[f32]>>(samples: &[S], rate: QuantRate, seed: u64) -> Result<FitResult> {
    let n = rate.n_q as usize;
    let m = rate.n_centers();
    let mut blocks = Vec::new();
    for s in samples {
        let s = s.as_ref();
        if s.len() % n != 0 {
            return Err(Error::Config(format!("sample length {} is not a multiple of N_Q = {n}", s.len())));
        }
        blocks.extend(s.iter().map(|v| *v as f64));
    }
    if blocks.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("samples contain non-finite values".into()));
    }
    let count = blocks.len() / n;
    if count < m {
        return Err(Error::Fit(format!("{count} blocks cannot support {m} centers")));
    }
    let mut rng = seed::rng(seed::derive(seed, Stream::KMeans, &[]));
    let mut centers = seed_centers(&blocks, n, m, &mut rng);
    let mut labels = vec![0usize; count];
    let mut dists = vec![0.0f64; count];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        history.push(assign(&blocks, n, &centers, &mut labels, &mut dists));
        let mut sums = vec![0.0f64; m * n];
        let mut counts = vec![0usize; m];
        for (i, block) in blocks.chunks(n).enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * n..(labels[i] + 1) * n].iter_mut().zip(block) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        for j in 0..m {
            if counts[j] > 0 {
                for d in 0..n {
                    next[j * n + d] = sums[j * n + d] / counts[j] as f64;
                }
            } else {
                let far = (0..count)
                    .max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a)))
                    .expect("non-empty blocks");
                next[j * n..(j + 1) * n].copy_from_slice(&blocks[far * n..(far + 1) * n]);
                dists[far] = 0.0;
            }
        }
        let shift = (0..m)
            .map(|j| sq_dist(&centers[j * n..(j + 1) * n], &next[j * n..(j + 1) * n]).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < CONVERGENCE_TOL {
            break;
        }
    }
    let mut codebook = Codebook::from_centers(rate, centers.iter().map(|c| *c as f32).collect())?;
    codebook.seed = seed;
    Ok(FitResult {
        codebook,
        distortion_history: history,
        iterations,
    })
}
