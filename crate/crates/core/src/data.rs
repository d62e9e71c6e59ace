//! Datasets: multi-label manifests, raster image loading, and synthetic desk-scale images.
//!
//! A manifest is a plain text file with one `relative/path.jpg,010...1` entry per line, where
//! the label string has one `0`/`1` character per class. Blank lines and lines starting with
//! `#` are ignored.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Random access to labelled images.
pub trait ImageDataset: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image(&self, index: usize) -> Result<ImageTensor>;

    /// Multi-hot labels, one `0`/`1` entry per class.
    fn labels(&self, index: usize) -> &[u8];

    fn n_cls(&self) -> usize;

    /// Stable identifier of an entry (its path for file-backed data).
    fn id(&self, index: usize) -> String;
}

/// Loads the images at `indices` together with their labels.
pub fn gather(ds: &dyn ImageDataset, indices: &[usize]) -> Result<(Vec<ImageTensor>, Vec<Vec<u8>>)> {
    let mut images = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        images.push(ds.image(i)?);
        labels.push(ds.labels(i).to_vec());
    }
    Ok((images, labels))
}

/// Deterministic visiting order for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seed::rng(seed::derive(seed, Stream::Shuffle, &[epoch as u64]));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    images: Vec<ImageTensor>,
    labels: Vec<Vec<u8>>,
    ids: Vec<String>,
    n_cls: usize,
}

impl InMemoryDataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<Vec<u8>>, n_cls: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument("one label vector per image required".into()));
        }
        if let Some(l) = labels.iter().find(|l| l.len() != n_cls) {
            return Err(Error::Validation(format!("label width {} != {n_cls}", l.len())));
        }
        let ids = (0..images.len()).map(|i| format!("mem:{i}")).collect();
        Ok(Self {
            images,
            labels,
            ids,
            n_cls,
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.images.len() {
            return Err(Error::InvalidArgument("one id per image required".into()));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    /// The first `n` entries.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.images.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ids: self.ids[..n].to_vec(),
            n_cls: self.n_cls,
        }
    }
}

impl ImageDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, index: usize) -> Result<ImageTensor> {
        self.images
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("index {index} out of range")))
    }

    fn labels(&self, index: usize) -> &[u8] {
        &self.labels[index]
    }

    fn n_cls(&self) -> usize {
        self.n_cls
    }

    fn id(&self, index: usize) -> String {
        self.ids[index].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
    pub n_cls: usize,
}

/// Parses a manifest. Label widths must all equal `expected_n_cls`, or the width of the first
/// entry when `None`.
pub fn load_manifest(path: &Path, split: Split, expected_n_cls: Option<usize>) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path, split, expected_n_cls)
}

pub fn parse_manifest(text: &str, origin: &Path, split: Split, expected_n_cls: Option<usize>) -> Result<DatasetManifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut entries = Vec::new();
    let mut n_cls = expected_n_cls;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, bits) = line
            .rsplit_once(',')
            .ok_or_else(|| err(line_no, "expected `path,labels`".into()))?;
        let img = img.trim();
        if img.is_empty() {
            return Err(err(line_no, "empty image path".into()));
        }
        let labels = bits
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(err(line_no, format!("label character {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let width = *n_cls.get_or_insert(labels.len());
        if labels.len() != width {
            return Err(err(line_no, format!("label has {} classes, expected {width}", labels.len())));
        }
        if labels.iter().all(|&b| b == 0) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: label has no class set",
                origin.display()
            )));
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(img),
            labels,
        });
    }
    let n_cls = n_cls.ok_or_else(|| err(0, "manifest has no entries".into()))?;
    Ok(DatasetManifest { entries, split, n_cls })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = String::new();
    for e in &manifest.entries {
        let bits: String = e.labels.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        out.push_str(&format!("{},{bits}\n", e.path.display()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fails if any image path occurs in more than one manifest.
pub fn check_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen: HashSet<&Path> = HashSet::new();
    for m in manifests {
        let mut own: HashSet<&Path> = HashSet::new();
        for e in &m.entries {
            own.insert(&e.path);
        }
        if let Some(dup) = own.iter().find(|p| seen.contains(*p)) {
            return Err(Error::Validation(format!(
                "{} appears in more than one split",
                dup.display()
            )));
        }
        seen.extend(own);
    }
    Ok(())
}

/// Decodes an image file, scales its shorter side to cover `height×width` (bilinear), crops
/// the center, and scales values to `[0, 1]`. Grayscale files are replicated across channels
/// when `channels == 3`.
pub fn load_image(path: &Path, channels: usize, height: usize, width: usize) -> Result<ImageTensor> {
    let img = image::open(path)?;
    let (w0, h0) = (img.width() as f64, img.height() as f64);
    let scale = (height as f64 / h0).max(width as f64 / w0);
    let rw = ((w0 * scale).round() as u32).max(width as u32);
    let rh = ((h0 * scale).round() as u32).max(height as u32);
    let resized = img.resize_exact(rw, rh, FilterType::Triangle);
    let x0 = (rw - width as u32) / 2;
    let y0 = (rh - height as u32) / 2;
    let cropped = resized.crop_imm(x0, y0, width as u32, height as u32);
    let hwc: Vec<f32> = match channels {
        3 => cropped.to_rgb32f().into_raw(),
        1 => cropped.to_luma32f().into_raw(),
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    ImageTensor::from_hwc(channels, height, width, &hwc)
}

/// Saves an image as 8-bit PNG.
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.shape();
    let bytes: Vec<u8> = image
        .to_hwc()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let color = match c {
        3 => image::ColorType::Rgb8,
        1 => image::ColorType::L8,
        other => return Err(Error::Config(format!("cannot write {other}-channel PNG"))),
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)?;
    Ok(())
}

/// Lazily loaded manifest entries resolved against `root`.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    manifest: DatasetManifest,
    root: PathBuf,
    shape: (usize, usize, usize),
}

impl ManifestDataset {
    pub fn new(manifest: DatasetManifest, root: &Path, shape: (usize, usize, usize)) -> Self {
        Self {
            manifest,
            root: root.to_path_buf(),
            shape,
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

impl ImageDataset for ManifestDataset {
    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn image(&self, index: usize) -> Result<ImageTensor> {
        let e = &self.manifest.entries[index];
        let (c, h, w) = self.shape;
        load_image(&self.root.join(&e.path), c, h, w)
    }

    fn labels(&self, index: usize) -> &[u8] {
        &self.manifest.entries[index].labels
    }

    fn n_cls(&self) -> usize {
        self.manifest.n_cls
    }

    fn id(&self, index: usize) -> String {
        self.manifest.entries[index].path.display().to_string()
    }
}

/// Shape classes of the synthetic generator; the first three label bits.
pub const SYNTHETIC_SHAPES: [&str; 3] = ["disk", "square", "triangle"];
/// Color classes; the last three label bits.
pub const SYNTHETIC_COLORS: [&str; 3] = ["red", "green", "blue"];
pub const SYNTHETIC_N_CLS: usize = 6;

/// `n` seeded images of one colored shape on a textured background.
///
/// Image `i` gets shape class `i % 3` and color class `(i / 3) % 3`, so both label groups are
/// balanced to within one. Labels are two-hot: `[shape one-hot | color one-hot]`.
pub fn make_synthetic(n: usize, channels: usize, height: usize, width: usize, seed: u64) -> Result<InMemoryDataset> {
    if channels == 0 || height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need positive dimensions divisible by 4, got {channels}×{height}×{width}"
        )));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed::rng(seed::derive(seed, Stream::Synthetic, &[i as u64]));
        let shape = i % 3;
        let color = (i / 3) % 3;
        images.push(draw_shape(&mut rng, shape, color, channels, height, width)?);
        let mut l = vec![0u8; SYNTHETIC_N_CLS];
        l[shape] = 1;
        l[3 + color] = 1;
        labels.push(l);
    }
    let ids = (0..n).map(|i| format!("synthetic:{seed}:{i}")).collect();
    InMemoryDataset::new(images, labels, SYNTHETIC_N_CLS)?.with_ids(ids)
}

fn draw_shape(rng: &mut impl Rng, shape: usize, color: usize, c: usize, h: usize, w: usize) -> Result<ImageTensor> {
    let (hf, wf) = (h as f32, w as f32);
    // background: a random linear gradient
    let bg: Vec<f32> = (0..c).map(|_| rng.random_range(0.15..0.45)).collect();
    let gx: f32 = rng.random_range(-0.15..0.15);
    let gy: f32 = rng.random_range(-0.15..0.15);
    let size = rng.random_range(0.28..0.42) * hf.min(wf);
    let cx = rng.random_range(size..(wf - size).max(size + 1.0));
    let cy = rng.random_range(size..(hf - size).max(size + 1.0));
    let fg: Vec<f32> = if c == 3 {
        (0..3)
            .map(|ch| {
                if ch == color {
                    rng.random_range(0.8..0.95)
                } else {
                    rng.random_range(0.05..0.2)
                }
            })
            .collect()
    } else {
        let level = [0.95, 0.7, 0.05][color];
        vec![level; c]
    };
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let inside = match shape {
                0 => dx * dx + dy * dy <= size * size,
                1 => dx.abs() <= size * 0.85 && dy.abs() <= size * 0.85,
                _ => dy <= size * 0.8 && dy >= -size && dx.abs() <= (dy + size) * 0.6,
            };
            for ch in 0..c {
                let v = if inside {
                    fg[ch]
                } else {
                    bg[ch] + gx * (px / wf - 0.5) + gy * (py / hf - 0.5)
                };
                data[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(c, h, w, data)
}

/// Builds train/val/test manifests from a NUS-WIDE style distribution: an image list (one
/// path per line, `\` separators allowed) and one `Labels_<concept>.txt` file per concept
/// holding a `0`/`1` line per image. Images without any selected concept are dropped; the
/// rest are shuffled with `seed` and cut into `sizes = [train, val, test]`.
pub fn convert_nus_wide(
    image_list: &Path,
    labels_dir: &Path,
    concepts: &[String],
    sizes: [usize; 3],
    seed: u64,
    out_dir: &Path,
) -> Result<[DatasetManifest; 3]> {
    let paths: Vec<PathBuf> = std::fs::read_to_string(image_list)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| PathBuf::from(l.replace('\\', "/")))
        .collect();
    let mut labels = vec![vec![0u8; concepts.len()]; paths.len()];
    for (ci, concept) in concepts.iter().enumerate() {
        let file = labels_dir.join(format!("Labels_{concept}.txt"));
        let text = std::fs::read_to_string(&file).map_err(|_| Error::MissingArtifact(file.clone()))?;
        let values: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if values.len() != paths.len() {
            return Err(Error::Validation(format!(
                "{} has {} lines, image list has {}",
                file.display(),
                values.len(),
                paths.len()
            )));
        }
        for (row, v) in values.iter().enumerate() {
            labels[row][ci] = match *v {
                "1" => 1,
                "0" => 0,
                other => {
                    return Err(Error::Parse {
                        path: file.clone(),
                        line: row + 1,
                        msg: format!("expected 0 or 1, got {other:?}"),
                    })
                }
            };
        }
    }
    let mut keep: Vec<usize> = (0..paths.len()).filter(|&i| labels[i].contains(&1)).collect();
    let total: usize = sizes.iter().sum();
    if keep.len() < total {
        return Err(Error::Validation(format!(
            "only {} labelled images, {total} requested",
            keep.len()
        )));
    }
    keep.shuffle(&mut seed::rng(seed::derive(seed, Stream::Shuffle, &[u64::MAX])));
    let mut start = 0;
    let splits = [Split::Train, Split::Val, Split::Test];
    let manifests = splits.map(|split| {
        let n = sizes[split as usize];
        let entries = keep[start..start + n]
            .iter()
            .map(|&i| ManifestEntry {
                path: paths[i].clone(),
                labels: labels[i].clone(),
            })
            .collect();
        start += n;
        DatasetManifest {
            entries,
            split,
            n_cls: concepts.len(),
        }
    });
    for m in &manifests {
        write_manifest(&out_dir.join(format!("{}.csv", m.split)), m)?;
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_manifest_and_reports_bad_lines() {
        let bits = "0".repeat(20) + "1";
        let text = format!("# header\na/1.jpg,{bits}\nb/2.jpg,{bits}\n\nc/3.jpg,{bits}\n");
        let m = parse_manifest(&text, Path::new("m.csv"), Split::Train, Some(21)).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.n_cls, 21);
        assert_eq!(m.entries[2].path, PathBuf::from("c/3.jpg"));

        let bad = format!("a/1.jpg,{bits}\nb/2.jpg,0101\n");
        match parse_manifest(&bad, Path::new("m.csv"), Split::Train, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let zero = format!("a/1.jpg,{}\n", "0".repeat(21));
        assert!(matches!(
            parse_manifest(&zero, Path::new("m.csv"), Split::Train, Some(21)),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_manifest("a.jpg,01x\n", Path::new("m.csv"), Split::Val, None),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_manifest("nocomma\n", Path::new("m.csv"), Split::Val, None).is_err());
    }

    #[test]
    fn manifest_file_round_trip_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            entries: vec![ManifestEntry {
                path: "x/1.png".into(),
                labels: vec![1, 0, 1],
            }],
            split: Split::Test,
            n_cls: 3,
        };
        let p = dir.path().join("test.csv");
        write_manifest(&p, &m).unwrap();
        assert_eq!(load_manifest(&p, Split::Test, Some(3)).unwrap(), m);
        let other = DatasetManifest {
            split: Split::Train,
            ..m.clone()
        };
        assert!(check_disjoint(&[&m, &other]).is_err());
        let fresh = DatasetManifest {
            entries: vec![ManifestEntry {
                path: "x/2.png".into(),
                labels: vec![0, 1, 0],
            }],
            ..other
        };
        assert!(check_disjoint(&[&m, &fresh]).is_ok());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic(64, 3, 32, 32, 7).unwrap();
        let b = make_synthetic(64, 3, 32, 32, 7).unwrap();
        let c = make_synthetic(64, 3, 32, 32, 8).unwrap();
        assert_eq!(a.images(), b.images());
        assert_ne!(a.images(), c.images());
        for group in [0..3, 3..6] {
            let counts: Vec<usize> = group
                .map(|cls| (0..a.len()).filter(|&i| a.labels(i)[cls] == 1).count())
                .collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        assert!(make_synthetic(2, 3, 30, 32, 0).is_err());
    }

    #[test]
    fn image_loading_resizes_crops_and_replicates_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let gray = image::GrayImage::from_fn(40, 20, |x, _| image::Luma([(x * 6) as u8]));
        gray.save(&path).unwrap();
        let a = load_image(&path, 3, 16, 16).unwrap();
        let b = load_image(&path, 3, 16, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (3, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(a.get(0, y, x), a.get(2, y, x));
            }
        }
        assert!(load_image(&dir.path().join("missing.png"), 3, 16, 16).is_err());
    }

    #[test]
    fn nus_wide_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let list: String = (0..10).map(|i| format!("cat\\{i}.jpg\n")).collect();
        std::fs::write(dir.path().join("list.txt"), list).unwrap();
        let a: String = (0..10).map(|i| format!("{}\n", (i % 2 == 0) as u8)).collect();
        let b: String = (0..10).map(|i| format!("{}\n", (i == 3) as u8)).collect();
        std::fs::write(dir.path().join("Labels_sky.txt"), a).unwrap();
        std::fs::write(dir.path().join("Labels_dog.txt"), b).unwrap();
        let concepts = vec!["sky".to_string(), "dog".to_string()];
        let out = dir.path().join("out");
        let [tr, va, te] =
            convert_nus_wide(&dir.path().join("list.txt"), dir.path(), &concepts, [3, 1, 2], 1, &out).unwrap();
        assert_eq!((tr.entries.len(), va.entries.len(), te.entries.len()), (3, 1, 2));
        check_disjoint(&[&tr, &va, &te]).unwrap();
        assert!(tr.entries.iter().all(|e| e.path.starts_with("cat")));
        assert_eq!(load_manifest(&out.join("val.csv"), Split::Val, Some(2)).unwrap(), va);
        assert!(convert_nus_wide(&dir.path().join("list.txt"), dir.path(), &concepts, [5, 1, 1], 1, &out).is_err());
    }
}
