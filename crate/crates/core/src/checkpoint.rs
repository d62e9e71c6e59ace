//! Named parameter storage, deterministic initialization, checksums, and checkpoint files.
//!
//! A checkpoint is a pair of files sharing a stem: `<stem>.safetensors` holding the parameter
//! tensors and `<stem>.toml` holding a [`CheckpointMeta`] record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// A set of named trainable tensors.
#[derive(Clone)]
pub struct ParamStore {
    map: VarMap,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.names())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            map: VarMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_varmap(&self.map, self.dtype, &self.device)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn names(&self) -> Vec<String> {
        self.named_vars().into_iter().map(|(n, _)| n).collect()
    }

    /// All parameters sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.map.data().lock().expect("parameter map lock poisoned");
        let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Re-draws every parameter from a seeded generator.
    ///
    /// Rules by name: `running_mean` → 0, `running_var` → 1, `proxies` → N(0, 1), tensors of
    /// rank ≥ 2 → U(±1/√fan_in) with fan_in the product of all but the first dimension,
    /// rank-1 tensors under an `act*` scope (PReLU slopes) → 0.25, other rank-1 `weight` → 1,
    /// and biases → 0.
    pub fn reinit(&self, seed: u64) -> Result<()> {
        for (name, var) in self.named_vars() {
            let dims = var.dims().to_vec();
            let n = var.elem_count();
            let mut rng = seed::rng(seed::derive(seed, Stream::Init, &[name_tag(&name)]));
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let scope = name.rsplit('.').nth(1).unwrap_or("");
            let values: Vec<f64> = if leaf == "running_mean" {
                vec![0.0; n]
            } else if leaf == "running_var" {
                vec![1.0; n]
            } else if leaf == "proxies" {
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            } else if dims.len() >= 2 {
                let fan_in: usize = dims[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if scope.starts_with("act") {
                vec![0.25; n]
            } else if leaf == "weight" {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            let t = Tensor::from_vec(values, dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and values, as lowercase hex.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.map.save(path)?;
        Ok(())
    }

    /// Loads values into the existing parameters; every parameter must be present in the file.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        self.map.load(path)?;
        Ok(())
    }

    /// Copies values of every parameter under `from` into the parameter with the same suffix
    /// under `to` in `dst`.
    pub fn copy_prefix_into(&self, from: &str, dst: &ParamStore, to: &str) -> Result<()> {
        for (name, var) in self.vars_with_prefix(from) {
            let target = format!("{to}{}", &name[from.len()..]);
            let dst_vars = dst.named_vars();
            let (_, dst_var) = dst_vars
                .iter()
                .find(|(n, _)| *n == target)
                .ok_or_else(|| Error::Config(format!("no parameter named {target}")))?;
            dst_var.set(&var.as_tensor().to_dtype(dst.dtype)?)?;
        }
        Ok(())
    }
}

fn name_tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Sidecar record stored next to every parameter file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// What the parameters belong to, e.g. `df-chain` or `dhd`.
    pub kind: String,
    pub epoch: Option<usize>,
    pub seed: u64,
    pub checksum: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub config: toml::Table,
}

impl CheckpointMeta {
    pub fn new(kind: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_owned(),
            epoch: None,
            seed,
            checksum: String::new(),
            metrics: BTreeMap::new(),
            config: toml::Table::new(),
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        match toml::Value::try_from(config)? {
            toml::Value::Table(t) => self.config = t,
            other => {
                return Err(Error::Metadata(format!("config serialized to a non-table value: {other}")))
            }
        }
        Ok(self)
    }

    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(toml::Value::Table(self.config.clone()).try_into()?)
    }
}

pub fn weights_path(stem: &Path) -> PathBuf {
    stem.with_extension("safetensors")
}

pub fn meta_path(stem: &Path) -> PathBuf {
    stem.with_extension("toml")
}

/// Writes `<stem>.safetensors` and `<stem>.toml`; the stored checksum is recomputed here.
pub fn save_checkpoint(stem: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    store.save(&weights_path(stem))?;
    let mut meta = meta.clone();
    meta.checksum = store.checksum()?;
    std::fs::write(meta_path(stem), toml::to_string(&meta)?)?;
    Ok(())
}

pub fn read_meta(stem: &Path) -> Result<CheckpointMeta> {
    let path = meta_path(stem);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
}

/// Loads parameters into `store` and verifies the checksum recorded in the sidecar.
pub fn load_checkpoint(stem: &Path, store: &mut ParamStore) -> Result<CheckpointMeta> {
    let meta = read_meta(stem)?;
    store.load(&weights_path(stem))?;
    let actual = store.checksum()?;
    if !meta.checksum.is_empty() && actual != meta.checksum {
        return Err(Error::Corruption(format!(
            "checksum mismatch for {}: expected {}, found {actual}",
            stem.display(),
            meta.checksum
        )));
    }
    Ok(meta)
}
