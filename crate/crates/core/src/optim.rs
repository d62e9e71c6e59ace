//! Adam with checkpointable moment state.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    /// Only the listed parameters are ever updated.
    pub fn new(params: Vec<(String, Var)>, lr: f64) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            tensors.insert(format!("m.{name}"), self.m[i].clone());
            tensors.insert(format!("v.{name}"), self.v[i].clone());
        }
        let device = self.m.first().map(|t| t.device().clone()).unwrap_or(candle_core::Device::Cpu);
        tensors.insert("step".into(), Tensor::new(&[self.step as f64], &device)?);
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let device = self.m.first().map(|t| t.device().clone()).unwrap_or(candle_core::Device::Cpu);
        let mut tensors = candle_core::safetensors::load(path, &device)?;
        let take = |tensors: &mut HashMap<String, Tensor>, key: &str| {
            tensors
                .remove(key)
                .ok_or_else(|| Error::Corruption(format!("optimizer state lacks {key}")))
        };
        for (i, (name, var)) in self.params.iter().enumerate() {
            self.m[i] = take(&mut tensors, &format!("m.{name}"))?.to_dtype(var.dtype())?;
            self.v[i] = take(&mut tensors, &format!("v.{name}"))?.to_dtype(var.dtype())?;
        }
        let step = take(&mut tensors, "step")?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        self.step = step.first().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let a = Var::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let frozen = Var::new(&[3.0f64], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("a".into(), a.clone())], 0.1).unwrap();
        let loss = (a.as_tensor().sqr().unwrap().sum_all().unwrap()
            + frozen.as_tensor().sqr().unwrap().sum_all().unwrap())
        .unwrap();
        opt.backward_step(&loss).unwrap();
        let v = a.as_tensor().to_vec1::<f64>().unwrap();
        for (after, before) in v.iter().zip([1.0, -2.0, 0.5]) {
            assert!((after - (before - 0.1 * f64::signum(before))).abs() < 1e-6);
        }
        assert_eq!(frozen.as_tensor().to_vec1::<f64>().unwrap(), vec![3.0]);
    }

    #[test]
    fn state_round_trip_gives_identical_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let run = |resume: bool| -> Vec<f64> {
            let a = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
            let mut opt = Adam::new(vec![("a".into(), a.clone())], 0.05).unwrap();
            let step = |opt: &mut Adam| {
                let loss = a.as_tensor().powf(4.0).unwrap().sum_all().unwrap();
                opt.backward_step(&loss).unwrap();
            };
            for _ in 0..3 {
                step(&mut opt);
            }
            if resume {
                let path = dir.path().join("adam.safetensors");
                opt.save_state(&path).unwrap();
                let mut fresh = Adam::new(vec![("a".into(), a.clone())], 0.05).unwrap();
                fresh.load_state(&path).unwrap();
                opt = fresh;
            }
            for _ in 0..3 {
                step(&mut opt);
            }
            a.as_tensor().to_vec1::<f64>().unwrap()
        };
        assert_eq!(run(false), run(true));
    }
}
