//! Adam with inspectable state so it can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::harness::config::AdamConfig;
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.first_moment.get(name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.second_moment.get(name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.cfg.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.first_moment.insert(name.clone(), m);
            self.second_moment.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_learning_rate() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let w = store.builder(0).param("w", &[3], Init::Const(1.0))?;
        let target = Tensor::new(&[0.0f64, 2.0, 1.0], &Device::Cpu)?;
        let loss = (&w - &target)?.sqr()?.sum_all()?;
        let grads = loss.backward()?;
        let mut adam = Adam::new(0.1, AdamConfig::default());
        adam.step(&store, &grads)?;
        let v = store.get("w").unwrap().as_tensor().to_vec1::<f64>()?;
        // bias-corrected first step is lr * sign(g) (up to eps)
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-6);
        assert_eq!(v[2], 1.0);
        assert_eq!(adam.step, 1);
        Ok(())
    }

    #[test]
    fn minimizes_a_quadratic() -> Result<()> {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let w = store.builder(0).param("w", &[2], Init::Const(3.0))?;
        let mut adam = Adam::new(0.05, AdamConfig::default());
        for _ in 0..500 {
            let grads = w.sqr()?.sum_all()?.backward()?;
            adam.step(&store, &grads)?;
        }
        let v = w.to_vec1::<f64>()?;
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
        Ok(())
    }
}
