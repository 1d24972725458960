use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Normal with mean 0 and standard deviation 0.02.
    Embedding,
    /// Standard normal; used for tables whose rows feed the atom logits directly.
    UnitNormal,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegistry {
    seed: u64,
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter with an explicit value. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new(-a, a);
                let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
                Tensor::new(rows, cols, data)?
            }
            Init::Embedding => {
                let dist = Normal::new(0.0, 0.02).expect("valid normal");
                let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
                Tensor::new(rows, cols, data)?
            }
            Init::UnitNormal => {
                let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::new(rows, cols, data)?
            }
            Init::Zeros => Tensor::zeros(rows, cols),
        };
        self.insert(name, value)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value.clone_from(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = ParamRegistry::new(0);
        reg.insert("w", Tensor::zeros(1, 1)).unwrap();
        assert!(reg.insert("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut reg = ParamRegistry::new(3);
            reg.init("a", 4, 5, Init::Xavier, &mut rng).unwrap();
            reg.init("b", 3, 2, Init::Embedding, &mut rng).unwrap();
            reg
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        let names: Vec<_> = a.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn xavier_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = ParamRegistry::new(1);
        let id = reg.init("w", 10, 14, Init::Xavier, &mut rng).unwrap();
        let a = (6.0f64 / 24.0).sqrt();
        assert!(reg.value(id).data().iter().all(|x| x.abs() < a));
    }
}
