//! Named trainable parameters and the seeded noise generator.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Precision};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Every trainable tensor of a model, keyed by unique name, iterated in
/// insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    precision: Precision,
    params: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new(precision: Precision) -> Self {
        ParameterStore {
            precision,
            params: IndexMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, mut value: Vec<f64>) -> Result<()> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::contract(format!(
                "parameter `{name}` has {} values for shape {rows}x{cols}",
                value.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.precision.round_slice(&mut value);
        let grad = vec![0.0; value.len()];
        self.params.insert(name.to_string(), Param { rows, cols, value, grad });
        Ok(())
    }

    /// Uniform in `±1/sqrt(fan_in)` where `fan_in` is the column count.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (cols as f64).sqrt();
        let value = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, rows, cols, value)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.values().map(Param::len).sum()
    }

    /// Overwrites a parameter's values, rounding to the store precision.
    pub fn set(&mut self, name: &str, mut value: Vec<f64>) -> Result<()> {
        let precision = self.precision;
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if value.len() != p.value.len() {
            return Err(Error::contract(format!(
                "parameter `{name}` expects {} values, got {}",
                p.value.len(),
                value.len()
            )));
        }
        precision.round_slice(&mut value);
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the adjoints of every parameter bound into `graph`.
    pub fn absorb_grads(&mut self, graph: &Graph) {
        for (var, name) in graph.param_leaves() {
            if let Some(p) = self.params.get_mut(name) {
                for (acc, g) in p.grad.iter_mut().zip(graph.grad(*var)) {
                    *acc += g;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if max_norm > 0.0 && norm > max_norm {
            let k = max_norm / norm;
            for p in self.params.values_mut() {
                p.grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        norm
    }
}

/// Seeded source of standard-normal samples.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Restores a generator that has already produced output up to `word_pos`.
    pub fn resume(seed: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        NoiseSource { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new(Precision::F64);
        s.insert_zeros("w", 2, 2).unwrap();
        assert!(s.insert_zeros("w", 2, 2).is_err());
        assert!(s.insert("x", 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn noise_streams_repeat_by_seed() {
        let a = NoiseSource::new(11).standard_normal(64);
        let b = NoiseSource::new(11).standard_normal(64);
        let c = NoiseSource::new(12).standard_normal(64);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, c);
    }

    #[test]
    fn noise_resumes_mid_stream() {
        let mut n = NoiseSource::new(3);
        n.standard_normal(10);
        let mut r = NoiseSource::resume(3, n.word_pos());
        assert_eq!(n.standard_normal(5), r.standard_normal(5));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParameterStore::new(Precision::F64);
        s.insert_zeros("w", 1, 2).unwrap();
        s.get_mut("w").unwrap().grad = vec![3.0, 4.0];
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
    }
}
