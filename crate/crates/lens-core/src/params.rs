//! Named parameter tensors with gradient slots and the finite-difference
//! gradient checker used to verify every backward rule end to end.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Normal { std: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
}

/// Ordered collection of named parameters. Declaration order is the
/// serialisation order for checkpoints, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha12Rng) {
        assert!(!self.index.contains_key(name), "duplicate parameter '{name}'");
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal { std } => Tensor::randn(shape, std, rng),
        };
        let grad = Tensor::zeros(shape);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, init });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| CoreError::UnknownParameter { name: name.to_string() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(CoreError::UnknownParameter { name: name.to_string() }),
        }
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].grad)
            .ok_or_else(|| CoreError::UnknownParameter { name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Gradient accumulation is additive across steps; the trainer zeroes
    /// between updates.
    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulate this tape's leaf gradients into the store.
    pub fn accumulate_from(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (name, &var) in &bound.vars {
            let g = tape.grad(var);
            let i = self.index[name];
            for (dst, src) in self.entries[i].grad.data.iter_mut().zip(&g.data) {
                *dst += src;
            }
        }
        Ok(())
    }
}

/// Tape leaves for every parameter of one forward pass.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn bind_all(store: &ParameterStore, tape: &mut Tape) -> Self {
        let mut vars = HashMap::with_capacity(store.entries.len());
        for e in &store.entries {
            vars.insert(e.name.clone(), tape.leaf(&e.value));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::UnknownParameter { name: name.to_string() })
    }
}

/// Central-difference gradient check over every entry of every parameter.
///
/// `build` must be deterministic in the store contents. Returns the max over
/// all entries of |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(store: &mut ParameterStore, step: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &BoundParams) -> Result<Var>,
{
    let eval = |store: &ParameterStore, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(store, &mut tape);
        let loss = build(&mut tape, &bound)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(CoreError::NonFinite { op: "grad_check loss" });
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let bound = BoundParams::bind_all(store, &mut tape);
    let loss = build(&mut tape, &bound)?;
    if !tape.scalar_value(loss).is_finite() {
        return Err(CoreError::NonFinite { op: "grad_check loss" });
    }
    tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .names()
        .map(|n| (n.to_string(), tape.grad(bound.var(n).unwrap()).data))
        .collect();
    drop(tape);

    let mut max_rel = 0.0f64;
    for (name, grads) in &analytic {
        let numel = store.get(name)?.numel();
        for i in 0..numel {
            let orig = store.get(name)?.data[i];
            store.get_mut(name)?.data[i] = orig + step;
            let fp = eval(store, &mut build)?;
            store.get_mut(name)?.data[i] = orig - step;
            let fm = eval(store, &mut build)?;
            store.get_mut(name)?.data[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grads[i];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Deterministic RNG for parameter init, keyed by (seed, stream label).
pub fn init_rng(seed: u64, label: &str) -> ChaCha12Rng {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(key)
}
