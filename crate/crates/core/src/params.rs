//! Named parameter storage and lazy graph binding.
//!
//! A `ParamStore` owns every weight of one model as named arrays. A
//! `Session` wraps one differentiation graph plus up to two stores (a
//! trainable main bank and an optional frozen auxiliary bank); parameters
//! become graph leaves only when a forward pass actually touches them, so
//! the set of bound names doubles as an exact record of which weights a
//! computation read.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VoxError};
use crate::tensor::array::Array;
use crate::tensor::element::Element;
use crate::tensor::graph::{Graph, TensorId};

#[derive(Debug)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<Array<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Array<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(VoxError::config(format!("duplicate parameter name {name:?}")));
        }
        let ix = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), ix);
        Ok(ix)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, ix: usize) -> &str {
        &self.names[ix]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        let ix = self
            .index_of(name)
            .ok_or_else(|| VoxError::config(format!("unknown parameter {name:?}")))?;
        Ok(&self.values[ix])
    }

    pub fn value(&self, ix: usize) -> &Array<T> {
        &self.values[ix]
    }

    pub fn value_mut(&mut self, ix: usize) -> &mut Array<T> {
        &mut self.values[ix]
    }

    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let ix = self
            .index_of(name)
            .ok_or_else(|| VoxError::config(format!("unknown parameter {name:?}")))?;
        if value.shape() != self.values[ix].shape() {
            return Err(VoxError::shape(format!(
                "parameter {name:?}: new shape {:?} differs from {:?}",
                value.shape(),
                self.values[ix].shape()
            )));
        }
        self.values[ix] = value;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.map(|x| U::from_f64(x.to_f64()))).collect(),
            index: self.index.clone(),
        }
    }

    /// Snapshot of all values, in index order.
    pub fn clone_values(&self) -> Vec<Array<T>> {
        self.values.clone()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }
}

// ---- initializers ----
// Samples are rounded through f32 so an f32 store and an f64 store built
// from the same seed hold the identical numeric points.

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn init_normal<T: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Array<T> {
    Array::from_fn(shape, |_| {
        let raw: f64 = StandardNormal.sample(rng);
        T::from_f64(round32(raw * std))
    })
}

/// Kaiming-style initialization for convolutions and linear maps.
pub fn init_he<T: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Array<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    init_normal(rng, shape, std)
}

pub fn init_zeros<T: Element>(shape: Vec<usize>) -> Array<T> {
    Array::zeros(shape)
}

pub fn init_ones<T: Element>(shape: Vec<usize>) -> Array<T> {
    Array::full(shape, T::ONE)
}

// ---- session ----

/// Handle to one parameter bank inside a `Session`. The first bank
/// (created by `Session::new`) is `Bank::MAIN`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bank(pub usize);

impl Bank {
    pub const MAIN: Bank = Bank(0);
}

struct StoreRef<'p, T: Element> {
    store: &'p ParamStore<T>,
    trainable: bool,
    bound: HashMap<usize, TensorId>,
}

pub struct Session<'p, T: Element> {
    pub g: Graph<T>,
    banks: Vec<StoreRef<'p, T>>,
}

impl<'p, T: Element> Session<'p, T> {
    pub fn new(store: &'p ParamStore<T>, trainable: bool) -> Self {
        let mut s = Session {
            g: Graph::new(),
            banks: Vec::new(),
        };
        s.add_bank(store, trainable);
        s
    }

    /// Registers an additional store; returns its bank handle.
    pub fn add_bank(&mut self, store: &'p ParamStore<T>, trainable: bool) -> Bank {
        self.banks.push(StoreRef {
            store,
            trainable,
            bound: HashMap::new(),
        });
        Bank(self.banks.len() - 1)
    }

    fn bank_ref(&self, bank: Bank) -> Result<&StoreRef<'p, T>> {
        self.banks
            .get(bank.0)
            .ok_or_else(|| VoxError::config(format!("session has no bank {}", bank.0)))
    }

    /// Binds a named parameter as a graph leaf (once; later calls reuse it).
    pub fn param(&mut self, bank: Bank, name: &str) -> Result<TensorId> {
        let g = &mut self.g;
        let bref = self
            .banks
            .get_mut(bank.0)
            .ok_or_else(|| VoxError::config(format!("session has no bank {}", bank.0)))?;
        let ix = bref
            .store
            .index_of(name)
            .ok_or_else(|| VoxError::config(format!("unknown parameter {name:?}")))?;
        if let Some(&id) = bref.bound.get(&ix) {
            return Ok(id);
        }
        let id = g.leaf(bref.store.value(ix).clone(), bref.trainable);
        bref.bound.insert(ix, id);
        Ok(id)
    }

    /// Bound (parameter index, leaf id) pairs, sorted by index.
    pub fn bound(&self, bank: Bank) -> Vec<(usize, TensorId)> {
        let bref = match self.bank_ref(bank) {
            Ok(b) => b,
            Err(_) => return Vec::new(),
        };
        let mut v: Vec<(usize, TensorId)> = bref.bound.iter().map(|(&i, &t)| (i, t)).collect();
        v.sort_unstable_by_key(|&(i, _)| i);
        v
    }

    /// Names of every parameter this session has read, sorted.
    pub fn bound_names(&self, bank: Bank) -> Vec<String> {
        let bref = match self.bank_ref(bank) {
            Ok(b) => b,
            Err(_) => return Vec::new(),
        };
        let mut v: Vec<String> = bref
            .bound
            .keys()
            .map(|&i| bref.store.name(i).to_string())
            .collect();
        v.sort();
        v
    }

    /// After `backward`: gradients of the bank's bound parameters, sorted
    /// by parameter index. Missing grads (parameter unreachable from the
    /// loss) come back as zeros.
    pub fn grad_pairs(&mut self, bank: Bank) -> Result<Vec<(usize, Array<T>)>> {
        let pairs = self.bound(bank);
        if !self.bank_ref(bank)?.trainable {
            return Err(VoxError::config("grad_pairs requested from a frozen bank"));
        }
        let mut out = Vec::with_capacity(pairs.len());
        for (ix, id) in pairs {
            let g = match self.g.grad(id) {
                Some(a) => a.clone(),
                None => Array::zeros(self.g.shape(id).to_vec()),
            };
            out.push((ix, g));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("w", Array::zeros(vec![2])).unwrap();
        assert!(s.add("w", Array::zeros(vec![2])).is_err());
    }

    #[test]
    fn init_is_reproducible_and_f32_representable() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: Array<f64> = init_he(&mut r1, vec![4, 3], 3);
        let b: Array<f32> = init_he(&mut r2, vec![4, 3], 3);
        for (&x, &y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(x, y as f64);
        }
    }

    #[test]
    fn session_binds_each_param_once_and_tracks_names() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("a", Array::full(vec![2], 1.5)).unwrap();
        store.add("b", Array::full(vec![2], 2.5)).unwrap();
        let mut sess = Session::new(&store, true);
        let a1 = sess.param(Bank::MAIN, "a").unwrap();
        let a2 = sess.param(Bank::MAIN, "a").unwrap();
        assert_eq!(a1, a2);
        assert_eq!(sess.bound_names(Bank::MAIN), vec!["a".to_string()]);
        let s = sess.g.sum_all(a1);
        sess.g.backward(s).unwrap();
        let grads = sess.grad_pairs(Bank::MAIN).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[1.0, 1.0]);
    }
}
