use indexmap::IndexMap;
use rand::Rng;

use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    /// False for running statistics.
    pub trainable: bool,
}

/// Named parameter tensors in construction order. Keys follow
/// `block{i}.{branch}.{tensor}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Panics on a duplicate key: key sets are fixed by the block spec,
    /// so a collision is a construction bug.
    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        let key = key.into();
        let prev = self
            .entries
            .insert(key.clone(), Param { tensor, trainable });
        assert!(prev.is_none(), "duplicate parameter key {key}");
    }

    pub fn get(&self, key: &str) -> Option<&Param<T>> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Keeps only keys starting with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual conv default.
pub(crate) fn conv_weight<T: Element, R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let bound = 1.0 / fan_in.sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub(crate) fn conv_bias<T: Element, R: Rng + ?Sized>(
    c_out: usize,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(Shape::new(1, c_out, 1, 1), -bound, bound, rng)
}

pub(crate) fn channel_vec<T: Element>(c: usize, v: f64) -> Tensor<T> {
    Tensor::full(Shape::new(1, c, 1, 1), T::from_f64(v))
}
