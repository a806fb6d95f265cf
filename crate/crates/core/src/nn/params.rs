use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Running statistics are stored here too, with `trainable = false`.
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Owns every parameter and buffer of a network, in creation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-uniform initialization for a weight with the given fan-in.
    pub fn add_he_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, value, true)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::numel).sum()
    }

    /// Number of trainable scalars whose parameter name starts with `prefix`.
    pub fn count_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(Param::numel)
            .sum()
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {:?} vs {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .params()
                .iter()
                .map(|p| if p.trainable { vec![0.0; p.numel()] } else { Vec::new() })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f32]) {
        let dst = &mut self.grads[id.0];
        if dst.is_empty() {
            return;
        }
        for (a, b) in dst.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.grads.iter().map(Vec::as_slice)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}
