use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square convolution with "same" padding for odd `k`.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_he_uniform(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k, rng);
        let bias = store.add(format!("{name}.bias"), vec![cout], vec![0.0; cout], true);
        Self {
            name: name.to_string(),
            weight,
            bias: Some(bias),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    /// Closed-form trainable scalar count: `cin * cout * k^2 + cout`.
    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.k * self.k + if self.bias.is_some() { self.cout } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-channel batch statistics with running averages for evaluation.
    #[default]
    Batch,
    /// Per-sample statistics over channel groups.
    Group,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub kind: NormKind,
    pub channels: usize,
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: NormKind) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![channels], vec![1.0; channels], true);
        let beta = store.add(format!("{name}.beta"), vec![channels], vec![0.0; channels], true);
        let running_mean = store.add(format!("{name}.running_mean"), vec![channels], vec![0.0; channels], false);
        let running_var = store.add(format!("{name}.running_var"), vec![channels], vec![1.0; channels], false);
        Self {
            name: name.to_string(),
            kind,
            channels,
            groups: group_count(channels),
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Largest of 8, 4, 2, 1 that divides `channels`.
fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}
