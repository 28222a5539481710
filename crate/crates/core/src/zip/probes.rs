//! Seeded Gaussian probe activations standing in for the inputs a layer
//! sees during generation. Each layer and role gets its own stream, so
//! probes regenerate bit-identically from `(seed, key, role, n, k)` alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROBES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Content,
    Style,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Content => "content",
            Role::Style => "style",
        }
    }
}

/// Content and style probe matrices for one layer, each `n×k` row-major.
/// Row `j` is the activation seen by input column `j` of the update.
/// `k = 0` is allowed and makes every preservation term vanish.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerProbes {
    n: usize,
    k: usize,
    content: Vec<f32>,
    style: Vec<f32>,
}

/// Deterministic generator seed for one probe stream.
pub fn stream_seed(seed: u64, key: &str, tag: &str, n: usize, k: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update((n as u64).to_le_bytes());
    h.update((k as u64).to_le_bytes());
    h.finalize().into()
}

fn gaussian(seed: [u8; 32], len: usize) -> Vec<f32> {
    let mut rng = ChaCha20Rng::from_seed(seed);
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

impl LayerProbes {
    pub fn new(n: usize, k: usize, content: Vec<f32>, style: Vec<f32>) -> Result<Self> {
        if content.len() != n * k || style.len() != n * k {
            return Err(Error::InvalidArgument(format!(
                "probe matrices must hold {n}×{k} values, got {} and {}",
                content.len(),
                style.len()
            )));
        }
        if content.iter().chain(&style).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("probe values must be finite".into()));
        }
        Ok(Self { n, k, content, style })
    }

    /// Independent standard-normal content and style probes for `key`.
    pub fn generate(seed: u64, key: &str, n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            content: gaussian(stream_seed(seed, key, Role::Content.as_str(), n, k), n * k),
            style: gaussian(stream_seed(seed, key, Role::Style.as_str(), n, k), n * k),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, role: Role) -> &[f32] {
        match role {
            Role::Content => &self.content,
            Role::Style => &self.style,
        }
    }

    pub(crate) fn f64(&self, role: Role) -> Vec<f64> {
        self.get(role).iter().map(|&v| f64::from(v)).collect()
    }
}

/// Probe matrices for every layer of a merge, drawn from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub seed: u64,
    pub probes_per_layer: usize,
    pub layers: BTreeMap<String, LayerProbes>,
}

impl ProbeSet {
    /// Generates probes for each `(key, n)` pair.
    pub fn generate<'a>(
        seed: u64,
        probes_per_layer: usize,
        layers: impl IntoIterator<Item = (&'a str, usize)>,
    ) -> Self {
        let layers = layers
            .into_iter()
            .map(|(key, n)| (key.to_string(), LayerProbes::generate(seed, key, n, probes_per_layer)))
            .collect();
        Self {
            seed,
            probes_per_layer,
            layers,
        }
    }
}
