//! Adapter layers: pairing of down/up projection tensors from tensor files,
//! reconstruction of the dense update, and low-rank folding of merges.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{self, Entry, TensorFile};
use crate::tensor::{column_scale, matmul, Tensor};

const DOWN_SUFFIX: &str = ".lora.down.weight";
const UP_SUFFIX: &str = ".lora.up.weight";
const DOWN_ALIAS: &str = ".lora_A.weight";
const UP_ALIAS: &str = ".lora_B.weight";
const ALPHA_SUFFIX: &str = ".alpha";

/// One low-rank adapter layer: `delta = (alpha / rank) · up · down`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    name: String,
    down: Tensor,
    up: Tensor,
    alpha: f32,
}

impl LoraLayer {
    /// `down` is `r×n`, `up` is `m×r`; requires `r ≤ min(m, n)` and a
    /// positive finite `alpha`.
    pub fn new(name: impl Into<String>, down: Tensor, up: Tensor, alpha: f32) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidLayer {
            key: name.clone(),
            reason,
        };
        if !down.is_matrix() || !up.is_matrix() {
            return Err(invalid(format!(
                "down {:?} and up {:?} must both be 2-D",
                down.shape(),
                up.shape()
            )));
        }
        if down.rows() != up.cols() {
            return Err(invalid(format!(
                "down has {} rows but up has {} columns",
                down.rows(),
                up.cols()
            )));
        }
        let rank = down.rows();
        if rank > up.rows().min(down.cols()) {
            return Err(invalid(format!(
                "rank {rank} exceeds min(m, n) = {}",
                up.rows().min(down.cols())
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(invalid(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self {
            name,
            down,
            up,
            alpha,
        })
    }

    /// Same as [`LoraLayer::new`] with `alpha = rank`, i.e. unit scale.
    pub fn unscaled(name: impl Into<String>, down: Tensor, up: Tensor) -> Result<Self> {
        let rank = down.shape().first().copied().unwrap_or(0) as f32;
        Self::new(name, down, up, rank)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    /// Output dimension `m`.
    pub fn rows(&self) -> usize {
        self.up.rows()
    }

    /// Input dimension `n`.
    pub fn cols(&self) -> usize {
        self.down.cols()
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank() as f32
    }

    /// `(rows, cols)` of the dense update.
    pub fn delta_shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// Dense update `(alpha / rank) · up · down`.
pub fn delta_weight(layer: &LoraLayer) -> Tensor {
    let product = matmul(layer.up(), layer.down()).expect("layer invariants guarantee shapes");
    let scale = layer.scale();
    if scale == 1.0 {
        product
    } else {
        product.scale(scale)
    }
}

/// Folds `m_c ⊗ ΔW_c + m_s ⊗ ΔW_s` into a single layer of rank `r_c + r_s`.
///
/// Each `up` block is pre-scaled by its `alpha / rank`, so the result has
/// `alpha = rank` and its delta is exactly the column-scaled sum.
pub fn fold_merged(
    content: &LoraLayer,
    style: &LoraLayer,
    m_c: &Tensor,
    m_s: &Tensor,
) -> Result<LoraLayer> {
    if content.delta_shape() != style.delta_shape() {
        let (a, b) = (content.delta_shape(), style.delta_shape());
        return Err(Error::dim("fold_merged", &[a.0, a.1], &[b.0, b.1]));
    }
    let up = Tensor::hstack(
        &scaled_up(content),
        &scaled_up(style),
    )?;
    let down = Tensor::vstack(
        &column_scale(content.down(), m_c)?,
        &column_scale(style.down(), m_s)?,
    )?;
    LoraLayer::unscaled(content.name(), down, up)
}

fn scaled_up(layer: &LoraLayer) -> Tensor {
    let scale = layer.scale();
    if scale == 1.0 {
        layer.up().clone()
    } else {
        layer.up().scale(scale)
    }
}

/// A set of adapter layers keyed by canonical base name, plus the free-form
/// metadata carried in the file header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoraModel {
    pub layers: BTreeMap<String, LoraLayer>,
    pub metadata: BTreeMap<String, String>,
}

impl LoraModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a layer under its own name, replacing any previous one.
    pub fn insert(&mut self, layer: LoraLayer) {
        self.layers.insert(layer.name().to_string(), layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&LoraLayer> {
        self.layers.get(key)
    }

    /// Canonical tensor-file representation.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile {
            metadata: self.metadata.clone(),
            ..TensorFile::default()
        };
        for (key, layer) in &self.layers {
            file.tensors.insert(
                format!("{key}{DOWN_SUFFIX}"),
                Entry::f32(layer.down.shape().to_vec(), layer.down.data().to_vec()),
            );
            file.tensors.insert(
                format!("{key}{UP_SUFFIX}"),
                Entry::f32(layer.up.shape().to_vec(), layer.up.data().to_vec()),
            );
            file.tensors
                .insert(format!("{key}{ALPHA_SUFFIX}"), Entry::f32(vec![], vec![layer.alpha]));
        }
        file
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(&self.to_tensor_file()).expect("model tensors are self-consistent")
    }

    /// Hex SHA-256 of the canonical file bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Joins down/up pairs from a decoded tensor file. Returns the model and
    /// the names of tensors that matched no pairing rule.
    pub fn from_tensor_file(file: TensorFile) -> Result<(Self, Vec<String>)> {
        #[derive(Default)]
        struct Parts {
            down: Option<(String, Entry)>,
            up: Option<(String, Entry)>,
            alpha: Option<(String, Entry)>,
        }

        let mut parts: BTreeMap<String, Parts> = BTreeMap::new();
        let mut skipped = Vec::new();
        for (name, entry) in file.tensors {
            let classified = [
                (DOWN_SUFFIX, 0),
                (DOWN_ALIAS, 0),
                (UP_SUFFIX, 1),
                (UP_ALIAS, 1),
                (ALPHA_SUFFIX, 2),
            ]
            .iter()
            .find_map(|&(suffix, slot)| {
                name.strip_suffix(suffix)
                    .filter(|base| !base.is_empty())
                    .map(|base| (base.to_string(), slot))
            });
            let Some((base, slot)) = classified else {
                skipped.push(name);
                continue;
            };
            let p = parts.entry(base.clone()).or_default();
            let target = match slot {
                0 => &mut p.down,
                1 => &mut p.up,
                _ => &mut p.alpha,
            };
            if let Some((previous, _)) = target {
                return Err(Error::Pairing {
                    key: base,
                    reason: format!("both {previous} and {name} are present"),
                });
            }
            *target = Some((name, entry));
        }

        let mut model = LoraModel {
            layers: BTreeMap::new(),
            metadata: file.metadata,
        };
        for (base, p) in parts {
            let (down, up) = match (p.down, p.up) {
                (Some(d), Some(u)) => (d, u),
                (None, None) => {
                    // A bare `<base>.alpha` with no projections belongs to
                    // nothing we understand.
                    if let Some((name, _)) = p.alpha {
                        skipped.push(name);
                    }
                    continue;
                }
                (Some((name, _)), None) => {
                    return Err(Error::Pairing {
                        key: base,
                        reason: format!("{name} has no matching up projection"),
                    })
                }
                (None, Some((name, _))) => {
                    return Err(Error::Pairing {
                        key: base,
                        reason: format!("{name} has no matching down projection"),
                    })
                }
            };
            let down = entry_tensor(&base, down)?;
            let up = entry_tensor(&base, up)?;
            let alpha = match p.alpha {
                None => down.shape()[0] as f32,
                Some((name, entry)) => {
                    if entry.values.len() != 1 || entry.shape.len() > 1 {
                        return Err(Error::InvalidLayer {
                            key: base,
                            reason: format!("{name} must be a scalar, got shape {:?}", entry.shape),
                        });
                    }
                    entry.values[0]
                }
            };
            model.insert(LoraLayer::new(base, down, up, alpha)?);
        }
        Ok((model, skipped))
    }
}

fn entry_tensor(base: &str, (name, entry): (String, Entry)) -> Result<Tensor> {
    if entry.shape.len() != 2 {
        return Err(Error::InvalidLayer {
            key: base.to_string(),
            reason: format!("{name} must be 2-D, got shape {:?}", entry.shape),
        });
    }
    Tensor::new(entry.shape, entry.values).map_err(|e| Error::InvalidLayer {
        key: base.to_string(),
        reason: format!("{name}: {e}"),
    })
}

/// Reads an adapter file and returns the model with the list of tensors
/// that were skipped because no pairing rule applied.
pub fn read_lora_detailed(path: &Path) -> Result<(LoraModel, Vec<String>)> {
    let (model, skipped) = LoraModel::from_tensor_file(format::read_file(path)?)?;
    for name in &skipped {
        log::warn!("{}: skipping unpaired tensor {name}", path.display());
    }
    Ok((model, skipped))
}

pub fn read_lora(path: &Path) -> Result<LoraModel> {
    read_lora_detailed(path).map(|(model, _)| model)
}

/// Writes the canonical encoding of `model`.
pub fn write_lora(model: &LoraModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}
