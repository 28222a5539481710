//! Merging a content adapter with a style adapter.
//!
//! [`direct_merge`] sums the two updates with scalar weights. [`zip_merge`]
//! learns a coefficient per input column for each adapter, trading how well
//! the merged layer reproduces each adapter on probe activations against
//! the overlap `|m_c·m_s|` of the coefficient vectors, then folds the result
//! back into a low-rank layer. The learned coefficients can be re-applied
//! with a scaled style side by [`style_strength`].

pub mod objective;
pub mod optimizer;
pub mod probes;
pub mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::format::{self, Entry, TensorFile};
use crate::lora::{delta_weight, fold_merged, LoraLayer, LoraModel};
use crate::tensor::{cosine_f64, gemm_f64, Tensor};

pub use objective::{loss_gradient, surrogate_loss, Objective, QuadraticObjective, ResidualObjective};
pub use optimizer::{merger_cosine, optimize, OptimizerConfig, Trajectory};
pub use probes::{LayerProbes, ProbeSet, Role};
pub use report::{LayerReport, MergeReport};

pub const META_PREFIX: &str = "zipmerge.";
const CONTENT_SUFFIX: &str = ".merger.content";
const STYLE_SUFFIX: &str = ".merger.style";
const RANK_PREFIX: &str = "content_rank.";
const CARRIED_PREFIX: &str = "carried.";
const ALPHA_CONVENTION: &str = "delta = (alpha / rank) * up @ down; alpha defaults to rank";

/// Learned coefficients for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMergers {
    pub m_c: Tensor,
    pub m_s: Tensor,
}

/// Coefficients for every merged layer, plus what is needed to re-apply
/// them to a merged file: the content rank of each folded layer (its first
/// `rank` rows of `down` are the content block) and the layers carried
/// through from one side.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergerVectors {
    pub layers: BTreeMap<String, LayerMergers>,
    pub content_ranks: BTreeMap<String, usize>,
    pub content_only: Vec<String>,
    pub style_only: Vec<String>,
}

impl MergerVectors {
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::default();
        for (key, m) in &self.layers {
            file.tensors.insert(
                format!("{key}{CONTENT_SUFFIX}"),
                Entry::f32(m.m_c.shape().to_vec(), m.m_c.data().to_vec()),
            );
            file.tensors.insert(
                format!("{key}{STYLE_SUFFIX}"),
                Entry::f32(m.m_s.shape().to_vec(), m.m_s.data().to_vec()),
            );
        }
        for (key, rank) in &self.content_ranks {
            file.metadata.insert(format!("{RANK_PREFIX}{key}"), rank.to_string());
        }
        for key in &self.content_only {
            file.metadata.insert(format!("{CARRIED_PREFIX}{key}"), "content".into());
        }
        for key in &self.style_only {
            file.metadata.insert(format!("{CARRIED_PREFIX}{key}"), "style".into());
        }
        file
    }

    pub fn from_tensor_file(file: TensorFile) -> Result<Self> {
        let mut out = MergerVectors::default();
        let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (name, entry) in file.tensors {
            let (key, is_content) = if let Some(k) = name.strip_suffix(CONTENT_SUFFIX) {
                (k.to_string(), true)
            } else if let Some(k) = name.strip_suffix(STYLE_SUFFIX) {
                (k.to_string(), false)
            } else {
                log::warn!("skipping unrecognized merger tensor {name}");
                continue;
            };
            if entry.shape.len() != 1 {
                return Err(Error::InvalidLayer {
                    key,
                    reason: format!("{name} must be 1-D, got {:?}", entry.shape),
                });
            }
            let t = Tensor::new(entry.shape, entry.values).map_err(|e| Error::InvalidLayer {
                key: key.clone(),
                reason: format!("{name}: {e}"),
            })?;
            let slot = halves.entry(key).or_default();
            if is_content {
                slot.0 = Some(t);
            } else {
                slot.1 = Some(t);
            }
        }
        for (key, pair) in halves {
            match pair {
                (Some(m_c), Some(m_s)) if m_c.shape() == m_s.shape() => {
                    out.layers.insert(key, LayerMergers { m_c, m_s });
                }
                _ => {
                    return Err(Error::Pairing {
                        key,
                        reason: "merger vectors need matching content and style halves".into(),
                    })
                }
            }
        }
        for (k, v) in file.metadata {
            if let Some(key) = k.strip_prefix(RANK_PREFIX) {
                let rank = v.parse().map_err(|_| Error::InvalidLayer {
                    key: key.to_string(),
                    reason: format!("content rank {v:?} is not an integer"),
                })?;
                out.content_ranks.insert(key.to_string(), rank);
            } else if let Some(key) = k.strip_prefix(CARRIED_PREFIX) {
                match v.as_str() {
                    "content" => out.content_only.push(key.to_string()),
                    "style" => out.style_only.push(key.to_string()),
                    other => {
                        return Err(Error::InvalidLayer {
                            key: key.to_string(),
                            reason: format!("unknown carried side {other:?}"),
                        })
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(&self.to_tensor_file()).expect("merger tensors are self-consistent")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tensor_file(format::read_file(path)?)
    }
}

/// How the layers of two models line up.
pub struct Pairing<'a> {
    pub shared: Vec<(&'a str, &'a LoraLayer, &'a LoraLayer)>,
    pub content_only: Vec<String>,
    pub style_only: Vec<String>,
}

/// Matches layers by key. Shared keys must have equal update shapes.
pub fn pair_layers<'a>(content: &'a LoraModel, style: &'a LoraModel) -> Result<Pairing<'a>> {
    let mut pairing = Pairing {
        shared: Vec::new(),
        content_only: Vec::new(),
        style_only: Vec::new(),
    };
    for (key, c) in &content.layers {
        match style.get(key) {
            None => pairing.content_only.push(key.clone()),
            Some(s) if s.delta_shape() != c.delta_shape() => {
                return Err(Error::ShapeMismatch {
                    key: key.clone(),
                    content: vec![c.rows(), c.cols()],
                    style: vec![s.rows(), s.cols()],
                })
            }
            Some(s) => pairing.shared.push((key.as_str(), c, s)),
        }
    }
    pairing.style_only = style
        .layers
        .keys()
        .filter(|k| !content.layers.contains_key(*k))
        .cloned()
        .collect();
    if pairing.shared.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(pairing)
}

fn carry_through(model: &mut LoraModel, pairing: &Pairing, content: &LoraModel, style: &LoraModel) {
    for key in &pairing.content_only {
        model.insert(content.layers[key].clone());
    }
    for key in &pairing.style_only {
        model.insert(style.layers[key].clone());
    }
}

/// Dense `w_c·ΔW_c + w_s·ΔW_s` per shared layer, alongside the same merge
/// folded into adapter form.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectMerge {
    pub deltas: BTreeMap<String, Tensor>,
    pub model: LoraModel,
}

fn weighted_sum(a: &Tensor, wa: f64, b: &Tensor, wb: f64) -> Tensor {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| wa * f64::from(x) + wb * f64::from(y))
        .collect();
    Tensor::from_f64(a.shape().to_vec(), &data).expect("sum of finite tensors")
}

pub fn direct_merge(content: &LoraModel, style: &LoraModel, w_c: f64, w_s: f64) -> Result<DirectMerge> {
    if !(w_c.is_finite() && w_s.is_finite()) {
        return Err(Error::InvalidArgument("merge weights must be finite".into()));
    }
    let pairing = pair_layers(content, style)?;
    let mut deltas = BTreeMap::new();
    let mut model = LoraModel::new();
    for (key, c, s) in &pairing.shared {
        deltas.insert(key.to_string(), weighted_sum(&delta_weight(c), w_c, &delta_weight(s), w_s));
        let n = c.cols();
        let m_c = Tensor::filled(vec![n], w_c as f32)?;
        let m_s = Tensor::filled(vec![n], w_s as f32)?;
        model.insert(fold_merged(c, s, &m_c, &m_s)?);
    }
    carry_through(&mut model, &pairing, content, style);
    let meta = &mut model.metadata;
    meta.insert(format!("{META_PREFIX}method"), "direct".into());
    meta.insert(format!("{META_PREFIX}w_c"), w_c.to_string());
    meta.insert(format!("{META_PREFIX}w_s"), w_s.to_string());
    meta.insert(format!("{META_PREFIX}content_digest"), content.digest());
    meta.insert(format!("{META_PREFIX}style_digest"), style.digest());
    meta.insert(format!("{META_PREFIX}alpha_convention"), ALPHA_CONVENTION.into());
    Ok(DirectMerge { deltas, model })
}

/// Dense `ΔW_c·diag(m_c) + ΔW_s·diag(m_s)`.
pub fn merged_delta(delta_c: &Tensor, delta_s: &Tensor, m_c: &[f64], m_s: &[f64]) -> Result<Tensor> {
    if !delta_c.is_matrix() || delta_c.shape() != delta_s.shape() {
        return Err(Error::dim("merged_delta", delta_c.shape(), delta_s.shape()));
    }
    let n = delta_c.cols();
    if m_c.len() != n || m_s.len() != n {
        return Err(Error::dim("merged_delta", &[n], &[m_c.len(), m_s.len()]));
    }
    let data: Vec<f64> = delta_c
        .data()
        .iter()
        .zip(delta_s.data())
        .enumerate()
        .map(|(i, (&c, &s))| f64::from(c) * m_c[i % n] + f64::from(s) * m_s[i % n])
        .collect();
    Tensor::from_f64(delta_c.shape().to_vec(), &data)
}

/// Relative residuals `‖(M − ΔW_x) X_x‖_F / max(‖ΔW_x X_x‖_F, 1e-12)` for the
/// content and style sides.
pub fn preservation_residuals(
    merged: &Tensor,
    delta_c: &Tensor,
    delta_s: &Tensor,
    probes: &LayerProbes,
) -> Result<(f64, f64)> {
    for other in [delta_c, delta_s] {
        if !merged.is_matrix() || merged.shape() != other.shape() {
            return Err(Error::dim("preservation_residuals", merged.shape(), other.shape()));
        }
    }
    let (rows, n, k) = (merged.rows(), merged.cols(), probes.k());
    if probes.n() != n {
        return Err(Error::dim("preservation_residuals", merged.shape(), &[probes.n(), k]));
    }
    let m = merged.to_f64();
    let side = |target: &Tensor, role: Role| {
        let w = target.to_f64();
        let diff: Vec<f64> = m.iter().zip(&w).map(|(a, b)| a - b).collect();
        let x = probes.f64(role);
        let mut r = vec![0.0; rows * k];
        let mut reference = vec![0.0; rows * k];
        gemm_f64(rows, n, k, &diff, false, &x, false, &mut r);
        gemm_f64(rows, n, k, &w, false, &x, false, &mut reference);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm(&r) / norm(&reference).max(1e-12)
    };
    Ok((side(delta_c, Role::Content), side(delta_s, Role::Style)))
}

/// `|cos(c_j, s_j)|` per column, `None` for degenerate columns.
pub fn column_cosines(delta_c: &Tensor, delta_s: &Tensor) -> Result<Vec<Option<f64>>> {
    if !delta_c.is_matrix() || delta_c.shape() != delta_s.shape() {
        return Err(Error::dim("column_cosines", delta_c.shape(), delta_s.shape()));
    }
    Ok((0..delta_c.cols())
        .map(|j| cosine_f64(&delta_c.column_f64(j), &delta_s.column_f64(j)).map(f64::abs))
        .collect())
}

/// Mean over non-degenerate columns of the `|cosine|` between the scaled
/// summands, weighted by their coefficient magnitudes:
/// `|m_c[j]·m_s[j]|·|cos(c_j, s_j)|`. At `m_c = m_s = 1` this is the plain
/// column alignment; it falls as either coefficient of an aligned pair
/// shrinks. (The unweighted cosine of `m_c[j]c_j` and `m_s[j]s_j` does not
/// depend on the coefficients at all.)
pub fn column_interference(cosines: &[Option<f64>], m_c: &[f64], m_s: &[f64]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (j, c) in cosines.iter().enumerate() {
        if let Some(c) = c {
            sum += (m_c[j] * m_s[j]).abs() * c;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Optimizes one layer against `objective`, then re-checks the result with
/// the exact surrogate at storage precision: if the stored coefficients do
/// not beat the plain sum they are replaced by ones.
fn solve_layer(
    stream: &str,
    delta_c: &Tensor,
    delta_s: &Tensor,
    objective: &dyn Objective,
    probes: &LayerProbes,
    config: &OptimizerConfig,
) -> Result<(LayerMergers, LayerReport)> {
    let n = delta_c.cols();
    let trajectory = optimize(objective, config, stream)?;
    let ones = vec![1.0; n];
    let initial_loss = surrogate_loss(delta_c, delta_s, &ones, &ones, probes, config.lambda)?;

    let stored_c: Vec<f32> = trajectory.m_c.iter().map(|&v| v as f32).collect();
    let stored_s: Vec<f32> = trajectory.m_s.iter().map(|&v| v as f32).collect();
    let (mut m_c, mut m_s) = (to_f64(&stored_c), to_f64(&stored_s));
    let mut final_loss = surrogate_loss(delta_c, delta_s, &m_c, &m_s, probes, config.lambda)?;
    if final_loss > initial_loss {
        (m_c, m_s, final_loss) = (ones.clone(), ones.clone(), initial_loss);
    }

    let cosines = column_cosines(delta_c, delta_s)?;
    let merged = merged_delta(delta_c, delta_s, &m_c, &m_s)?;
    let direct = merged_delta(delta_c, delta_s, &ones, &ones)?;
    let (content_residual, style_residual) = preservation_residuals(&merged, delta_c, delta_s, probes)?;
    let (direct_content_residual, direct_style_residual) =
        preservation_residuals(&direct, delta_c, delta_s, probes)?;
    let final_cosine = merger_cosine(&m_c, &m_s);
    let report = LayerReport {
        rows: delta_c.rows(),
        cols: n,
        initial_loss,
        final_loss,
        steps: trajectory.steps,
        converged: trajectory.converged,
        initial_merger_cosine: merger_cosine(&ones, &ones),
        final_merger_cosine: final_cosine,
        initial_merger_dot: n as f64,
        final_merger_dot: objective::dot(&m_c, &m_s),
        initial_column_interference: column_interference(&cosines, &ones, &ones),
        final_column_interference: column_interference(&cosines, &m_c, &m_s),
        content_residual,
        style_residual,
        direct_content_residual,
        direct_style_residual,
    };
    let mergers = LayerMergers {
        m_c: Tensor::from_f64(vec![n], &m_c)?,
        m_s: Tensor::from_f64(vec![n], &m_s)?,
    };
    Ok((mergers, report))
}

/// Optimizes the merger coefficients of one pair of dense updates.
pub fn optimize_layer(
    delta_c: &Tensor,
    delta_s: &Tensor,
    probes: &LayerProbes,
    config: &OptimizerConfig,
) -> Result<(LayerMergers, LayerReport)> {
    config.validate()?;
    let objective = QuadraticObjective::from_deltas(delta_c, delta_s, probes, config.lambda)?;
    solve_layer("", delta_c, delta_s, &objective, probes, config)
}

/// Result of [`zip_merge`].
#[derive(Clone, Debug, PartialEq)]
pub struct ZipMerge {
    pub model: LoraModel,
    pub mergers: MergerVectors,
    pub report: MergeReport,
}

/// Learns per-column coefficients for every shared layer (in parallel,
/// each layer independently) and folds them into a merged adapter. Layers
/// present on one side only are carried through unchanged.
pub fn zip_merge(content: &LoraModel, style: &LoraModel, config: &OptimizerConfig) -> Result<ZipMerge> {
    let started = Instant::now();
    config.validate()?;
    let pairing = pair_layers(content, style)?;
    let solved = pairing
        .shared
        .par_iter()
        .map(|&(key, c, s)| {
            let probes = LayerProbes::generate(config.seed, key, c.cols(), config.probes_per_layer);
            let objective = QuadraticObjective::from_layers(c, s, &probes, config.lambda)?;
            let (delta_c, delta_s) = (delta_weight(c), delta_weight(s));
            let (mergers, report) = solve_layer(key, &delta_c, &delta_s, &objective, &probes, config)?;
            let folded = fold_merged(c, s, &mergers.m_c, &mergers.m_s)?;
            Ok((key, c.rank(), mergers, report, folded))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model = LoraModel::new();
    let mut mergers = MergerVectors {
        content_only: pairing.content_only.clone(),
        style_only: pairing.style_only.clone(),
        ..MergerVectors::default()
    };
    let mut layers = BTreeMap::new();
    let mut total_steps = 0;
    for (key, rank, m, report, folded) in solved {
        total_steps += report.steps;
        mergers.layers.insert(key.to_string(), m);
        mergers.content_ranks.insert(key.to_string(), rank);
        layers.insert(key.to_string(), report);
        model.insert(folded);
    }
    carry_through(&mut model, &pairing, content, style);

    let (content_digest, style_digest) = (content.digest(), style.digest());
    let meta = &mut model.metadata;
    meta.insert(format!("{META_PREFIX}method"), "zip".into());
    meta.insert(format!("{META_PREFIX}lambda"), config.lambda.to_string());
    meta.insert(format!("{META_PREFIX}max_steps"), config.max_steps.to_string());
    meta.insert(format!("{META_PREFIX}total_steps"), total_steps.to_string());
    meta.insert(format!("{META_PREFIX}seed"), config.seed.to_string());
    meta.insert(format!("{META_PREFIX}probes_per_layer"), config.probes_per_layer.to_string());
    meta.insert(format!("{META_PREFIX}learning_rate"), config.learning_rate.to_string());
    meta.insert(format!("{META_PREFIX}content_digest"), content_digest.clone());
    meta.insert(format!("{META_PREFIX}style_digest"), style_digest.clone());
    meta.insert(format!("{META_PREFIX}alpha_convention"), ALPHA_CONVENTION.into());

    let converged_layers = layers.values().filter(|r| r.converged).count();
    let report = MergeReport {
        config: config.clone(),
        content_digest,
        style_digest,
        layers,
        content_only: pairing.content_only,
        style_only: pairing.style_only,
        converged_layers,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(ZipMerge { model, mergers, report })
}

fn check_style_weight(w_s: f64) -> Result<()> {
    if !(w_s.is_finite() && w_s >= 0.0) {
        return Err(Error::InvalidArgument(format!("style weight must be nonnegative, got {w_s}")));
    }
    if w_s > 1.0 {
        log::warn!("style weight {w_s} exceeds 1 and amplifies the style adapter");
    }
    Ok(())
}

fn scale_down_rows(layer: &LoraLayer, from_row: usize, factor: f32) -> Result<LoraLayer> {
    let cols = layer.cols();
    let mut data = layer.down().data().to_vec();
    for v in &mut data[from_row * cols..] {
        *v *= factor;
    }
    LoraLayer::new(
        layer.name(),
        Tensor::new(layer.down().shape().to_vec(), data)?,
        layer.up().clone(),
        layer.alpha(),
    )
}

/// Re-folds the source layers with coefficients `(m_c, w_s·m_s)`.
/// Style-only layers are scaled by `w_s`; content-only layers are kept.
/// `w_s = 1` reproduces the zip-merged tensors exactly.
pub fn style_strength(
    content: &LoraModel,
    style: &LoraModel,
    mergers: &MergerVectors,
    w_s: f64,
) -> Result<LoraModel> {
    check_style_weight(w_s)?;
    let pairing = pair_layers(content, style)?;
    let mut model = LoraModel::new();
    for (key, c, s) in &pairing.shared {
        let m = mergers.layers.get(*key).ok_or_else(|| Error::InvalidLayer {
            key: key.to_string(),
            reason: "no merger vectors for this layer".into(),
        })?;
        model.insert(fold_merged(c, s, &m.m_c, &m.m_s.scale(w_s as f32))?);
    }
    for key in &pairing.content_only {
        model.insert(content.layers[key].clone());
    }
    for key in &pairing.style_only {
        model.insert(scale_down_rows(&style.layers[key], 0, w_s as f32)?);
    }
    model.metadata.insert(format!("{META_PREFIX}method"), "zip".into());
    model.metadata.insert(format!("{META_PREFIX}style_strength"), w_s.to_string());
    model
        .metadata
        .insert(format!("{META_PREFIX}alpha_convention"), ALPHA_CONVENTION.into());
    Ok(model)
}

/// Applies a style weight to an already merged model using its merger
/// sidecar: the style block of each folded `down` (the rows after the
/// content rank) is scaled by `w_s`, as are style-only layers.
pub fn scale_merged_style(merged: &LoraModel, mergers: &MergerVectors, w_s: f64) -> Result<LoraModel> {
    check_style_weight(w_s)?;
    let factor = w_s as f32;
    let mut model = LoraModel {
        layers: BTreeMap::new(),
        metadata: merged.metadata.clone(),
    };
    for (key, layer) in &merged.layers {
        let scaled = if let Some(&rank) = mergers.content_ranks.get(key) {
            if rank >= layer.rank() {
                return Err(Error::InvalidLayer {
                    key: key.clone(),
                    reason: format!(
                        "sidecar content rank {rank} leaves no style block in a rank-{} layer",
                        layer.rank()
                    ),
                });
            }
            scale_down_rows(layer, rank, factor)?
        } else if mergers.style_only.contains(key) {
            scale_down_rows(layer, 0, factor)?
        } else {
            layer.clone()
        };
        model.insert(scaled);
    }
    let key = format!("{META_PREFIX}style_strength");
    let previous: f64 = model.metadata.get(&key).and_then(|v| v.parse().ok()).unwrap_or(1.0);
    model.metadata.insert(key, (previous * w_s).to_string());
    Ok(model)
}
