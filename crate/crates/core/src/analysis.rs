//! Diagnostics that motivate coefficient merging: how concentrated an
//! adapter's update is in a few large entries, and how aligned the
//! index-paired columns of two adapters are.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{delta_weight, LoraModel};
use crate::tensor::{cosine_f64, frobenius_norm, Tensor};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `HISTOGRAM_BINS + 1` edges spanning `[0, max |ΔW|]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileStat {
    pub percentile: f64,
    /// Magnitude at or below which entries are zeroed.
    pub threshold: f64,
    /// `‖pruned‖_F / ‖ΔW‖_F`.
    pub norm_retained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub rows: usize,
    pub cols: usize,
    pub histogram: Histogram,
    pub percentiles: Vec<PercentileStat>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: BTreeMap<String, LayerSparsity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub mean_abs_cosine: f64,
    pub columns: usize,
    pub skipped_columns: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub layers: BTreeMap<String, LayerAlignment>,
    /// Layers present only in the first model.
    pub content_only: Vec<String>,
    /// Layers present only in the second model.
    pub style_only: Vec<String>,
    /// Layers whose keys match but whose delta shapes differ.
    pub shape_mismatched: Vec<String>,
}

fn check_percentile(p: f64) -> Result<()> {
    if (0.0..=100.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("percentile {p} is outside [0, 100]")))
    }
}

/// Nearest-rank count `ceil(p·N / 100)`, robust to the rounding of products
/// that are integral in exact arithmetic.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    let x = p * n as f64 / 100.0;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).min(n)
}

fn sorted_magnitudes(values: &[f32]) -> Vec<f32> {
    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f32::total_cmp);
    mags
}

/// Zeroes every entry whose magnitude is strictly below the threshold
/// `sorted(|delta|)[min(k, N−1)]` with `k = ceil(p·N/100)`. With distinct
/// magnitudes exactly `k` entries are zeroed (all but the maximum at
/// `p = 100`); entries tying the threshold survive, bit-for-bit.
pub fn prune_by_percentile(delta: &Tensor, p: f64) -> Result<Tensor> {
    check_percentile(p)?;
    let n = delta.len();
    let mags = sorted_magnitudes(delta.data());
    let threshold = mags[nearest_rank(p, n).min(n - 1)];
    let data = delta
        .data()
        .iter()
        .map(|&v| if v.abs() < threshold { 0.0 } else { v })
        .collect();
    Tensor::new(delta.shape().to_vec(), data)
}

fn histogram(values: &[f32]) -> Histogram {
    let max = values.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())));
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| max * i as f64 / HISTOGRAM_BINS as f64)
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for v in values {
        let bin = if max > 0.0 {
            ((f64::from(v.abs()) / max) * HISTOGRAM_BINS as f64) as usize
        } else {
            0
        };
        counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    Histogram { edges, counts }
}

/// Sparsity statistics of one dense update. For each percentile the lowest
/// `k = ceil(p·N/100)` magnitudes are zeroed (threshold = the k-th smallest
/// magnitude, inclusive), so `p = 100` removes everything.
pub fn layer_sparsity(delta: &Tensor, percentiles: &[f64]) -> Result<LayerSparsity> {
    for &p in percentiles {
        check_percentile(p)?;
    }
    let n = delta.len();
    let mags = sorted_magnitudes(delta.data());
    // suffix[i] = sum of squares of mags[i..], accumulated from the top so
    // small entries do not get lost against large partial sums.
    let mut suffix = vec![0.0f64; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + f64::from(mags[i]) * f64::from(mags[i]);
    }
    let total = suffix[0];
    let percentiles = percentiles
        .iter()
        .map(|&p| {
            let k = nearest_rank(p, n);
            let threshold = if k == 0 { 0.0 } else { f64::from(mags[k - 1]) };
            // Entries tying the threshold are zeroed along with it.
            let cut = if k == 0 { 0 } else { mags.partition_point(|&m| f64::from(m) <= threshold) };
            let norm_retained = if total > 0.0 { (suffix[cut] / total).sqrt().min(1.0) } else { 1.0 };
            PercentileStat {
                percentile: p,
                threshold,
                norm_retained,
            }
        })
        .collect();
    Ok(LayerSparsity {
        rows: delta.rows(),
        cols: delta.cols(),
        histogram: histogram(delta.data()),
        percentiles,
    })
}

pub fn sparsity_report(model: &LoraModel, percentiles: &[f64]) -> Result<SparsityReport> {
    for &p in percentiles {
        check_percentile(p)?;
    }
    let layers = model
        .layers
        .par_iter()
        .map(|(key, layer)| Ok((key.clone(), layer_sparsity(&delta_weight(layer), percentiles)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsityReport {
        layers: layers.into_iter().collect(),
    })
}

/// Mean `|cos|` over index-paired columns of two equally shaped matrices,
/// skipping columns whose norm is below the degenerate threshold. Returns
/// `(mean, skipped)`; the mean is 0 when every column is skipped.
pub fn column_alignment(a: &Tensor, b: &Tensor) -> Result<LayerAlignment> {
    if !a.is_matrix() || a.shape() != b.shape() {
        return Err(Error::dim("column_alignment", a.shape(), b.shape()));
    }
    let cols = a.cols();
    let (mut sum, mut used) = (0.0, 0usize);
    for j in 0..cols {
        if let Some(c) = cosine_f64(&a.column_f64(j), &b.column_f64(j)) {
            sum += c.abs();
            used += 1;
        }
    }
    Ok(LayerAlignment {
        mean_abs_cosine: if used > 0 { sum / used as f64 } else { 0.0 },
        columns: cols,
        skipped_columns: cols - used,
    })
}

pub fn alignment_report(content: &LoraModel, style: &LoraModel) -> Result<AlignmentReport> {
    let mut report = AlignmentReport::default();
    let mut shared = Vec::new();
    for (key, c) in &content.layers {
        match style.get(key) {
            None => report.content_only.push(key.clone()),
            Some(s) if s.delta_shape() != c.delta_shape() => report.shape_mismatched.push(key.clone()),
            Some(s) => shared.push((key, c, s)),
        }
    }
    report.style_only = style
        .layers
        .keys()
        .filter(|k| !content.layers.contains_key(*k))
        .cloned()
        .collect();
    if shared.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let layers = shared
        .par_iter()
        .map(|(key, c, s)| Ok(((*key).clone(), column_alignment(&delta_weight(c), &delta_weight(s))?)))
        .collect::<Result<Vec<_>>>()?;
    report.layers = layers.into_iter().collect();
    Ok(report)
}

/// Relative Frobenius norm of a pruned update against the original.
pub fn norm_retained(original: &Tensor, pruned: &Tensor) -> f64 {
    let total = frobenius_norm(original);
    if total > 0.0 {
        frobenius_norm(pruned) / total
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraLayer;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn one_to_sixteen() -> Tensor {
        // Mixed signs so magnitudes, not values, drive the ranking.
        m(4, 4, (1..=16).map(|v| if v % 3 == 0 { -(v as f32) } else { v as f32 }).collect())
    }

    #[test]
    fn nearest_rank_counts() {
        assert_eq!(nearest_rank(0.0, 16), 0);
        assert_eq!(nearest_rank(75.0, 16), 12);
        assert_eq!(nearest_rank(90.0, 256), 231);
        assert_eq!(nearest_rank(100.0, 7), 7);
        assert_eq!(nearest_rank(70.0, 10), 7);
        assert_eq!(nearest_rank(10.0, 3), 1);
    }

    #[test]
    fn prune_examples() {
        let t = one_to_sixteen();
        assert_eq!(prune_by_percentile(&t, 0.0).unwrap(), t);

        let pruned = prune_by_percentile(&t, 75.0).unwrap();
        let survivors: Vec<f32> = pruned.data().iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(survivors, vec![13.0, 14.0, -15.0, 16.0]);

        let ties = m(2, 2, vec![3.0, -3.0, 1.0, 2.0]);
        assert_eq!(prune_by_percentile(&ties, 100.0).unwrap(), m(2, 2, vec![3.0, -3.0, 0.0, 0.0]));
        assert!(prune_by_percentile(&t, 100.5).is_err());
    }

    #[test]
    fn sparsity_examples() {
        let t = one_to_sixteen();
        let s = layer_sparsity(&t, &[0.0, 75.0, 100.0]).unwrap();
        assert_eq!(s.percentiles[0].norm_retained, 1.0);
        assert_eq!(s.percentiles[0].threshold, 0.0);
        assert_eq!(s.percentiles[1].threshold, 12.0);
        let kept: f64 = (13..=16).map(|v| (v * v) as f64).sum();
        let all: f64 = (1..=16).map(|v| (v * v) as f64).sum();
        assert!((s.percentiles[1].norm_retained - (kept / all).sqrt()).abs() < 1e-12);
        assert_eq!(s.percentiles[2].norm_retained, 0.0);
        assert_eq!(s.histogram.counts.iter().sum::<u64>(), 16);
        assert_eq!(s.histogram.edges.len(), HISTOGRAM_BINS + 1);
        assert_eq!(*s.histogram.edges.last().unwrap(), 16.0);
    }

    #[test]
    fn empty_model_gives_empty_report() {
        let r = sparsity_report(&LoraModel::new(), &[80.0, 90.0]).unwrap();
        assert!(r.layers.is_empty());
    }

    fn model(layers: Vec<(&str, Tensor, Tensor)>) -> LoraModel {
        let mut model = LoraModel::new();
        for (name, down, up) in layers {
            model.insert(LoraLayer::unscaled(name, down, up).unwrap());
        }
        model
    }

    #[test]
    fn alignment_examples() {
        // Rank-2 factors with identity up: ΔW = down (2×2).
        let eye = Tensor::identity(2).unwrap();
        let c = model(vec![("l", m(2, 2, vec![1.0, 1.0, 0.0, 0.0]), eye.clone())]);
        // Column 0 parallel (0°), column 1 orthogonal (90°).
        let s = model(vec![("l", m(2, 2, vec![2.0, 0.0, 0.0, 3.0]), eye)]);
        let r = alignment_report(&c, &s).unwrap();
        assert!((r.layers["l"].mean_abs_cosine - 0.5).abs() < 1e-4);
        let own = alignment_report(&c, &c).unwrap();
        assert!((own.layers["l"].mean_abs_cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn alignment_skips_and_lists() {
        let eye = Tensor::identity(2).unwrap();
        let c = model(vec![
            ("l", m(2, 2, vec![1.0, 0.0, 1.0, 0.0]), eye.clone()),
            ("only_c", m(2, 2, vec![1.0, 0.0, 1.0, 0.0]), eye.clone()),
        ]);
        let s = model(vec![
            ("l", m(2, 2, vec![1.0, 5.0, 1.0, 5.0]), eye.clone()),
            ("only_s", m(2, 2, vec![1.0, 0.0, 1.0, 0.0]), eye.clone()),
        ]);
        let r = alignment_report(&c, &s).unwrap();
        assert_eq!(r.layers["l"].skipped_columns, 1);
        assert!((r.layers["l"].mean_abs_cosine - 1.0).abs() < 1e-6);
        assert_eq!(r.content_only, vec!["only_c".to_string()]);
        assert_eq!(r.style_only, vec!["only_s".to_string()]);

        let disjoint = model(vec![("z", m(2, 2, vec![1.0; 4]), eye)]);
        assert!(matches!(alignment_report(&c, &disjoint), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn orthogonal_support_has_zero_alignment() {
        let n = 4;
        let mut top = vec![0.0; 2 * n];
        let mut bottom = vec![0.0; 2 * n];
        for j in 0..n {
            top[j] = 1.0 + j as f32;
            bottom[n + j] = 2.0 - j as f32 * 0.3;
        }
        let up = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        let up2 = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let c = model(vec![("l", m(1, n, top[..n].to_vec()), up)]);
        let s = model(vec![("l", m(1, n, bottom[n..].to_vec()), up2)]);
        let r = alignment_report(&c, &s).unwrap();
        assert!(r.layers["l"].mean_abs_cosine.abs() < 1e-6);
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            // Small integer grid forces plenty of duplicate magnitudes.
            prop::collection::vec(-6i8..=6, r * c)
                .prop_map(move |v| m(r, c, v.into_iter().map(f32::from).collect()))
        })
    }

    proptest! {
        #[test]
        fn prune_is_idempotent_and_shrinking(t in matrix_strategy(), p in 0.0f64..=100.0) {
            let once = prune_by_percentile(&t, p).unwrap();
            let twice = prune_by_percentile(&once, p).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(frobenius_norm(&once) <= frobenius_norm(&t));
            for (a, b) in once.data().iter().zip(t.data()) {
                prop_assert!(*a == 0.0 || a.to_bits() == b.to_bits());
            }
        }

        #[test]
        fn retained_is_monotone(t in matrix_strategy(), mut ps in prop::collection::vec(0.0f64..=100.0, 1..6)) {
            ps.sort_by(f64::total_cmp);
            let s = layer_sparsity(&t, &ps).unwrap();
            for w in s.percentiles.windows(2) {
                prop_assert!(w[1].norm_retained <= w[0].norm_retained);
            }
            for st in &s.percentiles {
                prop_assert!((0.0..=1.0).contains(&st.norm_retained));
            }
        }

        #[test]
        fn alignment_is_symmetric(a in matrix_strategy(), seed in any::<u64>()) {
            let (r, c) = (a.rows(), a.cols());
            let mut x = seed;
            let b: Vec<f32> = (0..r * c).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 40) as f32 / (1u64 << 24) as f32) - 0.5
            }).collect();
            let b = m(r, c, b);
            let ab = column_alignment(&a, &b).unwrap();
            let ba = column_alignment(&b, &a).unwrap();
            prop_assert!((ab.mean_abs_cosine - ba.mean_abs_cosine).abs() <= 1e-6);
            prop_assert!((0.0..=1.0).contains(&ab.mean_abs_cosine));
            prop_assert!(ab.skipped_columns <= c);
        }
    }
}
