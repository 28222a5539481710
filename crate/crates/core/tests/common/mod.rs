//! Seed-pinned synthetic adapters shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zipmerge::tensor::frobenius_norm;
use zipmerge::{delta_weight, LoraLayer, LoraModel, Tensor};

pub const SUITE_LAYERS: usize = 8;
pub const SUITE_DIM: usize = 64;
pub const SUITE_RANK: usize = 4;
/// Frobenius norm of every suite update, a typical adapter magnitude.
pub const SUITE_NORM: f64 = 0.1;
/// Mixing weight of each aligned-suite layer, cycling through 0.3/0.6/0.9.
pub const RHO: [f64; SUITE_LAYERS] = [0.3, 0.6, 0.9, 0.3, 0.6, 0.9, 0.3, 0.6];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Builds a unit-scale layer (`alpha = rank`) whose update has Frobenius
/// norm `norm`, by rescaling the up factor.
pub fn normalized_layer(name: &str, up: &[f64], down: &[f64], m: usize, n: usize, r: usize, norm: f64) -> LoraLayer {
    let down = Tensor::matrix(r, n, to_f32(down)).unwrap();
    let up = Tensor::matrix(m, r, to_f32(up)).unwrap();
    let raw = LoraLayer::unscaled(name, down.clone(), up.clone()).unwrap();
    let factor = norm / frobenius_norm(&delta_weight(&raw));
    LoraLayer::unscaled(name, down, up.scale(factor as f32)).unwrap()
}

pub fn suite_key(i: usize) -> String {
    format!("unet.block{i}.attn")
}

/// Content/style pairs with index-aligned columns: shared up projection
/// `B`, content down `A_c`, style down `A_s = ρ·A_c + (1 − ρ)·G`.
pub fn aligned_suite(seed: u64) -> (LoraModel, LoraModel) {
    let mut rng = rng(seed);
    let (m, n, r) = (SUITE_DIM, SUITE_DIM, SUITE_RANK);
    let mut content = LoraModel::new();
    let mut style = LoraModel::new();
    for (i, &rho) in RHO.iter().enumerate() {
        let b = gaussian(&mut rng, m * r);
        let a_c = gaussian(&mut rng, r * n);
        let g = gaussian(&mut rng, r * n);
        let a_s: Vec<f64> = a_c.iter().zip(&g).map(|(a, g)| rho * a + (1.0 - rho) * g).collect();
        let key = suite_key(i);
        content.insert(normalized_layer(&key, &b, &a_c, m, n, r, SUITE_NORM));
        style.insert(normalized_layer(&key, &b, &a_s, m, n, r, SUITE_NORM));
    }
    (content, style)
}

/// Content updates live on output rows 0–31, style updates on rows 32–63,
/// so every content column is orthogonal to every style column.
pub fn orthogonal_suite(seed: u64) -> (LoraModel, LoraModel) {
    let mut rng = rng(seed);
    let (m, n, r) = (SUITE_DIM, SUITE_DIM, SUITE_RANK);
    let half = m / 2;
    let mut content = LoraModel::new();
    let mut style = LoraModel::new();
    for i in 0..SUITE_LAYERS {
        let mut b_c = gaussian(&mut rng, m * r);
        let mut b_s = gaussian(&mut rng, m * r);
        for row in 0..m {
            let zero = if row < half { &mut b_s } else { &mut b_c };
            zero[row * r..(row + 1) * r].fill(0.0);
        }
        let a_c = gaussian(&mut rng, r * n);
        let a_s = gaussian(&mut rng, r * n);
        let key = suite_key(i);
        content.insert(normalized_layer(&key, &b_c, &a_c, m, n, r, SUITE_NORM));
        style.insert(normalized_layer(&key, &b_s, &a_s, m, n, r, SUITE_NORM));
    }
    (content, style)
}

/// A random layer with uniform factor entries.
pub fn random_layer(rng: &mut ChaCha8Rng, name: &str, m: usize, n: usize, r: usize) -> LoraLayer {
    let down = Tensor::matrix(r, n, uniform(rng, r * n, -1.0, 1.0)).unwrap();
    let up = Tensor::matrix(m, r, uniform(rng, m * r, -1.0, 1.0)).unwrap();
    let alpha = rng.random_range(0.5f32..2.0) * r as f32;
    LoraLayer::new(name, down, up, alpha).unwrap()
}

/// A random model with `layers` layers of random shape and random metadata.
pub fn random_model(rng: &mut ChaCha8Rng, layers: usize) -> LoraModel {
    let mut model = LoraModel::new();
    for i in 0..layers {
        let m = rng.random_range(1..12);
        let n = rng.random_range(1..12);
        let r = rng.random_range(1..=m.min(n));
        let name = format!("model.layers.{}.proj_{}", rng.random_range(0..1000), i);
        model.insert(random_layer(rng, &name, m, n, r));
    }
    for i in 0..rng.random_range(0..4) {
        model
            .metadata
            .insert(format!("key{i}"), format!("value \"{}\" ü", rng.random::<u32>()));
    }
    model
}

pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    frobenius_norm(&a.sub(b).unwrap()) / frobenius_norm(b).max(1e-30)
}

/// Tensor-level bitwise equality of two models, plus metadata equality.
pub fn bit_identical(a: &LoraModel, b: &LoraModel) -> bool {
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    a.metadata == b.metadata
        && a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|((ka, la), (kb, lb))| {
            ka == kb
                && la.down().shape() == lb.down().shape()
                && la.up().shape() == lb.up().shape()
                && bits(la.down()) == bits(lb.down())
                && bits(la.up()) == bits(lb.up())
                && la.alpha().to_bits() == lb.alpha().to_bits()
        })
}
