//! Adaptive-moment descent over the merger coefficients of one layer.
//!
//! Starts from (a seeded perturbation of) `m_c = m_s = 1`, stops once the
//! coefficient vectors are orthogonal to within the configured threshold,
//! and returns the lowest-loss point seen, with the plain sum as a
//! candidate so the result never does worse than it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zip::objective::{dot, sign0, Objective};
use crate::zip::probes::{stream_seed, DEFAULT_PROBES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Weight of the `|m_c·m_s|` penalty.
    pub lambda: f64,
    pub max_steps: usize,
    /// Stop once `|m_c·m_s| / (‖m_c‖‖m_s‖)` falls to this value.
    pub cosine_stop_threshold: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub probes_per_layer: usize,
    /// Standard deviation of the antisymmetric start perturbation
    /// `m_c = 1 + σz`, `m_s = 1 − σz`. Without it, identical content and
    /// style updates give identical gradients and the two vectors can never
    /// separate.
    pub init_jitter: f64,
    /// Shorten any step that would flip the sign of `m_c·m_s` so it lands
    /// on the penalty's kink instead of oscillating across it.
    pub clip_at_kink: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            max_steps: 100,
            cosine_stop_threshold: 1e-4,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            probes_per_layer: DEFAULT_PROBES,
            init_jitter: 0.01,
            clip_at_kink: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative and finite");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if self.cosine_stop_threshold.is_nan() || self.cosine_stop_threshold < 0.0 {
            return bad("cosine_stop_threshold must be nonnegative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("moment decays must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.probes_per_layer == 0 {
            return bad("probes_per_layer must be positive");
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return bad("init_jitter must be nonnegative and finite");
        }
        Ok(())
    }
}

/// `|a·b| / (‖a‖‖b‖)`, taken as 0 when either vector is zero.
pub fn merger_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b).abs() / (na * nb)).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Lowest-loss coefficients seen (possibly the all-ones start).
    pub m_c: Vec<f64>,
    pub m_s: Vec<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Fraction of `step` to take from `(p_c, p_s)` so that `m_c·m_s` stops at
/// zero rather than changing sign. `d(τ) = d0 + bτ + aτ²` along the step.
fn kink_fraction(p_c: &[f64], p_s: &[f64], s_c: &[f64], s_s: &[f64]) -> f64 {
    let d0 = dot(p_c, p_s);
    let b = dot(p_c, s_s) + dot(s_c, p_s);
    let a = dot(s_c, s_s);
    let d1 = d0 + b + a;
    if d0 == 0.0 || sign0(d1) == sign0(d0) {
        return 1.0;
    }
    let mut roots = Vec::with_capacity(2);
    if a == 0.0 {
        if b != 0.0 {
            roots.push(-d0 / b);
        }
    } else {
        let disc = (b * b - 4.0 * a * d0).max(0.0).sqrt();
        let q = -0.5 * (b + b.signum() * disc);
        if q != 0.0 {
            roots.push(q / a);
            roots.push(d0 / q);
        }
    }
    let root = roots
        .into_iter()
        .filter(|t| *t > 0.0 && *t <= 1.0)
        .fold(f64::INFINITY, f64::min);
    if root.is_finite() {
        return root;
    }
    // Rounding pushed both roots outside (0, 1]; bisect the sign change.
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if sign0(d0 + mid * (b + mid * a)) == sign0(d0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Start point `(1 + σz, 1 − σz)` with `z` drawn from the `(seed, stream)`
/// generator.
pub fn initial_point(seed: u64, stream: &str, n: usize, jitter: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha20Rng::from_seed(stream_seed(seed, stream, "init", n, 0));
    let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (
        z.iter().map(|z| 1.0 + jitter * z).collect(),
        z.iter().map(|z| 1.0 - jitter * z).collect(),
    )
}

/// Runs the optimizer on any objective. `stream` separates the start
/// perturbation of different layers sharing one seed.
pub fn optimize(objective: &dyn Objective, config: &OptimizerConfig, stream: &str) -> Result<Trajectory> {
    config.validate()?;
    let n = objective.dim();
    let ones = vec![1.0; n];
    let initial_loss = objective.loss(&ones, &ones);
    let mut best = (initial_loss, ones.clone(), ones.clone());
    if merger_cosine(&ones, &ones) <= config.cosine_stop_threshold {
        return Ok(Trajectory {
            m_c: ones.clone(),
            m_s: ones,
            loss: initial_loss,
            initial_loss,
            steps: 0,
            converged: true,
        });
    }

    let (mut p_c, mut p_s) = initial_point(config.seed, stream, n, config.init_jitter);
    let mut first = vec![0.0; 2 * n];
    let mut second = vec![0.0; 2 * n];
    let mut step = vec![0.0; 2 * n];
    let (b1, b2) = (config.beta1, config.beta2);
    let mut steps = 0;
    let mut converged = false;
    for t in 1..=config.max_steps {
        let (loss, g_c, g_s) = objective.evaluate(&p_c, &p_s);
        if t > 1 && loss < best.0 {
            best = (loss, p_c.clone(), p_s.clone());
        }
        let correction1 = 1.0 - b1.powi(t as i32);
        let correction2 = 1.0 - b2.powi(t as i32);
        for (i, g) in g_c.iter().chain(&g_s).enumerate() {
            first[i] = b1 * first[i] + (1.0 - b1) * g;
            second[i] = b2 * second[i] + (1.0 - b2) * g * g;
            let m_hat = first[i] / correction1;
            let v_hat = second[i] / correction2;
            step[i] = -config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        let (s_c, s_s) = step.split_at(n);
        let tau = if config.clip_at_kink {
            kink_fraction(&p_c, &p_s, s_c, s_s)
        } else {
            1.0
        };
        for j in 0..n {
            p_c[j] += tau * s_c[j];
            p_s[j] += tau * s_s[j];
        }
        steps = t;
        if merger_cosine(&p_c, &p_s) <= config.cosine_stop_threshold {
            converged = true;
            break;
        }
    }
    let last = objective.loss(&p_c, &p_s);
    if last < best.0 {
        best = (last, p_c, p_s);
    }
    Ok(Trajectory {
        m_c: best.1,
        m_s: best.2,
        loss: best.0,
        initial_loss,
        steps,
        converged,
    })
}
