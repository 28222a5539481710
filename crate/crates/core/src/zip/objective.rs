//! The per-layer merge objective
//!
//! ```text
//! L(m_c, m_s) = ‖(M − ΔW_c) X_c‖²_F + ‖(M − ΔW_s) X_s‖²_F + λ·|m_c·m_s|
//! M          = ΔW_c·diag(m_c) + ΔW_s·diag(m_s)
//! ```
//!
//! and its gradient, in two forms: the residual form straight from the
//! definition, and an equivalent quadratic form whose per-step cost is
//! independent of the layer's output dimension and probe count.

use crate::error::{Error, Result};
use crate::lora::LoraLayer;
use crate::tensor::{gemm_f64, Tensor};
use crate::zip::probes::{LayerProbes, Role};

/// Evaluation hook for the coefficient optimizer. A host runtime can
/// implement this to optimize against an objective other than the built-in
/// probe surrogate.
pub trait Objective {
    /// Number of columns `n`, i.e. the length of each coefficient vector.
    fn dim(&self) -> usize;

    /// Loss and its gradient `(g_c, g_s)` at `(m_c, m_s)`.
    fn evaluate(&self, m_c: &[f64], m_s: &[f64]) -> (f64, Vec<f64>, Vec<f64>);

    fn loss(&self, m_c: &[f64], m_s: &[f64]) -> f64 {
        self.evaluate(m_c, m_s).0
    }
}

/// `sign` with `sign(0) = 0`, the subgradient used at the penalty's kink.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_inputs(
    delta_c: &Tensor,
    delta_s: &Tensor,
    m_c: &[f64],
    m_s: &[f64],
    probes: &LayerProbes,
    lambda: f64,
) -> Result<()> {
    if !delta_c.is_matrix() || delta_c.shape() != delta_s.shape() {
        return Err(Error::dim("surrogate_loss", delta_c.shape(), delta_s.shape()));
    }
    let n = delta_c.cols();
    if m_c.len() != n || m_s.len() != n {
        return Err(Error::dim("surrogate_loss", &[n], &[m_c.len(), m_s.len()]));
    }
    if probes.n() != n {
        return Err(Error::dim("surrogate_loss", delta_c.shape(), &[probes.n(), probes.k()]));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

struct Residuals {
    rows: usize,
    n: usize,
    k: usize,
    w_c: Vec<f64>,
    w_s: Vec<f64>,
    x_c: Vec<f64>,
    x_s: Vec<f64>,
    r_c: Vec<f64>,
    r_s: Vec<f64>,
}

fn residuals(delta_c: &Tensor, delta_s: &Tensor, m_c: &[f64], m_s: &[f64], probes: &LayerProbes) -> Residuals {
    let (rows, n, k) = (delta_c.rows(), delta_c.cols(), probes.k());
    let w_c = delta_c.to_f64();
    let w_s = delta_s.to_f64();
    // M − ΔW_c and M − ΔW_s, column by column.
    let mut e_c = vec![0.0; rows * n];
    let mut e_s = vec![0.0; rows * n];
    for i in 0..rows {
        for j in 0..n {
            let idx = i * n + j;
            let merged = w_c[idx] * m_c[j] + w_s[idx] * m_s[j];
            e_c[idx] = merged - w_c[idx];
            e_s[idx] = merged - w_s[idx];
        }
    }
    let x_c = probes.f64(Role::Content);
    let x_s = probes.f64(Role::Style);
    let mut r_c = vec![0.0; rows * k];
    let mut r_s = vec![0.0; rows * k];
    gemm_f64(rows, n, k, &e_c, false, &x_c, false, &mut r_c);
    gemm_f64(rows, n, k, &e_s, false, &x_s, false, &mut r_s);
    Residuals {
        rows,
        n,
        k,
        w_c,
        w_s,
        x_c,
        x_s,
        r_c,
        r_s,
    }
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Surrogate merge loss at `(m_c, m_s)`, computed from the residuals.
pub fn surrogate_loss(
    delta_c: &Tensor,
    delta_s: &Tensor,
    m_c: &[f64],
    m_s: &[f64],
    probes: &LayerProbes,
    lambda: f64,
) -> Result<f64> {
    check_inputs(delta_c, delta_s, m_c, m_s, probes, lambda)?;
    let r = residuals(delta_c, delta_s, m_c, m_s, probes);
    Ok(squared_norm(&r.r_c) + squared_norm(&r.r_s) + lambda * dot(m_c, m_s).abs())
}

/// Analytic gradient of [`surrogate_loss`]:
/// `g_c[j] = 2·c_jᵀ(R_c x_c(j) + R_s x_s(j)) + λ·sign(d)·m_s[j]` and
/// symmetrically for `g_s`, where `x_·(j)` is row `j` of the probe matrix.
pub fn loss_gradient(
    delta_c: &Tensor,
    delta_s: &Tensor,
    m_c: &[f64],
    m_s: &[f64],
    probes: &LayerProbes,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(delta_c, delta_s, m_c, m_s, probes, lambda)?;
    let r = residuals(delta_c, delta_s, m_c, m_s, probes);
    let (rows, n, k) = (r.rows, r.n, r.k);
    // T = R_c X_cᵀ + R_s X_sᵀ, shape rows×n.
    let mut t = vec![0.0; rows * n];
    let mut t_s = vec![0.0; rows * n];
    gemm_f64(rows, k, n, &r.r_c, false, &r.x_c, true, &mut t);
    gemm_f64(rows, k, n, &r.r_s, false, &r.x_s, true, &mut t_s);
    let mut g_c = vec![0.0; n];
    let mut g_s = vec![0.0; n];
    for i in 0..rows {
        for j in 0..n {
            let idx = i * n + j;
            let tij = t[idx] + t_s[idx];
            g_c[j] += r.w_c[idx] * tij;
            g_s[j] += r.w_s[idx] * tij;
        }
    }
    let pen = lambda * sign0(dot(m_c, m_s));
    for j in 0..n {
        g_c[j] = 2.0 * g_c[j] + pen * m_s[j];
        g_s[j] = 2.0 * g_s[j] + pen * m_c[j];
    }
    Ok((g_c, g_s))
}

/// The surrogate evaluated through its residual definition. Exact but
/// costs `O(m·n·k)` per evaluation.
pub struct ResidualObjective<'a> {
    pub delta_c: &'a Tensor,
    pub delta_s: &'a Tensor,
    pub probes: &'a LayerProbes,
    pub lambda: f64,
}

impl Objective for ResidualObjective<'_> {
    fn dim(&self) -> usize {
        self.delta_c.cols()
    }

    fn evaluate(&self, m_c: &[f64], m_s: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let loss = surrogate_loss(self.delta_c, self.delta_s, m_c, m_s, self.probes, self.lambda)
            .expect("objective inputs validated at construction");
        let (g_c, g_s) = loss_gradient(self.delta_c, self.delta_s, m_c, m_s, self.probes, self.lambda)
            .expect("objective inputs validated at construction");
        (loss, g_c, g_s)
    }
}

/// The surrogate as an explicit quadratic in `p = (m_c, m_s)`:
///
/// ```text
/// L = pᵀHp − 2bᵀp + c + λ|m_c·m_s|
/// H = [[G_cc⊙S, G_cs⊙S], [G_sc⊙S, G_ss⊙S]],  S = X_cX_cᵀ + X_sX_sᵀ
/// ```
///
/// with Gram blocks `G_xy = ΔW_xᵀΔW_y`. Building it costs one set of Gram
/// products; each evaluation afterwards is `O(n²)`.
pub struct QuadraticObjective {
    n: usize,
    a_cc: Vec<f64>,
    a_cs: Vec<f64>,
    a_ss: Vec<f64>,
    b_c: Vec<f64>,
    b_s: Vec<f64>,
    constant: f64,
    lambda: f64,
}

impl QuadraticObjective {
    /// Builds the quadratic from dense updates.
    pub fn from_deltas(delta_c: &Tensor, delta_s: &Tensor, probes: &LayerProbes, lambda: f64) -> Result<Self> {
        let n = delta_c.cols();
        let ones = vec![1.0; n];
        check_inputs(delta_c, delta_s, &ones, &ones, probes, lambda)?;
        let rows = delta_c.rows();
        let w_c = delta_c.to_f64();
        let w_s = delta_s.to_f64();
        let gram = |a: &[f64], b: &[f64]| {
            let mut g = vec![0.0; n * n];
            gemm_f64(n, rows, n, a, true, b, false, &mut g);
            g
        };
        Ok(Self::from_grams(n, &gram(&w_c, &w_c), &gram(&w_c, &w_s), &gram(&w_s, &w_s), probes, lambda))
    }

    /// Builds the quadratic from the low-rank factors, never forming the
    /// dense updates: `G_xy = s_x s_y · D_xᵀ (U_xᵀ U_y) D_y`.
    pub fn from_layers(content: &LoraLayer, style: &LoraLayer, probes: &LayerProbes, lambda: f64) -> Result<Self> {
        if content.delta_shape() != style.delta_shape() {
            return Err(Error::ShapeMismatch {
                key: content.name().to_string(),
                content: vec![content.rows(), content.cols()],
                style: vec![style.rows(), style.cols()],
            });
        }
        let n = content.cols();
        if probes.n() != n {
            return Err(Error::dim("surrogate_loss", &[content.rows(), n], &[probes.n(), probes.k()]));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {lambda}")));
        }
        let rows = content.rows();
        let factors = |l: &LoraLayer| (l.up().to_f64(), l.down().to_f64(), l.rank(), f64::from(l.scale()));
        let fc = factors(content);
        let fs = factors(style);
        let gram = |(u_a, d_a, r_a, s_a): &(Vec<f64>, Vec<f64>, usize, f64),
                    (u_b, d_b, r_b, s_b): &(Vec<f64>, Vec<f64>, usize, f64)| {
            let mut inner = vec![0.0; r_a * r_b];
            gemm_f64(*r_a, rows, *r_b, u_a, true, u_b, false, &mut inner);
            for v in &mut inner {
                *v *= s_a * s_b;
            }
            let mut right = vec![0.0; r_a * n];
            gemm_f64(*r_a, *r_b, n, &inner, false, d_b, false, &mut right);
            let mut g = vec![0.0; n * n];
            gemm_f64(n, *r_a, n, d_a, true, &right, false, &mut g);
            g
        };
        Ok(Self::from_grams(n, &gram(&fc, &fc), &gram(&fc, &fs), &gram(&fs, &fs), probes, lambda))
    }

    fn from_grams(n: usize, g_cc: &[f64], g_cs: &[f64], g_ss: &[f64], probes: &LayerProbes, lambda: f64) -> Self {
        let k = probes.k();
        let outer = |x: &[f64]| {
            let mut p = vec![0.0; n * n];
            gemm_f64(n, k, n, x, false, x, true, &mut p);
            p
        };
        let p_c = outer(&probes.f64(Role::Content));
        let p_s = outer(&probes.f64(Role::Style));

        let mut a_cc = vec![0.0; n * n];
        let mut a_cs = vec![0.0; n * n];
        let mut a_ss = vec![0.0; n * n];
        let mut b_c = vec![0.0; n];
        let mut b_s = vec![0.0; n];
        let mut constant = 0.0;
        for j in 0..n {
            for l in 0..n {
                let idx = j * n + l;
                let s = p_c[idx] + p_s[idx];
                a_cc[idx] = g_cc[idx] * s;
                a_cs[idx] = g_cs[idx] * s;
                a_ss[idx] = g_ss[idx] * s;
                b_c[j] += g_cc[idx] * p_c[idx] + g_cs[idx] * p_s[idx];
                // G_sc[j, l] = G_cs[l, j].
                b_s[j] += g_cs[l * n + j] * p_c[idx] + g_ss[idx] * p_s[idx];
                constant += g_cc[idx] * p_c[idx] + g_ss[idx] * p_s[idx];
            }
        }
        Self {
            n,
            a_cc,
            a_cs,
            a_ss,
            b_c,
            b_s,
            constant,
            lambda,
        }
    }

    /// `(Hp)_c` and `(Hp)_s`.
    fn apply(&self, m_c: &[f64], m_s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut top = vec![0.0; n];
        let mut bottom = vec![0.0; n];
        for j in 0..n {
            let row = j * n..(j + 1) * n;
            let (cc, cs, ss) = (&self.a_cc[row.clone()], &self.a_cs[row.clone()], &self.a_ss[row]);
            top[j] = dot(cc, m_c) + dot(cs, m_s);
            bottom[j] += dot(ss, m_s);
            // A_csᵀ m_c accumulated row by row.
            let mc = m_c[j];
            for (b, a) in bottom.iter_mut().zip(cs) {
                *b += a * mc;
            }
        }
        (top, bottom)
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.n
    }

    fn evaluate(&self, m_c: &[f64], m_s: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (h_c, h_s) = self.apply(m_c, m_s);
        let d = dot(m_c, m_s);
        let quad = dot(&h_c, m_c) + dot(&h_s, m_s);
        let lin = dot(&self.b_c, m_c) + dot(&self.b_s, m_s);
        let loss = quad - 2.0 * lin + self.constant + self.lambda * d.abs();
        let pen = self.lambda * sign0(d);
        let g_c = (0..self.n).map(|j| 2.0 * (h_c[j] - self.b_c[j]) + pen * m_s[j]).collect();
        let g_s = (0..self.n).map(|j| 2.0 * (h_s[j] - self.b_s[j]) + pen * m_c[j]).collect();
        (loss, g_c, g_s)
    }
}
