//! Per-layer and whole-merge reports, serialized as the JSON sidecar of a
//! merged adapter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::zip::optimizer::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub rows: usize,
    pub cols: usize,
    /// Training loss at `m_c = m_s = 1`, i.e. of the plain sum.
    pub initial_loss: f64,
    /// Training loss at the returned coefficients.
    pub final_loss: f64,
    /// Optimizer updates performed.
    pub steps: usize,
    /// Whether the merger cosine reached the stop threshold.
    pub converged: bool,
    /// `|m_c·m_s| / (‖m_c‖‖m_s‖)` at initialization and at the result.
    pub initial_merger_cosine: f64,
    pub final_merger_cosine: f64,
    /// The raw penalty quantity `m_c·m_s`.
    pub initial_merger_dot: f64,
    pub final_merger_dot: f64,
    /// Mean over columns of `|m_c[j]·m_s[j]|·|cos(c_j, s_j)|`.
    pub initial_column_interference: f64,
    pub final_column_interference: f64,
    /// Relative preservation residuals of the result on the training probes.
    pub content_residual: f64,
    pub style_residual: f64,
    /// The same residuals for the plain sum.
    pub direct_content_residual: f64,
    pub direct_style_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub config: OptimizerConfig,
    pub content_digest: String,
    pub style_digest: String,
    pub layers: BTreeMap<String, LayerReport>,
    /// Layers carried through from one side only.
    pub content_only: Vec<String>,
    pub style_only: Vec<String>,
    pub converged_layers: usize,
    /// Elapsed time of the merge. Not serialized, so reports from repeated
    /// runs stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are plain data")
    }
}
