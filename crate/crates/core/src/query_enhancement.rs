//! Heatmap peak selection and decoder query replacement.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::network::QuerySet;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: BevGrid,
    /// Row-major `rows x cols` scores in `[0, 1]`.
    pub scores: Vec<f64>,
}

impl Heatmap {
    pub fn new(grid: BevGrid, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.len() {
            return Err(Error::Shape(format!("heatmap has {} scores for {} cells", scores.len(), grid.len())));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("heatmap score {s} outside [0, 1]")));
        }
        Ok(Self { grid, scores })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancementConfig {
    pub n_rep: usize,
    /// Side of the square suppression window, odd.
    pub window: usize,
    pub min_score: f64,
    /// Also replace the content embeddings of enhanced queries by the BEV
    /// features at the peaks.
    pub replace_content: bool,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self {
            n_rep: 50,
            window: 3,
            min_score: 0.05,
            replace_content: false,
        }
    }
}

/// Cells that are strict maxima of their window, at least `min_score`,
/// sorted by descending score (lower index first on ties), at most `n_rep`.
pub fn select_peaks(h: &Heatmap, cfg: &EnhancementConfig) -> Vec<(usize, f64)> {
    let (rows, cols) = (h.grid.rows as isize, h.grid.cols as isize);
    let r = (cfg.window / 2) as isize;
    let mut peaks = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let k = (row * cols + col) as usize;
            let s = h.scores[k];
            if s < cfg.min_score {
                continue;
            }
            let mut strict = true;
            'win: for dr in -r..=r {
                for dc in -r..=r {
                    let (nr, nc) = (row + dr, col + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= rows || nc >= cols {
                        continue;
                    }
                    if h.scores[(nr * cols + nc) as usize] >= s {
                        strict = false;
                        break 'win;
                    }
                }
            }
            if strict {
                peaks.push((k, s));
            }
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    peaks.truncate(cfg.n_rep);
    peaks
}

/// Replaces the references and positional embeddings of the first
/// `peaks.len()` queries: the reference becomes the normalized peak cell
/// center and the embedding `uv . w + b` (`w` is `[2, C]`, `b` is `[C]`).
pub fn enhance_queries(base: &QuerySet, peaks: &[(usize, f64)], grid: &BevGrid, w: &Tensor, b: &Tensor) -> Result<QuerySet> {
    if peaks.len() > base.len() {
        return Err(Error::InvalidArgument(format!(
            "{} peaks exceed {} decoder queries",
            peaks.len(),
            base.len()
        )));
    }
    let c = base.content.cols();
    if w.shape != [2, c] || b.len() != c {
        return Err(Error::Shape(format!("position map {:?} / {:?} for width {c}", w.shape, b.shape)));
    }
    let mut out = base.clone();
    for (q, &(k, _)) in peaks.iter().enumerate() {
        let uv = grid.normalized_center(k);
        out.refs[q] = uv;
        for j in 0..c {
            out.pos.data[q * c + j] = uv[0] * w.data[j] + uv[1] * w.data[c + j] + b.data[j];
        }
    }
    Ok(out)
}
