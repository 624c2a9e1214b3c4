//! Center-distance detection metrics: AP at several distance thresholds and
//! translation, orientation and velocity errors of matched pairs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching distance used for the error metrics.
pub const DEFAULT_TP_THRESHOLD: f64 = 2.0;
/// Ground-truth speed above which a match counts toward the fast-object AVE.
pub const DEFAULT_FAST_SPEED: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class: usize,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl DetectionBox {
    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|s| *s > 0.0) {
            return Err(Error::InvalidArgument(format!("box size {:?} must be positive", self.size)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!("box score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn planar_distance(&self, other: &DetectionBox) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index)`.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Prediction indices by descending score; ties keep input order.
fn score_order(preds: &[DetectionBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching in descending score order: each prediction takes the
/// nearest unmatched ground truth of its class closer than `threshold`.
/// Equal distances go to the lower ground-truth index.
pub fn match_by_center_distance(preds: &[DetectionBox], gts: &[DetectionBox], threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] || gt.class != preds[p].class {
                continue;
            }
            let d = preds[p].planar_distance(gt);
            if d < threshold && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                out.pairs.push((p, j));
            }
            None => out.unmatched_preds.push(p),
        }
    }
    out.unmatched_gts = (0..gts.len()).filter(|&j| !taken[j]).collect();
    out
}

/// All-points interpolated area under a precision/recall curve given the
/// true/false-positive flags of score-sorted predictions.
fn ap_from_flags(flags: &[bool], npos: usize) -> f64 {
    if npos == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Predictions and ground truth of one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub preds: Vec<DetectionBox>,
    pub gts: Vec<DetectionBox>,
}

/// AP over several frames, restricted to `class` when given. Matching is
/// per frame; predictions are ranked jointly by score, ties broken by
/// frame then prediction index.
pub fn average_precision_frames(frames: &[FrameEval], class: Option<usize>, threshold: f64) -> f64 {
    let keep = |b: &DetectionBox| class.map_or(true, |c| b.class == c);
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut npos = 0;
    for (fi, f) in frames.iter().enumerate() {
        let preds: Vec<DetectionBox> = f.preds.iter().filter(|b| keep(b)).cloned().collect();
        let gts: Vec<DetectionBox> = f.gts.iter().filter(|b| keep(b)).cloned().collect();
        npos += gts.len();
        let m = match_by_center_distance(&preds, &gts, threshold);
        let mut tp = vec![false; preds.len()];
        for (p, _) in &m.pairs {
            tp[*p] = true;
        }
        for (pi, p) in preds.iter().enumerate() {
            scored.push((p.score, fi, pi, tp[pi]));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = scored.iter().map(|s| s.3).collect();
    ap_from_flags(&flags, npos)
}

/// AP of a single frame with all classes pooled (matching is still
/// class-aware).
pub fn average_precision(preds: &[DetectionBox], gts: &[DetectionBox], threshold: f64) -> f64 {
    average_precision_frames(
        &[FrameEval {
            preds: preds.to_vec(),
            gts: gts.to_vec(),
        }],
        None,
        threshold,
    )
}

/// Mean errors over matched pairs; NaN with zero count when empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    #[serde(with = "nan_as_null")]
    pub ate: f64,
    #[serde(with = "nan_as_null")]
    pub aoe: f64,
    #[serde(with = "nan_as_null")]
    pub ave: f64,
    pub count: usize,
}

/// ATE (planar center distance), AOE (absolute yaw difference folded into
/// `[0, pi]`) and AVE (planar velocity difference) over `(pred, gt)` pairs.
pub fn error_metrics(pairs: &[(&DetectionBox, &DetectionBox)]) -> ErrorMetrics {
    if pairs.is_empty() {
        return ErrorMetrics {
            ate: f64::NAN,
            aoe: f64::NAN,
            ave: f64::NAN,
            count: 0,
        };
    }
    let n = pairs.len() as f64;
    let (mut ate, mut aoe, mut ave) = (0.0, 0.0, 0.0);
    for (p, g) in pairs {
        ate += p.planar_distance(g);
        aoe += wrap_angle(p.yaw - g.yaw).abs();
        ave += (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]);
    }
    ErrorMetrics {
        ate: ate / n,
        aoe: aoe / n,
        ave: ave / n,
        count: pairs.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub fast_speed: f64,
    pub num_classes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            tp_threshold: DEFAULT_TP_THRESHOLD,
            fast_speed: DEFAULT_FAST_SPEED,
            num_classes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    /// AP at each configured threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub note: String,
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassReport>,
    /// Mean over classes with ground truth and over thresholds.
    pub map: f64,
    pub errors: ErrorMetrics,
    /// Errors restricted to matches whose ground truth moves faster than
    /// `fast_speed`.
    pub fast_errors: ErrorMetrics,
    pub fast_speed: f64,
}

pub const REPORT_NOTE: &str =
    "toy-scale metrics: mAP, ATE, AOE, AVE only; no composite score, scale or attribute errors";

pub fn evaluate(frames: &[FrameEval], cfg: &EvalConfig) -> MetricReport {
    let mut per_class = Vec::with_capacity(cfg.num_classes);
    let mut ap_sum = 0.0;
    let mut ap_n = 0;
    for c in 0..cfg.num_classes {
        let gt_count = frames.iter().map(|f| f.gts.iter().filter(|b| b.class == c).count()).sum();
        let pred_count = frames.iter().map(|f| f.preds.iter().filter(|b| b.class == c).count()).sum();
        let ap: Vec<f64> = cfg.thresholds.iter().map(|&t| average_precision_frames(frames, Some(c), t)).collect();
        if gt_count > 0 {
            ap_sum += ap.iter().sum::<f64>();
            ap_n += ap.len();
        }
        per_class.push(ClassReport {
            class: c,
            gt_count,
            pred_count,
            ap,
        });
    }
    let mut all = Vec::new();
    for f in frames {
        for (p, g) in match_by_center_distance(&f.preds, &f.gts, cfg.tp_threshold).pairs {
            all.push((&f.preds[p], &f.gts[g]));
        }
    }
    let fast: Vec<_> = all.iter().copied().filter(|(_, g)| g.speed() > cfg.fast_speed).collect();
    MetricReport {
        note: REPORT_NOTE.into(),
        thresholds: cfg.thresholds.clone(),
        per_class,
        map: if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 },
        errors: error_metrics(&all),
        fast_errors: error_metrics(&fast),
        fast_speed: cfg.fast_speed,
    }
}

impl MetricReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.note);
        let _ = write!(s, "{:>6} {:>6} {:>6}", "class", "gt", "pred");
        for t in &self.thresholds {
            let _ = write!(s, " {:>8}", format!("AP@{t}"));
        }
        s.push('\n');
        for c in &self.per_class {
            let _ = write!(s, "{:>6} {:>6} {:>6}", c.class, c.gt_count, c.pred_count);
            for ap in &c.ap {
                let _ = write!(s, " {:>8.4}", ap);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "mAP {:.4}", self.map);
        let e = &self.errors;
        let _ = writeln!(s, "ATE {:.4} m  AOE {:.4} rad  AVE {:.4} m/s  ({} matches)", e.ate, e.aoe, e.ave, e.count);
        let f = &self.fast_errors;
        let _ = writeln!(s, "AVE (gt speed > {} m/s) {:.4} m/s  ({} matches)", self.fast_speed, f.ave, f.count);
        s
    }
}

/// Serializes NaN as JSON `null` and reads `null` back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
