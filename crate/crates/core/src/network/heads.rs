use super::params::{declare_linear, Graph, Init, ParamSet};
use super::NetworkConfig;
use crate::autodiff::{sigmoid, Tensor, Var};
use crate::eval::DetectionBox;
use crate::geometry::BevGrid;

/// Regression outputs per query: normalized cx, cy, z, log l, log w,
/// log h, sin yaw, cos yaw, vx, vy.
pub const BOX_DIM: usize = 10;

/// Prior probability behind the initial classification bias.
const CLS_PRIOR: f64 = 0.01;
const HEATMAP_PRIOR: f64 = 0.1;

pub fn declare_heads(ps: &mut ParamSet, init: &mut Init, cfg: &NetworkConfig) {
    let c = cfg.embed_dim;
    declare_linear(ps, init, "hm.fc1", c, c);
    declare_linear(ps, init, "hm.fc2", c, 1);
    ps.insert("hm.fc2.b", init.filled(&[1], crate::autodiff::logit(HEATMAP_PRIOR)));
    declare_detection_head(ps, init, cfg, "det");
    if cfg.aux_losses {
        for l in 0..cfg.decoder_layers - 1 {
            declare_detection_head(ps, init, cfg, &aux_prefix(l));
        }
    }
}

/// Parameter prefix of the auxiliary head after decoder layer `l`.
pub fn aux_prefix(l: usize) -> String {
    format!("det.aux{l}")
}

pub fn declare_detection_head(ps: &mut ParamSet, init: &mut Init, cfg: &NetworkConfig, prefix: &str) {
    let c = cfg.embed_dim;
    declare_linear(ps, init, &format!("{prefix}.cls.fc1"), c, c);
    declare_linear(ps, init, &format!("{prefix}.cls.fc2"), c, cfg.num_classes);
    ps.insert(
        &format!("{prefix}.cls.fc2.b"),
        init.filled(&[cfg.num_classes], crate::autodiff::logit(CLS_PRIOR)),
    );
    declare_linear(ps, init, &format!("{prefix}.reg.fc1"), c, c);
    declare_linear(ps, init, &format!("{prefix}.reg.fc2"), c, BOX_DIM);
}

/// Per-cell centerness in `[0, 1]`: two affine stages with GELU between,
/// then a sigmoid. Returns `[cells, 1]`.
pub fn heatmap_head(g: &mut Graph, bev: Var) -> Var {
    let h = g.linear("hm.fc1", bev);
    let h = g.tape.gelu(h);
    let z = g.linear("hm.fc2", h);
    g.tape.sigmoid(z)
}

/// Class logits `[N, K]` and encoded boxes `[N, 10]`; the center columns
/// are `sigmoid(raw + ref_logit)`.
pub fn detection_head(g: &mut Graph, emb: Var, ref_logit: Var) -> (Var, Var) {
    detection_head_with(g, "det", emb, ref_logit)
}

/// [`detection_head`] with the parameters under `prefix`.
pub fn detection_head_with(g: &mut Graph, prefix: &str, emb: Var, ref_logit: Var) -> (Var, Var) {
    let h = g.linear(&format!("{prefix}.cls.fc1"), emb);
    let h = g.tape.gelu(h);
    let logits = g.linear(&format!("{prefix}.cls.fc2"), h);
    let r = g.linear(&format!("{prefix}.reg.fc1"), emb);
    let r = g.tape.gelu(r);
    let raw = g.linear(&format!("{prefix}.reg.fc2"), r);
    (logits, g.tape.box_decode(raw, ref_logit))
}

/// Regression target of a box on `grid`.
pub fn encode_box(b: &DetectionBox, grid: &BevGrid) -> [f64; BOX_DIM] {
    let uv = grid.normalize([b.center[0], b.center[1]]);
    [
        uv[0],
        uv[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Inverse of [`encode_box`]; yaw is `atan2(sin, cos)`.
pub fn decode_box(v: &[f64], grid: &BevGrid, class: usize, score: f64) -> DetectionBox {
    let xy = grid.denormalize([v[0], v[1]]);
    let size = |x: f64| x.clamp(-8.0, 8.0).exp();
    DetectionBox {
        class,
        score,
        center: [xy[0], xy[1], v[2]],
        size: [size(v[3]), size(v[4]), size(v[5])],
        yaw: v[6].atan2(v[7]),
        velocity: [v[8], v[9]],
    }
}

/// One box per query: the top class and its sigmoid score.
pub fn decode_detections(logits: &Tensor, boxes: &Tensor, grid: &BevGrid) -> Vec<DetectionBox> {
    let k = logits.cols();
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            decode_box(boxes.row(i), grid, best, sigmoid(row[best]))
        })
        .collect()
}
