use std::f64::consts::PI;
use std::rc::Rc;

use super::params::{declare_linear, declare_zero_linear, Graph, Init, ParamSet};
use crate::autodiff::{DeformLayout, Slot, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::spatial_sampling::ReferencePointSet;

/// Channel-last `[H*W, C]` copy of a `C x H x W` map.
fn to_channel_last(map: &Tensor) -> Result<Tensor> {
    if map.shape.len() != 3 {
        return Err(Error::Shape(format!("expected C x H x W map, got {:?}", map.shape)));
    }
    let (c, hw) = (map.shape[0], map.shape[1] * map.shape[2]);
    let mut data = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            data[p * c + ch] = map.data[ch * hw + p];
        }
    }
    Ok(Tensor::matrix(hw, c, data))
}

/// Bilinear sample of a `C x H x W` map at normalized `loc`, zero padded.
pub fn bilinear_sample(map: &Tensor, loc: [f64; 2]) -> Result<Vec<f64>> {
    let cl = to_channel_last(map)?;
    let mut tape = Tape::new();
    let m = tape.constant(cl);
    let l = tape.constant(Tensor::matrix(1, 2, loc.to_vec()));
    let s = tape.bilinear(m, l, (map.shape[1], map.shape[2]));
    Ok(tape.value(s).data.clone())
}

/// Sample plus its vector-Jacobian product: returns the sample, the gradient
/// of `upstream . sample` with respect to the map (`C x H x W`) and to `loc`.
pub fn bilinear_sample_vjp(map: &Tensor, loc: [f64; 2], upstream: &[f64]) -> Result<(Vec<f64>, Tensor, [f64; 2])> {
    let cl = to_channel_last(map)?;
    let (c, h, w) = (map.shape[0], map.shape[1], map.shape[2]);
    if upstream.len() != c {
        return Err(Error::Shape(format!("upstream has {} entries for {c} channels", upstream.len())));
    }
    let mut tape = Tape::new();
    let m = tape.leaf(cl);
    let l = tape.leaf(Tensor::matrix(1, 2, loc.to_vec()));
    let s = tape.bilinear(m, l, (h, w));
    let u = tape.constant(Tensor::matrix(1, c, upstream.to_vec()));
    let prod = tape.mul(s, u);
    let root = tape.sum(prod);
    let grads = tape.backward(root);
    let gm = grads.get_or_zero(m, c * h * w);
    let mut dmap = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            dmap[ch * h * w + p] = gm[p * c + ch];
        }
    }
    let gl = grads.get_or_zero(l, 2);
    Ok((tape.value(s).data.clone(), Tensor::new(vec![c, h, w], dmap)?, [gl[0], gl[1]]))
}

/// Dimensions of one deformable attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformSpec {
    pub query_dim: usize,
    pub value_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub points: usize,
}

/// Declares `{prefix}.offset`, `.attn`, `.value` and `.out`.
///
/// Offset and weight projections start with zero weights. The offset bias
/// spreads the points of each head along a short ray (half a pixel per
/// point), so that points are distinguishable from the first step; with
/// identical offsets they would receive identical gradients forever.
pub fn declare_deform(ps: &mut ParamSet, init: &mut Init, prefix: &str, s: &DeformSpec) {
    let n_off = s.heads * s.groups * s.points * 2;
    declare_zero_linear(ps, init, &format!("{prefix}.offset"), s.query_dim, n_off);
    let mut bias = vec![0.0; n_off];
    for h in 0..s.heads {
        let theta = 2.0 * PI * h as f64 / s.heads as f64;
        for g in 0..s.groups {
            for p in 0..s.points {
                let i = ((h * s.groups + g) * s.points + p) * 2;
                let r = 0.5 * (p + 1) as f64;
                bias[i] = r * theta.cos();
                bias[i + 1] = r * theta.sin();
            }
        }
    }
    ps.insert(format!("{prefix}.offset.b"), Tensor::new(vec![n_off], bias).unwrap());
    declare_zero_linear(ps, init, &format!("{prefix}.attn"), s.query_dim, s.heads * s.groups * s.points);
    declare_linear(ps, init, &format!("{prefix}.value"), s.value_dim, s.embed_dim);
    declare_linear(ps, init, &format!("{prefix}.out"), s.embed_dim, s.embed_dim);
}

/// Deformable attention: offsets and point weights are predicted from
/// `query`, each value map is projected, sampled around the references
/// of the layout's slots, averaged over slots and projected out.
pub fn deformable_attention(
    g: &mut Graph,
    prefix: &str,
    s: &DeformSpec,
    query: Var,
    values: &[Var],
    refs: Var,
    layout: Rc<DeformLayout>,
) -> Result<Var> {
    if layout.heads != s.heads || layout.groups != s.groups || layout.points != s.points {
        return Err(Error::Shape(format!("{prefix}: layout does not match attention dimensions")));
    }
    let qv = g.value(query);
    if qv.shape.len() != 2 || qv.cols() != s.query_dim || qv.rows() != layout.slots.len() {
        return Err(Error::Shape(format!(
            "{prefix}: query shape {:?}, expected [{}, {}]",
            qv.shape,
            layout.slots.len(),
            s.query_dim
        )));
    }
    for v in values {
        let t = g.value(*v);
        if t.shape.len() != 2 || t.cols() != s.value_dim {
            return Err(Error::Shape(format!("{prefix}: value shape {:?}, expected {} channels", t.shape, s.value_dim)));
        }
    }
    let offsets = g.linear(&format!("{prefix}.offset"), query);
    let logits = g.linear(&format!("{prefix}.attn"), query);
    let weights = g.tape.softmax_groups(logits, s.points);
    let mut projected: Vec<(Var, Var)> = Vec::new();
    let mut vals = Vec::with_capacity(values.len());
    for &v in values {
        let p = match projected.iter().find(|(raw, _)| *raw == v) {
            Some(&(_, p)) => p,
            None => {
                let p = g.linear(&format!("{prefix}.value"), v);
                projected.push((v, p));
                p
            }
        };
        vals.push(p);
    }
    let core = g.tape.deform_attention(&vals, refs, offsets, weights, layout)?;
    Ok(g.linear(&format!("{prefix}.out"), core))
}

/// Reference tensor and layout for temporal attention: each cell attends
/// around its own normalized center in both value maps, one group per map.
pub fn temporal_layout(grid: &BevGrid, heads: usize, points: usize) -> (Tensor, Rc<DeformLayout>) {
    let n = grid.len();
    let mut refs = Vec::with_capacity(2 * n);
    let mut slots = Vec::with_capacity(n);
    for k in 0..n {
        let uv = grid.normalized_center(k);
        refs.extend_from_slice(&uv);
        slots.push(vec![
            Slot {
                map: 0,
                group: 0,
                reference: k,
            },
            Slot {
                map: 1,
                group: 1,
                reference: k,
            },
        ]);
    }
    let layout = DeformLayout {
        heads,
        groups: 2,
        points,
        map_dims: vec![(grid.rows, grid.cols); 2],
        slots,
    };
    (Tensor::matrix(n, 2, refs), Rc::new(layout))
}

/// Temporal self-attention of the aligned queries over `{qa, prev}`,
/// followed by residual and layer norm. Both inputs are `[cells, C]`.
pub fn temporal_attention(g: &mut Graph, prefix: &str, s: &DeformSpec, grid: &BevGrid, qa: Var, prev: Var) -> Result<Var> {
    let (a, b) = (g.value(qa).shape.clone(), g.value(prev).shape.clone());
    if a != b || a.first() != Some(&grid.len()) {
        return Err(Error::Shape(format!("temporal attention: aligned {a:?} vs previous {b:?} on {} cells", grid.len())));
    }
    let (refs, layout) = temporal_layout(grid, s.heads, s.points);
    let r = g.tape.constant(refs);
    let t = deformable_attention(g, &format!("{prefix}.attn"), s, qa, &[qa, prev], r, layout)?;
    let sum = g.tape.add(qa, t);
    Ok(g.layer_norm(&format!("{prefix}.ln"), sum))
}

/// Flattened sampling slots of a reference point set: one reference row per
/// visible (cell, pillar point, camera) hit, grouped by pillar point.
#[derive(Debug, Clone)]
pub struct SpatialRefs {
    /// `[hits, 2]` normalized image locations.
    pub refs: Tensor,
    /// Derivative of each reference coordinate with respect to a common
    /// height shift of all pillar points.
    pub jac: Vec<f64>,
    pub layout: Rc<DeformLayout>,
}

pub fn spatial_layout(set: &ReferencePointSet, cameras: usize, dims: (usize, usize), heads: usize, points: usize) -> SpatialRefs {
    let mut refs = Vec::new();
    let mut jac = Vec::new();
    let mut slots = Vec::with_capacity(set.hits.len());
    for cell in &set.hits {
        let mut cs = Vec::new();
        for (k, hits) in cell.iter().enumerate() {
            for h in hits {
                cs.push(Slot {
                    map: h.camera,
                    group: k,
                    reference: refs.len() / 2,
                });
                refs.extend_from_slice(&h.uv);
                jac.extend_from_slice(&h.duv_dz);
            }
        }
        slots.push(cs);
    }
    let n = refs.len() / 2;
    SpatialRefs {
        refs: Tensor::matrix(n, 2, refs),
        jac,
        layout: Rc::new(DeformLayout {
            heads,
            groups: set.points_per_cell(),
            points,
            map_dims: vec![dims; cameras],
            slots,
        }),
    }
}

/// Spatial cross-attention term before the residual. When `dh` is given the
/// references move with it to first order, which is exact for the sampled
/// value since the layout is rebuilt at the current height.
pub fn spatial_term(
    g: &mut Graph,
    prefix: &str,
    s: &DeformSpec,
    q: Var,
    cams: &[Var],
    refs: &SpatialRefs,
    dh: Option<Var>,
) -> Result<Var> {
    if cams.is_empty() {
        return Err(Error::InvalidArgument(format!("{prefix}: no camera features")));
    }
    if refs.layout.map_dims.len() != cams.len() {
        return Err(Error::Shape(format!(
            "{prefix}: layout built for {} cameras, got {}",
            refs.layout.map_dims.len(),
            cams.len()
        )));
    }
    let r = match dh {
        Some(d) => g.tape.scalar_jacobian(d, refs.refs.clone(), refs.jac.clone()),
        None => g.tape.constant(refs.refs.clone()),
    };
    deformable_attention(g, prefix, s, q, cams, r, refs.layout.clone())
}

/// Spatial attention over one height band with residual and layer norm.
pub fn spatial_attention(g: &mut Graph, prefix: &str, s: &DeformSpec, q: Var, cams: &[Var], refs: &SpatialRefs) -> Result<Var> {
    let t = spatial_term(g, &format!("{prefix}.attn"), s, q, cams, refs, None)?;
    let sum = g.tape.add(q, t);
    Ok(g.layer_norm(&format!("{prefix}.ln"), sum))
}

/// Sum of a global-band and a local-band spatial attention with separate
/// parameters (`{prefix}.global`, `{prefix}.local`), then residual and layer
/// norm. `dh` is the adaptive shift the local references were built with.
#[allow(clippy::too_many_arguments)]
pub fn object_focused_spatial_attention(
    g: &mut Graph,
    prefix: &str,
    s: &DeformSpec,
    q: Var,
    cams: &[Var],
    global: &SpatialRefs,
    local: Option<&SpatialRefs>,
    dh: Option<Var>,
) -> Result<Var> {
    let mut sum = spatial_term(g, &format!("{prefix}.global"), s, q, cams, global, None)?;
    if let Some(local) = local {
        let l = spatial_term(g, &format!("{prefix}.local"), s, q, cams, local, dh)?;
        sum = g.tape.add(sum, l);
    }
    let res = g.tape.add(q, sum);
    Ok(g.layer_norm(&format!("{prefix}.ln"), res))
}
