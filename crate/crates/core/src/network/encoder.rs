use super::attention::{declare_deform, object_focused_spatial_attention, spatial_layout, temporal_attention, DeformSpec, SpatialRefs};
use super::params::{declare_layer_norm, declare_linear, declare_zero_linear, Graph, Init, ParamSet};
use super::{ModuleFlags, NetworkConfig};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraModel, HeightRange, PlanarPose};
use crate::spatial_sampling::{build_reference_points, predict_height_offset};
use crate::temporal_fusion::{ego_overlap_mapping, CellSource, FusionConfig, FusionPlan, ObjectMotionRecord};

pub(crate) fn temporal_spec(cfg: &NetworkConfig) -> DeformSpec {
    DeformSpec {
        query_dim: cfg.embed_dim,
        value_dim: cfg.embed_dim,
        embed_dim: cfg.embed_dim,
        heads: cfg.heads,
        groups: 2,
        points: cfg.points,
    }
}

pub(crate) fn spatial_spec(cfg: &NetworkConfig) -> DeformSpec {
    DeformSpec {
        query_dim: cfg.embed_dim,
        value_dim: cfg.feature_channels,
        embed_dim: cfg.embed_dim,
        heads: cfg.heads,
        groups: cfg.pillar_points,
        points: cfg.points,
    }
}

pub(crate) fn declare_ffn(ps: &mut ParamSet, init: &mut Init, prefix: &str, cfg: &NetworkConfig) {
    declare_linear(ps, init, &format!("{prefix}.fc1"), cfg.embed_dim, cfg.ffn_hidden);
    declare_linear(ps, init, &format!("{prefix}.fc2"), cfg.ffn_hidden, cfg.embed_dim);
    declare_layer_norm(ps, init, &format!("{prefix}.ln"), cfg.embed_dim);
}

/// `LN(x + fc2(dropout(gelu(fc1(x)))))`.
pub(crate) fn ffn(g: &mut Graph, prefix: &str, cfg: &NetworkConfig, x: Var) -> Var {
    let h = g.linear(&format!("{prefix}.fc1"), x);
    let h = g.tape.gelu(h);
    let h = g.dropout(h, cfg.dropout);
    let o = g.linear(&format!("{prefix}.fc2"), h);
    let s = g.tape.add(x, o);
    g.layer_norm(&format!("{prefix}.ln"), s)
}

/// Declares the learned BEV queries, positional embeddings and every
/// encoder layer for a grid of `cells` cells.
pub fn declare_encoder(ps: &mut ParamSet, init: &mut Init, cfg: &NetworkConfig, cells: usize) {
    let c = cfg.embed_dim;
    ps.insert("bev.embed", init.uniform(&[cells, c], 1.0));
    ps.insert("bev.pos", init.uniform(&[cells, c], 1.0));
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        declare_deform(ps, init, &format!("{p}.tsa.attn"), &temporal_spec(cfg));
        declare_layer_norm(ps, init, &format!("{p}.tsa.ln"), c);
        declare_zero_linear(ps, init, &format!("{p}.dh"), c, 1);
        declare_deform(ps, init, &format!("{p}.sca.global"), &spatial_spec(cfg));
        declare_deform(ps, init, &format!("{p}.sca.local"), &spatial_spec(cfg));
        declare_layer_norm(ps, init, &format!("{p}.sca.ln"), c);
        declare_ffn(ps, init, &format!("{p}.ffn"), cfg);
    }
}

/// Temporal inputs for one frame, precomputed as constant masks on the
/// cell-major `[cells, C]` layout.
///
/// The aligned queries are `x * fuse_mask + fuse_offset` where `x` is the
/// current layer input. The second temporal value map is the previous BEV
/// expressed in the current frame: aligned previous features on the
/// ego-overlap cells and the aligned queries elsewhere. Without ego fusion
/// it is the raw previous BEV.
#[derive(Debug, Clone)]
pub struct TemporalInputs {
    pub fuse_mask: Vec<f64>,
    pub fuse_offset: Vec<f64>,
    pub prev_mask: Vec<f64>,
    pub prev_offset: Vec<f64>,
    pub plan: FusionPlan,
}

impl TemporalInputs {
    /// `prev` is the previous BEV, cell-major `[cells, C]`.
    pub fn build(
        grid: &BevGrid,
        prev: &Tensor,
        pose: &PlanarPose,
        motion: &ObjectMotionRecord,
        dt: f64,
        flags: &ModuleFlags,
        max_aligned_objects: usize,
    ) -> Result<Self> {
        let n = grid.len();
        if prev.shape.len() != 2 || prev.rows() != n {
            return Err(Error::Shape(format!("previous BEV shape {:?} on {n} cells", prev.shape)));
        }
        let c = prev.cols();
        let fcfg = FusionConfig {
            ego: flags.ego_fusion,
            object: flags.object_fusion,
            max_aligned_objects,
        };
        let plan = FusionPlan::build(grid, pose, motion, dt, &fcfg)?;
        let mut fuse_mask = vec![1.0; n * c];
        let mut fuse_offset = vec![0.0; n * c];
        for (j, src) in plan.cells.iter().enumerate() {
            let row = j * c..(j + 1) * c;
            match *src {
                CellSource::Current => {}
                CellSource::EgoAligned(i) => fuse_offset[row].copy_from_slice(prev.row(i)),
                CellSource::Object(i) => {
                    fuse_mask[row.clone()].iter_mut().for_each(|m| *m = 0.0);
                    fuse_offset[row].copy_from_slice(prev.row(i));
                }
            }
        }
        let (prev_mask, prev_offset) = if flags.ego_fusion {
            let mut mask = vec![1.0; n * c];
            let mut off = vec![0.0; n * c];
            for (i, j) in ego_overlap_mapping(grid, grid, pose)?.pairs {
                mask[j * c..(j + 1) * c].iter_mut().for_each(|m| *m = 0.0);
                off[j * c..(j + 1) * c].copy_from_slice(prev.row(i));
            }
            (mask, off)
        } else {
            (vec![0.0; n * c], prev.data.clone())
        };
        Ok(Self {
            fuse_mask,
            fuse_offset,
            prev_mask,
            prev_offset,
            plan,
        })
    }
}

/// Static inputs of the encoder for one frame.
pub struct EncoderContext<'a> {
    pub grid: BevGrid,
    pub cams: &'a [CameraModel],
    pub feat_dims: (usize, usize),
    pub global_refs: &'a SpatialRefs,
    /// Local-band references at the unshifted base range.
    pub local_refs: &'a SpatialRefs,
    pub local_range: HeightRange,
    pub flags: ModuleFlags,
    pub temporal: Option<&'a TemporalInputs>,
}

/// Encoder stack over cell-major queries `x0` (`[cells, C]`) and camera
/// feature matrices `cams`. Per layer: temporal fusion, temporal
/// attention, the adaptive height offset, global plus local spatial
/// attention, FFN. Returns the final BEV and the per-layer height offsets.
pub fn encoder_forward(g: &mut Graph, cfg: &NetworkConfig, ctx: &EncoderContext, x0: Var, cams: &[Var]) -> Result<(Var, Vec<f64>)> {
    let n = ctx.grid.len();
    let shape = g.value(x0).shape.clone();
    if shape != [n, cfg.embed_dim] {
        return Err(Error::Shape(format!("encoder input {shape:?}, expected [{n}, {}]", cfg.embed_dim)));
    }
    let mut x = x0;
    let mut offsets = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let p = format!("enc.{l}");
        let (qa, prev) = match ctx.temporal {
            Some(t) => {
                let qa = g.tape.mask_add(x, t.fuse_mask.clone(), &t.fuse_offset);
                let prev = g.tape.mask_add(qa, t.prev_mask.clone(), &t.prev_offset);
                (qa, prev)
            }
            None => (x, x),
        };
        let x1 = temporal_attention(g, &format!("{p}.tsa"), &temporal_spec(cfg), &ctx.grid, qa, prev)?;

        let mut local_owned = None;
        let mut dh = None;
        if ctx.flags.local_sampling && ctx.flags.adaptive_offset {
            let w = g.param(&format!("{p}.dh.w"));
            let b = g.param(&format!("{p}.dh.b"));
            let d = predict_height_offset(&mut g.tape, x1, w, b, cfg.max_height_offset);
            let shift = g.value(d).data[0];
            offsets.push(shift);
            let set = build_reference_points(&ctx.grid, ctx.cams, &ctx.local_range.shifted(shift), cfg.pillar_points)?;
            local_owned = Some(spatial_layout(&set, ctx.cams.len(), ctx.feat_dims, cfg.heads, cfg.points));
            dh = Some(d);
        }
        let local = if ctx.flags.local_sampling {
            Some(local_owned.as_ref().unwrap_or(ctx.local_refs))
        } else {
            None
        };
        let x2 = object_focused_spatial_attention(g, &format!("{p}.sca"), &spatial_spec(cfg), x1, cams, ctx.global_refs, local, dh)?;
        x = ffn(g, &format!("{p}.ffn"), cfg, x2);
    }
    Ok((x, offsets))
}
