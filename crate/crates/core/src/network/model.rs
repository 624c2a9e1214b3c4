use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{spatial_layout, SpatialRefs};
use super::decoder::{declare_decoder, decoder_forward_layers, DecoderQueries};
use super::encoder::{declare_encoder, encoder_forward, EncoderContext, TemporalInputs};
use super::heads::{aux_prefix, declare_heads, detection_head, detection_head_with, heatmap_head};
use super::params::{declare_linear, Graph, Init, ParamSet};
use super::{ImageFeatureSet, ModuleFlags, NetworkConfig};
use crate::autodiff::{logit, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraModel, PlanarPose};
use crate::query_enhancement::{select_peaks, EnhancementConfig, Heatmap};
use crate::spatial_sampling::{build_reference_points, GLOBAL_RANGE, LOCAL_RANGE};
use crate::temporal_fusion::ObjectMotionRecord;

/// Network definition bound to a grid and a camera rig.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: NetworkConfig,
    pub grid: BevGrid,
    pub cams: Vec<CameraModel>,
    /// `(H_f, W_f)` of the camera feature maps.
    pub feat_dims: (usize, usize),
    pub params: ParamSet,
    global_refs: SpatialRefs,
    local_refs: SpatialRefs,
}

/// Inputs of one frame.
pub struct FrameInput<'a> {
    pub feats: &'a ImageFeatureSet,
    /// Previous BEV, cell-major `[cells, C]`, absent at sequence start.
    pub prev: Option<&'a Tensor>,
    /// Pose mapping the previous ego frame into the current one.
    pub pose: PlanarPose,
    pub motion: &'a ObjectMotionRecord,
    pub dt: f64,
    pub max_aligned_objects: usize,
    /// Replaces heatmap peak selection with a fixed list of `(cell, score)`.
    pub peaks: Option<&'a [(usize, f64)]>,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub bev: Var,
    /// `[cells, 1]`.
    pub heatmap: Var,
    /// `[N, K]`.
    pub logits: Var,
    /// `[N, 10]` encoded boxes.
    pub boxes: Var,
    /// `(logits, boxes)` of the auxiliary heads, one per decoder layer but
    /// the last; empty unless enabled in the config.
    pub aux: Vec<(Var, Var)>,
    pub peaks: Vec<(usize, f64)>,
    pub height_offsets: Vec<f64>,
}

impl Model {
    pub fn new(cfg: NetworkConfig, grid: BevGrid, cams: Vec<CameraModel>, feat_dims: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cams.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one camera".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamSet::new();
        declare_encoder(&mut ps, &mut init, &cfg, grid.len());
        declare_decoder(&mut ps, &mut init, &cfg);
        declare_linear(&mut ps, &mut init, "qe.pos", 2, cfg.embed_dim);
        declare_heads(&mut ps, &mut init, &cfg);
        let global = build_reference_points(&grid, &cams, &GLOBAL_RANGE, cfg.pillar_points)?;
        let local = build_reference_points(&grid, &cams, &LOCAL_RANGE, cfg.pillar_points)?;
        Ok(Self {
            global_refs: spatial_layout(&global, cams.len(), feat_dims, cfg.heads, cfg.points),
            local_refs: spatial_layout(&local, cams.len(), feat_dims, cfg.heads, cfg.points),
            cfg,
            grid,
            cams,
            feat_dims,
            params: ps,
        })
    }

    /// Replaces all parameter values, checking names and shapes.
    pub fn load_params(&mut self, other: &ParamSet) -> Result<()> {
        self.params.load_from(other)
    }

    /// Encoder, heatmap head, query enhancement, decoder and detection head.
    pub fn forward(&self, g: &mut Graph, input: &FrameInput, flags: &ModuleFlags, enh: &EnhancementConfig) -> Result<FrameOutput> {
        let feats = input.feats;
        if feats.cameras() != self.cams.len() || feats.dims() != self.feat_dims || feats.channels() != self.cfg.feature_channels {
            return Err(Error::Shape(format!(
                "features: {} cameras of {:?} with {} channels; model expects {} of {:?} with {}",
                feats.cameras(),
                feats.dims(),
                feats.channels(),
                self.cams.len(),
                self.feat_dims,
                self.cfg.feature_channels
            )));
        }
        let cams: Vec<Var> = (0..feats.cameras()).map(|c| g.tape.constant(feats.channel_last(c))).collect();
        let temporal = match input.prev {
            Some(prev) => Some(TemporalInputs::build(
                &self.grid,
                prev,
                &input.pose,
                input.motion,
                input.dt,
                flags,
                input.max_aligned_objects,
            )?),
            None => None,
        };
        let ctx = EncoderContext {
            grid: self.grid,
            cams: &self.cams,
            feat_dims: self.feat_dims,
            global_refs: &self.global_refs,
            local_refs: &self.local_refs,
            local_range: LOCAL_RANGE,
            flags: *flags,
            temporal: temporal.as_ref(),
        };
        let embed = g.param("bev.embed");
        let pos = g.param("bev.pos");
        let x0 = g.tape.add(embed, pos);
        let (bev, height_offsets) = encoder_forward(g, &self.cfg, &ctx, x0, &cams)?;
        let heatmap = heatmap_head(g, bev);

        let mut q = DecoderQueries::learned(g);
        let mut peaks = Vec::new();
        if flags.query_enhancement {
            let hm = Heatmap::new(self.grid, g.value(heatmap).data.clone())?;
            let mut cfg = *enh;
            cfg.n_rep = cfg.n_rep.min(self.cfg.num_queries);
            peaks = match input.peaks {
                Some(p) => p.iter().copied().take(cfg.n_rep).collect(),
                None => select_peaks(&hm, &cfg),
            };
            if !peaks.is_empty() {
                let idx: Vec<usize> = (0..peaks.len()).collect();
                let uv: Vec<f64> = peaks.iter().flat_map(|&(k, _)| self.grid.normalized_center(k)).collect();
                let logits: Vec<f64> = uv.iter().map(|&u| logit(u)).collect();
                let uv = g.tape.constant(Tensor::matrix(peaks.len(), 2, uv));
                let new_pos = g.linear("qe.pos", uv);
                let new_ref = g.tape.constant(Tensor::matrix(peaks.len(), 2, logits));
                q.pos = g.tape.replace_rows(q.pos, new_pos, idx.clone());
                q.ref_logit = g.tape.replace_rows(q.ref_logit, new_ref, idx.clone());
                if enh.replace_content {
                    let cells = g.tape.gather_rows(bev, peaks.iter().map(|p| p.0).collect());
                    q.content = g.tape.replace_rows(q.content, cells, idx);
                }
            }
        }
        let layers = decoder_forward_layers(g, &self.cfg, &self.grid, &q, bev)?;
        let (last, early) = layers.split_last().expect("validated config has a decoder layer");
        let aux = if self.cfg.aux_losses {
            early
                .iter()
                .enumerate()
                .map(|(l, &emb)| detection_head_with(g, &aux_prefix(l), emb, q.ref_logit))
                .collect()
        } else {
            Vec::new()
        };
        let (logits, boxes) = detection_head(g, *last, q.ref_logit);
        Ok(FrameOutput {
            bev,
            heatmap,
            logits,
            boxes,
            aux,
            peaks,
            height_offsets,
        })
    }
}
