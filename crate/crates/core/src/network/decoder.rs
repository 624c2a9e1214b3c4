use std::rc::Rc;

use super::attention::{declare_deform, deformable_attention, DeformSpec};
use super::encoder::{declare_ffn, ffn};
use super::params::{declare_layer_norm, declare_linear, Graph, Init, ParamSet};
use super::NetworkConfig;
use crate::autodiff::{logit, DeformLayout, Slot, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BevGrid;

/// Decoder queries as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// `[N, C]`.
    pub content: Tensor,
    /// `[N, C]`.
    pub pos: Tensor,
    /// Normalized reference points in `[0, 1)^2`.
    pub refs: Vec<[f64; 2]>,
}

impl QuerySet {
    pub fn new(content: Tensor, pos: Tensor, refs: Vec<[f64; 2]>) -> Result<Self> {
        let n = refs.len();
        if content.shape.len() != 2 || content.rows() != n || pos.shape != content.shape {
            return Err(Error::Shape(format!(
                "query set: content {:?}, pos {:?}, {n} references",
                content.shape, pos.shape
            )));
        }
        if let Some(r) = refs.iter().find(|r| !(0.0..1.0).contains(&r[0]) || !(0.0..1.0).contains(&r[1])) {
            return Err(Error::InvalidArgument(format!("reference point {r:?} outside [0, 1)^2")));
        }
        Ok(Self { content, pos, refs })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

/// Decoder queries on the tape. References are kept as logits so that box
/// centers can be decoded relative to them.
#[derive(Debug, Clone, Copy)]
pub struct DecoderQueries {
    pub content: Var,
    pub pos: Var,
    /// `[N, 2]` reference logits; the reference point is their sigmoid.
    pub ref_logit: Var,
}

impl DecoderQueries {
    /// Puts a value-level query set on the tape as constants.
    pub fn from_set(g: &mut Graph, q: &QuerySet) -> Self {
        let logits = q.refs.iter().flat_map(|r| [logit(r[0]), logit(r[1])]).collect();
        Self {
            content: g.tape.constant(q.content.clone()),
            pos: g.tape.constant(q.pos.clone()),
            ref_logit: g.tape.constant(Tensor::matrix(q.len(), 2, logits)),
        }
    }

    /// The learned predefined queries.
    pub fn learned(g: &mut Graph) -> Self {
        Self {
            content: g.param("dec.query.content"),
            pos: g.param("dec.query.pos"),
            ref_logit: g.param("dec.query.ref"),
        }
    }
}

pub(crate) fn cross_spec(cfg: &NetworkConfig) -> DeformSpec {
    DeformSpec {
        query_dim: cfg.embed_dim,
        value_dim: cfg.embed_dim,
        embed_dim: cfg.embed_dim,
        heads: cfg.heads,
        groups: 1,
        points: cfg.points,
    }
}

pub fn declare_decoder(ps: &mut ParamSet, init: &mut Init, cfg: &NetworkConfig) {
    let (n, c) = (cfg.num_queries, cfg.embed_dim);
    ps.insert("dec.query.content", init.uniform(&[n, c], 1.0));
    ps.insert("dec.query.pos", init.uniform(&[n, c], 1.0));
    let refs: Vec<f64> = (0..2 * n).map(|_| init.uniform(&[1], 1.0).data[0]).map(|u| logit(0.5 + 0.45 * u)).collect();
    ps.insert("dec.query.ref", Tensor::matrix(n, 2, refs));
    for l in 0..cfg.decoder_layers {
        let p = format!("dec.{l}");
        for proj in ["q", "k", "v", "out"] {
            declare_linear(ps, init, &format!("{p}.sa.{proj}"), c, c);
        }
        declare_layer_norm(ps, init, &format!("{p}.sa.ln"), c);
        declare_deform(ps, init, &format!("{p}.ca.attn"), &cross_spec(cfg));
        declare_layer_norm(ps, init, &format!("{p}.ca.ln"), c);
        declare_ffn(ps, init, &format!("{p}.ffn"), cfg);
    }
}

/// Decoder stack: self-attention among queries, deformable cross-attention
/// onto the BEV (`[cells, C]`) at each query's reference point, FFN.
pub fn decoder_forward(g: &mut Graph, cfg: &NetworkConfig, grid: &BevGrid, q: &DecoderQueries, bev: Var) -> Result<Var> {
    let layers = decoder_forward_layers(g, cfg, grid, q, bev)?;
    Ok(*layers.last().expect("validated config has a decoder layer"))
}

/// Like [`decoder_forward`], returning the embeddings after every layer.
pub fn decoder_forward_layers(
    g: &mut Graph,
    cfg: &NetworkConfig,
    grid: &BevGrid,
    q: &DecoderQueries,
    bev: Var,
) -> Result<Vec<Var>> {
    let cshape = g.value(q.content).shape.clone();
    let n = cshape.first().copied().unwrap_or(0);
    if cshape != [n, cfg.embed_dim] || g.value(q.pos).shape != cshape || g.value(q.ref_logit).shape != [n, 2] {
        return Err(Error::Shape(format!("decoder queries: content {cshape:?}")));
    }
    if g.value(bev).shape != [grid.len(), cfg.embed_dim] {
        return Err(Error::Shape(format!("decoder BEV shape {:?}", g.value(bev).shape)));
    }
    let refs = g.tape.sigmoid(q.ref_logit);
    let layout = Rc::new(DeformLayout {
        heads: cfg.heads,
        groups: 1,
        points: cfg.points,
        map_dims: vec![(grid.rows, grid.cols)],
        slots: (0..n)
            .map(|i| {
                vec![Slot {
                    map: 0,
                    group: 0,
                    reference: i,
                }]
            })
            .collect(),
    });
    let mut x = q.content;
    let mut outs = Vec::with_capacity(cfg.decoder_layers);
    for l in 0..cfg.decoder_layers {
        let p = format!("dec.{l}");
        let qk = g.tape.add(x, q.pos);
        let qq = g.linear(&format!("{p}.sa.q"), qk);
        let kk = g.linear(&format!("{p}.sa.k"), qk);
        let vv = g.linear(&format!("{p}.sa.v"), x);
        let sa = g.tape.mha(qq, kk, vv, cfg.heads);
        let sa = g.linear(&format!("{p}.sa.out"), sa);
        let s = g.tape.add(x, sa);
        x = g.layer_norm(&format!("{p}.sa.ln"), s);

        let xq = g.tape.add(x, q.pos);
        let ca = deformable_attention(g, &format!("{p}.ca.attn"), &cross_spec(cfg), xq, &[bev], refs, layout.clone())?;
        let s = g.tape.add(x, ca);
        x = g.layer_norm(&format!("{p}.ca.ln"), s);

        x = ffn(g, &format!("{p}.ffn"), cfg, x);
        outs.push(x);
    }
    Ok(outs)
}
