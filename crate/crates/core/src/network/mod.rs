//! Mini BEV detection transformer built on the autodiff tape.
//!
//! All tape tensors are row-major and cell-major: a BEV feature enters the
//! graph as `[cells, C]` and a camera feature map as `[H_f * W_f, C_f]`.

mod attention;
mod decoder;
mod encoder;
mod heads;
mod model;
mod params;

pub use attention::{
    bilinear_sample, bilinear_sample_vjp, declare_deform, deformable_attention, object_focused_spatial_attention,
    spatial_attention, spatial_layout, spatial_term, temporal_attention, temporal_layout, DeformSpec, SpatialRefs,
};
pub use decoder::{declare_decoder, decoder_forward, decoder_forward_layers, DecoderQueries, QuerySet};
pub use encoder::{declare_encoder, encoder_forward, EncoderContext, TemporalInputs};
pub use heads::{
    aux_prefix, declare_detection_head, declare_heads, decode_box, decode_detections, detection_head,
    detection_head_with, encode_box, heatmap_head, BOX_DIM,
};
pub use model::{FrameInput, FrameOutput, Model};
pub use params::{declare_layer_norm, declare_linear, declare_zero_linear, Graph, Init, ParamSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub points: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    /// Channels of the camera feature maps.
    pub feature_channels: usize,
    pub pillar_points: usize,
    pub max_height_offset: f64,
    /// Adds classification and box heads with their own parameters after
    /// every decoder layer but the last, supervised like the final head.
    pub aux_losses: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 128,
            dropout: 0.0,
            points: 2,
            num_queries: 60,
            num_classes: 3,
            feature_channels: 16,
            pillar_points: crate::spatial_sampling::DEFAULT_PILLAR_POINTS,
            max_height_offset: crate::spatial_sampling::DEFAULT_MAX_OFFSET,
            aux_losses: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("points", self.points),
            ("num_queries", self.num_queries),
            ("num_classes", self.num_classes),
            ("feature_channels", self.feature_channels),
            ("pillar_points", self.pillar_points),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("network config: {name} must be at least 1")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "network config: embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("network config: dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.max_height_offset >= 0.0) {
            return Err(Error::InvalidArgument("network config: negative max_height_offset".into()));
        }
        Ok(())
    }
}

/// Switches for the three object-centric mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleFlags {
    pub ego_fusion: bool,
    pub object_fusion: bool,
    pub local_sampling: bool,
    pub adaptive_offset: bool,
    pub query_enhancement: bool,
}

impl ModuleFlags {
    pub const ALL: Self = Self {
        ego_fusion: true,
        object_fusion: true,
        local_sampling: true,
        adaptive_offset: true,
        query_enhancement: true,
    };
    pub const NONE: Self = Self {
        ego_fusion: false,
        object_fusion: false,
        local_sampling: false,
        adaptive_offset: false,
        query_enhancement: false,
    };

    /// Short label such as `ego+obj+loc+adh+qe` or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.ego_fusion, "ego"),
            (self.object_fusion, "obj"),
            (self.local_sampling, "loc"),
            (self.adaptive_offset, "adh"),
            (self.query_enhancement, "qe"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, s)| *s)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self::ALL
    }
}

/// Per-camera feature maps, each `C_f x H_f x W_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureSet {
    maps: Vec<Tensor>,
}

impl ImageFeatureSet {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::InvalidArgument("feature set needs at least one camera".into()));
        };
        if first.shape.len() != 3 {
            return Err(Error::Shape(format!("feature map must be C x H x W, got {:?}", first.shape)));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.shape != first.shape {
                return Err(Error::Shape(format!(
                    "camera {i} feature shape {:?} differs from {:?}",
                    m.shape, first.shape
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("camera {i} features")));
            }
        }
        Ok(Self { maps })
    }

    pub fn cameras(&self) -> usize {
        self.maps.len()
    }

    pub fn channels(&self) -> usize {
        self.maps[0].shape[0]
    }

    /// `(H_f, W_f)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.maps[0].shape[1], self.maps[0].shape[2])
    }

    pub fn map(&self, cam: usize) -> &Tensor {
        &self.maps[cam]
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    /// Camera `cam` as a channel-last `[H_f * W_f, C_f]` matrix.
    pub fn channel_last(&self, cam: usize) -> Tensor {
        let m = &self.maps[cam];
        let (c, hw) = (m.shape[0], m.shape[1] * m.shape[2]);
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = m.data[ch * hw + p];
            }
        }
        Tensor::matrix(hw, c, data)
    }
}
