use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SecMetric;

/// Which consistency terms and which hallucination path are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub style: bool,
    pub hcl: bool,
    pub rac: bool,
    pub sec: bool,
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles {
        style: true,
        hcl: true,
        rac: true,
        sec: true,
    };
    pub const NONE: LossToggles = LossToggles {
        style: false,
        hcl: false,
        rac: false,
        sec: false,
    };

    /// Whether a second (hallucinated) branch has to be computed at all.
    pub fn needs_second_branch(&self) -> bool {
        self.style || self.hcl || self.rac || self.sec
    }
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub hcl: f64,
    pub rac: f64,
    pub sec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            reg: 1.0,
            hcl: 1.0,
            rac: 1.0,
            sec: 1.0,
        }
    }
}

/// Architecture and loss settings of the toy detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of the four backbone blocks (strides 1, 2, 4, 4).
    pub widths: [usize; 4],
    pub pyramid_width: usize,
    /// Side of the square sampling grid used by both RoI poolers.
    pub pool_size: usize,
    /// Embedding dimension d of the projection heads.
    pub embed_dim: usize,
    /// Hidden width of every two-layer head.
    pub head_hidden: usize,
    pub num_classes: usize,
    /// Proposals (RoIs) per image, n.
    pub proposals: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Square anchor sides in pixels, one anchor per size and location.
    pub anchor_sizes: Vec<f64>,
    pub rpn_nms_iou: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub toggles: LossToggles,
    /// Per-block hallucination switches for F^1..F^4.
    pub style_blocks: [bool; 4],
    pub sec_metric: SecMetric,
    pub weights: LossWeights,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            in_channels: 3,
            widths: [8, 16, 32, 32],
            pyramid_width: 32,
            pool_size: 4,
            embed_dim: 128,
            head_hidden: 128,
            num_classes: 3,
            proposals: 16,
            tau: 0.1,
            anchor_sizes: vec![8.0, 16.0, 28.0],
            rpn_nms_iou: 0.7,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
            toggles: LossToggles::ALL,
            style_blocks: [true; 4],
            sec_metric: SecMetric::Jsd,
            weights: LossWeights::default(),
        }
    }
}

/// Pyramid stride relative to the input image.
pub const PYRAMID_STRIDE: usize = 4;
/// Strides of the four backbone blocks.
pub const BLOCK_STRIDES: [usize; 4] = [1, 2, 4, 4];

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % PYRAMID_STRIDE != 0 {
            return fail(format!("image_size {} must be a positive multiple of 4", self.image_size));
        }
        if self.proposals < 2 {
            return fail(format!("proposals must be at least 2, got {}", self.proposals));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.embed_dim < 8 {
            return fail(format!("embed_dim must be at least 8, got {}", self.embed_dim));
        }
        if self.widths.iter().any(|&w| w == 0) || self.pyramid_width == 0 || self.head_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.num_classes == 0 || self.pool_size == 0 || self.in_channels == 0 {
            return fail("num_classes, pool_size and in_channels must be positive".into());
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return fail("anchor_sizes must be non-empty and positive".into());
        }
        for (name, v) in [("rpn_nms_iou", self.rpn_nms_iou), ("nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return fail(format!("score_threshold must lie in [0, 1), got {}", self.score_threshold));
        }
        Ok(())
    }

    pub fn pyramid_size(&self) -> usize {
        self.image_size / PYRAMID_STRIDE
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_sizes.len()
    }

    /// Length of one flattened pooled RoI feature.
    pub fn pooled_len(&self) -> usize {
        self.pool_size * self.pool_size * self.pyramid_width
    }

    pub fn block_size(&self, block: usize) -> usize {
        self.image_size / BLOCK_STRIDES[block]
    }
}
