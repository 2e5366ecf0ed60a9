//! Four-block convolutional backbone and the single-level pyramid fuse.

use rand::Rng;

use super::config::{DetectorConfig, BLOCK_STRIDES, PYRAMID_STRIDE};
use super::layers::{conv, init_conv};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Original features or their style-hallucinated counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Original,
    Hallucinated,
}

/// The four block outputs of one image, all from the same branch.
#[derive(Clone, Copy, Debug)]
pub struct BlockSet {
    pub branch: Branch,
    pub maps: [Var; 4],
}

/// Fused stride-4 feature map of one branch.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub branch: Branch,
    pub map: Var,
}

pub fn init_backbone(store: &mut ParamStore, cfg: &DetectorConfig, prefix: &str, rng: &mut impl Rng) -> Result<()> {
    let mut cin = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        init_conv(store, &format!("{prefix}.b{}", i + 1), w, cin, 3, true, rng)?;
        cin = w;
    }
    Ok(())
}

pub fn init_fpn(store: &mut ParamStore, cfg: &DetectorConfig, rng: &mut impl Rng) -> Result<()> {
    for (i, &w) in cfg.widths.iter().enumerate() {
        init_conv(store, &format!("fpn.p{}", i + 1), cfg.pyramid_width, w, 1, false, rng)?;
    }
    Ok(())
}

/// Runs the four 3x3 conv + ReLU blocks on a `(C, H, W)` image.
pub fn backbone_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DetectorConfig,
    prefix: &str,
    image: Var,
) -> Result<[Var; 4]> {
    let expect = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if g.shape(image) != expect {
        return Err(Error::ShapeMismatch {
            op: "backbone_forward",
            left: g.shape(image).to_vec(),
            right: expect.to_vec(),
        });
    }
    let mut x = image;
    let mut out = [image; 4];
    let mut prev_stride = 1;
    for (i, &stride) in BLOCK_STRIDES.iter().enumerate() {
        let s = stride / prev_stride;
        prev_stride = stride;
        let y = conv(g, store, &format!("{prefix}.b{}", i + 1), x, s, 1)?;
        x = g.relu(y)?;
        out[i] = x;
    }
    Ok(out)
}

/// Projects each block with a 1x1 conv, average-pools it to stride 4 and
/// sums. Linear in the block maps.
pub fn fpn_fuse(g: &mut Graph, store: &ParamStore, cfg: &DetectorConfig, blocks: &BlockSet) -> Result<FeaturePyramid> {
    let mut acc: Option<Var> = None;
    for (i, &map) in blocks.maps.iter().enumerate() {
        let pooled = g.avg_pool(map, PYRAMID_STRIDE / BLOCK_STRIDES[i])?;
        let proj = conv(g, store, &format!("fpn.p{}", i + 1), pooled, 1, 0)?;
        acc = Some(match acc {
            None => proj,
            Some(a) => g.add(a, proj)?,
        });
    }
    let map = acc.expect("four blocks");
    debug_assert_eq!(g.shape(map), [cfg.pyramid_width, cfg.pyramid_size(), cfg.pyramid_size()]);
    Ok(FeaturePyramid {
        branch: blocks.branch,
        map,
    })
}
