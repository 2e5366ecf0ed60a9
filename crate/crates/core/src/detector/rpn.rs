//! Region proposal network: square anchors on the pyramid grid, objectness
//! and box-delta prediction, proposal selection and the anchor loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::backbone::FeaturePyramid;
use super::config::{DetectorConfig, PYRAMID_STRIDE};
use super::layers::{conv, init_conv};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::geometry::{axis_aligned_iou, horizontal_nms, HorizontalBox, OrientedBox};

/// Largest log-scale change applied when decoding a delta.
pub const MAX_LOG_SCALE: f64 = 4.135;
/// Smallest proposal side kept after clipping, in pixels.
pub const MIN_PROPOSAL_SIDE: f64 = 1.0;
/// Anchors sampled per image for the objectness loss.
pub const RPN_SAMPLES: usize = 64;
pub const RPN_POS_IOU: f64 = 0.5;
pub const RPN_NEG_IOU: f64 = 0.3;
/// Candidates kept before NMS.
pub const PRE_NMS: usize = 200;
const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Where a proposal came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalSource {
    Anchor(usize),
    /// A ground-truth hull injected during training.
    GroundTruth(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub hbox: HorizontalBox,
    /// In `(0, 1)`.
    pub objectness: f64,
    pub source: ProposalSource,
}

/// Anchors ordered by row, column, then size.
pub fn anchors(cfg: &DetectorConfig) -> Vec<HorizontalBox> {
    let side = cfg.pyramid_size();
    let stride = PYRAMID_STRIDE as f64;
    let mut out = Vec::with_capacity(side * side * cfg.num_anchors());
    for i in 0..side {
        for j in 0..side {
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            for &s in &cfg.anchor_sizes {
                out.push(HorizontalBox {
                    x: cx - s / 2.0,
                    y: cy - s / 2.0,
                    w: s,
                    h: s,
                });
            }
        }
    }
    out
}

/// `(dx, dy, log dw, log dh)` taking `from` to `to`.
pub fn encode_hbox(from: &HorizontalBox, to: &HorizontalBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [(tx - fx) / from.w, (ty - fy) / from.h, (to.w / from.w).ln(), (to.h / from.h).ln()]
}

pub fn decode_hbox(from: &HorizontalBox, d: &[f64]) -> HorizontalBox {
    let (fx, fy) = from.center();
    let cx = fx + d[0] * from.w;
    let cy = fy + d[1] * from.h;
    let w = from.w * d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = from.h * d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    HorizontalBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
    }
}

pub fn init_rpn(store: &mut ParamStore, cfg: &DetectorConfig, rng: &mut impl Rng) -> Result<()> {
    let c = cfg.pyramid_width;
    let a = cfg.num_anchors();
    init_conv(store, "rpn.conv", c, c, 3, true, rng)?;
    let normal = Normal::new(0.0, 0.01).expect("finite std");
    for (name, out) in [("rpn.cls", a), ("rpn.reg", 4 * a)] {
        let w = (0..out * c).map(|_| normal.sample(rng)).collect();
        store.insert(format!("{name}.w"), Tensor::new(&[out, c, 1, 1], w)?)?;
        store.insert(format!("{name}.b"), Tensor::zeros(&[out]))?;
    }
    Ok(())
}

/// Per-anchor predictions in [`anchors`] order.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `(L*A,)` objectness logits.
    pub logits: Var,
    /// `(L*A, 4)` box deltas.
    pub deltas: Var,
}

pub fn rpn_forward(g: &mut Graph, store: &ParamStore, cfg: &DetectorConfig, pyr: &FeaturePyramid) -> Result<RpnOutput> {
    let a = cfg.num_anchors();
    let side = cfg.pyramid_size();
    let loc = side * side;
    let h = conv(g, store, "rpn.conv", pyr.map, 1, 1)?;
    let h = g.relu(h)?;
    let cls = conv(g, store, "rpn.cls", h, 1, 0)?;
    let cls = g.reshape(cls, &[a, loc])?;
    let cls = g.transpose(cls)?;
    let logits = g.reshape(cls, &[loc * a])?;
    let reg = conv(g, store, "rpn.reg", h, 1, 0)?;
    let reg = g.reshape(reg, &[4 * a, loc])?;
    let reg = g.transpose(reg)?;
    let deltas = g.reshape(reg, &[loc * a, 4])?;
    Ok(RpnOutput { logits, deltas })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Selects exactly `cfg.proposals` boxes.
///
/// `injected` boxes (ground-truth hulls during training) come first. The rest
/// are the highest-objectness decoded anchors that survive NMS; if NMS leaves
/// too few, the best suppressed candidates fill the remainder.
pub fn propose(
    cfg: &DetectorConfig,
    anchors: &[HorizontalBox],
    logits: &[f64],
    deltas: &[f64],
    injected: &[HorizontalBox],
) -> Result<Vec<Proposal>> {
    let size = cfg.image_size as f64;
    let n = cfg.proposals;
    let mut out: Vec<Proposal> = injected
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, b)| Proposal {
            hbox: b.clipped(size, size, MIN_PROPOSAL_SIDE),
            objectness: 1.0 - f64::EPSILON,
            source: ProposalSource::GroundTruth(i),
        })
        .collect();
    let want = n - out.len();
    if want == 0 {
        return Ok(out);
    }
    let scores: Vec<f64> = logits.iter().map(|&l| sigmoid(l).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)).collect();
    let order = crate::geometry::score_order(&scores);
    let cand: Vec<usize> = order.into_iter().take(PRE_NMS.max(want)).collect();
    let boxes: Vec<HorizontalBox> = cand
        .iter()
        .map(|&k| decode_hbox(&anchors[k], &deltas[4 * k..4 * k + 4]).clipped(size, size, MIN_PROPOSAL_SIDE))
        .collect();
    let cand_scores: Vec<f64> = cand.iter().map(|&k| scores[k]).collect();
    let mut keep = horizontal_nms(&boxes, &cand_scores, cfg.rpn_nms_iou)?;
    keep.truncate(want);
    if keep.len() < want {
        let mut taken = vec![false; cand.len()];
        for &k in &keep {
            taken[k] = true;
        }
        keep.extend((0..cand.len()).filter(|&k| !taken[k]).take(want - keep.len()));
    }
    out.extend(keep.into_iter().map(|k| Proposal {
        hbox: boxes[k],
        objectness: cand_scores[k],
        source: ProposalSource::Anchor(cand[k]),
    }));
    Ok(out)
}

/// Sampled anchors and their targets for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnTargets {
    /// Sampled anchor indices with binary labels.
    pub sampled: Vec<(usize, bool)>,
    /// Positive anchors with encoded regression targets.
    pub regress: Vec<(usize, [f64; 4])>,
}

/// Labels anchors against the ground-truth hulls and samples up to
/// [`RPN_SAMPLES`] of them, at most half positive.
///
/// An anchor is positive at hull IoU ≥ [`RPN_POS_IOU`], negative below
/// [`RPN_NEG_IOU`]. The best anchor of every ground truth is also positive.
pub fn rpn_targets(anchors: &[HorizontalBox], gts: &[OrientedBox], rng: &mut impl Rng) -> RpnTargets {
    let hulls: Vec<HorizontalBox> = gts.iter().map(OrientedBox::hull).collect();
    let mut best_gt = vec![(usize::MAX, 0.0f64); anchors.len()];
    let mut best_anchor = vec![(usize::MAX, 0.0f64); hulls.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (k, hull) in hulls.iter().enumerate() {
            let iou = axis_aligned_iou(anchor, hull);
            if iou > best_gt[a].1 {
                best_gt[a] = (k, iou);
            }
            if iou > best_anchor[k].1 {
                best_anchor[k] = (a, iou);
            }
        }
    }
    let mut positive: Vec<usize> = (0..anchors.len()).filter(|&a| best_gt[a].1 >= RPN_POS_IOU).collect();
    for (k, &(a, iou)) in best_anchor.iter().enumerate() {
        if a != usize::MAX && iou > 0.0 && best_gt[a].1 < RPN_POS_IOU {
            best_gt[a] = (k, iou);
            positive.push(a);
        }
    }
    positive.sort_unstable();
    positive.dedup();
    let mut negative: Vec<usize> = (0..anchors.len())
        .filter(|&a| best_gt[a].1 < RPN_NEG_IOU && positive.binary_search(&a).is_err())
        .collect();
    positive.shuffle(rng);
    positive.truncate(RPN_SAMPLES / 2);
    negative.shuffle(rng);
    negative.truncate(RPN_SAMPLES - positive.len());
    let regress = positive
        .iter()
        .map(|&a| (a, encode_hbox(&anchors[a], &hulls[best_gt[a].0])))
        .collect();
    let sampled = positive
        .iter()
        .map(|&a| (a, true))
        .chain(negative.iter().map(|&a| (a, false)))
        .collect();
    RpnTargets { sampled, regress }
}

/// Binary cross-entropy averaged over sampled anchors and smooth-L1 over
/// positive deltas averaged over positives.
pub fn rpn_loss(g: &mut Graph, out: &RpnOutput, t: &RpnTargets) -> Result<(Var, Var)> {
    let cls = if t.sampled.is_empty() {
        g.constant(Tensor::scalar(0.0))?
    } else {
        let idx: Vec<usize> = t.sampled.iter().map(|&(a, _)| a).collect();
        let y: Vec<f64> = t.sampled.iter().map(|&(_, p)| if p { 1.0 } else { 0.0 }).collect();
        let s = g.gather(out.logits, &idx)?;
        let sp = g.softplus(s)?;
        let y = g.constant(Tensor::vector(y))?;
        let ys = g.mul(y, s)?;
        let bce = g.sub(sp, ys)?;
        g.mean(bce)?
    };
    let reg = if t.regress.is_empty() {
        g.constant(Tensor::scalar(0.0))?
    } else {
        let idx: Vec<usize> = t.regress.iter().flat_map(|&(a, _)| (0..4).map(move |k| 4 * a + k)).collect();
        let target: Vec<f64> = t.regress.iter().flat_map(|(_, d)| d.iter().copied()).collect();
        let d = g.gather(out.deltas, &idx)?;
        let target = g.constant(Tensor::vector(target))?;
        let r = g.sub(d, target)?;
        let l = g.smooth_l1(r, SMOOTH_L1_BETA)?;
        let s = g.sum(l)?;
        g.scale(s, 1.0 / t.regress.len() as f64)?
    };
    Ok((cls, reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_layout() {
        let cfg = DetectorConfig::default();
        let a = anchors(&cfg);
        assert_eq!(a.len(), 16 * 16 * 3);
        assert_eq!(a[0].center(), (2.0, 2.0));
        assert_eq!(a[3 * 17 + 1].center(), (6.0, 6.0));
        assert_eq!(a[3 * 17 + 1].w, 16.0);
    }

    #[test]
    fn delta_round_trip() {
        let from = HorizontalBox::new(3.0, 4.0, 10.0, 6.0).unwrap();
        let to = HorizontalBox::new(5.5, 1.0, 7.0, 12.0).unwrap();
        let back = decode_hbox(&from, &encode_hbox(&from, &to));
        for (a, b) in [(back.x, to.x), (back.y, to.y), (back.w, to.w), (back.h, to.h)] {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_network_gives_exactly_n_clipped_proposals() {
        let cfg = DetectorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_rpn(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let map = Tensor::new(&[32, 16, 16], (0..32 * 256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let pyr = FeaturePyramid {
            branch: super::super::backbone::Branch::Original,
            map: g.constant(map).unwrap(),
        };
        let out = rpn_forward(&mut g, &store, &cfg, &pyr).unwrap();
        let an = anchors(&cfg);
        let props = propose(&cfg, &an, g.data(out.logits), g.data(out.deltas), &[]).unwrap();
        assert_eq!(props.len(), cfg.proposals);
        for p in &props {
            assert!(p.hbox.x >= 0.0 && p.hbox.y >= 0.0 && p.hbox.x2() <= 64.0 && p.hbox.y2() <= 64.0);
            assert!(p.objectness > 0.0 && p.objectness < 1.0);
        }
    }

    #[test]
    fn planted_peak_yields_overlapping_top_proposal() {
        let cfg = DetectorConfig::default();
        let an = anchors(&cfg);
        let gt = OrientedBox::new(30.0, 22.0, 14.0, 12.0, 0.0).unwrap();
        let hull = gt.hull();
        let (best, _) = an
            .iter()
            .enumerate()
            .map(|(k, a)| (k, axis_aligned_iou(a, &hull)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let mut logits = vec![-5.0; an.len()];
        logits[best] = 5.0;
        let deltas = vec![0.0; 4 * an.len()];
        let props = propose(&cfg, &an, &logits, &deltas, &[]).unwrap();
        assert_eq!(props[0].source, ProposalSource::Anchor(best));
        assert!(axis_aligned_iou(&props[0].hbox, &hull) > 0.5);
    }

    #[test]
    fn injected_boxes_come_first() {
        let cfg = DetectorConfig::default();
        let an = anchors(&cfg);
        let inj = [HorizontalBox::new(-3.0, 10.0, 12.0, 8.0).unwrap()];
        let props = propose(&cfg, &an, &vec![0.0; an.len()], &vec![0.0; 4 * an.len()], &inj).unwrap();
        assert_eq!(props.len(), cfg.proposals);
        assert_eq!(props[0].source, ProposalSource::GroundTruth(0));
        assert_eq!(props[0].hbox.x, 0.0);
        assert_eq!(props[0].hbox.w, 9.0);
    }

    #[test]
    fn targets_cover_every_ground_truth() {
        let cfg = DetectorConfig::default();
        let an = anchors(&cfg);
        let gts = [
            OrientedBox::new(20.0, 20.0, 24.0, 6.0, 0.0).unwrap(),
            OrientedBox::new(45.0, 45.0, 9.0, 5.0, 0.8).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rpn_targets(&an, &gts, &mut rng);
        assert!(t.sampled.len() <= RPN_SAMPLES);
        let pos: Vec<usize> = t.sampled.iter().filter(|s| s.1).map(|s| s.0).collect();
        for gt in &gts {
            assert!(pos.iter().any(|&a| axis_aligned_iou(&an[a], &gt.hull()) > 0.2));
        }
        assert_eq!(pos.len(), t.regress.len());
        assert!(t.sampled.iter().filter(|s| !s.1).all(|&(a, _)| gts.iter().all(|gt| axis_aligned_iou(&an[a], &gt.hull()) < RPN_NEG_IOU)));
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let deltas = g.constant(Tensor::new(&[3, 4], vec![0.0; 12]).unwrap()).unwrap();
        let out = RpnOutput { logits, deltas };
        let t = RpnTargets {
            sampled: vec![(0, true), (1, false)],
            regress: vec![(0, [0.05, 0.0, 1.0, 0.0])],
        };
        let (c, r) = rpn_loss(&mut g, &out, &t).unwrap();
        let bce = |x: f64, y: f64| -(y * sigmoid(x).ln() + (1.0 - y) * (1.0 - sigmoid(x)).ln());
        let want_c = (bce(0.3, 1.0) + bce(-1.2, 0.0)) / 2.0;
        assert!((g.item(c) - want_c).abs() < 1e-12);
        let b = SMOOTH_L1_BETA;
        let want_r = 0.5 * 0.05 * 0.05 / b + (1.0 - 0.5 * b);
        assert!((g.item(r) - want_r).abs() < 1e-12);
    }
}
