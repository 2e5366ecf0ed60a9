//! HRoI → RRoI learner, the rotated classification/regression head, box
//! coders and RoI target assignment.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::DetectorConfig;
use super::layers::{init_linear, init_linear_small, init_linear_zero, linear, mlp2};
use super::pooling::{PooledRois, RoiStage};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{best_match, wrap_half_pi, HorizontalBox, OrientedBox, GATE_IOU};

/// Standard deviations that normalize `(dx, dy, dw, dh, dθ)` targets.
pub const DELTA_STDS: [f64; 5] = [0.1, 0.1, 0.2, 0.2, 0.1];
/// Largest log-scale change applied when decoding a delta.
pub const MAX_LOG_SCALE: f64 = 4.135;
const SMOOTH_L1_BETA: f64 = 1.0;

pub fn init_heads(store: &mut ParamStore, cfg: &DetectorConfig, rng: &mut impl Rng) -> Result<()> {
    let p = cfg.pooled_len();
    let h = cfg.head_hidden;
    init_linear(store, "rroi.fc1", p, h, rng)?;
    init_linear_zero(store, "rroi.fc2", h, 5)?;
    init_linear(store, "head.fc1", p, h, rng)?;
    init_linear(store, "head.fc2", h, h, rng)?;
    init_linear_small(store, "head.cls", h, cfg.num_classes + 1, 0.01, rng)?;
    init_linear_small(store, "head.reg", h, 5, 0.001, rng)
}

/// θ in radians from the learner's raw angle output.
pub fn squash_angle(t: f64) -> f64 {
    PI * (1.0 / (1.0 + (-t).exp()) - 0.5)
}

/// Oriented box from a horizontal box and the learner's raw
/// `(δx, δy, δw, δh, t)` output.
pub fn hroi_to_rroi(hbox: &HorizontalBox, raw: &[f64]) -> Result<OrientedBox> {
    let (cx, cy) = hbox.center();
    let s = DELTA_STDS;
    OrientedBox::new(
        cx + raw[0] * s[0] * hbox.w,
        cy + raw[1] * s[1] * hbox.h,
        hbox.w * (raw[2] * s[2]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        hbox.h * (raw[3] * s[3]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        squash_angle(raw[4]),
    )
}

/// Normalized `(δx, δy, δw, δh)` learner targets taking `hbox` to `gt`.
pub fn encode_hroi(hbox: &HorizontalBox, gt: &OrientedBox) -> [f64; 4] {
    let (cx, cy) = hbox.center();
    let s = DELTA_STDS;
    [
        (gt.cx - cx) / hbox.w / s[0],
        (gt.cy - cy) / hbox.h / s[1],
        (gt.w / hbox.w).ln() / s[2],
        (gt.h / hbox.h).ln() / s[3],
    ]
}

/// Normalized deltas taking `r` to `gt`, measured in `r`'s own frame.
///
/// `gt` is expressed in whichever of its two equivalent `(w, h, θ)` forms has
/// the angle closer to `r`'s, so the angle target stays within `±π/4`.
pub fn encode_rbox(r: &OrientedBox, gt: &OrientedBox) -> [f64; 5] {
    let mut dtheta = wrap_half_pi(gt.theta - r.theta);
    let (mut gw, mut gh) = (gt.w, gt.h);
    if dtheta.abs() > PI / 4.0 {
        std::mem::swap(&mut gw, &mut gh);
        dtheta = wrap_half_pi(dtheta + PI / 2.0);
    }
    let (s, c) = r.theta.sin_cos();
    let (dx, dy) = (gt.cx - r.cx, gt.cy - r.cy);
    let st = DELTA_STDS;
    [
        (dx * c + dy * s) / r.w / st[0],
        (-dx * s + dy * c) / r.h / st[1],
        (gw / r.w).ln() / st[2],
        (gh / r.h).ln() / st[3],
        dtheta / st[4],
    ]
}

pub fn decode_rbox(r: &OrientedBox, d: &[f64]) -> Result<OrientedBox> {
    let st = DELTA_STDS;
    let (s, c) = r.theta.sin_cos();
    let lx = d[0] * st[0] * r.w;
    let ly = d[1] * st[1] * r.h;
    OrientedBox::new(
        r.cx + lx * c - ly * s,
        r.cy + lx * s + ly * c,
        r.w * (d[2] * st[2]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        r.h * (d[3] * st[3]).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        r.theta + d[4] * st[4],
    )
}

fn check_stage(pooled: &PooledRois, stage: RoiStage, who: &str) -> Result<()> {
    if pooled.stage != stage {
        return Err(Error::invalid(format!("{who} cannot consume {:?} RoIs", pooled.stage)));
    }
    Ok(())
}

/// Raw `(n, 5)` learner output for pooled horizontal RoIs.
pub fn learner_forward(g: &mut Graph, store: &ParamStore, pooled: &PooledRois) -> Result<Var> {
    check_stage(pooled, RoiStage::Horizontal, "the RRoI learner")?;
    mlp2(g, store, "rroi", pooled.features)
}

/// `(n, K+1)` class logits (background last) and `(n, 5)` box deltas.
pub fn heads_forward(g: &mut Graph, store: &ParamStore, pooled: &PooledRois) -> Result<(Var, Var)> {
    check_stage(pooled, RoiStage::Rotated, "the detection head")?;
    let h = linear(g, store, "head.fc1", pooled.features)?;
    let h = g.relu(h)?;
    let h = linear(g, store, "head.fc2", h)?;
    let h = g.relu(h)?;
    let logits = linear(g, store, "head.cls", h)?;
    let deltas = linear(g, store, "head.reg", h)?;
    Ok((logits, deltas))
}

/// Training targets of one image's RoIs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiTargets {
    /// Class per RoI; `num_classes` marks background.
    pub labels: Vec<usize>,
    /// Assigned ground truth of each positive RoI.
    pub assigned: Vec<Option<usize>>,
    /// RoIs that enter the classification loss.
    pub sampled: Vec<usize>,
}

impl RoiTargets {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sampled.iter().filter_map(|&i| self.assigned[i].map(|k| (i, k)))
    }
}

/// Assigns every horizontal RoI to its best ground-truth hull (positive at
/// IoU ≥ 0.5) and samples positives and negatives at 1:3: at most a quarter of
/// the RoIs are positive, and three negatives are kept per positive (at least
/// three).
pub fn assign_rois(
    hboxes: &[HorizontalBox],
    gts: &[OrientedBox],
    classes: &[usize],
    num_classes: usize,
    rng: &mut impl Rng,
) -> RoiTargets {
    let mut labels = Vec::with_capacity(hboxes.len());
    let mut assigned = Vec::with_capacity(hboxes.len());
    for h in hboxes {
        match best_match(h, gts) {
            Some((k, iou)) if iou >= GATE_IOU => {
                labels.push(classes[k]);
                assigned.push(Some(k));
            }
            _ => {
                labels.push(num_classes);
                assigned.push(None);
            }
        }
    }
    let mut pos: Vec<usize> = (0..hboxes.len()).filter(|&i| assigned[i].is_some()).collect();
    let mut neg: Vec<usize> = (0..hboxes.len()).filter(|&i| assigned[i].is_none()).collect();
    pos.shuffle(rng);
    pos.truncate(hboxes.len().div_ceil(4));
    neg.shuffle(rng);
    neg.truncate(3 * pos.len().max(1));
    let mut sampled: Vec<usize> = pos.into_iter().chain(neg).collect();
    sampled.sort_unstable();
    RoiTargets {
        labels,
        assigned,
        sampled,
    }
}

/// Residual `θ - target` shifted by a multiple of π into `[-π/2, π/2)`.
fn angle_offset(pred: f64, target: f64) -> f64 {
    pred - wrap_half_pi(pred - target)
}

/// Smooth-L1 loss of the RRoI learner over positive RoIs, averaged over
/// positives. `rows` are indices into `raw`'s rows paired with their
/// horizontal box and assigned ground truth.
pub fn learner_loss(g: &mut Graph, raw: Var, rows: &[(usize, HorizontalBox, OrientedBox)]) -> Result<Var> {
    if rows.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let picked = g.gather_rows(raw, &idx)?;
    let box_part = g.narrow(picked, 1, 0, 4)?;
    let t_part = g.narrow(picked, 1, 4, 1)?;
    let targets: Vec<f64> = rows.iter().flat_map(|(_, h, gt)| encode_hroi(h, gt)).collect();
    let targets = g.constant(Tensor::new(&[rows.len(), 4], targets)?)?;
    let r = g.sub(box_part, targets)?;
    let l_box = g.smooth_l1(r, SMOOTH_L1_BETA)?;
    let l_box = g.sum(l_box)?;
    let sig = g.sigmoid(t_part)?;
    let centered = g.add_scalar(sig, -0.5)?;
    let theta = g.scale(centered, PI)?;
    let offsets: Vec<f64> = rows
        .iter()
        .zip(g.data(theta).to_vec())
        .map(|((_, _, gt), th)| angle_offset(th, gt.theta))
        .collect();
    let offsets = g.constant(Tensor::new(&[rows.len(), 1], offsets)?)?;
    let r = g.sub(theta, offsets)?;
    let r = g.scale(r, 1.0 / DELTA_STDS[4])?;
    let l_ang = g.smooth_l1(r, SMOOTH_L1_BETA)?;
    let l_ang = g.sum(l_ang)?;
    let total = g.add(l_box, l_ang)?;
    g.scale(total, 1.0 / rows.len() as f64)
}

/// Cross-entropy over the sampled rows of `logits`, averaged.
pub fn classification_loss(g: &mut Graph, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let picked = g.gather_rows(logits, rows)?;
    let lp = g.log_softmax(picked)?;
    let chosen = g.pick(lp, labels)?;
    let m = g.mean(chosen)?;
    g.scale(m, -1.0)
}

/// Smooth-L1 over rotated-box deltas of positive rows, averaged over
/// positives. `rows` pairs a row of `deltas` with its normalized target.
pub fn regression_loss(g: &mut Graph, deltas: Var, rows: &[(usize, [f64; 5])]) -> Result<Var> {
    if rows.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let picked = g.gather_rows(deltas, &idx)?;
    let targets: Vec<f64> = rows.iter().flat_map(|r| r.1).collect();
    let targets = g.constant(Tensor::new(&[rows.len(), 5], targets)?)?;
    let r = g.sub(picked, targets)?;
    let l = g.smooth_l1(r, SMOOTH_L1_BETA)?;
    let s = g.sum(l)?;
    g.scale(s, 1.0 / rows.len() as f64)
}
