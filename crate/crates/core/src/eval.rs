//! Detection metrics: greedy matching at a rotated-IoU threshold, all-point
//! average precision, mAP over classes present in the ground truth, and the
//! RMS angle deviation of matched pairs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_delta, rotated_iou, OrientedBox};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub rbox: OrientedBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub rbox: OrientedBox,
    pub class: usize,
}

/// Outcome of greedy matching, indexed like the input detections.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Detection indices in processing order.
    pub order: Vec<usize>,
    pub tp: Vec<bool>,
    /// Ground-truth index matched by each detection.
    pub matched: Vec<Option<usize>>,
}

/// Score descending, then lower image id, then lower index.
fn det_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].image.cmp(&dets[b].image))
            .then(a.cmp(&b))
    });
    order
}

/// Each detection, best first, takes the highest-IoU unmatched ground truth
/// of its image and class if that IoU reaches `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Result<Matching> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {iou_thr} outside (0, 1]")));
    }
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::invalid(format!("detection score {} is not finite", d.score)));
    }
    let order = det_order(dets);
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    let mut matched = vec![None; dets.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts.iter().enumerate() {
            if taken[k] || g.image != d.image || g.class != d.class {
                continue;
            }
            let iou = rotated_iou(&d.rbox, &g.rbox);
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        if let Some((k, _)) = best {
            taken[k] = true;
            tp[i] = true;
            matched[i] = Some(k);
        }
    }
    Ok(Matching { order, tp, matched })
}

/// All-point AP of TP/FP flags listed in descending-score order: the
/// precision envelope integrated over recall. `None` when `num_gt == 0`.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // envelope: precision at each rank becomes the max precision at any later rank
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    Some(ap)
}

/// RMS of `angle_delta` over matched pairs; `None` when nothing matched.
pub fn angle_rmsd(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Result<Option<f64>> {
    let m = match_detections(dets, gts, iou_thr)?;
    Ok(rmsd_of(dets, gts, &m))
}

fn rmsd_of(dets: &[Detection], gts: &[GroundTruth], m: &Matching) -> Option<f64> {
    let deltas: Vec<f64> = m
        .matched
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| angle_delta(dets[i].rbox.theta, gts[k].rbox.theta)))
        .collect();
    if deltas.is_empty() {
        None
    } else {
        Some((deltas.iter().map(|d| d * d).sum::<f64>() / deltas.len() as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    /// Absent when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub per_class: Vec<ClassReport>,
    /// Mean AP over classes with ground truth; absent if there are none.
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    /// Radians; absent when no detection matched.
    pub rmsd: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl EvalReport {
    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("label,mAP,rmsd");
        for c in 0..num_classes {
            h.push_str(&format!(",ap{c}"));
        }
        h
    }

    /// One CSV row; absent values are empty fields.
    pub fn csv_row(&self, label: &str) -> String {
        let mut row = format!("{label},{},{}", fmt_opt(self.map), fmt_opt(self.rmsd));
        for c in &self.per_class {
            row.push(',');
            row.push_str(&fmt_opt(c.ap));
        }
        row
    }
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_thr: f64) -> Result<EvalReport> {
    if let Some(c) = dets.iter().map(|d| d.class).chain(gts.iter().map(|g| g.class)).find(|&c| c >= num_classes) {
        return Err(Error::invalid(format!("class {c} out of range {num_classes}")));
    }
    let m = match_detections(dets, gts, iou_thr)?;
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let flags: Vec<bool> = m.order.iter().filter(|&&i| dets[i].class == class).map(|&i| m.tp[i]).collect();
        let num_gt = gts.iter().filter(|g| g.class == class).count();
        let tp = flags.iter().filter(|&&f| f).count();
        per_class.push(ClassReport {
            class,
            ap: average_precision(&flags, num_gt),
            num_gt,
            tp,
            fp: flags.len() - tp,
            fn_: num_gt - tp,
        });
    }
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(EvalReport {
        iou: iou_thr,
        per_class,
        map,
        rmsd: rmsd_of(dets, gts, &m),
    })
}

/// Median of finite values; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
