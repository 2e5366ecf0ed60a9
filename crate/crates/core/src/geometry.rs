//! Rotated-box geometry.
//!
//! Boxes are stored by center, size and angle. The angle rotates the box
//! x-axis counterclockwise (in the `(x, y)` frame) from the image x-axis and
//! is kept canonical in `[-π/2, π/2)` with the long edge as `w`. Orientation
//! of a rectangle is π-periodic, which is also the period used by
//! [`angle_delta`].
//!
//! Rotated IoU clips the two corner quadrilaterals against each other with
//! Sutherland–Hodgman and measures areas with the shoelace formula.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boxes with a side at or below this length are rejected.
pub const MIN_SIDE: f64 = 1e-6;
/// Tolerance for the inside/outside test during clipping.
pub const CLIP_EPS: f64 = 1e-9;
/// Intersection polygons with smaller area count as empty.
pub const MIN_AREA: f64 = 1e-12;
/// IoU threshold of the RoI gate.
pub const GATE_IOU: f64 = 0.5;

pub type Point = (f64, f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalBox {
    /// min-x
    pub x: f64,
    /// min-y
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Counterclockwise vertex list (positive signed area).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvexPolygon {
    pub vertices: Vec<Point>,
}

fn check_finite(vals: &[f64], what: &str) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has a non-finite field: {vals:?}")))
    }
}

/// Wraps an angle into `[-π/2, π/2)`.
pub fn wrap_half_pi(theta: f64) -> f64 {
    if (-FRAC_PI_2..FRAC_PI_2).contains(&theta) {
        return theta;
    }
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Unsigned orientation difference under period π, in `[0, π/2]`.
pub fn angle_delta(pred: f64, gt: f64) -> f64 {
    let d = (pred - gt).rem_euclid(PI);
    d.min(PI - d)
}

impl OrientedBox {
    /// Validates and canonicalizes.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        check_finite(&[cx, cy, w, h, theta], "oriented box")?;
        if w <= MIN_SIDE || h <= MIN_SIDE {
            return Err(Error::invalid(format!(
                "degenerate oriented box: w={w}, h={h}"
            )));
        }
        Ok(OrientedBox { cx, cy, w, h, theta }.canonical())
    }

    /// Builds a box from an upper-left anchored tuple: `(x, y)` is the corner
    /// that maps to the local `(-w/2, -h/2)` corner after rotation.
    pub fn from_upper_left(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let (s, c) = theta.sin_cos();
        let hx = w / 2.0;
        let hy = h / 2.0;
        let cx = x + hx * c - hy * s;
        let cy = y + hx * s + hy * c;
        Self::new(cx, cy, w, h, theta)
    }

    pub fn is_canonical(&self) -> bool {
        self.w >= self.h && (-FRAC_PI_2..FRAC_PI_2).contains(&self.theta)
    }

    /// Long-edge form: `w >= h`, `theta` in `[-π/2, π/2)`. Idempotent.
    pub fn canonical(&self) -> Self {
        if self.is_canonical() {
            return *self;
        }
        let (w, h, theta) = if self.w < self.h {
            (self.h, self.w, self.theta + FRAC_PI_2)
        } else {
            (self.w, self.h, self.theta)
        };
        OrientedBox {
            cx: self.cx,
            cy: self.cy,
            w,
            h,
            theta: wrap_half_pi(theta),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let hx = self.w / 2.0;
        let hy = self.h / 2.0;
        let local = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)];
        local.map(|(lx, ly)| (self.cx + lx * c - ly * s, self.cy + lx * s + ly * c))
    }

    /// Axis-aligned hull.
    pub fn hull(&self) -> HorizontalBox {
        let (s, c) = self.theta.sin_cos();
        let ew = 0.5 * (self.w * c.abs() + self.h * s.abs());
        let eh = 0.5 * (self.w * s.abs() + self.h * c.abs());
        HorizontalBox {
            x: self.cx - ew,
            y: self.cy - eh,
            w: 2.0 * ew,
            h: 2.0 * eh,
        }
    }

    fn circumradius(&self) -> f64 {
        0.5 * self.w.hypot(self.h)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        OrientedBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Rotates the box by `angle` about `pivot`; the result is canonical.
    pub fn rotated_about(&self, pivot: Point, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let dx = self.cx - pivot.0;
        let dy = self.cy - pivot.1;
        OrientedBox {
            cx: pivot.0 + dx * c - dy * s,
            cy: pivot.1 + dx * s + dy * c,
            w: self.w,
            h: self.h,
            theta: self.theta + angle,
        }
        .canonical()
    }
}

/// Corners of `b` in counterclockwise order.
pub fn to_corners(b: &OrientedBox) -> Result<ConvexPolygon> {
    check_finite(&[b.cx, b.cy, b.w, b.h, b.theta], "oriented box")?;
    Ok(ConvexPolygon {
        vertices: b.corners().to_vec(),
    })
}

impl HorizontalBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        check_finite(&[x, y, w, h], "horizontal box")?;
        if w <= MIN_SIDE || h <= MIN_SIDE {
            return Err(Error::invalid(format!(
                "degenerate horizontal box: w={w}, h={h}"
            )));
        }
        Ok(HorizontalBox { x, y, w, h })
    }

    pub fn center(&self) -> Point {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn to_oriented(&self) -> OrientedBox {
        let (cx, cy) = self.center();
        OrientedBox {
            cx,
            cy,
            w: self.w,
            h: self.h,
            theta: 0.0,
        }
        .canonical()
    }

    /// Clips to `[0, width] x [0, height]`, keeping at least `min_side`.
    pub fn clipped(&self, width: f64, height: f64, min_side: f64) -> Self {
        let x1 = self.x.clamp(0.0, width - min_side);
        let y1 = self.y.clamp(0.0, height - min_side);
        let x2 = self.x2().clamp(x1 + min_side, width);
        let y2 = self.y2().clamp(y1 + min_side, height);
        HorizontalBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        }
    }
}

/// Closed-form IoU of two axis-aligned boxes.
pub fn axis_aligned_iou(a: &HorizontalBox, b: &HorizontalBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

impl ConvexPolygon {
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }
}

pub fn shoelace(pts: &[Point]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % pts.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

#[inline]
fn side(p: Point, e0: Point, e1: Point) -> f64 {
    (e1.0 - e0.0) * (p.1 - e0.1) - (e1.1 - e0.1) * (p.0 - e0.0)
}

fn line_intersection(s: Point, e: Point, c0: Point, c1: Point) -> Point {
    let ds = side(s, c0, c1);
    let de = side(e, c0, c1);
    let t = ds / (ds - de);
    (s.0 + t * (e.0 - s.0), s.1 + t * (e.1 - s.1))
}

/// Sutherland–Hodgman: clips `subject` by the convex counterclockwise `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> ConvexPolygon {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let c0 = clip[i];
        let c1 = clip[(i + 1) % clip.len()];
        let len = (c1.0 - c0.0).hypot(c1.1 - c0.1).max(1.0);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = side(cur, c0, c1) >= -CLIP_EPS * len;
            let prev_in = side(prev, c0, c1) >= -CLIP_EPS * len;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, c0, c1));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, c0, c1));
            }
        }
    }
    ConvexPolygon { vertices: output }
}

pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    if d > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    let poly = clip_convex(&a.corners(), &b.corners());
    let area = poly.area();
    if area < MIN_AREA {
        0.0
    } else {
        area
    }
}

/// Rotated IoU in `[0, 1]`.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A region of interest as seen by the gate.
#[derive(Clone, Copy, Debug)]
pub enum Roi<'a> {
    Oriented(&'a OrientedBox),
    Horizontal(&'a HorizontalBox),
}

impl<'a> From<&'a OrientedBox> for Roi<'a> {
    fn from(b: &'a OrientedBox) -> Self {
        Roi::Oriented(b)
    }
}

impl<'a> From<&'a HorizontalBox> for Roi<'a> {
    fn from(b: &'a HorizontalBox) -> Self {
        Roi::Horizontal(b)
    }
}

/// Best IoU of `roi` against `gts` and the index of that ground truth.
/// Horizontal RoIs are compared against the hulls of the ground truths.
/// Ties go to the lower index.
pub fn best_match<'a>(roi: impl Into<Roi<'a>>, gts: &[OrientedBox]) -> Option<(usize, f64)> {
    let roi = roi.into();
    let mut best: Option<(usize, f64)> = None;
    for (i, gt) in gts.iter().enumerate() {
        let iou = match roi {
            Roi::Oriented(r) => rotated_iou(r, gt),
            Roi::Horizontal(h) => axis_aligned_iou(h, &gt.hull()),
        };
        if best.map_or(true, |(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best
}

/// The binary RoI gate: 1 iff the best IoU against any ground truth is at
/// least 0.5.
pub fn gate_sigma<'a>(roi: impl Into<Roi<'a>>, gts: &[OrientedBox]) -> bool {
    if gts.is_empty() {
        log::debug!("gate_sigma: image has no ground truth, gate is 0");
        return false;
    }
    best_match(roi, gts).is_some_and(|(_, iou)| iou >= GATE_IOU)
}

/// Indices in descending score order, ties broken by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

fn greedy_nms<T>(
    boxes: &[T],
    scores: &[f64],
    iou_threshold: f64,
    iou: impl Fn(&T, &T) -> f64,
) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::invalid(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid(format!(
            "nms: iou threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Greedy rotated NMS. Returns kept indices in descending-score order.
pub fn rotated_nms(boxes: &[OrientedBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    greedy_nms(boxes, scores, iou_threshold, rotated_iou)
}

pub fn horizontal_nms(boxes: &[HorizontalBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    greedy_nms(boxes, scores, iou_threshold, axis_aligned_iou)
}
