//! Horizontal and rotated RoI feature pooling on the fused pyramid.
//!
//! Both poolers place a `P x P` grid of sample points at the centers of the
//! sub-cells of the box, expressed in the box frame, and read the pyramid by
//! bilinear interpolation. Pixel coordinate `x` maps to pyramid cell
//! coordinate `x / stride - 0.5`.

use super::backbone::{Branch, FeaturePyramid};
use super::config::PYRAMID_STRIDE;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{HorizontalBox, OrientedBox};

/// Which RoI stage produced a pooled batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoiStage {
    Horizontal,
    Rotated,
}

/// Pooled features of a batch of RoIs, `(n, P*P*C)` with the grid point as
/// the major index and the channel as the minor index.
#[derive(Clone, Copy, Debug)]
pub struct PooledRois {
    pub stage: RoiStage,
    pub branch: Branch,
    pub features: Var,
}

fn to_cell(p: f64) -> f64 {
    p / PYRAMID_STRIDE as f64 - 0.5
}

/// Sample points (cell coordinates) of one box given by center, size and
/// angle, row-major over the grid.
pub fn grid_points(cx: f64, cy: f64, w: f64, h: f64, theta: f64, pool: usize) -> Vec<(f64, f64)> {
    let (s, c) = theta.sin_cos();
    let mut pts = Vec::with_capacity(pool * pool);
    for i in 0..pool {
        let v = ((i as f64 + 0.5) / pool as f64 - 0.5) * h;
        for j in 0..pool {
            let u = ((j as f64 + 0.5) / pool as f64 - 0.5) * w;
            pts.push((to_cell(cx + u * c - v * s), to_cell(cy + u * s + v * c)));
        }
    }
    pts
}

fn pool_points(
    g: &mut Graph,
    pyr: &FeaturePyramid,
    stage: RoiStage,
    count: usize,
    points: Vec<(f64, f64)>,
) -> Result<PooledRois> {
    if count == 0 {
        return Err(Error::invalid("RoI pooling needs at least one box"));
    }
    let c = g.shape(pyr.map)[0];
    let per = points.len() / count;
    let sampled = g.bilinear_sample(pyr.map, &points)?;
    let features = g.reshape(sampled, &[count, per * c])?;
    Ok(PooledRois {
        stage,
        branch: pyr.branch,
        features,
    })
}

/// Axis-aligned grid pooling inside each horizontal box.
pub fn hroi_pool(g: &mut Graph, pyr: &FeaturePyramid, boxes: &[HorizontalBox], pool: usize) -> Result<PooledRois> {
    let points = boxes
        .iter()
        .flat_map(|b| {
            let (cx, cy) = b.center();
            grid_points(cx, cy, b.w, b.h, 0.0, pool)
        })
        .collect();
    pool_points(g, pyr, RoiStage::Horizontal, boxes.len(), points)
}

/// Grid pooling aligned to each oriented box's own axes.
pub fn rroi_align(g: &mut Graph, pyr: &FeaturePyramid, boxes: &[OrientedBox], pool: usize) -> Result<PooledRois> {
    let points = boxes
        .iter()
        .flat_map(|b| grid_points(b.cx, b.cy, b.w, b.h, b.theta, pool))
        .collect();
    pool_points(g, pyr, RoiStage::Rotated, boxes.len(), points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn pyramid(g: &mut Graph, t: Tensor) -> FeaturePyramid {
        FeaturePyramid {
            branch: Branch::Original,
            map: g.constant(t).unwrap(),
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let mut g = Graph::new();
        let p = pyramid(&mut g, Tensor::full(&[2, 4, 4], 1.5));
        let hb = HorizontalBox::new(3.0, 2.0, 9.0, 5.0).unwrap();
        let ob = OrientedBox::new(8.0, 8.0, 10.0, 4.0, 0.7).unwrap();
        for pooled in [hroi_pool(&mut g, &p, &[hb], 4).unwrap(), rroi_align(&mut g, &p, &[ob], 4).unwrap()] {
            assert_eq!(g.shape(pooled.features), [1, 32]);
            assert!(g.data(pooled.features).iter().all(|&v| (v - 1.5).abs() < 1e-12));
        }
    }

    #[test]
    fn full_image_box_reads_cell_centers() {
        // a 16-pixel image has a 4x4 pyramid; a 4x4 grid over the full image
        // lands exactly on the cell centers
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let p = pyramid(&mut g, Tensor::new(&[1, 4, 4], data.clone()).unwrap());
        let full = HorizontalBox::new(0.0, 0.0, 16.0, 16.0).unwrap();
        let pooled = hroi_pool(&mut g, &p, &[full], 4).unwrap();
        for (a, b) in g.data(pooled.features).iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_angle_matches_horizontal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let t = Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = pyramid(&mut g, t);
        let hb = HorizontalBox::new(10.3, 20.1, 21.0, 9.5).unwrap();
        let (cx, cy) = hb.center();
        let ob = OrientedBox::new(cx, cy, hb.w, hb.h, 0.0).unwrap();
        let a = hroi_pool(&mut g, &p, &[hb], 4).unwrap();
        let b = rroi_align(&mut g, &p, &[ob], 4).unwrap();
        let diff = g.value(a.features).max_abs_diff(g.value(b.features));
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn quarter_turn_equivariance() {
        // rotate the content by 90 degrees about the image center; a box
        // rotated with it must pool the same values
        let size = 16;
        let c = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src: Vec<f64> = (0..c * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // (x, y) -> (size-1-y, x) in cell indices is a 90 degree CCW turn
        let mut rot = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..size {
                for x in 0..size {
                    let (nx, ny) = (size - 1 - y, x);
                    rot[ch * size * size + ny * size + nx] = src[ch * size * size + y * size + x];
                }
            }
        }
        let mut g = Graph::new();
        let p0 = pyramid(&mut g, Tensor::new(&[c, size, size], src).unwrap());
        let p1 = pyramid(&mut g, Tensor::new(&[c, size, size], rot).unwrap());
        let center = (32.0, 32.0);
        let b0 = OrientedBox::new(28.0, 30.0, 24.0, 12.0, -0.5).unwrap();
        let b1 = b0.rotated_about(center, FRAC_PI_2);
        assert!((b1.theta - (b0.theta + FRAC_PI_2)).abs() < 1e-12);
        let a = rroi_align(&mut g, &p0, &[b0], 4).unwrap();
        let b = rroi_align(&mut g, &p1, &[b1], 4).unwrap();
        let diff = g.value(a.features).max_abs_diff(g.value(b.features));
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn pooling_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::new(&[2, 8, 8], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let hb = HorizontalBox::new(3.1, 5.3, 17.0, 11.0).unwrap();
        let ob = OrientedBox::new(15.2, 14.7, 14.0, 6.0, 0.41).unwrap();
        let weights = Tensor::new(&[2, 32], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check(
            |g, x| {
                let p = FeaturePyramid {
                    branch: Branch::Original,
                    map: x,
                };
                let a = hroi_pool(g, &p, &[hb], 4)?;
                let b = rroi_align(g, &p, &[ob], 4)?;
                let both = g.concat(&[a.features, b.features], 0)?;
                let w = g.constant(weights.clone())?;
                let prod = g.mul(both, w)?;
                let sq = g.mul(prod, prod)?;
                g.sum(sq)
            },
            &t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
