//! Oriented boxes: canonical form, polygon-clipping IoU, the training gate
//! and rotated non-maximum suppression.
//!
//! ```bash
//! cargo run --example rotated_boxes
//! ```

use std::f64::consts::FRAC_PI_2;

use rotdg::geometry::{angle_delta, gate_sigma, rotated_iou, rotated_nms, OrientedBox};

fn main() -> rotdg::Result<()> {
    let a = OrientedBox::new(32.0, 32.0, 20.0, 6.0, 0.3)?;
    // the same rectangle described with swapped edges is canonicalized
    let b = OrientedBox::new(32.0, 32.0, 6.0, 20.0, 0.3 + FRAC_PI_2)?.canonical();
    println!("a = {a:?}");
    println!("b = {b:?}");
    println!("IoU(a, b) = {:.6}", rotated_iou(&a, &b));

    let c = a.rotated_about((a.cx, a.cy), 0.4);
    println!("IoU(a, a rotated by 0.4 rad) = {:.4}", rotated_iou(&a, &c));
    println!("angle_delta(a, c) = {:.4} rad", angle_delta(c.theta, a.theta));
    println!("hull of c = {:?}", c.hull());

    let gts = [a];
    for (name, roi) in [("a", a), ("c", c), ("shifted", a.translated(12.0, 0.0))] {
        println!("gate({name}) = {}", gate_sigma(&roi, &gts));
    }

    let boxes = [a, c, a.translated(0.5, 0.5), OrientedBox::new(10.0, 10.0, 8.0, 4.0, -1.0)?];
    let scores = [0.9, 0.7, 0.8, 0.6];
    let keep = rotated_nms(&boxes, &scores, 0.5)?;
    println!("NMS at 0.5 keeps {keep:?}");
    Ok(())
}
