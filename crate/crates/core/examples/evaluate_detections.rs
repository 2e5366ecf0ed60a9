//! Matching, per-class average precision, mAP and angle RMSD on a small
//! hand-made set of detections.
//!
//! ```bash
//! cargo run --example evaluate_detections
//! ```

use rotdg::eval::{evaluate, match_detections, Detection, EvalReport, GroundTruth};
use rotdg::geometry::OrientedBox;

fn main() -> rotdg::Result<()> {
    let ship = OrientedBox::new(20.0, 20.0, 22.0, 6.0, 0.4)?;
    let car = OrientedBox::new(45.0, 40.0, 10.0, 5.0, -1.1)?;
    let gts = [
        GroundTruth { image: 0, rbox: ship, class: 0 },
        GroundTruth { image: 0, rbox: car, class: 1 },
        GroundTruth { image: 1, rbox: car, class: 1 },
    ];
    let tilt = |b: OrientedBox, d: f64| OrientedBox { theta: b.theta + d, ..b };
    let dets = [
        Detection { image: 0, rbox: tilt(ship, 0.05), class: 0, score: 0.95 },
        Detection { image: 0, rbox: tilt(ship, 0.02), class: 0, score: 0.60 },
        Detection { image: 0, rbox: tilt(car, -0.1), class: 1, score: 0.80 },
        Detection { image: 1, rbox: car.translated(20.0, 0.0), class: 1, score: 0.90 },
    ];

    let m = match_detections(&dets, &gts, 0.5)?;
    for &i in &m.order {
        println!("det {i} (score {:.2}): {}", dets[i].score, if m.tp[i] { "TP" } else { "FP" });
    }
    let report = evaluate(&dets, &gts, 2, 0.5)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    println!("{}", EvalReport::csv_header(2));
    println!("{}", report.csv_row("example"));
    Ok(())
}
