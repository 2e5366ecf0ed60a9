//! One training step of the two-branch detector: the loss breakdown, the
//! gates that select RoIs for the consistency terms, and inference.
//!
//! ```bash
//! cargo run --release --example detector_step
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rotdg::autodiff::Graph;
use rotdg::detector::{Detector, DetectorConfig};
use rotdg::style::StyleBank;
use rotdg::synth::{generate_split, DomainStyle, SceneSpec};

fn main() -> rotdg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = DetectorConfig::default();
    let mut detector = Detector::new(cfg.clone(), &mut rng)?;
    println!("detector with {} parameters", detector.params().num_scalars());

    let samples = generate_split(&SceneSpec::default(), &DomainStyle::a(), 1, 2, "s")?;
    let batch: Vec<_> = samples.iter().map(|s| s.annotated()).collect();
    let bank = StyleBank::synthetic(cfg.widths, 16, &mut rng)?;

    let mut g = Graph::new();
    let step = detector.training_step(&mut g, &batch, Some(&bank), None, &mut rng)?;
    let b = &step.breakdown;
    println!(
        "L_cls {:.4}  L_reg {:.4}  L_HCL {:.4}  L_RAC {:.4}  L_SEC {:.4}  total {:.4}",
        b.cls, b.reg, b.hcl, b.rac, b.sec, b.total
    );
    for (i, plan) in step.plan.images.iter().enumerate() {
        let on = |gates: &[bool]| gates.iter().filter(|&&x| x).count();
        println!(
            "image {i}: {} proposals, {} horizontal and {} rotated RoIs gated, style entry {:?}",
            plan.proposals.len(),
            on(&plan.gates_h),
            on(&plan.gates_r),
            plan.style
        );
    }
    detector.params_mut().zero_grad();
    g.backward_into(step.loss, detector.params_mut())?;
    println!("backward over {} tape nodes, gradient norm {:.3}", g.len(), detector.params().grad_norm());

    let dets = detector.detect(&samples[0].image)?;
    println!("untrained detector returns {} boxes on image 0", dets.len());
    Ok(())
}
