//! End-to-end run through the library API: generate domains, train a short
//! run on the source domain, checkpoint it and evaluate on every domain.
//!
//! ```bash
//! cargo run --release --example train_and_evaluate -- 300
//! ```

use rotdg::runner::commands::split_dir;
use rotdg::runner::{cmd_eval, cmd_gen, cmd_train, RunConfig};

fn main() -> rotdg::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let root = std::env::temp_dir().join("rotdg-train-example");
    let (data, run) = (root.join("data"), root.join("run"));

    let mut cfg = RunConfig::default();
    cfg.data.train_count = 40;
    cfg.data.test_count = 20;
    cfg.max_steps = Some(steps);
    for s in cmd_gen(&cfg, &data)? {
        println!("{}/{}: {} images, objects {:?}", s.domain, s.split, s.images, s.objects);
    }

    let out = cmd_train(&cfg, &data, &run)?;
    let first = &out.losses[0].loss;
    let last = &out.losses.last().expect("at least one step").loss;
    println!("trained {} steps: total loss {:.3} -> {:.3}", out.checkpoint.step, first.total, last.total);

    for domain in &cfg.data.domains {
        let report = cmd_eval(&run, &split_dir(&data, domain, "test"), 0.5, None)?;
        println!("domain {domain}: mAP {:?} RMSD {:?}", report.map, report.rmsd);
    }
    Ok(())
}
