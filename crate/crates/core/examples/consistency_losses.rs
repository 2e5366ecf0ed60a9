//! Gated contrastive consistency and the distribution-consistency metrics
//! on hand-made embeddings and category distributions.
//!
//! ```bash
//! cargo run --example consistency_losses
//! ```

use rotdg::autodiff::Tensor;
use rotdg::losses::{consistency_value, EmbeddingBatch, SecMetric};

fn main() -> rotdg::Result<()> {
    // two RoIs, original rows first and their hallucinated partners after
    let raw = Tensor::new(
        &[4, 3],
        vec![
            1.0, 0.1, 0.0, //
            0.0, 1.0, 0.2, //
            0.9, 0.2, 0.1, //
            0.1, 1.0, 0.0,
        ],
    )?;
    for gates in [[true, true], [true, false], [false, false]] {
        let batch = EmbeddingBatch::from_raw(&raw, &gates)?;
        println!("gates {gates:?}: InfoNCE(tau = 0.1) = {:.4}", batch.info_nce(0.1)?);
    }

    let p = Tensor::new(&[2, 4], vec![0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25])?;
    let q = Tensor::new(&[2, 4], vec![0.6, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.7])?;
    for metric in [SecMetric::Jsd, SecMetric::Kl, SecMetric::L2] {
        println!(
            "{metric}: d(p, q) = {:.4}, d(q, p) = {:.4}, d(p, p) = {}",
            consistency_value(&p, &q, metric)?,
            consistency_value(&q, &p, metric)?,
            consistency_value(&p, &p, metric)?
        );
    }
    println!("JSD upper bound ln 2 = {:.4}", std::f64::consts::LN_2);
    Ok(())
}
