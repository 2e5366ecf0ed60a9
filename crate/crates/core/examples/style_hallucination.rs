//! Feature statistics and AdaIN transfer: re-style a feature map with an
//! entry from a synthetic style bank and with statistics from a frozen
//! random encoder.
//!
//! ```bash
//! cargo run --example style_hallucination
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotdg::autodiff::Tensor;
use rotdg::detector::{hwc_to_chw, DetectorConfig};
use rotdg::style::{adain_transfer, channel_stats, encode_style_image, FeatureMap, StyleBank, StyleEncoder};
use rotdg::synth::{generate_scene, SceneSpec};

fn main() -> rotdg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = DetectorConfig::default();
    let (c, side) = (cfg.widths[0], cfg.block_size(0));
    let data = (0..c * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let content = FeatureMap::new(1, Tensor::new(&[c, side, side], data)?)?;

    let bank = StyleBank::synthetic(cfg.widths, 8, &mut rng)?;
    let entry = bank.sample(&mut rng)?;
    let target = &entry.blocks[0];
    let styled = adain_transfer(&content, target)?;
    let got = channel_stats(&styled);
    let worst = (0..c)
        .map(|k| (got.mu[k] - target.mu[k]).abs().max((got.sigma[k] - target.sigma[k]).abs()))
        .fold(0.0, f64::max);
    println!("style entry {} applied to block 1 ({c} channels)", entry.id);
    println!("  target mu[0..3] = {:.3?}", &target.mu[..3]);
    println!("  output mu[0..3] = {:.3?}", &got.mu[..3]);
    println!("  max statistic error = {worst:.2e}");

    // statistics of a rendered scene through a frozen random encoder
    let scene = generate_scene(&SceneSpec::default(), "style-0", &mut rng)?;
    let encoder = StyleEncoder::new(&cfg, &mut rng)?;
    let encoded = encode_style_image(&hwc_to_chw(&scene.image)?, &encoder, scene.id.clone())?;
    for (i, s) in encoded.blocks.iter().enumerate() {
        let mean_sigma = s.sigma.iter().sum::<f64>() / s.sigma.len() as f64;
        println!("encoded block {}: {} channels, mean sigma {mean_sigma:.4}", i + 1, s.channels());
    }
    Ok(())
}
