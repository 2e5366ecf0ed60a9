//! Procedural scenes in three appearance domains: render, summarize and
//! round-trip a small dataset through its on-disk format.
//!
//! ```bash
//! cargo run --example synthetic_domains -- /tmp/rotdg-domains
//! ```

use std::path::PathBuf;

use rotdg::synth::{generate_split, read_dataset, write_dataset, Dataset, DomainStyle, SceneSpec};

fn main() -> rotdg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("rotdg-domains"));
    let spec = SceneSpec::default();
    for style in [DomainStyle::a(), DomainStyle::b(), DomainStyle::c()] {
        let samples = generate_split(&spec, &style, 7, 20, "img-")?;
        let pixels: Vec<f64> = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
        let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
        let std = (pixels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pixels.len() as f64).sqrt();
        let objects: usize = samples.iter().map(|s| s.boxes.len()).sum();
        println!("domain {}: {} images, {objects} objects, pixel mean {mean:.3} std {std:.3}", style.name, samples.len());

        let dir = out.join(&style.name);
        let dataset = Dataset {
            image_size: spec.image_size,
            classes: spec.class_names(),
            samples,
        };
        write_dataset(&dataset, &dir)?;
        assert_eq!(read_dataset(&dir)?, dataset);
    }
    println!("datasets written under {}", out.display());
    Ok(())
}
