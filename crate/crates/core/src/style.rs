//! Feature-statistics style hallucination.
//!
//! The style of a feature map is its per-channel spatial mean and standard
//! deviation. [`adain_transfer`] re-normalizes a content map so that it
//! carries the statistics of another style while keeping its spatial layout.
//!
//! Style statistics come from a [`StyleBank`]. A bank is either sampled
//! synthetically or filled by running images through a frozen random-weight
//! encoder with the backbone architecture ([`StyleEncoder`]).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var, STD_EPS};
use crate::detector::backbone::{backbone_forward, init_backbone};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::io::{read_f64_file, write_f64_file};

/// One backbone block's activations, `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub block: usize,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(block: usize, data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::invalid(format!(
                "feature map must be (C, H, W), got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite { op: "feature_map" });
        }
        Ok(FeatureMap { block, data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Per-channel mean and `sqrt(variance + eps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(Error::invalid(format!(
                "channel stats need equal non-zero lengths, got {} and {}",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) || sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("channel stats must be finite with positive sigma"));
        }
        Ok(ChannelStats { mu, sigma })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Per-channel spatial mean and standard deviation (with the `1e-5` epsilon
/// inside the square root).
pub fn channel_stats(f: &FeatureMap) -> ChannelStats {
    let c = f.channels();
    let n = f.data.len() / c;
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for ch in f.data.data().chunks(n) {
        let m = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mu.push(m);
        sigma.push((var + STD_EPS).sqrt());
    }
    ChannelStats { mu, sigma }
}

/// Differentiable statistic transfer on a graph node:
/// `sigma_s * (x - mu_x) / sigma_x + mu_s` per channel.
pub fn adain(g: &mut Graph, x: Var, style: &ChannelStats) -> Result<Var> {
    let c = g.shape(x)[0];
    if style.channels() != c {
        return Err(Error::invalid(format!(
            "adain: content has {c} channels, style has {}",
            style.channels()
        )));
    }
    let mu = g.channel_mean(x)?;
    let sd = g.channel_std(x, STD_EPS)?;
    let target_sigma = g.constant(Tensor::vector(style.sigma.clone()))?;
    let target_mu = g.constant(Tensor::vector(style.mu.clone()))?;
    let scale = g.div(target_sigma, sd)?;
    let moved = g.mul(mu, scale)?;
    let shift = g.sub(target_mu, moved)?;
    g.channel_affine(x, scale, shift)
}

/// Value-level [`adain`].
pub fn adain_transfer(content: &FeatureMap, style: &ChannelStats) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(content.data.clone())?;
    let y = adain(&mut g, x, style)?;
    FeatureMap::new(content.block, g.value(y).clone())
}

/// Statistics of all four blocks for one style source.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEntry {
    pub id: String,
    pub blocks: Vec<ChannelStats>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleBank {
    entries: Vec<StyleEntry>,
    widths: Option<[usize; 4]>,
}

impl StyleBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Synthetic bank: `mu ~ Normal(0, 1)` and `sigma ~ LogNormal(0, 0.5)`
    /// for every channel of every block.
    pub fn synthetic(widths: [usize; 4], count: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let lognormal = LogNormal::new(0.0, 0.5).expect("valid lognormal");
        let mut bank = StyleBank::new();
        for k in 0..count {
            let blocks = widths
                .iter()
                .map(|&c| {
                    let mu = (0..c).map(|_| normal.sample(rng)).collect();
                    let sigma = (0..c).map(|_| lognormal.sample(rng)).collect();
                    ChannelStats::new(mu, sigma)
                })
                .collect::<Result<Vec<_>>>()?;
            bank.push(StyleEntry {
                id: format!("synthetic-{k:04}"),
                blocks,
            })?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, entry: StyleEntry) -> Result<()> {
        if entry.blocks.len() != 4 {
            return Err(Error::invalid(format!(
                "style entry {:?} covers {} blocks, need 4",
                entry.id,
                entry.blocks.len()
            )));
        }
        let widths = [0, 1, 2, 3].map(|i| entry.blocks[i].channels());
        match self.widths {
            Some(w) if w != widths => {
                return Err(Error::invalid(format!(
                    "style entry {:?} has widths {widths:?}, bank has {w:?}",
                    entry.id
                )))
            }
            _ => self.widths = Some(widths),
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StyleEntry] {
        &self.entries
    }

    pub fn widths(&self) -> Option<[usize; 4]> {
        self.widths
    }

    /// Uniformly draws one entry; the same entry styles all four blocks.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<&StyleEntry> {
        Ok(&self.entries[self.sample_index(rng)?])
    }

    /// Index form of [`StyleBank::sample`]; consumes the same random draw.
    pub fn sample_index(&self, rng: &mut impl Rng) -> Result<usize> {
        if self.entries.is_empty() {
            return Err(Error::invalid("cannot sample from an empty style bank"));
        }
        Ok(rng.gen_range(0..self.entries.len()))
    }

    /// Writes `style_bank.json` plus one raw little-endian f64 file per
    /// statistic vector.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = BankManifest { entries: Vec::new() };
        for (k, entry) in self.entries.iter().enumerate() {
            let mut blocks = Vec::new();
            for (b, stats) in entry.blocks.iter().enumerate() {
                let mu_file = format!("e{k:04}_b{}_mu.f64", b + 1);
                let sigma_file = format!("e{k:04}_b{}_sigma.f64", b + 1);
                write_f64_file(&dir.join(&mu_file), &stats.mu)?;
                write_f64_file(&dir.join(&sigma_file), &stats.sigma)?;
                blocks.push(BankBlock {
                    channels: stats.channels(),
                    mu_file,
                    sigma_file,
                });
            }
            manifest.entries.push(BankEntry {
                id: entry.id.clone(),
                blocks,
            });
        }
        let path = dir.join(BANK_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(BANK_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BankManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut bank = StyleBank::new();
        for entry in manifest.entries {
            let mut blocks = Vec::new();
            for b in entry.blocks {
                let mu = read_f64_file(&dir.join(&b.mu_file), b.channels)?;
                let sigma = read_f64_file(&dir.join(&b.sigma_file), b.channels)?;
                blocks.push(ChannelStats::new(mu, sigma).map_err(|e| Error::format(dir.join(&b.mu_file), e.to_string()))?);
            }
            bank.push(StyleEntry { id: entry.id, blocks })?;
        }
        Ok(bank)
    }
}

pub const BANK_MANIFEST: &str = "style_bank.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankManifest {
    entries: Vec<BankEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankEntry {
    id: String,
    blocks: Vec<BankBlock>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankBlock {
    channels: usize,
    mu_file: String,
    sigma_file: String,
}

/// Frozen random-weight encoder with the backbone architecture.
pub struct StyleEncoder {
    cfg: DetectorConfig,
    params: ParamStore,
}

const ENCODER_PREFIX: &str = "encoder";

impl StyleEncoder {
    pub fn new(cfg: &DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        init_backbone(&mut params, cfg, ENCODER_PREFIX, rng)?;
        Ok(StyleEncoder {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

/// Runs `image` (`(C, H, W)`) through the frozen encoder and returns the
/// statistics of each block.
pub fn encode_style_image(image: &Tensor, encoder: &StyleEncoder, id: impl Into<String>) -> Result<StyleEntry> {
    let mut g = Graph::new();
    let x = g.constant(image.clone())?;
    let maps = backbone_forward(&mut g, &encoder.params, &encoder.cfg, ENCODER_PREFIX, x)?;
    let blocks = maps
        .iter()
        .enumerate()
        .map(|(i, &m)| FeatureMap::new(i + 1, g.value(m).clone()).map(|f| channel_stats(&f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StyleEntry { id: id.into(), blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        FeatureMap::new(1, Tensor::new(&[c, h, w], data).unwrap()).unwrap()
    }

    fn rand_stats(c: usize, rng: &mut ChaCha8Rng) -> ChannelStats {
        ChannelStats::new(
            (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            (0..c).map(|_| rng.gen_range(0.2..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_map_stats() {
        let f = FeatureMap::new(1, Tensor::full(&[2, 3, 3], 5.0)).unwrap();
        let s = channel_stats(&f);
        assert_eq!(s.mu, vec![5.0, 5.0]);
        assert!(s.sigma.iter().all(|&v| v == STD_EPS.sqrt()));
    }

    #[test]
    fn two_value_channel_stats() {
        let f = FeatureMap::new(1, Tensor::new(&[1, 2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap()).unwrap();
        let s = channel_stats(&f);
        assert_eq!(s.mu, vec![1.0]);
        assert!((s.sigma[0] - (1.0 + STD_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_stats() {
        let f = FeatureMap::new(1, Tensor::new(&[1, 1, 1], vec![-0.25]).unwrap()).unwrap();
        let s = channel_stats(&f);
        assert_eq!(s.mu, vec![-0.25]);
        assert_eq!(s.sigma, vec![STD_EPS.sqrt()]);
    }

    #[test]
    fn self_transfer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_map(4, 5, 6, &mut rng);
        let out = adain_transfer(&f, &channel_stats(&f)).unwrap();
        assert!(out.data.max_abs_diff(&f.data) < 1e-9);
    }

    #[test]
    fn constant_content_takes_style_mean() {
        let f = FeatureMap::new(1, Tensor::full(&[1, 4, 4], 7.0)).unwrap();
        let s = ChannelStats::new(vec![3.0], vec![2.0]).unwrap();
        let out = adain_transfer(&f, &s).unwrap();
        assert!(out.data.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn transfer_reproduces_target_stats_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = rand_map(5, 6, 7, &mut rng);
            let s = rand_stats(5, &mut rng);
            let out = adain_transfer(&f, &s).unwrap();
            let got = channel_stats(&out);
            for c in 0..5 {
                assert!((got.mu[c] - s.mu[c]).abs() < 1e-3);
                assert!((got.sigma[c] - s.sigma[c]).abs() < 1e-3);
            }
            let again = adain_transfer(&out, &s).unwrap();
            let rms = (again
                .data
                .data()
                .iter()
                .zip(out.data.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / out.data.len() as f64)
                .sqrt();
            // the second transfer only rescales by sigma*/sigma_out, which
            // differs from 1 by the epsilon inside the std
            let predicted = (got
                .sigma
                .iter()
                .zip(&s.sigma)
                .map(|(so, st)| {
                    let r = st / so - 1.0;
                    r * r * (so * so - STD_EPS)
                })
                .sum::<f64>()
                / 5.0)
                .sqrt();
            assert!((rms - predicted).abs() < 1e-12, "rms {rms} vs {predicted}");
            assert!(rms <= 1e-4, "rms {rms}");
        }
    }

    #[test]
    fn second_transfer_is_negligible_when_scales_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = rand_map(4, 8, 8, &mut rng);
        let own = channel_stats(&f);
        let s = ChannelStats::new(
            (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            own.sigma.iter().map(|v| v * rng.gen_range(0.9..1.1)).collect(),
        )
        .unwrap();
        let out = adain_transfer(&f, &s).unwrap();
        let again = adain_transfer(&out, &s).unwrap();
        let rms = (again.data.data().iter().zip(out.data.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / out.data.len() as f64)
            .sqrt();
        assert!(rms <= 1e-6, "rms {rms}");
    }

    #[test]
    fn transfer_preserves_channel_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_map(6, 8, 8, &mut rng);
        let s = rand_stats(6, &mut rng);
        let out = adain_transfer(&f, &s).unwrap();
        let argmax = |t: &Tensor| -> Vec<usize> {
            t.data()
                .chunks(64)
                .map(|ch| (0..64).max_by(|&a, &b| ch[a].total_cmp(&ch[b])).unwrap())
                .collect()
        };
        assert_eq!(argmax(&f.data), argmax(&out.data));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_map(3, 2, 2, &mut rng);
        let s = rand_stats(4, &mut rng);
        assert!(adain_transfer(&f, &s).is_err());
    }

    #[test]
    fn adain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_map(3, 4, 4, &mut rng);
        let s = rand_stats(3, &mut rng);
        let w: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |g, x| {
                let y = adain(g, x, &s)?;
                let c = g.constant(Tensor::new(&[3, 4, 4], w.clone())?)?;
                let z = g.mul(y, c)?;
                g.sum(z)
            },
            &f.data,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sampling_is_uniform_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = StyleBank::synthetic([2, 2, 2, 2], 5, &mut rng).unwrap();
        let mut counts = [0usize; 5];
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<String> = (0..10_000).map(|_| bank.sample(&mut r1).unwrap().id.clone()).collect();
        for id in &draws {
            let k: usize = id.trim_start_matches("synthetic-").parse().unwrap();
            counts[k] += 1;
        }
        let expect = 10_000.0 / 5.0;
        let sd = (10_000.0 * 0.2 * 0.8f64).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 5.0 * sd, "{counts:?}");
        }
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let again: Vec<String> = (0..10_000).map(|_| bank.sample(&mut r2).unwrap().id.clone()).collect();
        assert_eq!(draws, again);

        let single = StyleBank::synthetic([2, 2, 2, 2], 1, &mut rng).unwrap();
        assert_eq!(single.sample(&mut r1).unwrap(), &single.entries()[0]);
        assert!(StyleBank::new().sample(&mut r1).is_err());
    }

    #[test]
    fn bank_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = StyleBank::synthetic([3, 4, 5, 6], 3, &mut rng).unwrap();
        bank.write(dir.path()).unwrap();
        assert_eq!(StyleBank::read(dir.path()).unwrap(), bank);
    }

    #[test]
    fn bank_rejects_mismatched_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = StyleBank::synthetic([3, 4, 5, 6], 1, &mut rng).unwrap();
        let other = StyleBank::synthetic([3, 4, 5, 7], 1, &mut rng).unwrap();
        assert!(bank.push(other.entries()[0].clone()).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_near_identity_on_itself() {
        let cfg = DetectorConfig {
            image_size: 16,
            widths: [4, 4, 8, 8],
            ..DetectorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = StyleEncoder::new(&cfg, &mut rng).unwrap();
        let img = Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let a = encode_style_image(&img, &enc, "a").unwrap();
        let b = encode_style_image(&img, &enc, "a").unwrap();
        assert_eq!(a, b);

        let mut g = Graph::new();
        let x = g.constant(img.clone()).unwrap();
        let maps = backbone_forward(&mut g, enc.params(), &cfg, ENCODER_PREFIX, x).unwrap();
        for (i, &m) in maps.iter().enumerate() {
            let f = FeatureMap::new(i + 1, g.value(m).clone()).unwrap();
            let out = adain_transfer(&f, &a.blocks[i]).unwrap();
            assert!(out.data.max_abs_diff(&f.data) < 1e-6);
        }

        let flat = Tensor::full(&[3, 16, 16], 0.5);
        let c = encode_style_image(&flat, &enc, "flat").unwrap();
        assert!(c.blocks.iter().all(|s| s.mu.iter().chain(&s.sigma).all(|v| v.is_finite())));
    }

    proptest::proptest! {
        #[test]
        fn adain_reproduces_target_stats(
            seed in 0u64..1000,
            shift in -3.0f64..3.0,
            scale in 0.3f64..4.0,
            mu in -3.0f64..3.0,
            sigma in 0.2f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..2 * 6 * 6).map(|_| shift + scale * rng.gen_range(-1.0..1.0)).collect();
            let x = FeatureMap::new(1, Tensor::new(&[2, 6, 6], data).unwrap()).unwrap();
            let s = ChannelStats::new(vec![mu, -mu], vec![sigma, sigma * 0.5 + 0.1]).unwrap();
            let got = channel_stats(&adain_transfer(&x, &s).unwrap());
            for k in 0..2 {
                proptest::prop_assert!((got.mu[k] - s.mu[k]).abs() < 1e-9);
                proptest::prop_assert!((got.sigma[k] - s.sigma[k]).abs() < 1e-3);
            }
        }
    }
}
