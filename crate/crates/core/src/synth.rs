//! Procedural oriented-object scenes, photometric domain styles and the
//! on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and one raw little-endian f64
//! blob per image (`<id>.f64`, row-major `H x W x 3`). The manifest records the
//! CRC32 of every blob.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, OrientedBox};
use crate::io::{f64_to_le_bytes, le_bytes_to_f64};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
/// Placement attempts per object before giving up on it.
pub const PLACEMENT_ATTEMPTS: usize = 100;

/// Size and appearance of one object class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Long side range in pixels.
    pub width: (f64, f64),
    /// Short side range in pixels.
    pub height: (f64, f64),
    pub min_aspect: f64,
    pub texture: Texture,
}

/// Class-specific fill pattern, expressed in the box frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// Light hull with a dark stripe along the long axis.
    Hull,
    /// Saturated body with a dark band at one end.
    Cab,
    /// Green fill with stripes across the long axis.
    Rows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ClassSpec>,
    /// Placed objects must overlap every earlier one below this rotated IoU.
    pub max_iou: f64,
    /// Minimum distance between any box corner and the image border.
    pub margin: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            classes: vec![
                ClassSpec {
                    name: "ship".into(),
                    width: (16.0, 26.0),
                    height: (4.0, 7.0),
                    min_aspect: 1.3,
                    texture: Texture::Hull,
                },
                ClassSpec {
                    name: "vehicle".into(),
                    width: (8.0, 12.0),
                    height: (4.0, 6.0),
                    min_aspect: 1.3,
                    texture: Texture::Cab,
                },
                ClassSpec {
                    name: "field".into(),
                    width: (18.0, 28.0),
                    height: (9.0, 13.0),
                    min_aspect: 1.3,
                    texture: Texture::Rows,
                },
            ],
            max_iou: 0.1,
            margin: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return fail(format!("image_size {} is too small", self.image_size));
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects".into());
        }
        if self.classes.is_empty() {
            return fail("at least one class is required".into());
        }
        for c in &self.classes {
            let ok = c.width.0 > 0.0
                && c.width.0 <= c.width.1
                && c.height.0 > 0.0
                && c.height.0 <= c.height.1
                && c.min_aspect >= 1.0;
            if !ok {
                return fail(format!("class {:?} has invalid size ranges", c.name));
            }
            let diag = c.width.1.hypot(c.height.1);
            if diag + 2.0 * self.margin >= self.image_size as f64 {
                return fail(format!("class {:?} cannot fit inside the image", c.name));
            }
        }
        if !(self.max_iou > 0.0 && self.max_iou <= 1.0) || self.margin < 0.0 {
            return fail("max_iou must lie in (0, 1] and margin must be non-negative".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Image plus annotations. Pixels are `(H, W, 3)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub boxes: Vec<OrientedBox>,
    pub classes: Vec<usize>,
}

impl Sample {
    pub fn annotated(&self) -> crate::detector::AnnotatedImage<'_> {
        crate::detector::AnnotatedImage {
            image: &self.image,
            boxes: &self.boxes,
            classes: &self.classes,
        }
    }
}

fn sample_box(spec: &SceneSpec, class: &ClassSpec, rng: &mut impl Rng) -> Result<OrientedBox> {
    let (h, w) = loop {
        let h = rng.gen_range(class.height.0..=class.height.1);
        let w = rng.gen_range(class.width.0..=class.width.1);
        if w >= class.min_aspect * h {
            break (h, w);
        }
    };
    let theta = rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
    let (s, c) = theta.sin_cos();
    let ex = 0.5 * (w * c.abs() + h * s.abs()) + spec.margin;
    let ey = 0.5 * (w * s.abs() + h * c.abs()) + spec.margin;
    let size = spec.image_size as f64;
    let cx = rng.gen_range(ex..=size - ex);
    let cy = rng.gen_range(ey..=size - ey);
    OrientedBox::new(cx, cy, w, h, theta)
}

/// Colour of a pixel at box-frame coordinates `(u, v)`.
fn texture_color(t: Texture, u: f64, v: f64, b: &OrientedBox, shade: f64) -> [f64; 3] {
    match t {
        Texture::Hull => {
            if v.abs() < b.h / 6.0 {
                [0.5 * shade, 0.52 * shade, 0.58 * shade]
            } else {
                [0.86 * shade, 0.85 * shade, 0.8 * shade]
            }
        }
        Texture::Cab => {
            if u > b.w / 4.0 {
                [0.3 * shade, 0.12 * shade, 0.1 * shade]
            } else {
                [0.88 * shade, 0.28 * shade, 0.18 * shade]
            }
        }
        Texture::Rows => {
            let stripe = 0.12 * (std::f64::consts::TAU * u / 3.0).sin();
            [(0.3 + stripe) * shade, (0.66 + stripe) * shade, (0.22 + stripe) * shade]
        }
    }
}

/// Whether pixel `(x, y)` (center at `x + 0.5, y + 0.5`) lies in `b`.
pub fn covers(b: &OrientedBox, x: usize, y: usize) -> Option<(f64, f64)> {
    let (s, c) = b.theta.sin_cos();
    let dx = x as f64 + 0.5 - b.cx;
    let dy = y as f64 + 0.5 - b.cy;
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (u.abs() <= b.w / 2.0 && v.abs() <= b.h / 2.0).then_some((u, v))
}

/// Renders a style-neutral scene. Objects that cannot be placed without
/// overlap after [`PLACEMENT_ATTEMPTS`] tries are dropped (logged).
pub fn generate_scene(spec: &SceneSpec, id: impl Into<String>, rng: &mut impl Rng) -> Result<Sample> {
    spec.validate()?;
    let id = id.into();
    let size = spec.image_size;
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(count);
    let mut classes = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.gen_range(0..spec.classes.len());
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = sample_box(spec, &spec.classes[k], rng)?;
            if boxes.iter().all(|o| rotated_iou(o, &b) < spec.max_iou) {
                boxes.push(b);
                classes.push(k);
                placed = true;
                break;
            }
        }
        if !placed {
            log::info!("scene {id}: dropped an object after {PLACEMENT_ATTEMPTS} placement attempts");
        }
    }

    let base = [
        rng.gen_range(0.36..0.46),
        rng.gen_range(0.34..0.42),
        rng.gen_range(0.26..0.34),
    ];
    let gx = rng.gen_range(-0.08..0.08);
    let gy = rng.gen_range(-0.08..0.08);
    let grain = Normal::new(0.0, 0.02).expect("finite std");
    let mut px = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let ramp = gx * x as f64 / size as f64 + gy * y as f64 / size as f64;
            for ch in 0..3 {
                px[(y * size + x) * 3 + ch] = base[ch] + ramp + grain.sample(rng);
            }
        }
    }
    for (b, &k) in boxes.iter().zip(&classes) {
        let shade = rng.gen_range(0.9..1.1);
        let tex = spec.classes[k].texture;
        for y in 0..size {
            for x in 0..size {
                if let Some((u, v)) = covers(b, x, y) {
                    let col = texture_color(tex, u, v, b, shade);
                    px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&col);
                }
            }
        }
    }
    for v in &mut px {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        id,
        image: Tensor::new(&[size, size, 3], px)?,
        boxes,
        classes,
    })
}

/// Pixel-wise (plus small box blur) appearance transform of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub name: String,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
    /// Box-blur radius in pixels; 0 disables blurring.
    pub blur: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Seeds the noise together with the sample id.
    pub noise_seed: u64,
}

impl DomainStyle {
    pub fn identity(name: impl Into<String>) -> Self {
        DomainStyle {
            name: name.into(),
            gain: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            blur: 0,
            noise: 0.0,
            noise_seed: 0,
        }
    }

    /// Source domain: neutral.
    pub fn a() -> Self {
        Self::identity("A")
    }

    /// Low contrast, blue cast and blur.
    pub fn b() -> Self {
        DomainStyle {
            name: "B".into(),
            gain: [0.5, 0.55, 0.6],
            bias: [0.18, 0.24, 0.38],
            gamma: 1.0,
            blur: 1,
            noise: 0.0,
            noise_seed: 0,
        }
    }

    /// High gain and sensor noise.
    pub fn c() -> Self {
        DomainStyle {
            name: "C".into(),
            gain: [1.6, 1.6, 1.5],
            bias: [-0.05, -0.05, -0.05],
            gamma: 0.85,
            blur: 0,
            noise: 0.08,
            noise_seed: 0xC0FFEE,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "A" => Ok(Self::a()),
            "B" => Ok(Self::b()),
            "C" => Ok(Self::c()),
            other => Err(Error::invalid(format!("unknown domain style {other:?} (expected A, B or C)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.gain.iter().chain(&self.bias).all(|v| v.is_finite());
        if !finite || !(self.gamma > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config(format!("domain style {:?} has invalid parameters", self.name)));
        }
        Ok(())
    }
}

fn box_blur(px: &[f64], size_h: usize, size_w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; px.len()];
    let ri = r as isize;
    for y in 0..size_h {
        for x in 0..size_w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for dy in -ri..=ri {
                    let yy = (y as isize + dy).clamp(0, size_h as isize - 1) as usize;
                    for dx in -ri..=ri {
                        let xx = (x as isize + dx).clamp(0, size_w as isize - 1) as usize;
                        acc += px[(yy * size_w + xx) * 3 + ch];
                    }
                }
                out[(y * size_w + x) * 3 + ch] = acc / ((2 * r + 1) * (2 * r + 1)) as f64;
            }
        }
    }
    out
}

/// Applies `style` to the pixels; annotations are copied unchanged.
pub fn apply_domain_style(s: &Sample, style: &DomainStyle) -> Result<Sample> {
    style.validate()?;
    let shape = s.image.shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::invalid(format!("expected an (H, W, 3) image, got {shape:?}")));
    }
    let mut px = if style.blur > 0 {
        box_blur(s.image.data(), shape[0], shape[1], style.blur)
    } else {
        s.image.data().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(style.noise_seed ^ u64::from(crc32fast::hash(s.id.as_bytes())));
    let noise = (style.noise > 0.0).then(|| Normal::new(0.0, style.noise).expect("finite std"));
    for (i, v) in px.iter_mut().enumerate() {
        let ch = i % 3;
        let mut t = (style.gain[ch] * *v + style.bias[ch]).clamp(0.0, 1.0);
        if style.gamma != 1.0 {
            t = t.powf(style.gamma);
        }
        if let Some(n) = &noise {
            t = (t + n.sample(&mut rng)).clamp(0.0, 1.0);
        }
        *v = t;
    }
    Ok(Sample {
        id: s.id.clone(),
        image: Tensor::new(&shape, px)?,
        boxes: s.boxes.clone(),
        classes: s.classes.clone(),
    })
}

/// Generates `count` styled scenes. Image `i` draws from its own ChaCha
/// stream of `seed`, so any subset can be regenerated independently.
pub fn generate_split(spec: &SceneSpec, style: &DomainStyle, seed: u64, count: usize, prefix: &str) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let scene = generate_scene(spec, format!("{prefix}{i:04}"), &mut rng)?;
            apply_domain_style(&scene, style)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    image_size: usize,
    classes: Vec<String>,
    samples: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    image_file: String,
    crc32: u32,
    boxes: Vec<[f64; 6]>,
}

/// A dataset as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let expect = [dataset.image_size, dataset.image_size, 3];
        if s.image.shape() != expect {
            return Err(Error::invalid(format!("sample {} has shape {:?}, expected {expect:?}", s.id, s.image.shape())));
        }
        if s.id.is_empty() || s.id.contains(['/', '\\']) {
            return Err(Error::invalid(format!("sample id {:?} is not a plain file stem", s.id)));
        }
        let bytes = f64_to_le_bytes(s.image.data());
        let file = format!("{}.f64", s.id);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestSample {
            id: s.id.clone(),
            image_file: file,
            crc32: crc32fast::hash(&bytes),
            boxes: s
                .boxes
                .iter()
                .zip(&s.classes)
                .map(|(b, &c)| [b.cx, b.cy, b.w, b.h, b.theta, c as f64])
                .collect(),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        image_size: dataset.image_size,
        classes: dataset.classes.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", m.version)));
    }
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in m.samples {
        let blob = dir.join(&e.image_file);
        let bytes = fs::read(&blob).map_err(|err| Error::io(&blob, err))?;
        let expected = m.image_size * m.image_size * 3 * 8;
        if bytes.len() != expected {
            return Err(Error::format(&blob, format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let crc = crc32fast::hash(&bytes);
        if crc != e.crc32 {
            return Err(Error::format(&blob, format!("checksum mismatch: manifest {:#010x}, file {crc:#010x}", e.crc32)));
        }
        let mut boxes = Vec::with_capacity(e.boxes.len());
        let mut classes = Vec::with_capacity(e.boxes.len());
        for r in &e.boxes {
            let b = OrientedBox::new(r[0], r[1], r[2], r[3], r[4])
                .map_err(|err| Error::format(&path, format!("sample {}: {err}", e.id)))?;
            if b != (OrientedBox { cx: r[0], cy: r[1], w: r[2], h: r[3], theta: r[4] }) {
                return Err(Error::format(&path, format!("sample {}: box {r:?} is not canonical", e.id)));
            }
            let c = r[5];
            if c.fract() != 0.0 || c < 0.0 || c as usize >= m.classes.len() {
                return Err(Error::format(&path, format!("sample {}: bad class {c}", e.id)));
            }
            boxes.push(b);
            classes.push(c as usize);
        }
        samples.push(Sample {
            id: e.id,
            image: Tensor::new(&[m.image_size, m.image_size, 3], le_bytes_to_f64(&bytes))?,
            boxes,
            classes,
        });
    }
    Ok(Dataset {
        image_size: m.image_size,
        classes: m.classes,
        samples,
    })
}
