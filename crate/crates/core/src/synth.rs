//! Procedural real/fake face-like samples.
//!
//! A real sample is an elliptical dome lit by a directional light, so its
//! shading agrees with its depth. A fake sample starts from a real one and
//! swaps an interior ellipse or rectangle for a patch shaded by a mirrored
//! light with a shifted skin tone and different grain: texture that no
//! longer matches the underlying depth.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_gt::{
    compose_gt_depth, synthetic_face_depth, DepthMap, DomeParams, FakeMask, GroundTruthDepth, Plane,
    DEFAULT_LAMBDA,
};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::seeding::derive_indexed;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn class_index(self) -> usize {
        usize::from(self.is_fake())
    }
}

/// Compression-like degradation strength.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeLevel {
    High,
    Low,
}

impl DegradeLevel {
    fn blur_kernel(self) -> &'static [f64] {
        match self {
            DegradeLevel::High => &[0.03, 0.94, 0.03],
            DegradeLevel::Low => &[0.054_488_7, 0.244_201_3, 0.402_619_9, 0.244_201_3, 0.054_488_7],
        }
    }

    pub fn quantization_levels(self) -> u32 {
        match self {
            DegradeLevel::High => 256,
            DegradeLevel::Low => 24,
        }
    }
}

impl FromStr for DegradeLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "high" | "c23" => Ok(DegradeLevel::High),
            "low" | "c40" => Ok(DegradeLevel::Low),
            other => Err(Error::contract(format!("unknown quality level `{other}` (expected high or low)"))),
        }
    }
}

impl fmt::Display for DegradeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradeLevel::High => "high",
            DegradeLevel::Low => "low",
        })
    }
}

/// Uniform quantization to `levels` values in `[0, 1]`; idempotent.
pub fn quantize(image: &Image, levels: u32) -> Image {
    let q = (levels - 1) as f64;
    let mut out = image.clone();
    for v in out.as_mut_slice() {
        *v = ((*v as f64).clamp(0.0, 1.0) * q).round() as f32 / q as f32;
    }
    out
}

fn blur(image: &Image, kernel: &[f64]) -> Image {
    let (h, w) = (image.height(), image.width());
    let r = kernel.len() / 2;
    let src = image.as_slice();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[(y * w + clampi(x as isize + k as isize - r as isize, w)) * 3 + c] as f64)
                    .sum();
            }
        }
    }
    let mut out = Image::zeros(h, w);
    let dst = out.as_mut_slice();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                dst[(y * w + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[(clampi(y as isize + k as isize - r as isize, h) * w + x) * 3 + c])
                    .sum::<f64>() as f32;
            }
        }
    }
    out
}

/// Separable blur followed by uniform quantization.
pub fn degrade_quality(image: &Image, level: DegradeLevel) -> Image {
    quantize(&blur(image, level.blur_kernel()), level.quantization_levels())
}

pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.as_slice().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub lambda: u32,
    /// Scales how far the swapped region departs from the host face.
    pub fake_strength: f64,
    pub quality: Option<DegradeLevel>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            lambda: DEFAULT_LAMBDA,
            fake_strength: 1.0,
            quality: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config("synthetic images must be at least 8 pixels wide"));
        }
        if self.lambda == 0 || self.lambda > 100 {
            return Err(Error::config("generator lambda must lie in 1..=100"));
        }
        if !(self.fake_strength > 0.0 && self.fake_strength.is_finite()) {
            return Err(Error::config("fake_strength must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub image: Image,
    pub mask: FakeMask,
    pub oracle_depth: DepthMap,
    pub gt_depth: GroundTruthDepth,
    pub label: Label,
    pub seed: u64,
    pub quality: Option<DegradeLevel>,
}

impl SampleRecord {
    /// Label and mask agree, and the stored ground truth is the composition
    /// of the oracle depth with the mask.
    pub fn check_consistency(&self, lambda: u32) -> Result<()> {
        if self.label.is_fake() != (self.mask.count() > 0) {
            return Err(Error::contract(format!("record {}: label disagrees with mask", self.id)));
        }
        if compose_gt_depth(&self.oracle_depth, &self.mask, lambda)? != self.gt_depth {
            return Err(Error::contract(format!("record {}: ground truth is not composed from oracle", self.id)));
        }
        Ok(())
    }
}

struct Scene {
    dome: DomeParams,
    relief: f64,
    light: [f64; 3],
    skin: [f64; 3],
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl Scene {
    fn sample(rng: &mut impl Rng, n: usize, lambda: u32) -> Self {
        let nf = n as f64;
        let mid = (nf - 1.0) / 2.0;
        let axis_y = rng.random_range(0.32..0.40) * nf;
        let axis_x = rng.random_range(0.25..0.32) * nf;
        let jitter = 0.05 * nf;
        let center_y = (mid + rng.random_range(-jitter..jitter)).clamp(axis_y, nf - 1.0 - axis_y);
        let center_x = (mid + rng.random_range(-jitter..jitter)).clamp(axis_x, nf - 1.0 - axis_x);
        let max_peak = (255 - lambda).min(205) as u8;
        let peak = rng.random_range(140..=max_peak);
        let light = normalize3([rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), 1.0]);
        let skin = [
            rng.random_range(0.60..0.90),
            rng.random_range(0.42..0.65),
            rng.random_range(0.30..0.50),
        ];
        Scene {
            dome: DomeParams {
                center_y,
                center_x,
                axis_y,
                axis_x,
                peak,
            },
            relief: 0.8 * (axis_x + axis_y) / 2.0,
            light,
            skin,
        }
    }

    /// Surface normal of the dome `z = relief * sqrt(1 - r^2)`.
    fn normal(&self, y: f64, x: f64) -> [f64; 3] {
        let d = &self.dome;
        let root = (1.0 - d.radius_sq(y, x)).max(1e-3).sqrt();
        let dzdx = -self.relief * (x - d.center_x) / (d.axis_x * d.axis_x * root);
        let dzdy = -self.relief * (y - d.center_y) / (d.axis_y * d.axis_y * root);
        normalize3([-dzdx, -dzdy, 1.0])
    }

    fn shade(&self, y: f64, x: f64, light: [f64; 3]) -> f64 {
        let n = self.normal(y, x);
        0.25 + 0.75 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0)
    }
}

fn render_real(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Result<(Image, DepthMap, Scene)> {
    let n = cfg.image_size;
    let scene = Scene::sample(rng, n, cfg.lambda);
    let depth = synthetic_face_depth(&scene.dome, n, n, cfg.lambda)?;
    let bg = [rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)];
    let grad = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let grain = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut img = Image::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            let rgb = if depth.0.get(y, x) > 0 {
                let s = scene.shade(yf, xf, scene.light);
                let g = grain.sample(rng);
                [scene.skin[0] * s + g, scene.skin[1] * s + g, scene.skin[2] * s + g]
            } else {
                let t = grad[0] * yf / n as f64 + grad[1] * xf / n as f64;
                [
                    bg[0] + t + 1.5 * grain.sample(rng),
                    bg[1] + t + 1.5 * grain.sample(rng),
                    bg[2] + t + 1.5 * grain.sample(rng),
                ]
            };
            img.set_pixel(y, x, rgb.map(|v| v.clamp(0.0, 1.0) as f32));
        }
    }
    Ok((img, depth, scene))
}

/// Inside-region test for the swapped patch.
#[derive(Clone, Copy, Debug)]
enum Region {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, y1: f64, x0: f64, x1: f64 },
}

impl Region {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Region::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) < 1.0,
            Region::Rect { y0, y1, x0, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

fn sample_region(rng: &mut impl Rng, dome: &DomeParams) -> Region {
    let face_area = std::f64::consts::PI * dome.axis_y * dome.axis_x;
    let area = rng.random_range(0.05..0.25) * face_area;
    let aspect: f64 = rng.random_range(0.7..1.4);
    // keep the region centre well inside the face
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(0.0..0.35);
    let cy = dome.center_y + r * dome.axis_y * t.sin();
    let cx = dome.center_x + r * dome.axis_x * t.cos();
    if rng.random_bool(0.5) {
        let ry = (area * aspect / std::f64::consts::PI).sqrt();
        Region::Ellipse { cy, cx, ry, rx: area / (std::f64::consts::PI * ry) }
    } else {
        let hy = (area * aspect).sqrt() / 2.0;
        let hx = area / (4.0 * hy);
        Region::Rect {
            y0: cy - hy,
            y1: cy + hy,
            x0: cx - hx,
            x1: cx + hx,
        }
    }
}

fn finish(
    id: u64,
    seed: u64,
    cfg: &GeneratorConfig,
    image: Image,
    depth: DepthMap,
    mask: FakeMask,
    label: Label,
) -> Result<SampleRecord> {
    let gt_depth = compose_gt_depth(&depth, &mask, cfg.lambda)?;
    let image = match cfg.quality {
        Some(level) => degrade_quality(&image, level),
        None => image,
    };
    Ok(SampleRecord {
        id,
        image,
        mask,
        oracle_depth: depth,
        gt_depth,
        label,
        seed,
        quality: cfg.quality,
    })
}

pub fn generate_real_sample(id: u64, seed: u64, cfg: &GeneratorConfig) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, depth, _) = render_real(&mut rng, cfg)?;
    let n = cfg.image_size;
    finish(id, seed, cfg, image, depth, FakeMask::empty(n, n), Label::Real)
}

pub fn generate_fake_sample(id: u64, seed: u64, cfg: &GeneratorConfig) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut image, depth, scene) = render_real(&mut rng, cfg)?;
    let n = cfg.image_size;
    let k = cfg.fake_strength;
    let mirrored = normalize3([-scene.light[0], -scene.light[1], scene.light[2]]);
    let shift: Vec<f64> = (0..3)
        .map(|_| {
            let m = rng.random_range(0.06..0.14) * k;
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    let grain = Normal::new(0.0, 0.03 + 0.03 * k).expect("valid sigma");
    let mut plane = Plane::filled(n, n, 0u8);
    let mut region = sample_region(&mut rng, &scene.dome);
    for _ in 0..32 {
        let hits = (0..n * n)
            .filter(|&i| depth.0.get(i / n, i % n) > 0 && region.contains((i / n) as f64, (i % n) as f64))
            .count();
        if hits > 0 {
            break;
        }
        region = sample_region(&mut rng, &scene.dome);
    }
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            if depth.0.get(y, x) == 0 || !region.contains(yf, xf) {
                continue;
            }
            plane.set(y, x, 1);
            let s = scene.shade(yf, xf, mirrored);
            let g = grain.sample(&mut rng);
            let rgb = [0, 1, 2].map(|c| ((scene.skin[c] + shift[c]) * s + g).clamp(0.0, 1.0) as f32);
            image.set_pixel(y, x, rgb);
        }
    }
    let mask = FakeMask::from_binary(plane)?;
    if mask.count() == 0 {
        return Err(Error::contract(format!("sample {id}: fake region missed the face")));
    }
    finish(id, seed, cfg, image, depth, mask, Label::Fake)
}

pub fn generate_sample(id: u64, seed: u64, label: Label, cfg: &GeneratorConfig) -> Result<SampleRecord> {
    match label {
        Label::Real => generate_real_sample(id, seed, cfg),
        Label::Fake => generate_fake_sample(id, seed, cfg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub fake_ratio: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seed: 0,
            fake_ratio: 0.5,
            train_fraction: 0.7,
            val_fraction: 0.15,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.count < 3 {
            return Err(Error::config("dataset needs at least three records"));
        }
        if !(0.0..=1.0).contains(&self.fake_ratio) {
            return Err(Error::config("fake_ratio must lie in [0, 1]"));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v < 1.0) {
            return Err(Error::config("split fractions must satisfy train > 0, val >= 0, train + val < 1"));
        }
        Ok(())
    }

    /// Record counts for train, val and test.
    pub fn split_counts(&self) -> [usize; 3] {
        let train = (self.count as f64 * self.train_fraction).round() as usize;
        let val = (self.count as f64 * self.val_fraction).round() as usize;
        [train, val, self.count - train - val]
    }
}

/// Records grouped by split, in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic label plan: each split receives `round(n * fake_ratio)`
/// fakes, shuffled within the split.
pub fn label_plan(cfg: &DatasetConfig) -> Vec<(Split, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "labels", 0));
    let mut plan = Vec::with_capacity(cfg.count);
    for (split, n) in Split::ALL.into_iter().zip(cfg.split_counts()) {
        let fakes = (n as f64 * cfg.fake_ratio).round() as usize;
        let mut labels: Vec<Label> = (0..n).map(|i| if i < fakes { Label::Fake } else { Label::Real }).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        plan.extend(labels.into_iter().map(|l| (split, l)));
    }
    plan
}

/// Generate every record in parallel; each derives from its own seed.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let plan = label_plan(cfg);
    let records = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(split, label))| {
            let seed = derive_indexed(cfg.seed, "record", i as u64);
            generate_sample(i as u64, seed, label, &cfg.generator).map(|r| (split, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset {
        config: cfg.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (split, r) in records {
        match split {
            Split::Train => ds.train.push(r),
            Split::Val => ds.val.push(r),
            Split::Test => ds.test.push(r),
        }
    }
    Ok(ds)
}
