//! Ground-truth face depth for supervision.
//!
//! A depth oracle produces `D(x, y)` in `[0, 255]` with the background at
//! exactly zero. Pixels inside the fake region are forced to zero and every
//! other pixel is shifted by `lambda` and clamped, so that fake regions (0),
//! background (`lambda`) and genuine face (`> lambda`) occupy disjoint bands.
//! The map is then averaged over non-overlapping patches and scaled to
//! `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEPTH_MAX: u8 = 255;
pub const DEFAULT_LAMBDA: u32 = 50;

/// Row-major single-channel grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                context: "plane",
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

/// Oracle depth `D(x, y)`; zero marks background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthMap(pub Plane<u8>);

/// Binary fake-region membership; all zero for genuine samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeMask(Plane<u8>);

impl FakeMask {
    pub fn empty(height: usize, width: usize) -> Self {
        FakeMask(Plane::filled(height, width, 0))
    }

    /// Accepts only 0/1 values.
    pub fn from_binary(plane: Plane<u8>) -> Result<Self> {
        if let Some(v) = plane.as_slice().iter().find(|&&v| v > 1) {
            return Err(Error::contract(format!("fake mask must be binary, found value {v}")));
        }
        Ok(FakeMask(plane))
    }

    /// Threshold a soft mask at 0.5 (inclusive).
    pub fn from_soft(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let data = values.iter().map(|&v| u8::from(v >= 0.5)).collect();
        Ok(FakeMask(Plane::from_vec(height, width, data)?))
    }

    pub fn plane(&self) -> &Plane<u8> {
        &self.0
    }

    pub fn is_fake(&self, y: usize, x: usize) -> bool {
        self.0.get(y, x) == 1
    }

    pub fn count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v == 1).count()
    }
}

/// Composed ground truth `G(x, y)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthDepth(pub Plane<u8>);

/// Non-overlapping square tiling of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    image_height: usize,
    image_width: usize,
    per_side: usize,
}

impl PatchGrid {
    pub fn new(image_height: usize, image_width: usize, per_side: usize) -> Result<Self> {
        if per_side == 0 || image_height == 0 || image_width == 0 {
            return Err(Error::config("patch grid dimensions must be positive"));
        }
        if image_height % per_side != 0 || image_width % per_side != 0 {
            return Err(Error::config(format!(
                "image {image_height}x{image_width} is not divisible into {per_side} patches per side"
            )));
        }
        Ok(Self {
            image_height,
            image_width,
            per_side,
        })
    }

    pub fn square(image_size: usize, per_side: usize) -> Result<Self> {
        Self::new(image_size, image_size, per_side)
    }

    pub fn per_side(&self) -> usize {
        self.per_side
    }

    pub fn count(&self) -> usize {
        self.per_side * self.per_side
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }

    /// Patch height and width in pixels.
    pub fn patch_dims(&self) -> (usize, usize) {
        (self.image_height / self.per_side, self.image_width / self.per_side)
    }

    /// Half-open pixel bounds `(y0, y1, x0, x1)` of patch `p` (row-major order).
    pub fn bounds(&self, p: usize) -> (usize, usize, usize, usize) {
        let (ph, pw) = self.patch_dims();
        let (row, col) = (p / self.per_side, p % self.per_side);
        (row * ph, (row + 1) * ph, col * pw, (col + 1) * pw)
    }

    /// Index of the patch that contains pixel `(y, x)`.
    pub fn patch_of(&self, y: usize, x: usize) -> usize {
        let (ph, pw) = self.patch_dims();
        (y / ph) * self.per_side + x / pw
    }
}

/// Per-patch mean depth on the `[0, 255]` scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPatchDepth(pub Vec<f64>);

/// Per-patch mean depth scaled to `[0, 1]`; the regression target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchDepthVector(pub Vec<f64>);

impl PatchDepthVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `min(v, 255)` for non-negative `v`.
pub fn clamp_overflow(v: i64) -> Result<u8> {
    if v < 0 {
        return Err(Error::contract(format!("depth value {v} is negative")));
    }
    Ok(v.min(DEPTH_MAX as i64) as u8)
}

pub fn compose_gt_depth(depth: &DepthMap, mask: &FakeMask, lambda: u32) -> Result<GroundTruthDepth> {
    if lambda == 0 || lambda > DEPTH_MAX as u32 {
        return Err(Error::contract(format!("lambda must lie in 1..=255, got {lambda}")));
    }
    if depth.0.dims() != mask.plane().dims() {
        let (dh, dw) = depth.0.dims();
        let (mh, mw) = mask.plane().dims();
        return Err(Error::Shape {
            context: "compose_gt_depth",
            expected: vec![dh, dw],
            found: vec![mh, mw],
        });
    }
    let data = depth
        .0
        .as_slice()
        .iter()
        .zip(mask.plane().as_slice())
        .map(|(&d, &m)| {
            if m == 1 {
                Ok(0)
            } else {
                clamp_overflow(d as i64 + lambda as i64)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    let (h, w) = depth.0.dims();
    Ok(GroundTruthDepth(Plane::from_vec(h, w, data)?))
}

fn check_grid(plane: &Plane<u8>, grid: &PatchGrid) -> Result<()> {
    if plane.dims() != grid.image_dims() {
        let (h, w) = grid.image_dims();
        return Err(Error::Shape {
            context: "patch grid",
            expected: vec![h, w],
            found: vec![plane.height(), plane.width()],
        });
    }
    Ok(())
}

/// Mean of `gt` over patch `p`.
pub fn patch_mean(gt: &GroundTruthDepth, grid: &PatchGrid, p: usize) -> Result<f64> {
    check_grid(&gt.0, grid)?;
    if p >= grid.count() {
        return Err(Error::contract(format!("patch {p} outside grid of {}", grid.count())));
    }
    let (y0, y1, x0, x1) = grid.bounds(p);
    let mut sum = 0u64;
    for y in y0..y1 {
        for x in x0..x1 {
            sum += gt.0.get(y, x) as u64;
        }
    }
    Ok(sum as f64 / ((y1 - y0) * (x1 - x0)) as f64)
}

pub fn patch_average(gt: &GroundTruthDepth, grid: &PatchGrid) -> Result<RawPatchDepth> {
    check_grid(&gt.0, grid)?;
    let (ph, pw) = grid.patch_dims();
    let mut sums = vec![0u64; grid.count()];
    for y in 0..gt.0.height() {
        let row = &gt.0.as_slice()[y * gt.0.width()..(y + 1) * gt.0.width()];
        let base = (y / ph) * grid.per_side();
        for (x, &v) in row.iter().enumerate() {
            sums[base + x / pw] += v as u64;
        }
    }
    let area = (ph * pw) as f64;
    Ok(RawPatchDepth(sums.into_iter().map(|s| s as f64 / area).collect()))
}

pub fn normalize_patch_depth(raw: &RawPatchDepth) -> Result<PatchDepthVector> {
    let max = DEPTH_MAX as f64;
    if let Some(v) = raw.0.iter().find(|v| !(0.0..=max).contains(*v)) {
        return Err(Error::contract(format!("patch depth {v} outside [0, 255]")));
    }
    Ok(PatchDepthVector(raw.0.iter().map(|v| v / max).collect()))
}

pub fn denormalize_patch_depth(v: &PatchDepthVector) -> RawPatchDepth {
    RawPatchDepth(v.0.iter().map(|x| x * DEPTH_MAX as f64).collect())
}

/// Full chain: compose, patch-average, normalize.
pub fn patch_targets(
    depth: &DepthMap,
    mask: &FakeMask,
    lambda: u32,
    grid: &PatchGrid,
) -> Result<PatchDepthVector> {
    let gt = compose_gt_depth(depth, mask, lambda)?;
    normalize_patch_depth(&patch_average(&gt, grid)?)
}

/// Elliptical dome used as a stand-in depth oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomeParams {
    pub center_y: f64,
    pub center_x: f64,
    pub axis_y: f64,
    pub axis_x: f64,
    pub peak: u8,
}

impl DomeParams {
    /// Normalized squared radius; `< 1` inside the face ellipse.
    pub fn radius_sq(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.center_y) / self.axis_y;
        let dx = (x - self.center_x) / self.axis_x;
        dy * dy + dx * dx
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        self.radius_sq(y, x) < 1.0
    }
}

/// Dome `1 + round((peak - 1) * sqrt(1 - r^2))` inside the ellipse, exactly
/// zero outside. Pixel `(y, x)` sits at coordinates `(y, x)`.
pub fn synthetic_face_depth(
    params: &DomeParams,
    height: usize,
    width: usize,
    lambda_max: u32,
) -> Result<DepthMap> {
    if !(params.axis_y > 0.0 && params.axis_x > 0.0) {
        return Err(Error::contract("dome axes must be positive"));
    }
    if params.peak == 0 || params.peak as u32 + lambda_max > DEPTH_MAX as u32 {
        return Err(Error::contract(format!(
            "peak {} must lie in 1..={} for lambda up to {lambda_max}",
            params.peak,
            (DEPTH_MAX as u32).saturating_sub(lambda_max)
        )));
    }
    let fits = |c: f64, a: f64, n: usize| c - a >= 0.0 && c + a <= (n - 1) as f64;
    if !fits(params.center_y, params.axis_y, height) || !fits(params.center_x, params.axis_x, width) {
        return Err(Error::contract("dome ellipse does not fit inside the image"));
    }
    let span = (params.peak - 1) as f64;
    let mut plane = Plane::filled(height, width, 0u8);
    for y in 0..height {
        for x in 0..width {
            let r2 = params.radius_sq(y as f64, x as f64);
            if r2 < 1.0 {
                plane.set(y, x, 1 + (span * (1.0 - r2).sqrt()).round() as u8);
            }
        }
    }
    Ok(DepthMap(plane))
}
