//! Per-sample PNG panels: input, ground-truth depth, predicted patch depth
//! (nearest-neighbour upsampled) and the channel-mean activation at the
//! injection point.

use std::fs;
use std::path::{Path, PathBuf};

use facedepth_autograd::{ParamStore, Session};
use image::{Rgb, RgbImage};

use crate::checkpoint::Checkpoint;
use crate::depth_gt::{compose_gt_depth, FakeMask, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{fake_probabilities, Detector};
use crate::raster::{batch_tensor, Image};
use crate::synth::SampleRecord;
use crate::train::EVAL_BATCH;

/// Scale factor applied to every tile.
pub const TILE_ZOOM: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub fake_probability: f64,
    /// Patch depths in `[0, 1]`, row-major over the patch grid.
    pub depth: Option<Vec<f64>>,
    /// Channel mean of the fused features, `(h, w, values)`.
    pub activation: (usize, usize, Vec<f64>),
}

pub fn inspect(det: &Detector, params: &ParamStore, records: &[SampleRecord]) -> Result<Vec<Inspection>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let mut s = Session::inference(params);
        let x = s.input(batch_tensor(chunk.iter().map(|r| &r.image))?);
        let fwd = det.forward(&mut s, x)?;
        let probs = fake_probabilities(s.value(fwd.logits()));
        let (h, w, _) = det.config.backbone.injection_shape();
        let act = s.mean_axis(fwd.classified.enhanced, 2, false);
        let act = s.value(act);
        let depth = fwd.depth.map(|d| s.value(d.depth).clone());
        for (i, p) in probs.into_iter().enumerate() {
            out.push(Inspection {
                fake_probability: p,
                depth: depth.as_ref().map(|d| d.index_axis(ndarray::Axis(0), i).iter().copied().collect()),
                activation: (h, w, act.index_axis(ndarray::Axis(0), i).iter().copied().collect()),
            });
        }
    }
    Ok(out)
}

/// Mean predicted depth over mask pixels and over the rest of the image,
/// reading each pixel from its patch. `None` inside for an empty mask.
pub fn depth_contrast(depth: &[f64], mask: &FakeMask, grid: &PatchGrid) -> (Option<f64>, f64) {
    let (h, w) = mask.plane().dims();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let d = depth[grid.patch_of(y, x)];
            if mask.is_fake(y, x) {
                si += d;
                ni += 1;
            } else {
                so += d;
                no += 1;
            }
        }
    }
    ((ni > 0).then(|| si / ni as f64), so / no.max(1) as f64)
}

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

/// Black, red, yellow, white ramp.
fn heat(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0) * 3.0;
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(t), c(t - 1.0), c(t - 2.0)])
}

fn tile(out: &mut RgbImage, slot: u32, size: u32, pixel: impl Fn(u32, u32) -> Rgb<u8>) {
    for y in 0..size * TILE_ZOOM {
        for x in 0..size * TILE_ZOOM {
            out.put_pixel(slot * size * TILE_ZOOM + x, y, pixel(y / TILE_ZOOM, x / TILE_ZOOM));
        }
    }
}

/// Four tiles side by side. Predicted depth maps `[0, 1]` onto the full
/// grayscale range; the activation tile is min-max normalized.
pub fn render_panel(record: &SampleRecord, gt_lambda: u32, ins: &Inspection, per_side: usize) -> Result<RgbImage> {
    let img: &Image = &record.image;
    let n = img.height();
    let size = n as u32;
    let mut out = RgbImage::new(4 * size * TILE_ZOOM, size * TILE_ZOOM);
    tile(&mut out, 0, size, |y, x| {
        let p = img.pixel(y as usize, x as usize);
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    let gt = compose_gt_depth(&record.oracle_depth, &record.mask, gt_lambda)?;
    tile(&mut out, 1, size, |y, x| {
        let g = gt.0.get(y as usize, x as usize);
        Rgb([g, g, g])
    });
    match &ins.depth {
        Some(d) => {
            let grid = PatchGrid::square(n, per_side)?;
            tile(&mut out, 2, size, |y, x| gray(d[grid.patch_of(y as usize, x as usize)]));
        }
        None => tile(&mut out, 2, size, |_, _| Rgb([0, 0, 96])),
    }
    let (ah, aw, vals) = &ins.activation;
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    tile(&mut out, 3, size, |y, x| {
        let ay = (y as usize * ah) / n;
        let ax = (x as usize * aw) / n;
        heat((vals[ay * aw + ax] - lo) / span)
    });
    Ok(out)
}

/// Write one `sample_<id>.png` per record into `dir`.
pub fn visualize(ckpt: &Checkpoint, records: &[SampleRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (det, params) = ckpt.instantiate()?;
    let found = inspect(&det, &params, records)?;
    let per_side = ckpt.model.fdmt.patches_per_side;
    records
        .iter()
        .zip(&found)
        .map(|(r, ins)| {
            let path = dir.join(format!("sample_{:05}.png", r.id));
            render_panel(r, ckpt.train.lambda, ins, per_side)?.save(&path)?;
            Ok(path)
        })
        .collect()
}
