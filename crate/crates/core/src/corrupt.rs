//! Synthetic corruption generation: channel-coherent Gaussian noise, camera
//! motion blur, derangement negatives, curriculum severity schedules, and
//! the tile-shrink-clean preprocessing for large images.
//!
//! All operations are pure functions of (input, spec): the same spec on the
//! same input is bit-identical.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    MotionBlur,
}

/// One corruption configuration. Severity is the noise sigma in [0,1] value
/// units for noise, or the blur kernel length in pixels (rounded) for blur;
/// severity 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn noise(severity: f64, seed: u64) -> Self {
        CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity, seed }
    }

    pub fn blur(severity: f64, seed: u64) -> Self {
        CorruptionSpec { kind: CorruptionKind::MotionBlur, severity, seed }
    }
}

/// Applies the spec's corruption.
pub fn corrupt(clean: &ImageBatch, spec: &CorruptionSpec) -> Result<ImageBatch> {
    match spec.kind {
        CorruptionKind::GaussianNoise => corrupt_noise(clean, spec),
        CorruptionKind::MotionBlur => corrupt_blur(clean, spec),
    }
}

/// Additive Gaussian noise applied channel-coherently: one sample per pixel
/// location, added identically to every channel, then clipped to [0,1].
/// Produces tone shifts rather than per-channel speckle.
pub fn corrupt_noise(clean: &ImageBatch, spec: &CorruptionSpec) -> Result<ImageBatch> {
    if spec.severity < 0.0 {
        return Err(Error::InvalidInput(format!("negative noise severity {}", spec.severity)));
    }
    if spec.severity == 0.0 {
        return Ok(clean.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = rand_distr::Normal::new(0.0f64, spec.severity).expect("finite severity");
    let (n, h, w, c) = (clean.len(), clean.height(), clean.width(), clean.channels());
    let mut out = clean.clone();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let shift = normal.sample(&mut rng) as f32;
                for ci in 0..c {
                    let v = (clean.at(ni, y, x, ci) + shift).clamp(0.0, 1.0);
                    out.set(ni, y, x, ci, v);
                }
            }
        }
    }
    Ok(out)
}

/// Rasterizes a normalized 1-D line kernel of `len` taps at the given angle
/// into a square grid (odd side), nearest-pixel drawing.
fn line_kernel(len: usize, angle: f64) -> (Vec<f32>, usize) {
    let side = if len % 2 == 1 { len } else { len + 1 };
    let mut k = vec![0.0f32; side * side];
    let center = (side / 2) as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = (len as f64 - 1.0) / 2.0;
    for i in 0..len {
        let t = i as f64 - half;
        let x = (center + t * dx).round() as isize;
        let y = (center + t * dy).round() as isize;
        let x = x.clamp(0, side as isize - 1) as usize;
        let y = y.clamp(0, side as isize - 1) as usize;
        k[y * side + x] += 1.0 / len as f32;
    }
    (k, side)
}

/// Camera motion blur: a seeded random direction, shared by every image in
/// the batch. Border taps renormalize over the in-bounds weights so constant
/// images stay constant.
pub fn corrupt_blur(clean: &ImageBatch, spec: &CorruptionSpec) -> Result<ImageBatch> {
    if spec.severity < 0.0 {
        return Err(Error::InvalidInput(format!("negative blur severity {}", spec.severity)));
    }
    let len = spec.severity.round() as usize;
    if len <= 1 {
        return Ok(clean.clone());
    }
    let (n, h, w, c) = (clean.len(), clean.height(), clean.width(), clean.channels());
    if len > h || len > w {
        return Err(Error::InvalidInput(format!(
            "blur kernel length {} exceeds image size {}x{}",
            len, h, w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (kernel, side) = line_kernel(len, angle);
    let r = (side / 2) as isize;
    let mut out = ImageBatch::zeros(n, h, w, c);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    let mut acc = 0.0f32;
                    let mut wsum = 0.0f32;
                    for ky in 0..side {
                        let sy = y as isize + ky as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..side {
                            let kv = kernel[ky * side + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            let sx = x as isize + kx as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += kv * clean.at(ni, sy as usize, sx as usize, ci);
                            wsum += kv;
                        }
                    }
                    out.set(ni, y, x, ci, (acc / wsum).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

/// Uniformly sampled derangement of 0..n (no fixed points), by rejection.
pub fn derange_indices(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("no derangement exists for batch size {}", n)));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Batch reordered by a uniformly sampled derangement.
pub fn derange(batch: &ImageBatch, seed: u64) -> Result<ImageBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = derange_indices(batch.len(), &mut rng)?;
    Ok(batch.select(&perm))
}

/// Bilinear resize of a single-image batch (half-pixel-center convention).
pub fn resize_bilinear(img: &ImageBatch, index: usize, oh: usize, ow: usize) -> ImageBatch {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = ImageBatch::zeros(1, oh, ow, c);
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ci in 0..c {
                let v = img.at(index, y0, x0, ci) * (1.0 - ty) * (1.0 - tx)
                    + img.at(index, y0, x1, ci) * (1.0 - ty) * tx
                    + img.at(index, y1, x0, ci) * ty * (1.0 - tx)
                    + img.at(index, y1, x1, ci) * ty * tx;
                out.set(0, y, x, ci, v);
            }
        }
    }
    out
}

fn mse_images(a: &ImageBatch, b: &ImageBatch) -> f32 {
    let n = a.data().len() as f32;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / n
}

/// Splits one large image into an n x m tile grid, shrinks every tile to
/// `out_size` with bilinear interpolation, and drops tiles whose MSE to an
/// already-kept tile falls below `dedup_threshold`.
pub fn tile_shrink_clean(
    image: &ImageBatch,
    tile_grid: (usize, usize),
    out_size: (usize, usize),
    dedup_threshold: f32,
) -> Result<ImageBatch> {
    let (rows, cols) = tile_grid;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput("degenerate tile grid".into()));
    }
    if image.len() != 1 {
        return Err(Error::InvalidInput("tile_shrink_clean expects a single image".into()));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (th, tw) = (h / rows, w / cols);
    if th < out_size.0 || tw < out_size.1 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} too small for a {}x{} grid of {}x{} tiles",
            h, w, rows, cols, out_size.0, out_size.1
        )));
    }
    let mut kept: Vec<ImageBatch> = Vec::new();
    for r in 0..rows {
        for cc in 0..cols {
            let mut tile = ImageBatch::zeros(1, th, tw, c);
            for y in 0..th {
                for x in 0..tw {
                    for ci in 0..c {
                        tile.set(0, y, x, ci, image.at(0, r * th + y, cc * tw + x, ci));
                    }
                }
            }
            let small = resize_bilinear(&tile, 0, out_size.0, out_size.1);
            if kept.iter().all(|k| mse_images(k, &small) >= dedup_threshold) {
                kept.push(small);
            }
        }
    }
    let refs: Vec<&ImageBatch> = kept.iter().collect();
    ImageBatch::stack(&refs)
}

/// Linear severity ramp from `min_sev` (epoch 0) to `max_sev` (last epoch).
pub fn curriculum_severity(epoch: usize, total_epochs: usize, min_sev: f64, max_sev: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {} out of range for {} epochs",
            epoch, total_epochs
        )));
    }
    if min_sev > max_sev {
        return Err(Error::InvalidInput("min_sev > max_sev".into()));
    }
    let denom = (total_epochs - 1).max(1) as f64;
    Ok(min_sev + (max_sev - min_sev) * epoch as f64 / denom)
}

// ── Triplet batches ─────────────────────────────────────────────────

/// Anchor/positive/negative sample triple with the corruption mask
/// (1 exactly where anchor and positive differ).
#[derive(Clone)]
pub struct TripletBatch {
    pub anchor: ImageBatch,
    pub positive: ImageBatch,
    pub negative: ImageBatch,
    pub mask: ImageBatch,
}

impl TripletBatch {
    /// Builds a triplet from clean anchors: positive = corrupted anchors,
    /// negative = deranged anchors.
    pub fn build(anchor: &ImageBatch, spec: &CorruptionSpec, derange_seed: u64) -> Result<Self> {
        let positive = corrupt(anchor, spec)?;
        let negative = derange(anchor, derange_seed)?;
        let mask_data: Vec<f32> = anchor
            .data()
            .iter()
            .zip(positive.data())
            .map(|(a, p)| if a != p { 1.0 } else { 0.0 })
            .collect();
        let mask = ImageBatch::new(
            anchor.len(),
            anchor.height(),
            anchor.width(),
            anchor.channels(),
            mask_data,
        )?;
        Ok(TripletBatch { anchor: anchor.clone(), positive, negative, mask })
    }
}
