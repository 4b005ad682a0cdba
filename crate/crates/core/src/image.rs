//! Image batches and file I/O.
//!
//! Images live in normalized [0,1] reals with layout batch x height x
//! width x channels. PNG covers regular inputs/outputs; PPM/PGM are the
//! debug formats.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A batch of images, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl ImageBatch {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(Error::InvalidInput(format!(
                "image batch {}x{}x{}x{} wants {} values, got {}",
                n,
                h,
                w,
                c,
                n * h * w * c,
                data.len()
            )));
        }
        Ok(ImageBatch { n, h, w, c, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        ImageBatch { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((n * self.h + y) * self.w + x) * self.c + c]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: f32) {
        self.data[((n * self.h + y) * self.w + x) * self.c + c] = v;
    }

    /// Single-image view (copy) at batch index i.
    pub fn image(&self, i: usize) -> ImageBatch {
        let stride = self.h * self.w * self.c;
        ImageBatch {
            n: 1,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// New batch built from the given indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let stride = self.h * self.w * self.c;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        ImageBatch { n: indices.len(), h: self.h, w: self.w, c: self.c, data }
    }

    /// Stacks batches with identical image shapes.
    pub fn stack(batches: &[&ImageBatch]) -> Result<ImageBatch> {
        let first = batches.first().ok_or_else(|| Error::InvalidInput("empty stack".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for b in batches {
            if (b.h, b.w, b.c) != (first.h, first.w, first.c) {
                return Err(Error::InvalidInput("stack: image shape mismatch".into()));
            }
            data.extend_from_slice(&b.data);
            n += b.n;
        }
        Ok(ImageBatch { n, h: first.h, w: first.w, c: first.c, data })
    }

    pub fn to_tensor<E: Element>(&self) -> std::result::Result<Tensor<E>, crate::tensor::TensorError> {
        Tensor::from_vec(
            &[self.n, self.h, self.w, self.c],
            self.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
        )
    }

    /// Converts a [N,H,W,C] tensor back into an image batch, clamping into
    /// [0,1].
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Result<Self> {
        let (n, h, w, c) = t.dims4();
        ImageBatch::new(
            n,
            h,
            w,
            c,
            t.data().iter().map(|&v| (v.to_f64() as f32).clamp(0.0, 1.0)).collect(),
        )
    }

    /// Elementwise maximum absolute difference; handy in tests.
    pub fn max_abs_diff(&self, other: &ImageBatch) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

// ── File I/O ────────────────────────────────────────────────────────

pub fn save_png(img: &ImageBatch, index: usize, path: &Path) -> Result<()> {
    let (h, w, c) = (img.h, img.w, img.c);
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        3 => {
            let mut out = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            to_u8(img.at(index, y, x, 0)),
                            to_u8(img.at(index, y, x, 1)),
                            to_u8(img.at(index, y, x, 2)),
                        ]),
                    );
                }
            }
            out.save(path).map_err(|e| Error::Image(e.to_string()))
        }
        1 => {
            let mut out = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(x as u32, y as u32, image::Luma([to_u8(img.at(index, y, x, 0))]));
                }
            }
            out.save(path).map_err(|e| Error::Image(e.to_string()))
        }
        _ => Err(Error::Image(format!("unsupported channel count {}", c))),
    }
}

pub fn load_image(path: &Path) -> Result<ImageBatch> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => load_ppm(path),
        _ => {
            let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let p = img.get_pixel(x as u32, y as u32);
                    for ch in 0..3 {
                        data.push(p.0[ch] as f32 / 255.0);
                    }
                }
            }
            ImageBatch::new(1, h, w, 3, data)
        }
    }
}

/// Binary PPM (P6), 8-bit.
pub fn save_ppm(img: &ImageBatch, index: usize, path: &Path) -> Result<()> {
    if img.c != 3 {
        return Err(Error::Image("ppm requires 3 channels".into()));
    }
    let mut buf = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                buf.push((img.at(index, y, x, c).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<ImageBatch> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    // header: magic, width, height, maxval, then a single whitespace byte
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    pos += 1; // single whitespace after maxval
    if fields.len() != 4 || fields[0] != "P6" {
        return Err(Error::Image(format!("{}: not a binary PPM", path.display())));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Image("bad width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Image("bad height".into()))?;
    let maxval: f32 = fields[3].parse().map_err(|_| Error::Image("bad maxval".into()))?;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Image("ppm truncated".into()));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / maxval).collect();
    ImageBatch::new(1, h, w, 3, data)
}

/// Binary PGM (P5), 8-bit, for debug difference images.
pub fn save_pgm(values: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let mut buf = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    for &v in values {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

// ── Procedural toy set ──────────────────────────────────────────────

/// Deterministic smooth RGB test images: gradient backgrounds with a few
/// soft shapes. Low-frequency content keeps small autoencoders honest.
pub fn toy_images(count: usize, h: usize, w: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = ImageBatch::zeros(count, h, w, 3);
    for n in 0..count {
        let c0: [f32; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let c1: [f32; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (dx, dy) = (angle.cos(), angle.sin());
        for y in 0..h {
            for x in 0..w {
                let t = ((x as f32 / w as f32 - 0.5) * dx + (y as f32 / h as f32 - 0.5) * dy + 0.5)
                    .clamp(0.0, 1.0);
                for c in 0..3 {
                    batch.set(n, y, x, c, c0[c] * (1.0 - t) + c1[c] * t);
                }
            }
        }
        // a couple of soft discs
        for _ in 0..rng.random_range(1..3usize) {
            let cx = rng.random_range(0.2..0.8) * w as f32;
            let cy = rng.random_range(0.2..0.8) * h as f32;
            let r = rng.random_range(0.15..0.35) * w.min(h) as f32;
            let col: [f32; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            for y in 0..h {
                for x in 0..w {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    // smooth falloff over ~2px
                    let a = (1.0 - (d - r) / 2.0).clamp(0.0, 1.0);
                    if a > 0.0 {
                        for c in 0..3 {
                            let v = batch.at(n, y, x, c);
                            batch.set(n, y, x, c, v * (1.0 - a) + col[c] * a);
                        }
                    }
                }
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_images_are_deterministic_and_in_range() {
        let a = toy_images(4, 16, 16, 9);
        let b = toy_images(4, 16, 16, 9);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = toy_images(4, 16, 16, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = toy_images(1, 8, 10, 3);
        let path = dir.path().join("x.ppm");
        save_ppm(&img, 0, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back.height(), 8);
        assert_eq!(back.width(), 10);
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = toy_images(2, 8, 8, 5);
        let path = dir.path().join("x.png");
        save_png(&img, 1, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.image(1).max_abs_diff(&back) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn tensor_round_trip_clamps() {
        let img = ImageBatch::new(1, 1, 1, 3, vec![0.2, 0.5, 0.8]).unwrap();
        let t = img.to_tensor::<f32>().unwrap();
        let back = ImageBatch::from_tensor(&t).unwrap();
        assert_eq!(img, back);
    }
}
