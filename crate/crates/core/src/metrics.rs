//! Image-quality metrics: SSIM with a Gaussian window, plus PSNR/MSE.
//!
//! SSIM combines luminance, contrast, and structure statistics over a
//! sliding window. With unit exponents the three-term product collapses to
//! the familiar two-term form; the terms are kept separate here so the
//! exponents stay configurable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub l: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l).powi(2)
    }
    pub fn c2(&self) -> f64 {
        (self.k2 * self.l).powi(2)
    }
    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }
}

/// Normalized 2-D Gaussian window.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - c;
            let x = (i % size) as f64 - c;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn signed_pow(v: f64, e: f64) -> f64 {
    if e == 1.0 {
        v
    } else {
        v.signum() * v.abs().powf(e)
    }
}

/// Mean SSIM per image plus the batch mean. Local statistics use the
/// Gaussian window over fully-interior positions, averaged over space and
/// channels.
pub fn ssim(x: &ImageBatch, y: &ImageBatch, cfg: &SsimConfig) -> Result<(Vec<f64>, f64)> {
    if (x.len(), x.height(), x.width(), x.channels())
        != (y.len(), y.height(), y.width(), y.channels())
    {
        return Err(Error::InvalidInput("ssim: shape mismatch".into()));
    }
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let win = cfg.window;
    if win > h || win > w {
        return Err(Error::InvalidInput(format!(
            "ssim: {}x{} window larger than {}x{} image",
            win, win, h, w
        )));
    }
    let kernel = gaussian_window(win, cfg.sigma);
    let (c1, c2, c3) = (cfg.c1(), cfg.c2(), cfg.c3());
    let mut per_image = Vec::with_capacity(x.len());
    for n in 0..x.len() {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for cy in 0..=(h - win) {
            for cx in 0..=(w - win) {
                for ch in 0..c {
                    let mut mx = 0.0f64;
                    let mut my = 0.0f64;
                    let mut mxx = 0.0f64;
                    let mut myy = 0.0f64;
                    let mut mxy = 0.0f64;
                    for ky in 0..win {
                        for kx in 0..win {
                            let kw = kernel[ky * win + kx];
                            let xv = x.at(n, cy + ky, cx + kx, ch) as f64;
                            let yv = y.at(n, cy + ky, cx + kx, ch) as f64;
                            mx += kw * xv;
                            my += kw * yv;
                            mxx += kw * xv * xv;
                            myy += kw * yv * yv;
                            mxy += kw * xv * yv;
                        }
                    }
                    let vx = (mxx - mx * mx).max(0.0);
                    let vy = (myy - my * my).max(0.0);
                    let cov = mxy - mx * my;
                    let sx = vx.sqrt();
                    let sy = vy.sqrt();
                    let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    let con = (2.0 * sx * sy + c2) / (vx + vy + c2);
                    let stru = (cov + c3) / (sx * sy + c3);
                    acc += signed_pow(lum, cfg.alpha)
                        * signed_pow(con, cfg.beta)
                        * signed_pow(stru, cfg.gamma);
                    count += 1;
                }
            }
        }
        per_image.push(acc / count as f64);
    }
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok((per_image, mean))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnrMse {
    pub psnr: f64,
    pub mse: f64,
}

/// Whole-image MSE and PSNR (infinity for identical images).
pub fn psnr_mse(x: &ImageBatch, y: &ImageBatch) -> Result<PsnrMse> {
    if x.data().len() != y.data().len() {
        return Err(Error::InvalidInput("psnr: shape mismatch".into()));
    }
    let n = x.data().len() as f64;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0f64 / mse).log10()
    };
    Ok(PsnrMse { psnr, mse })
}
