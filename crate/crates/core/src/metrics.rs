//! PSNR and SSIM in the μ-law tonemapped domain.

use crate::error::{invalid, shape_err, Result};
use crate::hdr::{normalize, tonemap_mu, RadianceFrame};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub psnr_t: f64,
    pub ssim_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_t: f64,
    pub ssim_t: f64,
    pub per_frame: Vec<FrameMetrics>,
}

/// Both frames normalized by the ground truth's white point, then tonemapped.
fn tonemapped_pair<T: Scalar>(
    pred: &RadianceFrame<T>,
    gt: &RadianceFrame<T>,
    mu: T,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if pred.image.dims() != gt.image.dims() {
        return Err(shape_err!(
            "prediction dims {:?} do not match ground truth {:?}",
            pred.image.dims(),
            gt.image.dims()
        ));
    }
    let p = tonemap_mu(&normalize(&pred.image, gt.white_point), mu)?;
    let g = tonemap_mu(&normalize(&gt.image, gt.white_point), mu)?;
    Ok((p.cast(), g.cast()))
}

/// PSNR of two images with unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("dims {:?} and {:?} differ", a.dims(), b.dims()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of one plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions of two `[C,H,W]` images.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!("dims {:?} and {:?} differ", a.dims(), b.dims()));
    }
    let (c, h, w) = a.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"));
    }
    let g = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &a.data()[ch * plane..][..plane];
        let y = &b.data()[ch * plane..][..plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(x, h, w, &g), filter(y, h, w, &g));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &g), filter(&yy, h, w, &g), filter(&xy, h, w, &g));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn psnr_t<T: Scalar>(pred: &RadianceFrame<T>, gt: &RadianceFrame<T>, mu: T) -> Result<f64> {
    let (p, g) = tonemapped_pair(pred, gt, mu)?;
    psnr(&p, &g)
}

pub fn ssim_t<T: Scalar>(pred: &RadianceFrame<T>, gt: &RadianceFrame<T>, mu: T) -> Result<f64> {
    let (p, g) = tonemapped_pair(pred, gt, mu)?;
    ssim(&p, &g)
}

/// Per-frame metrics and their means.
pub fn evaluate<T: Scalar>(preds: &[RadianceFrame<T>], gts: &[RadianceFrame<T>], mu: T) -> Result<MetricReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(invalid!(
            "need equally many predictions and references, got {} and {}",
            preds.len(),
            gts.len()
        ));
    }
    let per_frame = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            Ok(FrameMetrics {
                psnr_t: psnr_t(p, g, mu)?,
                ssim_t: ssim_t(p, g, mu)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len() as f64;
    Ok(MetricReport {
        psnr_t: per_frame.iter().map(|m| m.psnr_t).sum::<f64>() / n,
        ssim_t: per_frame.iter().map(|m| m.ssim_t).sum::<f64>() / n,
        per_frame,
    })
}
