//! PSNR, SSIM and result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Value reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 999.0;

const PEAK: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Zero MSE after clamping; `db` is then [`PSNR_CAP`].
    pub identical: bool,
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.identical {
            write!(f, "{:.4} dB (identical, capped)", self.db)
        } else {
            write!(f, "{:.4} dB", self.db)
        }
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// `10·log10(255²/MSE)` on images clamped to `[0, 255]`.
pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.clamp(0.0, PEAK) - y.clamp(0.0, PEAK);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP, identical: true });
    }
    Ok(Psnr {
        db: (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP),
        identical: false,
    })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted filter over every fully contained window.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = k.iter().enumerate().map(|(i, kv)| kv * data[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11x11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03.
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    let mut size = 11.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, 1.5);
    let x: Vec<f64> = a.data().iter().map(|v| v.clamp(0.0, PEAK)).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.clamp(0.0, PEAK)).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, ..) = filter_valid(&x, w, h, &k);
    let (my, ..) = filter_valid(&y, w, h, &k);
    let (sxx, ..) = filter_valid(&xx, w, h, &k);
    let (syy, ..) = filter_valid(&yy, w, h, &k);
    let (sxy, ..) = filter_valid(&xy, w, h, &k);
    let c1 = (0.01 * PEAK).powi(2);
    let c2 = (0.03 * PEAK).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub image: String,
    pub regularizer: String,
    pub rate: f64,
    pub psnr: Psnr,
    pub ssim: f64,
    pub runtime_s: f64,
}

pub const RESULTS_HEADER: &str = "image,regularizer,rate,psnr,ssim,runtime_s";

pub fn results_csv(rows: &[EvalResult]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.6},{:.3}",
            r.image, r.regularizer, r.rate, r.psnr.db, r.ssim, r.runtime_s
        );
    }
    out
}

pub fn write_results(path: impl AsRef<Path>, rows: &[EvalResult]) -> Result<()> {
    fs::write(path, results_csv(rows))?;
    Ok(())
}
