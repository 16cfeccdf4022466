//! Image fidelity metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::Image;

pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) || a.data.len() != b.data.len() {
        return Err(Error::Shape(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one channel plane.
fn filter(plane: &[f64], width: usize, height: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (wo, ho) = (width - k + 1, height - k + 1);
    let mut rows = vec![0.0; height * wo];
    for y in 0..height {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| win[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| win[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions and channels, with an 11x11
/// Gaussian window (sigma 1.5) on `[0, 1]` images. Images smaller than the
/// window use the largest window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::Shape("SSIM of an empty image".into()));
    }
    let win = gaussian_window(SSIM_WINDOW.min(w).min(h));
    let plane = |img: &Image, c: usize| -> Vec<f64> { (0..w * h).map(|p| img.data[p * 3 + c]).collect() };
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let (pa, pb) = (plane(a, c), plane(b, c));
        let aa: Vec<f64> = pa.iter().map(|x| x * x).collect();
        let bb: Vec<f64> = pb.iter().map(|x| x * x).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let (mu_a, mu_b) = (filter(&pa, w, h, &win), filter(&pb, w, h, &win));
        let (saa, sbb, sab) = (filter(&aa, w, h, &win), filter(&bb, w, h, &win), filter(&ab, w, h, &win));
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Geometric mean of `10^(-PSNR/10)` and `sqrt(1 - SSIM)`.
pub fn average_two_term(psnr: f64, ssim: f64) -> f64 {
    let mse = 10f64.powf(-psnr / 10.0);
    (mse * (1.0 - ssim).max(0.0).sqrt()).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub average: f64,
}

pub fn view_metrics(view: usize, rendered: &Image, truth: &Image) -> Result<ViewMetrics> {
    let p = psnr(rendered, truth)?;
    let s = ssim(rendered, truth)?;
    Ok(ViewMetrics { view, psnr: p, ssim: s, average: average_two_term(p, s) })
}

/// Per-view metrics and their means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub average: f64,
}

impl MetricsReport {
    pub fn new(views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        let average = views.iter().map(|v| v.average).sum::<f64>() / n;
        Self { views, psnr, ssim, average }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim,average_2term\n");
        for v in &self.views {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", v.view, v.psnr, v.ssim, v.average));
        }
        s.push_str(&format!("mean,{:.6},{:.6},{:.6}\n", self.psnr, self.ssim, self.average));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>8} {:>16}\n", "view", "PSNR", "SSIM", "Average(2-term)");
        for v in &self.views {
            s.push_str(&format!("{:>6} {:>9.3} {:>8.4} {:>16.5}\n", v.view, v.psnr, v.ssim, v.average));
        }
        s.push_str(&format!("{:>6} {:>9.3} {:>8.4} {:>16.5}\n", "mean", self.psnr, self.ssim, self.average));
        s
    }
}
