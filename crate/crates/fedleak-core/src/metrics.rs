//! Image similarity metrics used to score reconstructions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR values are capped here: identical images would otherwise be +inf,
/// which poisons averages and CSV output.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "mse shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel();
    if n == 0 {
        return Err(Error::input("mse of empty tensors"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / n as f64)
}

/// Peak signal-to-noise ratio in dB against peak value `max_val`,
/// capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if max_val <= 0.0 {
        return Err(Error::input("psnr needs a positive peak value"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy)]
pub struct SsimCfg {
    /// Sliding 11x11 Gaussian window (sigma 1.5) instead of the default
    /// non-overlapping tiles.
    pub gaussian: bool,
}

impl Default for SsimCfg {
    fn default() -> Self {
        SsimCfg { gaussian: false }
    }
}

struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn ssim_from_stats(s: &WindowStats, c1: f64, c2: f64) -> f64 {
    ((2.0 * s.mu_a * s.mu_b + c1) * (2.0 * s.cov + c2))
        / ((s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1) * (s.var_a + s.var_b + c2))
}

fn weighted_stats(a: &[f64], b: &[f64], w: &[f64]) -> WindowStats {
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    for i in 0..a.len() {
        mu_a += w[i] * a[i];
        mu_b += w[i] * b[i];
    }
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for i in 0..a.len() {
        let da = a[i] - mu_a;
        let db = b[i] - mu_b;
        var_a += w[i] * da * da;
        var_b += w[i] * db * db;
        cov += w[i] * da * db;
    }
    WindowStats { mu_a, mu_b, var_a, var_b, cov }
}

/// Structural similarity over [..., h, w]; leading axes are treated as
/// channels and averaged. Default is mean SSIM over non-overlapping square
/// tiles of side min(8, h, w) (edge tiles may be smaller); the Gaussian
/// variant slides a normalised 11x11 window over every valid position.
pub fn ssim(a: &Tensor, b: &Tensor, max_val: f64, cfg: &SsimCfg) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let rank = a.shape().len();
    if rank < 2 {
        return Err(Error::input("ssim wants at least [h, w]"));
    }
    if max_val <= 0.0 {
        return Err(Error::input("ssim needs a positive peak value"));
    }
    let h = a.shape()[rank - 2];
    let w = a.shape()[rank - 1];
    let channels: usize = a.shape()[..rank - 2].iter().product::<usize>().max(1);
    let c1 = (0.01 * max_val) * (0.01 * max_val);
    let c2 = (0.03 * max_val) * (0.03 * max_val);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        if cfg.gaussian && h >= 11 && w >= 11 {
            let win = 11usize;
            let sigma = 1.5f64;
            let mut weights = Vec::with_capacity(win * win);
            let half = (win / 2) as f64;
            for y in 0..win {
                for x in 0..win {
                    let dy = y as f64 - half;
                    let dx = x as f64 - half;
                    weights.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
                }
            }
            let wsum: f64 = weights.iter().sum();
            for v in weights.iter_mut() {
                *v /= wsum;
            }
            let mut wa = vec![0.0; win * win];
            let mut wb = vec![0.0; win * win];
            for y0 in 0..=(h - win) {
                for x0 in 0..=(w - win) {
                    for y in 0..win {
                        for x in 0..win {
                            wa[y * win + x] = pa[(y0 + y) * w + x0 + x];
                            wb[y * win + x] = pb[(y0 + y) * w + x0 + x];
                        }
                    }
                    let s = weighted_stats(&wa, &wb, &weights);
                    total += ssim_from_stats(&s, c1, c2);
                    count += 1;
                }
            }
        } else {
            let win = 8.min(h).min(w);
            let mut y0 = 0;
            while y0 < h {
                let th = win.min(h - y0);
                let mut x0 = 0;
                while x0 < w {
                    let tw = win.min(w - x0);
                    let n = th * tw;
                    let mut ta = Vec::with_capacity(n);
                    let mut tb = Vec::with_capacity(n);
                    for y in 0..th {
                        for x in 0..tw {
                            ta.push(pa[(y0 + y) * w + x0 + x]);
                            tb.push(pb[(y0 + y) * w + x0 + x]);
                        }
                    }
                    let uniform = vec![1.0 / n as f64; n];
                    let s = weighted_stats(&ta, &tb, &uniform);
                    total += ssim_from_stats(&s, c1, c2);
                    count += 1;
                    x0 += win;
                }
                y0 += win;
            }
        }
    }
    if count == 0 {
        return Err(Error::input("image too small for the requested ssim window"));
    }
    Ok(total / count as f64)
}
