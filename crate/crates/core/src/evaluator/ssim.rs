//! Windowed structural similarity between stickers.
//!
//! Each 8x8 window (stride 1) contributes
//!
//! ```text
//! (2 mx my + C1)(2 sxy + C2) / ((mx^2 + my^2 + C1)(sx^2 + sy^2 + C2))
//! ```
//!
//! with population moments, `C1 = 0.01^2` and `C2 = 0.03^2` for a unit
//! dynamic range. The index is the mean over windows and channels. Window
//! sums come from summed-area tables.

use crate::corpus::Sticker;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Inclusive prefix sums with a zero border: `t[(y+1)*(w+1) + x+1]`
/// is the sum over `[0, y] x [0, x]`.
fn summed_area(values: impl Iterator<Item = f64>, w: usize, h: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut t = vec![0.0; stride * (h + 1)];
    let mut it = values;
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += it.next().expect("w * h values");
            t[(y + 1) * stride + x + 1] = t[y * stride + x + 1] + row;
        }
    }
    t
}

fn window_sum(t: &[f64], stride: usize, x: usize, y: usize, k: usize) -> f64 {
    t[(y + k) * stride + x + k] - t[y * stride + x + k] - t[(y + k) * stride + x] + t[y * stride + x]
}

/// SSIM of two single-channel `w x h` planes.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::dim(format!("ssim planes must hold {w}x{h} values")));
    }
    let k = SSIM_WINDOW;
    if w < k || h < k {
        return Err(Error::dim(format!("ssim needs images of at least {k}x{k}")));
    }
    let sa = summed_area(a.iter().copied(), w, h);
    let sb = summed_area(b.iter().copied(), w, h);
    let saa = summed_area(a.iter().map(|v| v * v), w, h);
    let sbb = summed_area(b.iter().map(|v| v * v), w, h);
    let sab = summed_area(a.iter().zip(b).map(|(x, y)| x * y), w, h);
    let n = (k * k) as f64;
    let stride = w + 1;
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let mx = window_sum(&sa, stride, x, y, k) / n;
            let my = window_sum(&sb, stride, x, y, k) / n;
            let vx = window_sum(&saa, stride, x, y, k) / n - mx * mx;
            let vy = window_sum(&sbb, stride, x, y, k) / n - my * my;
            let cxy = window_sum(&sab, stride, x, y, k) / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / ((w - k + 1) * (h - k + 1)) as f64)
}

/// SSIM of two stickers, averaged over channels. Grayscale and colour
/// stickers are compared on luma.
pub fn ssim(a: &Sticker, b: &Sticker) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let side = crate::corpus::STICKER_SIDE;
    if a.channels == b.channels {
        let mut sum = 0.0;
        for c in 0..a.channels {
            sum += ssim_plane(a.plane(c), b.plane(c), side, side)?;
        }
        return Ok(sum / a.channels as f64);
    }
    ssim_plane(&luma(a), &luma(b), side, side)
}

fn luma(s: &Sticker) -> Vec<f64> {
    if s.channels == 1 {
        return s.pixels.clone();
    }
    let (r, g, b) = (s.plane(0), s.plane(1), s.plane(2));
    (0..r.len()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
}
