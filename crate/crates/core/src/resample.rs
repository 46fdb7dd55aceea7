//! Spatial resampling: bilinear resize, bicubic downscale and bilinear
//! point sampling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Bilinear upscale by an integer `factor` with half-pixel centres
/// (align-corners false). Values are not rescaled.
pub fn bilinear_resize(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("bilinear_resize factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (h * factor, w * factor);
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0f32; input.channels() * oh * ow];
    out.par_chunks_mut(ow).enumerate().for_each(|(row, dst)| {
        let (c, oy) = (row / oh, row % oh);
        let plane = input.channel(c);
        let (y0, y1, ly) = ty[oy];
        let r0 = &plane[y0 * w..(y0 + 1) * w];
        let r1 = &plane[y1 * w..(y1 + 1) * w];
        for (d, &(x0, x1, lx)) in dst.iter_mut().zip(&tx) {
            let top = r0[x0] as f64 * (1.0 - lx) + r0[x1] as f64 * lx;
            let bot = r1[x0] as f64 * (1.0 - lx) + r1[x1] as f64 * lx;
            *d = (top * (1.0 - ly) + bot * ly) as f32;
        }
    });
    Ok(Tensor::from_raw(Shape::new(input.channels(), oh, ow), out))
}

/// Keys cubic kernel with `a = -0.5` (Catmull-Rom).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index filter taps for an antialiased downscale by `factor`.
fn cubic_taps(n_in: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let f = factor as f64;
    let support = 2.0 * f;
    (0..n_in / factor)
        .map(|d| {
            let centre = (d as f64 + 0.5) * f - 0.5;
            let lo = (centre - support).floor() as isize;
            let hi = (centre + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|i| {
                    let w = cubic((i as f64 - centre) / f);
                    (w != 0.0).then(|| (i.clamp(0, n_in as isize - 1) as usize, w))
                })
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

/// Separable Catmull-Rom downscale by a power-of-two `factor`, with the
/// kernel widened by `factor` to suppress aliasing. Borders replicate and
/// the result is clamped to `[0, 1]`.
pub fn bicubic_downscale(frame: &Tensor, factor: usize) -> Result<Tensor> {
    if !factor.is_power_of_two() {
        return Err(Error::invalid(format!("downscale factor {factor} is not a power of two")));
    }
    let (h, w) = (frame.height(), frame.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "bicubic_downscale: {h}x{w} not divisible by {factor}"
        )));
    }
    if factor == 1 {
        return Ok(frame.clamp(0.0, 1.0));
    }
    let (oh, ow) = (h / factor, w / factor);
    let tx = cubic_taps(w, factor);
    let ty = cubic_taps(h, factor);
    let mut out = vec![0.0f32; frame.channels() * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(c, dst)| {
        let plane = frame.channel(c);
        let mut horiz = vec![0.0f64; h * ow];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, taps) in tx.iter().enumerate() {
                horiz[y * ow + x] = taps.iter().map(|&(i, wt)| row[i] as f64 * wt).sum();
            }
        }
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..ow {
                let v: f64 = taps.iter().map(|&(i, wt)| horiz[i * ow + x] * wt).sum();
                dst[y * ow + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    });
    Ok(Tensor::from_raw(Shape::new(frame.channels(), oh, ow), out))
}

/// Bilinear sample of `plane` (`height x width`) at `(x, y)`, clamping the
/// coordinates to the image.
#[inline]
pub(crate) fn sample_bilinear_clamped(plane: &[f32], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    let top = plane[y0 * width + x0] as f64 * (1.0 - lx) + plane[y0 * width + x1] as f64 * lx;
    let bot = plane[y1 * width + x0] as f64 * (1.0 - lx) + plane[y1 * width + x1] as f64 * lx;
    top * (1.0 - ly) + bot * ly
}
