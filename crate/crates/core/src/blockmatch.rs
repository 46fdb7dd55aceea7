//! Coarse-to-fine integer block matching, the built-in motion estimator
//! behind the temporal consistency metric.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMatchConfig {
    pub block: usize,
    pub radius: usize,
    pub levels: usize,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self {
            block: 8,
            radius: 4,
            levels: 3,
        }
    }
}

/// Single-channel image in f64.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luma(frame: &Tensor) -> Self {
        let (h, w) = (frame.height(), frame.width());
        let v = if frame.channels() == 3 {
            let (r, g, b) = (frame.channel(0), frame.channel(1), frame.channel(2));
            (0..h * w)
                .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
                .collect()
        } else {
            frame.channel(0).iter().map(|&x| x as f64).collect()
        };
        Self { h, w, v }
    }

    /// 2x2 average pooling; an odd last row or column is dropped.
    fn half(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push((self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]) * 0.25);
            }
        }
        Self { h, w, v }
    }
}

/// Mean absolute difference over the overlap of block `(x0, y0, bw, bh)` in
/// `a` and its displacement by `(dx, dy)` in `b`, or `None` when less than
/// half of the block lands inside `b`.
fn block_cost(a: &Plane, b: &Plane, x0: usize, y0: usize, bw: usize, bh: usize, dx: isize, dy: isize) -> Option<f64> {
    let xs = (x0 as isize + dx).max(0) - dx;
    let xe = ((x0 + bw) as isize + dx).min(b.w as isize) - dx;
    let ys = (y0 as isize + dy).max(0) - dy;
    let ye = ((y0 + bh) as isize + dy).min(b.h as isize) - dy;
    if xe <= xs || ye <= ys {
        return None;
    }
    let n = ((xe - xs) * (ye - ys)) as usize;
    if 2 * n < bw * bh {
        return None;
    }
    let mut sum = 0.0;
    for y in ys..ye {
        let ra = &a.v[y as usize * a.w..];
        let rb = &b.v[(y + dy) as usize * b.w..];
        for x in xs..xe {
            sum += (ra[x as usize] - rb[(x + dx) as usize]).abs();
        }
    }
    Some(sum / n as f64)
}

/// Integer motion from `a` to `b`: `b(p + flow(p)) ~ a(p)`.
///
/// Luma images are matched block by block from the coarsest pyramid level
/// down; each level searches `radius` pixels around twice the coarser
/// estimate and around zero motion. The criterion is the mean absolute difference over the part
/// of the displaced block inside the frame (at least half the block). Ties
/// go to the smaller displacement, then to the smaller `(dy, dx)`.
pub fn block_match_flow(a: &Tensor, b: &Tensor, cfg: &BlockMatchConfig) -> Result<FlowField> {
    if a.shape() != b.shape() {
        return Err(Error::shape("block_match_flow", a.shape(), b.shape()));
    }
    if cfg.block == 0 || cfg.levels == 0 {
        return Err(Error::invalid("block size and level count must be positive"));
    }
    if a.height() < cfg.block || a.width() < cfg.block {
        return Err(Error::invalid(format!(
            "block_match_flow: frame {}x{} smaller than block {}",
            a.height(),
            a.width(),
            cfg.block
        )));
    }
    let mut pa = vec![Plane::luma(a)];
    let mut pb = vec![Plane::luma(b)];
    while pa.len() < cfg.levels {
        let last = pa.last().expect("non-empty");
        if last.h / 2 < cfg.block || last.w / 2 < cfg.block {
            break;
        }
        let next_a = last.half();
        let next_b = pb.last().expect("non-empty").half();
        pa.push(next_a);
        pb.push(next_b);
    }

    let bs = cfg.block;
    let r = cfg.radius as isize;
    // Per-block vectors of the previous (coarser) level and its block grid width.
    let mut prev: Option<(Vec<(isize, isize)>, usize, usize)> = None;
    for level in (0..pa.len()).rev() {
        let (a, b) = (&pa[level], &pb[level]);
        let (nbx, nby) = (a.w.div_ceil(bs), a.h.div_ceil(bs));
        let vectors: Vec<(isize, isize)> = (0..nbx * nby)
            .into_par_iter()
            .map(|i| {
                let (bx, by) = (i % nbx, i / nbx);
                let (x0, y0) = (bx * bs, by * bs);
                let (bw, bh) = (bs.min(a.w - x0), bs.min(a.h - y0));
                let (px, py) = match &prev {
                    None => (0, 0),
                    Some((v, pw, ph)) => {
                        let cx = ((x0 + bw / 2) / 2 / bs).min(pw - 1);
                        let cy = ((y0 + bh / 2) / 2 / bs).min(ph - 1);
                        let (u, v) = v[cy * pw + cx];
                        (2 * u, 2 * v)
                    }
                };
                let mut best: Option<(f64, isize, isize, isize)> = None;
                let centres = if (px, py) == (0, 0) { vec![(0, 0)] } else { vec![(px, py), (0, 0)] };
                let candidates = centres
                    .into_iter()
                    .flat_map(|(cx, cy)| (cy - r..=cy + r).flat_map(move |dy| (cx - r..=cx + r).map(move |dx| (dx, dy))));
                for (dx, dy) in candidates {
                    {
                        let Some(cost) = block_cost(a, b, x0, y0, bw, bh, dx, dy) else {
                            continue;
                        };
                        let mag = dx * dx + dy * dy;
                        let better = match best {
                            None => true,
                            Some((c, m, by_, bx_)) => {
                                cost < c || (cost == c && (mag < m || (mag == m && (dy, dx) < (by_, bx_))))
                            }
                        };
                        if better {
                            best = Some((cost, mag, dy, dx));
                        }
                    }
                }
                best.map_or((px, py), |(_, _, dy, dx)| (dx, dy))
            })
            .collect();
        prev = Some((vectors, nbx, nby));
    }

    let (vectors, nbx, _) = prev.expect("at least one level");
    Ok(FlowField::from_fn(a.height(), a.width(), |y, x| {
        let (u, v) = vectors[(y / bs) * nbx + x / bs];
        (u as f32, v as f32)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seed: u64) -> impl Fn(isize, isize) -> f32 {
        move |x, y| {
            let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
                ^ seed;
            h ^= h >> 29;
            h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h ^= h >> 32;
            (h % 1000) as f32 / 999.0
        }
    }

    fn shifted_pair(h: usize, w: usize, dx: isize, dy: isize) -> (Tensor, Tensor) {
        let f = noise(5);
        let a = Tensor::from_fn(3, h, w, |c, y, x| f(x as isize + 1000 * c as isize, y as isize));
        let b = Tensor::from_fn(3, h, w, |c, y, x| f(x as isize - dx + 1000 * c as isize, y as isize - dy));
        (a, b)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let (a, _) = shifted_pair(32, 40, 0, 0);
        let flow = block_match_flow(&a, &a, &BlockMatchConfig::default()).unwrap();
        assert_eq!(flow.as_tensor().max_abs(), 0.0);
    }

    #[test]
    fn global_shifts_are_recovered_exactly() {
        for (dx, dy) in [(2, 0), (-3, 1), (0, -2), (3, -1)] {
            let (a, b) = shifted_pair(64, 64, dx, dy);
            let flow = block_match_flow(&a, &b, &BlockMatchConfig::default()).unwrap();
            assert!(flow.u().iter().all(|&u| u == dx as f32), "{dx},{dy}");
            assert!(flow.v().iter().all(|&v| v == dy as f32), "{dx},{dy}");
        }
    }

    #[test]
    fn large_smooth_motion_found_through_the_pyramid() {
        let tex = |x: f32, y: f32| {
            0.5 + 0.2 * (0.21 * x + 0.07 * y).sin() + 0.15 * (0.17 * y - 0.05 * x).cos() + 0.1 * (0.9 * x * 0.13).sin() * (0.11 * y).cos()
        };
        let (dx, dy) = (11.0, -7.0);
        let a = Tensor::from_fn(3, 96, 96, |_, y, x| tex(x as f32, y as f32));
        let b = Tensor::from_fn(3, 96, 96, |_, y, x| tex(x as f32 - dx, y as f32 - dy));
        let flow = block_match_flow(&a, &b, &BlockMatchConfig::default()).unwrap();
        for y in (16..80).step_by(8) {
            for x in (16..80).step_by(8) {
                assert_eq!(flow.at(y, x), (dx, dy), "({y},{x})");
            }
        }
    }

    #[test]
    fn single_level_matches_exhaustive_oracle() {
        let (a, b) = shifted_pair(24, 24, 2, 0);
        let cfg = BlockMatchConfig {
            levels: 1,
            ..Default::default()
        };
        let flow = block_match_flow(&a, &b, &cfg).unwrap();
        let (la, lb) = (Plane::luma(&a), Plane::luma(&b));
        for by in 0..3 {
            for bx in 0..3 {
                let mut best = (f64::INFINITY, 0isize, 0isize);
                for dy in -4isize..=4 {
                    for dx in -4isize..=4 {
                        let mut sum = 0.0;
                        let mut n = 0;
                        for y in by * 8..by * 8 + 8 {
                            for x in bx * 8..bx * 8 + 8 {
                                let (tx, ty) = (x as isize + dx, y as isize + dy);
                                if tx >= 0 && ty >= 0 && tx < 24 && ty < 24 {
                                    sum += (la.v[y * 24 + x] - lb.v[ty as usize * 24 + tx as usize]).abs();
                                    n += 1;
                                }
                            }
                        }
                        if 2 * n < 64 {
                            continue;
                        }
                        let cost = sum / n as f64;
                        let key = (dx * dx + dy * dy, dy, dx);
                        let cur = (best.1 * best.1 + best.2 * best.2, best.2, best.1);
                        if cost < best.0 || (cost == best.0 && key < cur) {
                            best = (cost, dx, dy);
                        }
                    }
                }
                assert_eq!(flow.at(by * 8, bx * 8), (best.1 as f32, best.2 as f32));
            }
        }
    }

    #[test]
    fn ramp_shift_within_one_pixel() {
        let a = Tensor::from_fn(3, 48, 48, |_, y, x| ((x * 3 + y * 5) % 48) as f32 / 48.0);
        let b = Tensor::from_fn(3, 48, 48, |_, y, x| {
            ((((x as isize - 1).rem_euclid(48)) * 3 + y as isize * 5) % 48) as f32 / 48.0
        });
        let flow = block_match_flow(&a, &b, &BlockMatchConfig::default()).unwrap();
        let interior = (8..40).flat_map(|y| (8..40).map(move |x| (y, x)));
        for (y, x) in interior {
            let (u, _) = flow.at(y, x);
            assert!((u - 1.0).abs() <= 1.0, "({y},{x}) {u}");
        }
    }

    #[test]
    fn rejects_small_frames() {
        let t = Tensor::zeros(3, 4, 20);
        assert!(block_match_flow(&t, &t, &BlockMatchConfig::default()).is_err());
    }
}
