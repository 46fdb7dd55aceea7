//! Flow fields and the flow-approximation kernels: backward warping,
//! anchor/complementary scaling, forward splatting, complementary flow
//! reversal (CFR) and its two baselines.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::resample::{bilinear_resize, sample_bilinear_clamped};
use crate::tensor::{Shape, Tensor};

/// Spread of the Gaussian splat weight, in pixels.
pub const SPLAT_SIGMA: f64 = 0.5;

/// Denominators at or below this value are holes.
pub const HOLE_EPSILON: f64 = 1e-12;

/// Two-channel displacement field in pixels; channel 0 is x, channel 1 is y.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        tensor.expect_channels("FlowField", 2)?;
        Ok(Self(tensor))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(2, height, width))
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut t = Tensor::zeros(2, height, width);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                t.set(0, y, x, u);
                t.set(1, y, x, v);
            }
        }
        Self(t)
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn u(&self) -> &[f32] {
        self.0.channel(0)
    }

    pub fn v(&self) -> &[f32] {
        self.0.channel(1)
    }

    /// Displacement at pixel `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        (self.0.at(0, y, x), self.0.at(1, y, x))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn scale(&self, k: f32) -> FlowField {
        Self(self.0.scale(k))
    }

    fn expect_same(&self, op: &'static str, other: &FlowField) -> Result<()> {
        other.0.expect_shape(op, self.0.shape())
    }
}

/// Raw per-pixel importance logits; splat weights use `exp(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceLogits(Tensor);

impl ImportanceLogits {
    pub fn new(tensor: Tensor) -> Result<Self> {
        tensor.expect_channels("ImportanceLogits", 1)?;
        Ok(Self(tensor))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(1, height, width))
    }

    pub fn values(&self) -> &[f32] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-pixel flag map, true where a reversed flow received no splat mass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoleMap {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl HoleMap {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&h| h).count()
    }

    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// True when every hole of `self` is also a hole of `other`.
    pub fn is_subset_of(&self, other: &HoleMap) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(
            Shape::new(1, self.height, self.width),
            self.mask.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Running weighted sums for forward splatting of a 2-vector payload.
///
/// Sums are kept in double precision; `coverage` is derived from the
/// denominator.
#[derive(Clone, Debug)]
pub struct SplatAccumulator {
    height: usize,
    width: usize,
    numerator: Vec<[f64; 2]>,
    denominator: Vec<f64>,
}

impl SplatAccumulator {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            numerator: vec![[0.0; 2]; height * width],
            denominator: vec![0.0; height * width],
        }
    }

    pub fn numerator(&self) -> &[[f64; 2]] {
        &self.numerator
    }

    pub fn denominator(&self) -> &[f64] {
        &self.denominator
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.denominator.iter().map(|&d| d > 0.0).collect()
    }

    pub fn holes(&self) -> HoleMap {
        HoleMap {
            height: self.height,
            width: self.width,
            mask: self.denominator.iter().map(|&d| d <= HOLE_EPSILON).collect(),
        }
    }

    /// Normalised payload; holes are left at zero.
    pub fn resolve(&self) -> FlowField {
        let mut t = Tensor::zeros(2, self.height, self.width);
        let plane = self.height * self.width;
        let data = t.data_mut();
        for (i, (num, &den)) in self.numerator.iter().zip(&self.denominator).enumerate() {
            if den > HOLE_EPSILON {
                data[i] = (num[0] / den) as f32;
                data[plane + i] = (num[1] / den) as f32;
            }
        }
        FlowField(t)
    }
}

fn check_time(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// Samples `source` at `x + flow(x)` with bilinear interpolation; sample
/// coordinates are clamped to the image.
pub fn backward_warp(flow: &FlowField, source: &Tensor) -> Result<Tensor> {
    source.expect_spatial("backward_warp", flow.as_tensor())?;
    let (h, w) = (source.height(), source.width());
    let (fu, fv) = (flow.u(), flow.v());
    let mut out = vec![0.0f32; source.data().len()];
    out.par_chunks_mut(w).enumerate().for_each(|(row, dst)| {
        let (c, y) = (row / h, row % h);
        let plane = source.channel(c);
        for (x, d) in dst.iter_mut().enumerate() {
            let i = y * w + x;
            let sx = x as f64 + fu[i] as f64;
            let sy = y as f64 + fv[i] as f64;
            *d = sample_bilinear_clamped(plane, h, w, sx, sy) as f32;
        }
    });
    Ok(Tensor::from_raw(source.shape(), out))
}

/// Anchor flows `(F0t, F1t) = (t F01, (1 - t) F10)`.
pub fn anchor_flows(f01: &FlowField, f10: &FlowField, t: f32) -> Result<(FlowField, FlowField)> {
    check_time(t)?;
    f01.expect_same("anchor_flows", f10)?;
    Ok((f01.scale(t), f10.scale(1.0 - t)))
}

/// Complementary flows `(F0(1-t), F1(1-t)) = ((1 - t) F01, t F10)`.
pub fn complementary_flows(f01: &FlowField, f10: &FlowField, t: f32) -> Result<(FlowField, FlowField)> {
    check_time(t)?;
    f01.expect_same("complementary_flows", f10)?;
    Ok((f01.scale(1.0 - t), f10.scale(t)))
}

/// Forward-splats `payload` along `anchor_flow` into `acc`.
///
/// Every source pixel `y` lands on the single target
/// `x = round(y + anchor(y))` (halves round up), contributing with weight
/// `global_weight * exp(z(y)) * exp(-d^2 / (2 sigma^2))` where `d` is the
/// distance between `x` and the unrounded landing point. Out-of-bounds
/// targets are dropped.
pub fn splat(
    anchor_flow: &FlowField,
    payload: &FlowField,
    logits: &ImportanceLogits,
    acc: &mut SplatAccumulator,
    global_weight: f64,
) -> Result<()> {
    anchor_flow.expect_same("splat", payload)?;
    logits
        .as_tensor()
        .expect_spatial("splat", anchor_flow.as_tensor())?;
    if acc.height != anchor_flow.height() || acc.width != anchor_flow.width() {
        return Err(Error::shape(
            "splat accumulator",
            format!("{}x{}", anchor_flow.height(), anchor_flow.width()),
            format!("{}x{}", acc.height, acc.width),
        ));
    }
    let (h, w) = (anchor_flow.height(), anchor_flow.width());
    let (au, av) = (anchor_flow.u(), anchor_flow.v());
    let (pu, pv) = (payload.u(), payload.v());
    let z = logits.values();
    let inv_two_var = 1.0 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = x as f64 + au[i] as f64;
            let py = y as f64 + av[i] as f64;
            let tx = (px + 0.5).floor();
            let ty = (py + 0.5).floor();
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            let d2 = (tx - px).powi(2) + (ty - py).powi(2);
            let weight = global_weight * (z[i] as f64).exp() * (-d2 * inv_two_var).exp();
            let j = ty as usize * w + tx as usize;
            acc.numerator[j][0] += weight * pu[i] as f64;
            acc.numerator[j][1] += weight * pv[i] as f64;
            acc.denominator[j] += weight;
        }
    }
    Ok(())
}

/// Output of a t-flow approximator.
#[derive(Clone, Debug)]
pub struct ApproxFlows {
    /// Flow from time t to time 0.
    pub t0: FlowField,
    /// Flow from time t to time 1.
    pub t1: FlowField,
    pub holes_t0: HoleMap,
    pub holes_t1: HoleMap,
}

fn check_pair(op: &'static str, f01: &FlowField, f10: &FlowField, t: f32) -> Result<()> {
    check_time(t)?;
    f01.expect_same(op, f10)
}

/// Complementary flow reversal.
///
/// Both reversed flows share one denominator: frame-0 pixels splat along
/// `F0t` with weight `(1 - t)`, frame-1 pixels along `F1t` with weight `t`.
/// For `F~t0` the payloads are `-F0t` and `t F10`; for `F~t1` they are
/// `(1 - t) F01` and `-F1t`. Pixels that receive no mass are reported in
/// the hole maps and filled with [`linear_approx`].
pub fn cfr(
    f01: &FlowField,
    f10: &FlowField,
    z01: &ImportanceLogits,
    z10: &ImportanceLogits,
    t: f32,
) -> Result<ApproxFlows> {
    check_pair("cfr", f01, f10, t)?;
    let (h, w) = (f01.height(), f01.width());
    let (a0, a1) = anchor_flows(f01, f10, t)?;
    let (c0, c1) = complementary_flows(f01, f10, t)?;
    let t64 = t as f64;

    let mut acc0 = SplatAccumulator::new(h, w);
    splat(&a0, &a0.scale(-1.0), z01, &mut acc0, 1.0 - t64)?;
    splat(&a1, &c1, z10, &mut acc0, t64)?;

    let mut acc1 = SplatAccumulator::new(h, w);
    splat(&a0, &c0, z01, &mut acc1, 1.0 - t64)?;
    splat(&a1, &a1.scale(-1.0), z10, &mut acc1, t64)?;

    let holes = acc0.holes();
    let mut t0 = acc0.resolve();
    let mut t1 = acc1.resolve();
    if holes.count() > 0 {
        let (l0, l1) = linear_approx(f01, f10, t)?;
        fill_holes(&mut t0, &l0, &holes);
        fill_holes(&mut t1, &l1, &holes);
    }
    Ok(ApproxFlows {
        t0,
        t1,
        holes_t0: holes.clone(),
        holes_t1: holes,
    })
}

fn fill_holes(dst: &mut FlowField, fallback: &FlowField, holes: &HoleMap) {
    let plane = holes.mask.len();
    let src = fallback.as_tensor().data();
    let data = dst.0.data_mut();
    for (i, _) in holes.mask.iter().enumerate().filter(|(_, &h)| h) {
        data[i] = src[i];
        data[plane + i] = src[plane + i];
    }
}

/// Linear combination baseline evaluated at the target pixel:
/// `F^t0 = -(1 - t) t F01 + t^2 F10`, `F^t1 = (1 - t)^2 F01 - t (1 - t) F10`.
pub fn linear_approx(f01: &FlowField, f10: &FlowField, t: f32) -> Result<(FlowField, FlowField)> {
    check_pair("linear_approx", f01, f10, t)?;
    let t = t as f64;
    let combine = |a: f64, b: f64| {
        f01.as_tensor()
            .zip_with(f10.as_tensor(), "linear_approx", |p, q| (a * p as f64 + b * q as f64) as f32)
            .map(FlowField)
    };
    Ok((
        combine(-(1.0 - t) * t, t * t)?,
        combine((1.0 - t) * (1.0 - t), -t * (1.0 - t))?,
    ))
}

/// Plain flow reversal: each direction splats only its own negated anchor
/// flow. Holes stay zero.
pub fn flow_reversal(
    f01: &FlowField,
    f10: &FlowField,
    z01: &ImportanceLogits,
    z10: &ImportanceLogits,
    t: f32,
) -> Result<ApproxFlows> {
    check_pair("flow_reversal", f01, f10, t)?;
    let (h, w) = (f01.height(), f01.width());
    let (a0, a1) = anchor_flows(f01, f10, t)?;
    let t64 = t as f64;

    let mut acc0 = SplatAccumulator::new(h, w);
    splat(&a0, &a0.scale(-1.0), z01, &mut acc0, 1.0 - t64)?;
    let mut acc1 = SplatAccumulator::new(h, w);
    splat(&a1, &a1.scale(-1.0), z10, &mut acc1, t64)?;

    Ok(ApproxFlows {
        t0: acc0.resolve(),
        t1: acc1.resolve(),
        holes_t0: acc0.holes(),
        holes_t1: acc1.holes(),
    })
}

/// Bilinear upscale by `factor` with displacements multiplied by `factor`.
pub fn upscale_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    if factor == 1 {
        return Ok(flow.clone());
    }
    let up = bilinear_resize(flow.as_tensor(), factor)?;
    Ok(FlowField(up.scale(factor as f32)))
}

/// Mean Euclidean endpoint error between two flow fields.
pub fn epe(a: &FlowField, b: &FlowField) -> Result<f64> {
    a.expect_same("epe", b)?;
    let n = a.u().len();
    let sum: f64 = (0..n)
        .map(|i| {
            let du = a.u()[i] as f64 - b.u()[i] as f64;
            let dv = a.v()[i] as f64 - b.v()[i] as f64;
            (du * du + dv * dv).sqrt()
        })
        .sum();
    Ok(sum / n as f64)
}
