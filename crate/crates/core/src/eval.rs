//! Training losses and evaluation metrics.

use serde::Serialize;

use crate::blockmatch::{block_match_flow, BlockMatchConfig};
use crate::error::{Error, Result};
use crate::flow::{epe, FlowField};
use crate::tensor::Tensor;

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub edge: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_s: 0.5,
            edge: 150.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s >= 0.0) || !(self.edge > 0.0) {
            return Err(Error::invalid(format!(
                "loss weights need lambda_s >= 0 and e > 0, got {} and {}",
                self.lambda_s, self.edge
            )));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum();
    sum / a.data().len() as f64
}

/// Sum over scales of the per-scale mean absolute error.
pub fn recon_loss(predictions: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "recon_loss: {} predicted scales vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        same_shape("recon_loss", p, t)?;
        total += mean_abs_diff(p, t);
    }
    Ok(total)
}

/// First-order edge-aware smoothness of the two t-flows.
///
/// Forward differences are taken on the region excluding the last row and
/// column. Each axis gets the weight `exp(-e^2 sum_c |grad I_c|)` and the
/// loss is the weighted mean of `|grad F|` over both flows, both axes and
/// both flow channels.
pub fn smoothness_loss(ft0: &FlowField, ft1: &FlowField, image: &Tensor, edge: f64) -> Result<f64> {
    let (h, w) = (image.height(), image.width());
    for f in [ft0, ft1] {
        if f.height() != h || f.width() != w {
            return Err(Error::shape(
                "smoothness_loss",
                format!("2x{h}x{w}"),
                f.as_tensor().shape(),
            ));
        }
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid("smoothness_loss needs at least 2x2 pixels"));
    }
    let e2 = edge * edge;
    let grad = |plane: &[f32], i: usize, step: usize| (plane[i + step] as f64 - plane[i] as f64).abs();
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let i = y * w + x;
            for step in [1, w] {
                let img: f64 = (0..image.channels()).map(|c| grad(image.channel(c), i, step)).sum();
                let weight = (-e2 * img).exp();
                let flow: f64 = [ft0, ft1]
                    .iter()
                    .flat_map(|f| [f.u(), f.v()])
                    .map(|p| grad(p, i, step))
                    .sum();
                total += weight * flow;
            }
        }
    }
    Ok(total / (8 * (h - 1) * (w - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub smoothness: f64,
    pub total: f64,
}

/// `recon + lambda_s * smoothness`.
pub fn total_loss(recon: f64, smoothness: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    Ok(LossBreakdown {
        recon,
        smoothness,
        total: recon + cfg.lambda_s * smoothness,
    })
}

/// PSNR with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.map(|v| v / sum)
}

/// Separable valid-window Gaussian filter of `f(i)` over an `h x w` grid.
fn filter_valid(h: usize, w: usize, g: &[f64; SSIM_WINDOW], f: impl Fn(usize) -> f64) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * f(y * w + x + k)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM: 11x11 Gaussian window with sigma 1.5, dynamic range 1,
/// mean over valid windows, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.channel(c), b.channel(c));
        let x = |i: usize| pa[i] as f64;
        let y = |i: usize| pb[i] as f64;
        let mu_x = filter_valid(h, w, &g, x);
        let mu_y = filter_valid(h, w, &g, y);
        let xx = filter_valid(h, w, &g, |i| x(i) * x(i));
        let yy = filter_valid(h, w, &g, |i| y(i) * y(i));
        let xy = filter_valid(h, w, &g, |i| x(i) * y(i));
        let n = mu_x.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (mx, my) = (mu_x[i], mu_y[i]);
                let sx = xx[i] - mx * mx;
                let sy = yy[i] - my * my;
                let sxy = xy[i] - mx * my;
                ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Motion estimator used by [`tof`].
#[derive(Debug, Clone)]
pub enum FlowSource {
    BlockMatcher(BlockMatchConfig),
    /// `n - 1` flows between consecutive ground-truth frames followed by
    /// `n - 1` flows between consecutive predicted frames.
    External(Vec<FlowField>),
}

impl FlowSource {
    pub fn name(&self) -> &'static str {
        match self {
            FlowSource::BlockMatcher(_) => "block",
            FlowSource::External(_) => "external",
        }
    }
}

/// Motion fields `(ground truth, prediction)` for each consecutive pair.
pub fn pair_motions(gt: &[Tensor], pred: &[Tensor], source: &FlowSource) -> Result<Vec<(FlowField, FlowField)>> {
    if gt.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth frames vs {} predicted frames",
            gt.len(),
            pred.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::invalid("temporal metrics need at least two frames"));
    }
    for (g, p) in gt.iter().zip(pred) {
        same_shape("tof", g, p)?;
    }
    let pairs = gt.len() - 1;
    match source {
        FlowSource::BlockMatcher(cfg) => (0..pairs)
            .map(|i| {
                Ok((
                    block_match_flow(&gt[i], &gt[i + 1], cfg)?,
                    block_match_flow(&pred[i], &pred[i + 1], cfg)?,
                ))
            })
            .collect(),
        FlowSource::External(flows) => {
            if flows.len() != 2 * pairs {
                return Err(Error::invalid(format!(
                    "expected {} external flows for {} frames, got {}",
                    2 * pairs,
                    gt.len(),
                    flows.len()
                )));
            }
            Ok((0..pairs).map(|i| (flows[i].clone(), flows[pairs + i].clone())).collect())
        }
    }
}

/// Temporal consistency: mean over consecutive pairs of the per-pixel
/// `|du| + |dv|` between ground-truth and predicted motion.
pub fn tof(gt: &[Tensor], pred: &[Tensor], source: &FlowSource) -> Result<f64> {
    tof_from_motions(&pair_motions(gt, pred, source)?)
}

pub fn tof_from_motions(motions: &[(FlowField, FlowField)]) -> Result<f64> {
    let mut total = 0.0;
    for (g, p) in motions {
        if g.as_tensor().shape() != p.as_tensor().shape() {
            return Err(Error::shape("tof", g.as_tensor().shape(), p.as_tensor().shape()));
        }
        total += mean_abs_diff(g.as_tensor(), p.as_tensor()) * 2.0;
    }
    Ok(total / motions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub tof: Option<f64>,
    /// Mean endpoint error between ground-truth and predicted pair motion.
    pub epe: Option<f64>,
    pub estimator: Option<String>,
    pub frames: Vec<FrameMetrics>,
}

impl MetricsReport {
    /// Per-frame PSNR/SSIM and, with two or more frames, tOF and EPE.
    pub fn compute(gt: &[Tensor], pred: &[Tensor], source: &FlowSource) -> Result<Self> {
        if gt.len() != pred.len() || gt.is_empty() {
            return Err(Error::invalid(format!(
                "{} ground-truth frames vs {} predicted frames",
                gt.len(),
                pred.len()
            )));
        }
        let frames = gt
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(index, (g, p))| {
                Ok(FrameMetrics {
                    index,
                    psnr: psnr(g, p)?,
                    ssim: ssim(g, p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = frames.len() as f64;
        let (tof_value, epe_value, estimator) = if gt.len() >= 2 {
            let motions = pair_motions(gt, pred, source)?;
            let e = motions.iter().map(|(g, p)| epe(g, p)).sum::<Result<f64>>()? / motions.len() as f64;
            (Some(tof_from_motions(&motions)?), Some(e), Some(source.name().to_string()))
        } else {
            (None, None, None)
        };
        Ok(Self {
            psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
            ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            tof: tof_value,
            epe: epe_value,
            estimator,
            frames,
        })
    }

    /// Copy with every number rounded to 6 significant digits.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| round_significant(v, 6);
        Self {
            psnr: r(self.psnr),
            ssim: r(self.ssim),
            tof: self.tof.map(r),
            epe: self.epe.map(r),
            estimator: self.estimator.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameMetrics {
                    index: f.index,
                    psnr: r(f.psnr),
                    ssim: r(f.ssim),
                })
                .collect(),
        }
    }
}

pub fn round_significant(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let text = format!("{:.*e}", (digits - 1) as usize, v);
    text.parse().expect("formatted float parses")
}
