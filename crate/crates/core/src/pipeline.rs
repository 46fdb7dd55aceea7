//! Scale-recursive orchestration: bidirectional flow estimation from the
//! coarsest level down to the original scale (BiOF-I), then t-flow
//! estimation, warping, refinement and blending (BiOF-T).
//!
//! In inference mode BiOF-T runs only at scale 0. In training mode it runs
//! at every level on bicubically downscaled frames so per-scale losses can
//! be formed; BiOF-T at `s > 0` feeds nothing forward, so the scale-0
//! output is identical in both modes.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{backward_warp, cfr, upscale_flow, FlowField, HoleMap};
use crate::net::{BiFlow, Network, RefineInputs};
use crate::resample::bicubic_downscale;
use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inference,
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Module scale factor `M`; must match the weights.
    pub scale_factor: usize,
    /// Lowest scale depth used for this run.
    pub scales: usize,
    pub mode: Mode,
    /// Target times. Endpoints are accepted for identity checks.
    pub times: Vec<f32>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scale_factor: 4,
            scales: 5,
            mode: Mode::Inference,
            times: vec![0.5],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factor != 2 && self.scale_factor != 4 {
            return Err(Error::invalid(format!(
                "module scale factor must be 2 or 4, got {}",
                self.scale_factor
            )));
        }
        if self.scales > 16 {
            return Err(Error::invalid(format!("scale depth {} is too large", self.scales)));
        }
        if self.times.is_empty() {
            return Err(Error::invalid("no target times given"));
        }
        for &t in &self.times {
            check_time(t)?;
        }
        Ok(())
    }

    /// Spatial multiple the padded frames must satisfy.
    pub fn stride(&self) -> usize {
        self.scale_factor * (1 << self.scales) * 4
    }
}

fn check_time(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// Original frame size, restored by [`CropRecord::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        if self.is_empty() {
            t.clone()
        } else {
            t.crop(self.height, self.width)
        }
    }
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the right and bottom edges up to the next multiple of
/// `stride`.
pub fn pad_to_multiple(frame: &Tensor, stride: usize) -> (Tensor, CropRecord) {
    let (h, w) = (frame.height(), frame.width());
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    let record = CropRecord {
        height: h,
        width: w,
        pad_bottom: ph - h,
        pad_right: pw - w,
    };
    if record.is_empty() {
        return (frame.clone(), record);
    }
    let padded = Tensor::from_fn(frame.channels(), ph, pw, |c, y, x| {
        frame.at(c, reflect_index(y, h), reflect_index(x, w))
    });
    (padded, record)
}

pub fn pad_to_stride(frame: &Tensor, cfg: &PipelineConfig) -> (Tensor, CropRecord) {
    pad_to_multiple(frame, cfg.stride())
}

/// Per-scale bundle of features, flows and importance logits.
#[derive(Debug, Clone)]
pub struct ScaleState {
    pub scale: usize,
    pub c0: Tensor,
    pub c1: Tensor,
    pub flows: BiFlow,
}

/// Diagnostics of one BiOF-T evaluation.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub t: f32,
    pub scale: usize,
    /// Blended frame. At scale 0 it is cropped to the input size; at
    /// coarser scales it keeps the padded size divided by `2^scale`.
    pub frame: Tensor,
    /// Occlusion mask after the sigmoid, same size as `frame`.
    pub mask: Tensor,
    /// Refined t-flows at feature resolution.
    pub ft0: FlowField,
    pub ft1: FlowField,
    /// Pixels left uncovered by complementary flow reversal before filling.
    pub holes: HoleMap,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub feature_extraction: f64,
    /// `(scale, seconds)` for every BiOF-I level, coarsest first.
    pub biof_i: Vec<(usize, f64)>,
    pub biof_t: f64,
    pub refinement: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct InterpolationResult {
    pub outputs: Vec<FrameOutput>,
    /// BiOF-I flows `(scale, F01, F10)` at feature resolution, coarsest first.
    pub flows: Vec<(usize, FlowField, FlowField)>,
    pub timings: Timings,
}

impl InterpolationResult {
    pub fn frame(&self, t: f32, scale: usize) -> Option<&Tensor> {
        self.outputs
            .iter()
            .find(|o| o.t == t && o.scale == scale)
            .map(|o| &o.frame)
    }

    /// Scale-0 frames in the order of the requested times.
    pub fn final_frames(&self) -> Vec<&Tensor> {
        self.outputs.iter().filter(|o| o.scale == 0).map(|o| &o.frame).collect()
    }
}

/// Blends warped frames with the occlusion mask and adds the residual:
/// `((1-t) m a + t (1-m) b) / ((1-t) m + t (1-m)) + r`, clamped to `[0, 1]`.
pub fn blend(a: &Tensor, b: &Tensor, mask: &Tensor, residual: &Tensor, t: f32) -> Result<Tensor> {
    check_time(t)?;
    if a.shape() != b.shape() || a.shape() != residual.shape() {
        let other = if a.shape() != b.shape() { b.shape() } else { residual.shape() };
        return Err(Error::shape("blend", a.shape(), other));
    }
    mask.expect_shape("blend mask", Shape::new(1, a.height(), a.width()))?;
    let t = t as f64;
    let m = mask.data();
    let plane = m.len();
    let weights: Vec<(f64, f64)> = m
        .iter()
        .map(|&m| {
            let m = m as f64;
            let w0 = (1.0 - t) * m;
            let w1 = t * (1.0 - m);
            let den = w0 + w1;
            if den > 0.0 {
                (w0 / den, w1 / den)
            } else {
                (1.0 - t, t)
            }
        })
        .collect();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(residual.data())
        .enumerate()
        .map(|(i, ((&p, &q), &r))| {
            let (w0, w1) = weights[i % plane];
            (w0 * p as f64 + w1 * q as f64 + r as f64).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::from_vec(a.channels(), a.height(), a.width(), data)
}

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Runs the pipeline for one weight store and configuration.
pub struct Interpolator<'w> {
    net: Network<'w>,
    config: PipelineConfig,
    biof_i_calls: AtomicUsize,
}

impl<'w> Interpolator<'w> {
    pub fn new(store: &'w WeightStore, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let m = store.config().scale_factor;
        if m != config.scale_factor {
            return Err(Error::shape(
                "pipeline scale factor",
                format!("M={m} (weights)"),
                format!("M={}", config.scale_factor),
            ));
        }
        Ok(Self {
            net: Network::new(store)?,
            config,
            biof_i_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<'w> {
        &self.net
    }

    /// Number of BiOF-I evaluations performed so far.
    pub fn biof_i_calls(&self) -> usize {
        self.biof_i_calls.load(Ordering::Relaxed)
    }

    /// Bidirectional flows for padded frames, ordered from the coarsest
    /// level to scale 0. Only the flows cross from one level to the next.
    pub fn biof_i(&self, i0: &Tensor, i1: &Tensor, timings: &mut Timings) -> Result<Vec<ScaleState>> {
        self.biof_i_calls.fetch_add(1, Ordering::Relaxed);
        let depth = self.config.scales;
        let start = Instant::now();
        let (c0, c1) = rayon::join(|| self.net.feature_extract(i0), || self.net.feature_extract(i1));
        let (p0, p1) = (self.net.pyramid_extend(&c0?, depth)?, self.net.pyramid_extend(&c1?, depth)?);
        timings.feature_extraction += secs(start);

        let mut states: Vec<ScaleState> = Vec::with_capacity(depth + 1);
        for s in (0..=depth).rev() {
            let start = Instant::now();
            let (c0, c1) = (p0[s].clone(), p1[s].clone());
            let flows = match states.last() {
                None => self.net.biflownet_lowest(&c0, &c1)?,
                Some(prev) => {
                    let f01 = upscale_flow(&prev.flows.f01, 2)?;
                    let f10 = upscale_flow(&prev.flows.f10, 2)?;
                    self.net.biflownet_shared(&c0, &c1, &f01, &f10)?
                }
            };
            states.push(ScaleState { scale: s, c0, c1, flows });
            timings.biof_i.push((s, secs(start)));
        }
        Ok(states)
    }

    /// Synthesises the frame at time `t` from one scale state and the frames
    /// at that scale.
    pub fn biof_t(
        &self,
        state: &ScaleState,
        i0: &Tensor,
        i1: &Tensor,
        t: f32,
        timings: &mut Timings,
    ) -> Result<FrameOutput> {
        check_time(t)?;
        let m = self.config.scale_factor;
        let start = Instant::now();
        let f = &state.flows;
        let approx = cfr(&f.f01, &f.f10, &f.z01, &f.z10, t)?;
        let ct0 = backward_warp(&approx.t0, &state.c0)?;
        let ct1 = backward_warp(&approx.t1, &state.c1)?;
        let anchors = self
            .net
            .tflownet(&state.c0, &state.c1, &ct0, &ct1, &approx.t0, &approx.t1)?;
        let ft0_up = upscale_flow(&anchors.ft0, m)?;
        let ft1_up = upscale_flow(&anchors.ft1, m)?;
        let it0 = backward_warp(&ft0_up, i0)?;
        let it1 = backward_warp(&ft1_up, i1)?;
        timings.biof_t += secs(start);

        let start = Instant::now();
        let refined = self.net.refine(&RefineInputs {
            c0: &state.c0,
            c1: &state.c1,
            ct0: &ct0,
            ct1: &ct1,
            ft0: &ft0_up,
            ft1: &ft1_up,
            i0,
            i1,
            it0: &it0,
            it1: &it1,
        })?;
        drop((ct0, ct1, ft0_up, ft1_up));
        let frame = blend(&it0, &it1, &refined.mask, &refined.residual, t)?;
        timings.refinement += secs(start);

        Ok(FrameOutput {
            t,
            scale: state.scale,
            frame,
            mask: refined.mask,
            ft0: anchors.ft0,
            ft1: anchors.ft1,
            holes: approx.holes_t0,
        })
    }

    /// Interpolates at every configured time.
    pub fn interpolate(&self, i0: &Tensor, i1: &Tensor) -> Result<InterpolationResult> {
        self.run(i0, i1, &self.config.times)
    }

    /// Scale-0 frames for each `t`, reusing one BiOF-I pass.
    pub fn multi_interpolate(&self, i0: &Tensor, i1: &Tensor, times: &[f32]) -> Result<Vec<Tensor>> {
        if times.is_empty() {
            return Err(Error::invalid("multi_interpolate needs at least one time"));
        }
        let result = self.run(i0, i1, times)?;
        Ok(result
            .outputs
            .into_iter()
            .filter(|o| o.scale == 0)
            .map(|o| o.frame)
            .collect())
    }

    fn run(&self, i0: &Tensor, i1: &Tensor, times: &[f32]) -> Result<InterpolationResult> {
        let total = Instant::now();
        if i0.shape() != i1.shape() {
            return Err(Error::shape("interpolate", i0.shape(), i1.shape()));
        }
        i0.expect_channels("interpolate", 3)?;
        for &t in times {
            check_time(t)?;
        }
        let mut timings = Timings::default();
        let (p0, crop) = pad_to_stride(i0, &self.config);
        let (p1, _) = pad_to_stride(i1, &self.config);
        let states = self.biof_i(&p0, &p1, &mut timings)?;
        let flows = states
            .iter()
            .map(|s| (s.scale, s.flows.f01.clone(), s.flows.f10.clone()))
            .collect();

        let levels: Vec<&ScaleState> = match self.config.mode {
            Mode::Inference => vec![states.last().expect("scale 0 state")],
            Mode::Training => states.iter().rev().collect(),
        };
        let mut outputs = Vec::with_capacity(times.len() * levels.len());
        for state in levels {
            let factor = 1 << state.scale;
            let f0 = bicubic_downscale(&p0, factor)?;
            let f1 = bicubic_downscale(&p1, factor)?;
            for &t in times {
                let mut out = self.biof_t(state, &f0, &f1, t, &mut timings)?;
                if state.scale == 0 {
                    out.frame = crop.apply(&out.frame);
                    out.mask = crop.apply(&out.mask);
                }
                outputs.push(out);
            }
        }
        timings.total = secs(total);
        Ok(InterpolationResult {
            outputs,
            flows,
            timings,
        })
    }
}

/// Ground-truth frames matching training-mode outputs: scale 0 at the input
/// size, coarser scales downscaled from the padded frame.
pub fn training_targets(frame: &Tensor, cfg: &PipelineConfig) -> Result<Vec<Tensor>> {
    let (padded, crop) = pad_to_stride(frame, cfg);
    (0..=cfg.scales)
        .map(|s| {
            let d = bicubic_downscale(&padded, 1 << s)?;
            Ok(if s == 0 { crop.apply(&d) } else { d })
        })
        .collect()
}

pub fn interpolate(i0: &Tensor, i1: &Tensor, cfg: &PipelineConfig, store: &WeightStore) -> Result<InterpolationResult> {
    Interpolator::new(store, cfg.clone())?.interpolate(i0, i1)
}

pub fn multi_interpolate(
    i0: &Tensor,
    i1: &Tensor,
    times: &[f32],
    cfg: &PipelineConfig,
    store: &WeightStore,
) -> Result<Vec<Tensor>> {
    Interpolator::new(store, cfg.clone())?.multi_interpolate(i0, i1, times)
}
