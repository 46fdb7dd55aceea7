//! 2-D convolution over `(C, H, W)` tensors.
//!
//! Convolutions are lowered to `im2col` + double-precision GEMM over fixed
//! row tiles. The tile size depends only on the layer geometry, never on the
//! thread count, so every output element is reduced in the same order no
//! matter how the tiles are scheduled.
//!
//! Inputs are described by [`Source`]s so that channel concatenation,
//! nearest-neighbour upscaling and row bands can be consumed without
//! materialising the combined tensor first. At 4K the decoder inputs would
//! otherwise cost several gigabytes each.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Target number of `f64` entries in one im2col tile.
const TILE_ELEMS: usize = 1 << 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Size-preserving 3x3 convolution.
    pub fn same3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            has_bias: true,
        }
    }

    /// Halving 4x4 convolution with stride 2.
    pub fn down4(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 4,
            stride: 2,
            padding: 1,
            has_bias: true,
        }
    }

    /// 1x1 channel mixing.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kernel {
            1 => self.stride == 1 && self.padding == 0,
            3 => self.stride == 1 && self.padding == 1,
            4 => self.stride == 2 && self.padding == 1,
            _ => false,
        };
        if !ok || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("unsupported convolution {self:?}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.stride == 2 && (height % 2 != 0 || width % 2 != 0) {
            return Err(Error::invalid(format!(
                "stride-2 convolution needs even input, got {height}x{width}"
            )));
        }
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        Ok((oh, ow))
    }
}

/// One operand of a (virtually concatenated) convolution input.
#[derive(Clone, Copy)]
pub(crate) struct Source<'a> {
    tensor: &'a Tensor,
    upscale: usize,
    row_offset: usize,
    height: usize,
    width: usize,
}

impl<'a> Source<'a> {
    pub(crate) fn plain(tensor: &'a Tensor) -> Self {
        Self {
            tensor,
            upscale: 1,
            row_offset: 0,
            height: tensor.height(),
            width: tensor.width(),
        }
    }

    /// `tensor` seen through a nearest-neighbour x2 upscale.
    pub(crate) fn upscaled2(tensor: &'a Tensor) -> Self {
        Self {
            tensor,
            upscale: 2,
            row_offset: 0,
            height: 2 * tensor.height(),
            width: 2 * tensor.width(),
        }
    }

    /// Virtual `(height, width)` seen by the convolution.
    pub(crate) fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Rows `row_offset..row_offset + tensor.height()` of a tensor whose full
    /// height is `full_height`. Reads outside the band are a logic error.
    pub(crate) fn band(tensor: &'a Tensor, row_offset: usize, full_height: usize) -> Self {
        debug_assert!(row_offset + tensor.height() <= full_height);
        Self {
            tensor,
            upscale: 1,
            row_offset,
            height: full_height,
            width: tensor.width(),
        }
    }
}

/// Plain convolution with zero padding.
///
/// `weight` is laid out `(out, in, k, k)`; `bias` holds one value per output
/// channel.
pub fn conv2d(input: &Tensor, weight: &[f32], bias: Option<&[f32]>, spec: &ConvSpec) -> Result<Tensor> {
    let (oh, _) = spec.output_size(input.height(), input.width())?;
    conv2d_sources(&[Source::plain(input)], weight, bias, spec, false, 0..oh)
}

/// Convolution over the channel concatenation of `sources`, computing only
/// output rows `rows`. Optionally applies ReLU to the result.
pub(crate) fn conv2d_sources(
    sources: &[Source<'_>],
    weight: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
    relu: bool,
    rows: Range<usize>,
) -> Result<Tensor> {
    spec.validate()?;
    let first = sources
        .first()
        .ok_or_else(|| Error::invalid("convolution without input"))?;
    let (height, width) = (first.height, first.width);
    let mut in_channels = 0;
    for s in sources {
        if s.height != height || s.width != width {
            return Err(Error::shape(
                "conv2d",
                format!("{}x{}x{}", s.tensor.channels(), height, width),
                format!("{}x{}x{}", s.tensor.channels(), s.height, s.width),
            ));
        }
        in_channels += s.tensor.channels();
    }
    if in_channels != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("{}x{}x{}", spec.in_channels, height, width),
            format!("{}x{}x{}", in_channels, height, width),
        ));
    }
    if weight.len() != spec.weight_len() {
        return Err(Error::shape(
            "conv2d weights",
            format!("{:?}", spec.weight_shape()),
            format!("{} values", weight.len()),
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape("conv2d bias", spec.out_channels, b.len()));
        }
    }
    let (oh, ow) = spec.output_size(height, width)?;
    if rows.start > rows.end || rows.end > oh {
        return Err(Error::invalid(format!("output rows {rows:?} outside 0..{oh}")));
    }
    let band_rows = rows.len().max(1);

    let k_total = spec.in_channels * spec.kernel * spec.kernel;
    let w64: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = match bias {
        Some(b) => b.iter().map(|&v| v as f64).collect(),
        None => vec![0.0; spec.out_channels],
    };

    let tile_rows = (TILE_ELEMS / (k_total * ow)).clamp(1, band_rows);
    let plane = band_rows * ow;
    let mut out = vec![0.0f32; spec.out_channels * plane];

    let n_tiles = band_rows.div_ceil(tile_rows);
    let mut per_tile: Vec<Vec<&mut [f32]>> = (0..n_tiles)
        .map(|_| Vec::with_capacity(spec.out_channels))
        .collect();
    for channel in out.chunks_mut(plane) {
        for (t, chunk) in channel.chunks_mut(tile_rows * ow).enumerate() {
            per_tile[t].push(chunk);
        }
    }

    let geom = Geometry {
        spec: *spec,
        height,
        width,
        out_width: ow,
        k_total,
    };
    per_tile.into_par_iter().enumerate().for_each(|(t, mut dsts)| {
        let r0 = rows.start + t * tile_rows;
        let r1 = (r0 + tile_rows).min(rows.end);
        compute_tile(sources, &geom, &w64, &b64, relu, r0..r1, &mut dsts);
    });

    Ok(Tensor::from_raw(Shape::new(spec.out_channels, band_rows, ow), out))
}

struct Geometry {
    spec: ConvSpec,
    height: usize,
    width: usize,
    out_width: usize,
    k_total: usize,
}

fn compute_tile(
    sources: &[Source<'_>],
    g: &Geometry,
    weight: &[f64],
    bias: &[f64],
    relu: bool,
    rows: Range<usize>,
    dsts: &mut [&mut [f32]],
) {
    let n = rows.len() * g.out_width;
    if n == 0 {
        return;
    }
    let k = g.spec.kernel;
    let mut col = vec![0.0f64; g.k_total * n];

    let mut krow = 0;
    for src in sources {
        for c in 0..src.tensor.channels() {
            let plane = src.tensor.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[krow * n..(krow + 1) * n];
                    fill_col_row(src, plane, g, ky, kx, rows.clone(), dst);
                    krow += 1;
                }
            }
        }
    }

    let m = g.spec.out_channels;
    let mut acc = vec![0.0f64; m * n];
    // SAFETY: the pointers cover `m * k_total`, `k_total * n` and `m * n`
    // contiguous row-major matrices, matching the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            g.k_total,
            n,
            1.0,
            weight.as_ptr(),
            g.k_total as isize,
            1,
            col.as_ptr(),
            n as isize,
            1,
            0.0,
            acc.as_mut_ptr(),
            n as isize,
            1,
        );
    }

    for (o, dst) in dsts.iter_mut().enumerate() {
        let b = bias[o];
        let src = &acc[o * n..(o + 1) * n];
        for (d, &s) in dst.iter_mut().zip(src) {
            let v = (s + b) as f32;
            *d = if relu { v.max(0.0) } else { v };
        }
    }
}

/// Writes the im2col row for kernel tap `(ky, kx)` of one input channel.
fn fill_col_row(
    src: &Source<'_>,
    plane: &[f32],
    g: &Geometry,
    ky: usize,
    kx: usize,
    rows: Range<usize>,
    dst: &mut [f64],
) {
    let stride = g.spec.stride;
    let pad = g.spec.padding as isize;
    let ow = g.out_width;
    let pw = src.tensor.width();
    let up = src.upscale;

    // Output columns whose tap lands inside [0, width).
    let ix_of = |ox: usize| (ox * stride + kx) as isize - pad;
    let ox_lo = ((pad - kx as isize).max(0) as usize).div_ceil(stride).min(ow);
    let ox_hi = ((g.width as isize + pad - kx as isize).max(0) as usize)
        .div_ceil(stride)
        .clamp(ox_lo, ow);

    for (r, oy) in rows.enumerate() {
        let out = &mut dst[r * ow..(r + 1) * ow];
        let iy = (oy * stride + ky) as isize - pad;
        if iy < 0 || iy >= g.height as isize {
            out.fill(0.0);
            continue;
        }
        let py = iy as usize / up;
        debug_assert!(py >= src.row_offset, "row {py} below band");
        let py = py - src.row_offset;
        let row = &plane[py * pw..(py + 1) * pw];
        out[..ox_lo].fill(0.0);
        out[ox_hi..].fill(0.0);
        let x0 = ix_of(ox_lo);
        if stride == 1 && up == 1 {
            let x0 = x0 as usize;
            for (d, &s) in out[ox_lo..ox_hi].iter_mut().zip(&row[x0..x0 + (ox_hi - ox_lo)]) {
                *d = s as f64;
            }
        } else {
            for (i, d) in out[ox_lo..ox_hi].iter_mut().enumerate() {
                let ix = x0 as usize + i * stride;
                *d = row[ix / up] as f64;
            }
        }
    }
}

/// Residual block: `x + conv(relu(conv(x)))`.
pub fn resblock(
    input: &Tensor,
    first: (&[f32], Option<&[f32]>),
    second: (&[f32], Option<&[f32]>),
) -> Result<Tensor> {
    let spec = ConvSpec::same3(input.channels(), input.channels());
    let (h, _) = spec.output_size(input.height(), input.width())?;
    let mid = conv2d_sources(&[Source::plain(input)], first.0, first.1, &spec, true, 0..h)?;
    let out = conv2d_sources(&[Source::plain(&mid)], second.0, second.1, &spec, false, 0..h)?;
    out.add(input)
}
