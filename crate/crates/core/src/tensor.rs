//! Dense `(C, H, W)` float tensor and the layout-only kernels built on it.

use std::fmt;

use crate::error::{Error, Result};

/// Shape of a rank-3 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Row-major `f32` tensor laid out channel, then row, then column.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({})", self.shape)
    }
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::full(channels, height, width, 0.0)
    }

    pub fn full(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "tensor dimensions must be positive, got {channels}x{height}x{width}"
        );
        Self {
            shape: Shape::new(channels, height, width),
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(channels, height, width);
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!("tensor dimensions must be positive, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape("Tensor::from_vec", shape.len(), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value {} at index {i}", data[i])));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f(c, y, x)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Self::zeros(channels, height, width);
        let mut i = 0;
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    t.data[i] = f(c, y, x);
                    i += 1;
                }
            }
        }
        t
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = (c * self.shape.height + y) * self.shape.width + x;
        self.data[i] = v;
    }

    /// Copies channels `range` into a new tensor.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Tensor {
        assert!(range.start < range.end && range.end <= self.channels());
        let p = self.shape.plane();
        Tensor::from_raw(
            Shape::new(range.len(), self.height(), self.width()),
            self.data[range.start * p..range.end * p].to_vec(),
        )
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_shape(op, other.shape)?;
        Ok(Tensor::from_raw(
            self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, op: &'static str, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, shape, self.shape));
        }
        Ok(())
    }

    pub fn expect_spatial(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if !self.shape.same_spatial(&other.shape) {
            return Err(Error::shape(op, other.shape, self.shape));
        }
        Ok(())
    }

    pub fn expect_channels(&self, op: &'static str, channels: usize) -> Result<()> {
        if self.channels() != channels {
            return Err(Error::shape(
                op,
                format!("{channels}x{}x{}", self.height(), self.width()),
                self.shape,
            ));
        }
        Ok(())
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Tensor {
        assert!(height <= self.height() && width <= self.width());
        Tensor::from_fn(self.channels(), height, width, |c, y, x| self.at(c, y, x))
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat of an empty list"))?;
    let mut data = Vec::with_capacity(inputs.iter().map(|t| t.data.len()).sum());
    let mut channels = 0;
    for t in inputs {
        t.expect_spatial("concat", first)?;
        data.extend_from_slice(&t.data);
        channels += t.channels();
    }
    Ok(Tensor::from_raw(Shape::new(channels, first.height(), first.width()), data))
}

/// Nearest-neighbour upscale by two in both spatial axes.
pub fn nn_upscale2(input: &Tensor) -> Tensor {
    let (h, w) = (input.height(), input.width());
    let mut out = Vec::with_capacity(input.data.len() * 4);
    for c in 0..input.channels() {
        let plane = input.channel(c);
        for y in 0..2 * h {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_raw(Shape::new(input.channels(), 2 * h, 2 * w), out)
}

/// Mean over non-overlapping 2x2 windows. Requires even height and width.
pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    if input.height() % 2 != 0 || input.width() % 2 != 0 {
        return Err(Error::invalid(format!("avg_pool2 needs even dimensions, got {}", input.shape())));
    }
    let (h, w) = (input.height() / 2, input.width() / 2);
    Ok(Tensor::from_fn(input.channels(), h, w, |c, y, x| {
        let s = input.at(c, 2 * y, 2 * x)
            + input.at(c, 2 * y, 2 * x + 1)
            + input.at(c, 2 * y + 1, 2 * x)
            + input.at(c, 2 * y + 1, 2 * x + 1);
        s * 0.25
    }))
}

/// Sub-pixel rearrangement `(C, H, W) -> (C / r^2, rH, rW)`.
///
/// Input channel `c * r^2 + i * r + j` lands at sub-position `(i, j)` of
/// output channel `c`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let rr = r * r;
    if r == 0 || input.channels() % rr != 0 {
        return Err(Error::invalid(format!(
            "pixel_shuffle x{r}: {} channels not divisible by {rr}",
            input.channels()
        )));
    }
    let (h, w) = (input.height(), input.width());
    let oc = input.channels() / rr;
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0f32; input.data.len()];
    for c in 0..oc {
        for i in 0..r {
            for j in 0..r {
                let src = input.channel(c * rr + i * r + j);
                for y in 0..h {
                    let dst_row = (c * oh + y * r + i) * ow;
                    for x in 0..w {
                        out[dst_row + x * r + j] = src[y * w + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(Shape::new(oc, oh, ow), out))
}

pub fn pixel_shuffle4(input: &Tensor) -> Result<Tensor> {
    pixel_shuffle(input, 4)
}
