//! Frame, occlusion-map and flow files.
//!
//! * PPM (`P6`, 8-bit) frames, scaled to `[0, 1]`.
//! * PFM (`PF` colour, `Pf` grey) float frames; written little-endian,
//!   rows bottom to top as the format prescribes.
//! * PGM (`P5`, 8-bit) occlusion maps, kept on the `[0, 255]` scale.
//! * Middlebury `.flo` flows.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Ppm,
    Pfm,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Ppm => "ppm",
            FrameFormat::Pfm => "pfm",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" => Some(FrameFormat::Ppm),
            "pfm" => Some(FrameFormat::Pfm),
            _ => None,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        format,
        reason: reason.into(),
    }
}

/// Whitespace-separated header tokens of a Netpbm file, skipping `#`
/// comments. Returns the tokens and the offset just past the single
/// whitespace byte that ends the header.
fn netpbm_header(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

/// Parses a binary 8-bit Netpbm image with the given magic and channel count.
fn read_netpbm(path: &Path, magic: &str, format: &'static str, channels: usize) -> Result<(usize, usize, u32, Vec<u8>)> {
    let bytes = read(path)?;
    let (tok, offset) = netpbm_header(&bytes, 4).ok_or_else(|| format_err(path, format, "incomplete header"))?;
    if tok[0] != magic {
        return Err(format_err(path, format, format!("expected magic {magic}, found {}", tok[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format_err(path, format, format!("invalid {what} {s:?}")))
    };
    let (w, h, maxval) = (num(&tok[1], "width")?, num(&tok[2], "height")?, num(&tok[3], "maxval")?);
    if maxval > 255 {
        return Err(format_err(path, format, format!("only 8-bit data is supported, maxval {maxval}")));
    }
    let n = w * h * channels;
    let data = &bytes[offset..];
    if data.len() < n {
        return Err(format_err(path, format, format!("expected {n} bytes of pixel data, found {}", data.len())));
    }
    Ok((w, h, maxval as u32, data[..n].to_vec()))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (w, h, maxval, raw) = read_netpbm(path, "P6", "PPM", 3)?;
    let maxval = maxval as f32;
    Ok(Tensor::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / maxval))
}

/// Quantises a `[0, 1]` frame to 8 bits (values are clamped and rounded).
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    frame.expect_channels("PPM", 3)?;
    let (h, w) = (frame.height(), frame.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((frame.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_ppm(frame)?)
}

/// Occlusion map on the `[0, 255]` scale.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (w, h, maxval, raw) = read_netpbm(path, "P5", "PGM", 1)?;
    let scale = 255.0 / maxval as f32;
    Ok(Tensor::from_fn(1, h, w, |_, y, x| raw[y * w + x] as f32 * scale))
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    map.expect_channels("PGM", 1)?;
    let (h, w) = (map.height(), map.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| v.clamp(0.0, 255.0).round() as u8));
    write(path.as_ref(), &out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (tok, offset) = netpbm_header(&bytes, 4).ok_or_else(|| format_err(path, "PFM", "incomplete header"))?;
    let channels = match tok[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format_err(path, "PFM", format!("unknown magic {other}"))),
    };
    let dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let (w, h) = match (dim(&tok[1]), dim(&tok[2])) {
        (Some(w), Some(h)) => (w, h),
        _ => return Err(format_err(path, "PFM", "invalid dimensions")),
    };
    let scale: f32 = tok[3]
        .parse()
        .ok()
        .filter(|s: &f32| *s != 0.0 && s.is_finite())
        .ok_or_else(|| format_err(path, "PFM", format!("invalid scale {:?}", tok[3])))?;
    let little = scale < 0.0;
    let n = w * h * channels;
    let data = &bytes[offset..];
    if data.len() < n * 4 {
        return Err(format_err(path, "PFM", format!("expected {} bytes of samples, found {}", n * 4, data.len())));
    }
    let sample = |i: usize| {
        let b: [u8; 4] = data[i * 4..i * 4 + 4].try_into().expect("4 bytes");
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let values: Vec<f32> = (0..n).map(sample).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format_err(path, "PFM", "non-finite sample"));
    }
    Ok(Tensor::from_fn(channels, h, w, |c, y, x| values[((h - 1 - y) * w + x) * channels + c]))
}

pub fn encode_pfm(image: &Tensor) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::shape("PFM", "1 or 3 channels", c)),
    };
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&image.at(ch, y, x).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_pfm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_pfm(image)?)
}

/// Reads a frame, choosing the decoder from the extension.
pub fn read_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let frame = match FrameFormat::from_path(path) {
        Some(FrameFormat::Ppm) => read_ppm(path)?,
        Some(FrameFormat::Pfm) => read_pfm(path)?,
        None => return Err(format_err(path, "frame", "unknown extension (expected .ppm or .pfm)")),
    };
    if frame.channels() != 3 {
        return Err(format_err(path, "frame", "expected an RGB image"));
    }
    Ok(frame)
}

pub fn write_frame(path: impl AsRef<Path>, frame: &Tensor, format: FrameFormat) -> Result<()> {
    match format {
        FrameFormat::Ppm => write_ppm(path, frame),
        FrameFormat::Pfm => write_pfm(path, frame),
    }
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() < 12 {
        return Err(format_err(path, "flo", "file shorter than its header"));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes") };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(format_err(path, "flo", format!("bad magic {magic}")));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(format_err(path, "flo", format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let needed = 12 + w * h * 8;
    if bytes.len() < needed {
        return Err(format_err(path, "flo", format!("expected {needed} bytes, found {}", bytes.len())));
    }
    let mut data = vec![0.0f32; 2 * w * h];
    for i in 0..w * h {
        let u = f32::from_le_bytes(word(3 + 2 * i));
        let v = f32::from_le_bytes(word(4 + 2 * i));
        if !u.is_finite() || !v.is_finite() {
            return Err(format_err(path, "flo", "non-finite flow value"));
        }
        data[i] = u;
        data[w * h + i] = v;
    }
    FlowField::new(Tensor::from_vec(2, h, w, data)?)
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write(path.as_ref(), &encode_flo(flow))
}
