//! Parameter storage, the canonical layer enumeration, Xavier
//! initialisation and the binary weight file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "XVFI" | u32 version = 1 | u32 M | u32 feature_width | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank
//!             | u32 dims[rank] | f32 payload
//! ```
//!
//! Tensors are named `block/layerN/weight` (shape `(out, in, k, k)`) and
//! `block/layerN/bias` (shape `(out,)`) and are written in the canonical
//! order returned by [`architecture`].

use std::collections::HashMap;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"XVFI";
pub const FORMAT_VERSION: u32 = 1;

/// Structural hyper-parameters stored in the weight file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Module scale factor `M`: features live at `1/M` of the frame size.
    pub scale_factor: usize,
    /// Channel width of the contextual features (64 in the reference model).
    pub feature_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale_factor: 4,
            feature_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn new(scale_factor: usize, feature_width: usize) -> Result<Self> {
        let cfg = Self {
            scale_factor,
            feature_width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_factor != 2 && self.scale_factor != 4 {
            return Err(Error::invalid(format!(
                "module scale factor must be 2 or 4, got {}",
                self.scale_factor
            )));
        }
        let m2 = self.scale_factor * self.scale_factor;
        if self.feature_width == 0 || self.feature_width % m2 != 0 {
            return Err(Error::invalid(format!(
                "feature width {} must be a positive multiple of {m2}",
                self.feature_width
            )));
        }
        Ok(())
    }

    /// Channels produced by pixel-shuffling the four refinement features.
    pub fn shuffled_channels(&self) -> usize {
        4 * self.feature_width / (self.scale_factor * self.scale_factor)
    }
}

/// One convolution of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub conv: ConvSpec,
}

impl LayerSpec {
    fn new(block: &str, index: usize, conv: ConvSpec) -> Self {
        Self {
            name: format!("{block}/layer{index}"),
            conv,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }
}

/// Output layers whose zeroing turns every sub-network into its residual
/// identity.
pub const HEAD_LAYERS: [&str; 4] = [
    "biflow_lowest/layer4",
    "biflow/layer6",
    "tflow/layer5",
    "refine/layer6",
];

/// Canonical enumeration of every convolution in the model.
pub fn architecture(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let w = cfg.feature_width;
    let mut layers = Vec::new();
    let mut block = |name: &str, convs: Vec<(usize, ConvSpec)>| {
        for (i, c) in convs {
            layers.push(LayerSpec::new(name, i, c));
        }
    };

    let mut feat = vec![(0, ConvSpec::same3(3, w)), (1, ConvSpec::down4(w, w))];
    if cfg.scale_factor == 4 {
        feat.push((2, ConvSpec::down4(w, w)));
    }
    feat.extend((3..7).map(|i| (i, ConvSpec::same3(w, w))));
    block("feat", feat);
    block("pyramid", vec![(0, ConvSpec::down4(w, w))]);
    block(
        "biflow_lowest",
        vec![
            (0, ConvSpec::down4(2 * w, 2 * w)),
            (1, ConvSpec::down4(2 * w, 4 * w)),
            (2, ConvSpec::same3(4 * w, 2 * w)),
            (3, ConvSpec::same3(2 * w, w)),
            (4, ConvSpec::same3(w, 6)),
        ],
    );
    block(
        "biflow",
        vec![
            (0, ConvSpec::same3(2 * w, w)),
            (1, ConvSpec::same3(2 * w, w)),
            (2, ConvSpec::down4(2 * w + 4, 2 * w)),
            (3, ConvSpec::down4(2 * w, 4 * w)),
            (4, ConvSpec::same3(4 * w, 2 * w)),
            (5, ConvSpec::same3(2 * w, w)),
            (6, ConvSpec::same3(w, 6)),
        ],
    );
    block(
        "tflow",
        vec![
            (0, ConvSpec::pointwise(4 * w + 4, w)),
            (1, ConvSpec::down4(w, 2 * w)),
            (2, ConvSpec::down4(2 * w, 4 * w)),
            (3, ConvSpec::same3(4 * w, 2 * w)),
            (4, ConvSpec::same3(2 * w, w)),
            (5, ConvSpec::same3(w, 5)),
        ],
    );
    block(
        "refine",
        vec![
            (0, ConvSpec::down4(cfg.shuffled_channels() + 16, w)),
            (1, ConvSpec::down4(w, 2 * w)),
            (2, ConvSpec::down4(2 * w, 4 * w)),
            (3, ConvSpec::same3(4 * w, 4 * w)),
            (4, ConvSpec::same3(6 * w, 2 * w)),
            (5, ConvSpec::same3(3 * w, w)),
            (6, ConvSpec::same3(w, 4)),
        ],
    );
    layers
}

/// A stored tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Borrowed view of one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a> {
    pub spec: ConvSpec,
    pub weight: &'a [f32],
    pub bias: &'a [f32],
}

/// Immutable collection of named parameters plus the model header.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    names: Vec<String>,
    params: HashMap<String, Param>,
}

impl WeightStore {
    /// All-zero weights and biases.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = architecture(&config);
        let mut entries = Vec::new();
        for l in &layers {
            entries.push((l.weight_name(), Param::zeros(l.conv.weight_shape().to_vec())));
            entries.push((l.bias_name(), Param::zeros(vec![l.conv.out_channels])));
        }
        Self::from_entries(config, entries)
    }

    /// Xavier-uniform weights with zero biases.
    ///
    /// Layers are visited in canonical order and drawn from a single
    /// ChaCha8 stream seeded with `seed`; every weight is uniform on
    /// `[-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`, where both fans
    /// include the kernel area.
    pub fn xavier(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &store.layers {
            let bound = xavier_bound(&l.conv);
            let dist = Uniform::new(-bound, bound).expect("positive Xavier bound");
            let p = store.params.get_mut(&l.weight_name()).expect("layer present");
            for v in &mut p.data {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(store)
    }

    fn from_entries(config: ModelConfig, entries: Vec<(String, Param)>) -> Result<Self> {
        config.validate()?;
        let layers = architecture(&config);
        let mut params = HashMap::with_capacity(entries.len());
        for (name, p) in entries {
            if params.insert(name.clone(), p).is_some() {
                return Err(Error::DuplicateLayer(name));
            }
        }
        let mut names = Vec::with_capacity(layers.len() * 2);
        for l in &layers {
            for (name, shape) in [
                (l.weight_name(), l.conv.weight_shape().to_vec()),
                (l.bias_name(), vec![l.conv.out_channels]),
            ] {
                let p = params.get(&name).ok_or_else(|| Error::MissingLayer(name.clone()))?;
                if p.shape != shape || p.data.len() != shape.iter().product::<usize>() {
                    return Err(Error::LayerShape {
                        name,
                        expected: shape,
                        found: p.shape.clone(),
                    });
                }
                names.push(name);
            }
        }
        if params.len() != names.len() {
            let extra = params
                .keys()
                .filter(|k| !names.contains(k))
                .min()
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnexpectedLayer(extra));
        }
        Ok(Self {
            config,
            layers,
            names,
            params,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    pub fn conv(&self, layer: &str) -> Result<ConvParams<'_>> {
        let spec = self
            .layers
            .iter()
            .find(|l| l.name == layer)
            .ok_or_else(|| Error::MissingLayer(layer.to_string()))?
            .conv;
        Ok(ConvParams {
            spec,
            weight: &self.get(&format!("{layer}/weight"))?.data,
            bias: &self.get(&format!("{layer}/bias"))?.data,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Copy with the weights and biases of the given layers set to zero.
    pub fn with_zeroed_layers(&self, layers: &[&str]) -> Result<Self> {
        let mut out = self.clone();
        for layer in layers {
            for suffix in ["weight", "bias"] {
                let name = format!("{layer}/{suffix}");
                let p = out
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::MissingLayer(name.clone()))?;
                p.data.fill(0.0);
            }
        }
        Ok(out)
    }

    /// Copy whose sub-network output layers are zero.
    pub fn with_zeroed_heads(&self) -> Self {
        self.with_zeroed_layers(&HEAD_LAYERS).expect("head layers exist in every configuration")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.param_count() * 4 + self.names.len() * 64);
        out.extend_from_slice(&MAGIC);
        for v in [
            FORMAT_VERSION,
            self.config.scale_factor as u32,
            self.config.feature_width as u32,
            self.names.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.names {
            let p = &self.params[name];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let config = ModelConfig {
            scale_factor: r.u32("header")? as usize,
            feature_width: r.u32("header")? as usize,
        };
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::invalid(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let dtype = r.take(1, &name)?[0];
            if dtype != 0 {
                return Err(Error::invalid(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = r.take(1, &name)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Param { shape, data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Self::from_entries(config, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::InvalidArgument(reason) => Error::Format {
                path: path.to_path_buf(),
                format: "weights",
                reason,
            },
            e => e,
        })
    }
}

pub fn xavier_bound(spec: &ConvSpec) -> f32 {
    let area = spec.kernel * spec.kernel;
    let fan_in = spec.in_channels * area;
    let fan_out = spec.out_channels * area;
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
