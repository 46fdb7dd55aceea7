//! The learned sub-networks: feature extraction, the feature pyramid,
//! BiFlownet (lowest scale and shared), TFlownet and the refinement block.
//!
//! A [`Network`] borrows every layer from a [`WeightStore`] once, so the
//! same parameter slices are reused at every scale.

use crate::conv::{conv2d_sources, Source};
use crate::error::{Error, Result};
use crate::flow::{backward_warp, FlowField, ImportanceLogits};
use crate::tensor::{pixel_shuffle, Shape, Tensor};
use crate::weights::{ConvParams, ModelConfig, WeightStore};

/// Output rows of the first stride-2 feature conv computed per band.
const FEATURE_BAND_ROWS: usize = 32;

/// Bidirectional flows and importance logits at one scale.
#[derive(Debug, Clone)]
pub struct BiFlow {
    pub f01: FlowField,
    pub f10: FlowField,
    pub z01: ImportanceLogits,
    pub z10: ImportanceLogits,
}

/// Refined anchor flows from TFlownet.
#[derive(Debug, Clone)]
pub struct AnchorFlows {
    pub ft0: FlowField,
    pub ft1: FlowField,
    /// Fifth head channel; not consumed by the pipeline.
    pub aux: Tensor,
}

/// Inputs of the refinement block. Features are at `1/M` resolution, the
/// rest at frame resolution.
pub struct RefineInputs<'t> {
    pub c0: &'t Tensor,
    pub c1: &'t Tensor,
    pub ct0: &'t Tensor,
    pub ct1: &'t Tensor,
    pub ft0: &'t FlowField,
    pub ft1: &'t FlowField,
    pub i0: &'t Tensor,
    pub i1: &'t Tensor,
    pub it0: &'t Tensor,
    pub it1: &'t Tensor,
}

/// Occlusion mask (after sigmoid) and residual image.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub mask: Tensor,
    pub residual: Tensor,
}

pub struct Network<'a> {
    config: ModelConfig,
    feat: Vec<ConvParams<'a>>,
    pyramid: ConvParams<'a>,
    biflow_lowest: Vec<ConvParams<'a>>,
    biflow: Vec<ConvParams<'a>>,
    tflow: Vec<ConvParams<'a>>,
    refine: Vec<ConvParams<'a>>,
}

fn block<'a>(store: &'a WeightStore, name: &str) -> Result<Vec<ConvParams<'a>>> {
    store
        .layers()
        .iter()
        .filter(|l| l.name.split('/').next() == Some(name))
        .map(|l| store.conv(&l.name))
        .collect()
}

fn run(p: &ConvParams<'_>, sources: &[Source<'_>], relu: bool) -> Result<Tensor> {
    let first = sources.first().ok_or_else(|| Error::invalid("convolution without input"))?;
    let (h, w) = first.size();
    let (oh, _) = p.spec.output_size(h, w)?;
    conv2d_sources(sources, p.weight, Some(p.bias), &p.spec, relu, 0..oh)
}

fn plain(t: &Tensor) -> Source<'_> {
    Source::plain(t)
}

fn up(t: &Tensor) -> Source<'_> {
    Source::upscaled2(t)
}

fn require_divisible(op: &'static str, t: &Tensor, d: usize) -> Result<()> {
    if t.height() % d != 0 || t.width() % d != 0 {
        return Err(Error::shape(
            op,
            format!("spatial size divisible by {d}"),
            t.shape(),
        ));
    }
    Ok(())
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'a> Network<'a> {
    pub fn new(store: &'a WeightStore) -> Result<Self> {
        Ok(Self {
            config: store.config(),
            feat: block(store, "feat")?,
            pyramid: store.conv("pyramid/layer0")?,
            biflow_lowest: block(store, "biflow_lowest")?,
            biflow: block(store, "biflow")?,
            tflow: block(store, "tflow")?,
            refine: block(store, "refine")?,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    /// Parameters of the shared BiFlownet, used at every non-lowest scale.
    pub fn shared_biflow_params(&self) -> &[ConvParams<'a>] {
        &self.biflow
    }

    /// Parameters of the shared pyramid convolution.
    pub fn pyramid_params(&self) -> &ConvParams<'a> {
        &self.pyramid
    }

    fn width(&self) -> usize {
        self.config.feature_width
    }

    /// Contextual feature `C` at `1/M` resolution for a 3-channel frame whose
    /// sides are divisible by `M`.
    pub fn feature_extract(&self, frame: &Tensor) -> Result<Tensor> {
        frame.expect_channels("feature_extract", 3)?;
        let m = self.config.scale_factor;
        require_divisible("feature_extract", frame, m)?;

        let mut rest = self.feat[2..].iter();
        let feat = {
            let half = self.first_two_banded(frame)?;
            if m == 4 {
                run(rest.next().expect("stride layer"), &[plain(&half)], false)?
            } else {
                half
            }
        };
        let mut x = feat.clone();
        for _ in 0..2 {
            let a = rest.next().expect("resblock conv");
            let b = rest.next().expect("resblock conv");
            let mid = run(a, &[plain(&x)], true)?;
            x = run(b, &[plain(&mid)], false)?.add(&x)?;
        }
        x.add(&feat)
    }

    /// `relu(conv_s2(relu(conv3(frame))))`, computed in row bands so the
    /// full-resolution activation is never held in memory at once.
    fn first_two_banded(&self, frame: &Tensor) -> Result<Tensor> {
        let (c0, c1) = (&self.feat[0], &self.feat[1]);
        let h = frame.height();
        let (oh, ow) = c1.spec.output_size(h, frame.width())?;
        let mut out = vec![0.0f32; c1.spec.out_channels * oh * ow];
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + FEATURE_BAND_ROWS).min(oh);
            // Rows of the first activation read by output rows r0..r1 of a
            // 4x4 stride-2 conv with padding 1.
            let lo = (2 * r0).saturating_sub(1);
            let hi = (2 * r1 + 1).min(h);
            let band = conv2d_sources(&[plain(frame)], c0.weight, Some(c0.bias), &c0.spec, true, lo..hi)?;
            let part = conv2d_sources(
                &[Source::band(&band, lo, h)],
                c1.weight,
                Some(c1.bias),
                &c1.spec,
                true,
                r0..r1,
            )?;
            let n = (r1 - r0) * ow;
            for c in 0..c1.spec.out_channels {
                out[c * oh * ow + r0 * ow..][..n].copy_from_slice(part.channel(c));
            }
            r0 = r1;
        }
        Tensor::from_vec(c1.spec.out_channels, oh, ow, out)
    }

    /// Levels `0..=scales` of the feature pyramid, level 0 being `c`.
    pub fn pyramid_extend(&self, c: &Tensor, scales: usize) -> Result<Vec<Tensor>> {
        require_divisible("pyramid_extend", c, 1 << scales)?;
        let mut levels = vec![c.clone()];
        for _ in 0..scales {
            let next = run(&self.pyramid, &[plain(levels.last().expect("non-empty"))], false)?;
            levels.push(next);
        }
        Ok(levels)
    }

    fn autoencoder(&self, layers: &[ConvParams<'_>], input: &[Source<'_>]) -> Result<Tensor> {
        let [l0, l1, l2, l3, l4] = layers else {
            unreachable!("autoencoder has five layers")
        };
        let e1 = run(l0, input, true)?;
        let e2 = run(l1, &[plain(&e1)], true)?;
        drop(e1);
        let d1 = run(l2, &[up(&e2)], true)?;
        drop(e2);
        let d0 = run(l3, &[up(&d1)], true)?;
        drop(d1);
        run(l4, &[plain(&d0)], false)
    }

    /// Initial bidirectional flows at the coarsest scale.
    pub fn biflownet_lowest(&self, c0: &Tensor, c1: &Tensor) -> Result<BiFlow> {
        require_same("biflownet_lowest", c0, c1)?;
        c0.expect_channels("biflownet_lowest", self.width())?;
        require_divisible("biflownet_lowest", c0, 4)?;
        let out = self.autoencoder(&self.biflow_lowest, &[plain(c0), plain(c1)])?;
        split_biflow(&out, None)
    }

    /// Residual refinement of upsampled flows `(f01, f10)` at one scale.
    pub fn biflownet_shared(
        &self,
        c0: &Tensor,
        c1: &Tensor,
        f01: &FlowField,
        f10: &FlowField,
    ) -> Result<BiFlow> {
        require_same("biflownet_shared", c0, c1)?;
        c0.expect_channels("biflownet_shared", self.width())?;
        require_divisible("biflownet_shared", c0, 4)?;
        let spatial = Shape::new(2, c0.height(), c0.width());
        f01.as_tensor().expect_shape("biflownet_shared flow", spatial)?;
        f10.as_tensor().expect_shape("biflownet_shared flow", spatial)?;

        let c01 = backward_warp(f01, c1)?;
        let c10 = backward_warp(f10, c0)?;
        let fused01 = run(&self.biflow[0], &[plain(c0), plain(&c01)], false)?;
        drop(c01);
        let fused10 = run(&self.biflow[1], &[plain(c1), plain(&c10)], false)?;
        drop(c10);
        let out = self.autoencoder(
            &self.biflow[2..],
            &[plain(&fused01), plain(&fused10), plain(f01.as_tensor()), plain(f10.as_tensor())],
        )?;
        split_biflow(&out, Some((f01, f10)))
    }

    /// Anchor flows `(F_t0, F_t1)` refined from their complementary-flow
    /// approximations.
    pub fn tflownet(
        &self,
        c0: &Tensor,
        c1: &Tensor,
        ct0: &Tensor,
        ct1: &Tensor,
        approx_t0: &FlowField,
        approx_t1: &FlowField,
    ) -> Result<AnchorFlows> {
        for t in [c1, ct0, ct1] {
            require_same("tflownet", c0, t)?;
        }
        c0.expect_channels("tflownet", self.width())?;
        require_divisible("tflownet", c0, 4)?;
        let spatial = Shape::new(2, c0.height(), c0.width());
        approx_t0.as_tensor().expect_shape("tflownet flow", spatial)?;
        approx_t1.as_tensor().expect_shape("tflownet flow", spatial)?;

        let x = run(
            &self.tflow[0],
            &[
                plain(c0),
                plain(c1),
                plain(ct0),
                plain(ct1),
                plain(approx_t0.as_tensor()),
                plain(approx_t1.as_tensor()),
            ],
            true,
        )?;
        let out = self.autoencoder(&self.tflow[1..], &[plain(&x)])?;
        Ok(AnchorFlows {
            ft0: FlowField::new(out.slice_channels(0..2).add(approx_t0.as_tensor())?)?,
            ft1: FlowField::new(out.slice_channels(2..4).add(approx_t1.as_tensor())?)?,
            aux: out.slice_channels(4..5),
        })
    }

    /// Occlusion mask and residual at frame resolution.
    pub fn refine(&self, inp: &RefineInputs<'_>) -> Result<Refinement> {
        let m = self.config.scale_factor;
        for t in [inp.c1, inp.ct0, inp.ct1] {
            require_same("refine", inp.c0, t)?;
        }
        inp.c0.expect_channels("refine", self.width())?;
        let full = Shape::new(3, inp.c0.height() * m, inp.c0.width() * m);
        for t in [inp.i0, inp.i1, inp.it0, inp.it1] {
            t.expect_shape("refine", full)?;
        }
        let flow_shape = Shape::new(2, full.height, full.width);
        inp.ft0.as_tensor().expect_shape("refine flow", flow_shape)?;
        inp.ft1.as_tensor().expect_shape("refine flow", flow_shape)?;
        require_divisible("refine", inp.i0, 8)?;

        let [l0, l1, l2, l3, l4, l5, l6] = &self.refine[..] else {
            unreachable!("refinement block has seven layers")
        };
        // The feature width is a multiple of M^2, so shuffling each feature
        // separately equals shuffling their concatenation.
        let enc1 = {
            let shuffled = [inp.c0, inp.c1, inp.ct0, inp.ct1]
                .iter()
                .map(|c| pixel_shuffle(c, m))
                .collect::<Result<Vec<_>>>()?;
            let mut sources: Vec<Source<'_>> = shuffled.iter().map(plain).collect();
            sources.extend([
                plain(inp.ft0.as_tensor()),
                plain(inp.ft1.as_tensor()),
                plain(inp.i0),
                plain(inp.i1),
                plain(inp.it0),
                plain(inp.it1),
            ]);
            run(l0, &sources, true)?
        };
        let enc2 = run(l1, &[plain(&enc1)], true)?;
        let enc3 = run(l2, &[plain(&enc2)], true)?;
        let bottleneck = run(l3, &[plain(&enc3)], true)?;
        drop(enc3);
        let dec2 = run(l4, &[up(&bottleneck), plain(&enc2)], true)?;
        drop((bottleneck, enc2));
        let dec1 = run(l5, &[up(&dec2), plain(&enc1)], true)?;
        drop((dec2, enc1));
        let out = run(l6, &[up(&dec1)], false)?;
        Ok(Refinement {
            mask: out.slice_channels(0..1).map(sigmoid),
            residual: out.slice_channels(1..4),
        })
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn split_biflow(out: &Tensor, residual_of: Option<(&FlowField, &FlowField)>) -> Result<BiFlow> {
    let (mut f01, mut f10) = (out.slice_channels(0..2), out.slice_channels(2..4));
    if let Some((a, b)) = residual_of {
        f01 = f01.add(a.as_tensor())?;
        f10 = f10.add(b.as_tensor())?;
    }
    Ok(BiFlow {
        f01: FlowField::new(f01)?,
        f10: FlowField::new(f10)?,
        z01: ImportanceLogits::new(out.slice_channels(4..5))?,
        z10: ImportanceLogits::new(out.slice_channels(5..6))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::tensor::relu;

    fn store(seed: u64) -> WeightStore {
        WeightStore::xavier(ModelConfig::new(4, 16).unwrap(), seed).unwrap()
    }

    fn frame(h: usize, w: usize, seed: u32) -> Tensor {
        Tensor::from_fn(3, h, w, |c, y, x| {
            let v = (x as u32 * 73 + y as u32 * 151 + c as u32 * 31 + seed * 17) % 97;
            v as f32 / 96.0
        })
    }

    fn plain_conv(store: &WeightStore, layer: &str, x: &Tensor, relu_out: bool) -> Tensor {
        let p = store.conv(layer).unwrap();
        let out = conv2d(x, p.weight, Some(p.bias), &p.spec).unwrap();
        if relu_out {
            relu(&out)
        } else {
            out
        }
    }

    #[test]
    fn banded_feature_extraction_matches_unbanded_layers() {
        let s = store(1);
        let net = Network::new(&s).unwrap();
        let f = frame(136, 24, 0);
        let x = plain_conv(&s, "feat/layer0", &f, true);
        let x = plain_conv(&s, "feat/layer1", &x, true);
        let feat = plain_conv(&s, "feat/layer2", &x, false);
        let mut y = feat.clone();
        for (a, b) in [("feat/layer3", "feat/layer4"), ("feat/layer5", "feat/layer6")] {
            let mid = plain_conv(&s, a, &y, true);
            y = plain_conv(&s, b, &mid, false).add(&y).unwrap();
        }
        let expected = y.add(&feat).unwrap();
        let got = net.feature_extract(&f).unwrap();
        assert_eq!(got.shape(), Shape::new(16, 34, 6));
        assert_eq!(got, expected);
    }

    #[test]
    fn feature_extract_rejects_bad_input() {
        let s = store(1);
        let net = Network::new(&s).unwrap();
        assert!(net.feature_extract(&Tensor::zeros(3, 10, 16)).is_err());
        assert!(net.feature_extract(&Tensor::zeros(1, 16, 16)).is_err());
    }

    #[test]
    fn pyramid_halves_each_level_with_one_conv() {
        let s = store(2);
        let net = Network::new(&s).unwrap();
        let c = Tensor::from_fn(16, 16, 8, |c, y, x| ((c + y * x) % 5) as f32 * 0.1);
        let levels = net.pyramid_extend(&c, 3).unwrap();
        assert_eq!(levels.len(), 4);
        assert_eq!(levels[3].shape(), Shape::new(16, 2, 1));
        assert_eq!(levels[1], plain_conv(&s, "pyramid/layer0", &c, false));
        assert!(net.pyramid_extend(&c, 4).is_err());
    }

    #[test]
    fn zero_heads_are_residual_identities() {
        let s = store(3).with_zeroed_heads();
        let net = Network::new(&s).unwrap();
        let c0 = Tensor::from_fn(16, 8, 8, |c, y, x| ((c * 3 + y + x) % 7) as f32 * 0.1);
        let c1 = c0.map(|v| v * 0.5);
        let low = net.biflownet_lowest(&c0, &c1).unwrap();
        assert_eq!(low.f01.as_tensor().max_abs(), 0.0);
        assert_eq!(low.z10.as_tensor().max_abs(), 0.0);

        let f01 = FlowField::from_fn(8, 8, |y, x| (x as f32 * 0.3, -(y as f32) * 0.2));
        let f10 = f01.scale(-1.0);
        let shared = net.biflownet_shared(&c0, &c1, &f01, &f10).unwrap();
        assert_eq!(shared.f01.as_tensor(), f01.as_tensor());
        assert_eq!(shared.f10.as_tensor(), f10.as_tensor());

        let t = net.tflownet(&c0, &c1, &c0, &c1, &f01, &f10).unwrap();
        assert_eq!(t.ft0.as_tensor(), f01.as_tensor());
        assert_eq!(t.ft1.as_tensor(), f10.as_tensor());

        let img = frame(32, 32, 1);
        let flow = FlowField::zeros(32, 32);
        let r = net
            .refine(&RefineInputs {
                c0: &c0,
                c1: &c1,
                ct0: &c0,
                ct1: &c1,
                ft0: &flow,
                ft1: &flow,
                i0: &img,
                i1: &img,
                it0: &img,
                it1: &img,
            })
            .unwrap();
        assert!(r.mask.data().iter().all(|&m| m == 0.5));
        assert!(r.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_parameters_are_borrowed_not_copied() {
        let s = store(4);
        let a = Network::new(&s).unwrap();
        let b = Network::new(&s).unwrap();
        for (x, y) in a.shared_biflow_params().iter().zip(b.shared_biflow_params()) {
            assert!(std::ptr::eq(x.weight, y.weight));
        }
        assert!(std::ptr::eq(
            a.pyramid_params().weight,
            s.get("pyramid/layer0/weight").unwrap().data.as_slice()
        ));
    }

    #[test]
    fn shape_mismatch_errors_name_both_shapes() {
        let s = store(5);
        let net = Network::new(&s).unwrap();
        let err = net
            .biflownet_lowest(&Tensor::zeros(16, 8, 8), &Tensor::zeros(16, 8, 12))
            .unwrap_err()
            .to_string();
        assert!(err.contains("16x8x8") && err.contains("16x8x12"), "{err}");
    }

    #[test]
    fn scale_factor_two_network_runs() {
        let s = WeightStore::xavier(ModelConfig::new(2, 8).unwrap(), 0).unwrap();
        let net = Network::new(&s).unwrap();
        let c = net.feature_extract(&frame(16, 16, 2)).unwrap();
        assert_eq!(c.shape(), Shape::new(8, 8, 8));
    }
}
