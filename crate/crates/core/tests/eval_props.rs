use proptest::prelude::*;

use xvfi::blockmatch::BlockMatchConfig;
use xvfi::eval::{psnr, recon_loss, smoothness_loss, ssim, tof, total_loss, FlowSource, LossConfig, MetricsReport};
use xvfi::{FlowField, Tensor};

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f32..=1.0, c * h * w).prop_map(move |v| Tensor::from_vec(c, h, w, v).unwrap())
}

fn flow(h: usize, w: usize) -> impl Strategy<Value = FlowField> {
    prop::collection::vec(-4.0f32..4.0, 2 * h * w)
        .prop_map(move |v| FlowField::new(Tensor::from_vec(2, h, w, v).unwrap()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_and_ssim_are_symmetric(a in image(3, 14, 13), b in image(3, 14, 13)) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
        prop_assert!(psnr(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn identical_images_score_perfectly(a in image(3, 12, 12)) {
        prop_assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(recon_loss(&[a.clone()], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn recon_loss_is_non_negative_and_additive(a in image(3, 6, 6), b in image(3, 6, 6), c in image(3, 3, 3), d in image(3, 3, 3)) {
        let one = recon_loss(&[a.clone()], &[b.clone()]).unwrap();
        let two = recon_loss(&[c.clone()], &[d.clone()]).unwrap();
        prop_assert!(one >= 0.0);
        prop_assert!((recon_loss(&[a, c], &[b, d]).unwrap() - (one + two)).abs() <= 1e-12);
    }

    #[test]
    fn smoothness_is_non_negative_and_zero_for_constant_flow(
        img in image(3, 9, 10),
        f in flow(9, 10),
        u in -5.0f32..5.0,
        v in -5.0f32..5.0,
    ) {
        prop_assert!(smoothness_loss(&f, &f, &img, 150.0).unwrap() >= 0.0);
        let c = FlowField::constant(9, 10, u, v);
        prop_assert_eq!(smoothness_loss(&c, &c, &img, 150.0).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_is_linear_in_lambda(recon in 0.0f64..10.0, smooth in 0.0f64..10.0, l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
        let at = |l: f64| total_loss(recon, smooth, &LossConfig { lambda_s: l, ..Default::default() }).unwrap().total;
        prop_assert!((at(l1 + l2) - (at(l1) + at(l2) - at(0.0))).abs() <= 1e-9);
    }
}

#[test]
fn tof_of_identical_sequences_is_zero() {
    let seq: Vec<Tensor> = (0..3)
        .map(|k| Tensor::from_fn(3, 32, 32, |c, y, x| (((x + 2 * k) * 7 + y * 3 + c) % 11) as f32 / 10.0))
        .collect();
    let source = FlowSource::BlockMatcher(BlockMatchConfig::default());
    assert_eq!(tof(&seq, &seq, &source).unwrap(), 0.0);
    let report = MetricsReport::compute(&seq, &seq, &source).unwrap();
    assert_eq!(report.psnr, 100.0);
    assert_eq!(report.tof, Some(0.0));
    assert_eq!(report.estimator.as_deref(), Some("block"));
}

#[test]
fn external_flows_drive_tof() {
    let seq: Vec<Tensor> = (0..2).map(|_| Tensor::full(3, 16, 16, 0.5)).collect();
    let flows = vec![FlowField::constant(16, 16, 1.0, 0.0), FlowField::constant(16, 16, 0.0, 0.5)];
    let report = MetricsReport::compute(&seq, &seq, &FlowSource::External(flows)).unwrap();
    // Per-pixel |du| + |dv| = 1.5.
    assert!((report.tof.unwrap() - 1.5).abs() < 1e-12);
    assert_eq!(report.estimator.as_deref(), Some("external"));
    assert!((report.epe.unwrap() - 1.25f64.sqrt()).abs() < 1e-7);
}
