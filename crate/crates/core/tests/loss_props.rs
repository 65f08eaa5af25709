mod common;

use common::*;
use hdrflow::hdr::{well_exposed_mask, LuminanceMask, MU};
use hdrflow::losses::{flow_loss, halo_loss, rec_loss, total_loss, LossParts, LossWeights};
use hdrflow::{FlowField, LdrFrame, RadianceFrame, Tensor};
use proptest::prelude::*;

const N: usize = 5;

fn frame() -> impl Strategy<Value = RadianceFrame<f64>> {
    tensor(vec![3, N, N], 0.0, 2.0).prop_map(|t| RadianceFrame::new(t, 1.5).unwrap())
}

fn field() -> impl Strategy<Value = FlowField<f64>> {
    tensor(vec![2, N, N], -2.0, 2.0).prop_map(|t| FlowField::new(t, 1, 0).unwrap())
}

fn mask() -> impl Strategy<Value = LuminanceMask<f64>> {
    prop::collection::vec(any::<bool>(), N * N).prop_map(|b| LuminanceMask {
        mask: Tensor::new(vec![1, N, N], b.into_iter().map(|v| if v { 1.0 } else { 0.0 }).collect()).unwrap(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative(a in frame(), b in frame(), c in frame(), f in field(), g in field(), m in mask()) {
        prop_assert!(rec_loss(&a, &b, MU).unwrap() >= 0.0);
        prop_assert!(halo_loss([&a, &b, &c], [&f, &g], &m, MU).unwrap() >= 0.0);
        prop_assert!(flow_loss([&f, &g], [&g, &f]).unwrap() >= 0.0);
    }

    #[test]
    fn total_is_monotone_in_each_part(
        parts in prop::array::uniform3(0.0f64..10.0),
        bump in 0.0f64..5.0,
        which in 0usize..3,
    ) {
        let w = LossWeights::default();
        let p = LossParts { rec: parts[0], ha: parts[1], flow: parts[2], mask_coverage: 0.0 };
        let mut q = p;
        match which {
            0 => q.rec += bump,
            1 => q.ha += bump,
            _ => q.flow += bump,
        }
        prop_assert!(total_loss(&q, &w, true).total >= total_loss(&p, &w, true).total);
    }

    #[test]
    fn halo_ignores_reference_values_at_well_exposed_pixels(
        a in frame(), b in frame(), c in frame(), f in field(), g in field(), m in mask(), fill in 0.0f64..2.0,
    ) {
        let base = halo_loss([&a, &b, &c], [&f, &g], &m, MU).unwrap();
        let mut b2 = b.clone();
        let plane = N * N;
        for (i, v) in b2.image.data_mut().iter_mut().enumerate() {
            if m.mask.data()[i % plane] == 1.0 {
                *v = fill;
            }
        }
        prop_assert_eq!(halo_loss([&a, &b2, &c], [&f, &g], &m, MU).unwrap(), base);
    }

    #[test]
    fn halo_vanishes_on_aligned_static_scenes(a in frame(), m in mask()) {
        let z = FlowField::zeros(N, N);
        prop_assert!(halo_loss([&a, &a, &a], [&z, &z], &m, MU).unwrap() <= 1e-7);
    }

    #[test]
    fn halo_is_positive_when_misaligned_pixels_are_active(a in frame(), c in frame()) {
        let diff = a.image.zip_map(&c.image, |x, y| (x.min(1.5) - y.min(1.5)).abs()).unwrap();
        prop_assume!(diff.max_value() > 1e-3);
        let z = FlowField::zeros(N, N);
        let none = LuminanceMask { mask: Tensor::zeros(vec![1, N, N]) };
        prop_assert!(halo_loss([&c, &a, &c], [&z, &z], &none, MU).unwrap() > 1e-7);
    }
}

#[test]
fn mid_gray_reference_masks_out_everything() {
    let gray = LdrFrame::new(Tensor::full(vec![3, N, N], 0.5f64), 1.0, 0).unwrap();
    let m = well_exposed_mask(&gray, 0.2, 0.8).unwrap();
    assert_eq!(m.uncovered_fraction(), 0.0);
}
