use latentseg::metrics::{dice, hd95, iou, nsd, surface_distances, DEFAULT_NSD_TOLERANCE};
use latentseg::raster::{BinaryMask, PixelSpacing};
use proptest::prelude::*;

fn mask(side: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), side * side).prop_map(move |d| BinaryMask::new(side, side, d).unwrap())
}

fn pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (2usize..12).prop_flat_map(|s| (mask(s), mask(s)))
}

proptest! {
    #[test]
    fn overlap_is_symmetric_and_bounded((a, b) in pair()) {
        let d = dice(&a, &b).unwrap();
        let j = iou(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(j, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(j <= d);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_is_perfect(a in (2usize..12).prop_flat_map(mask)) {
        let s = PixelSpacing::default();
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(hd95(&a, &a, s).unwrap(), Some(0.0));
        prop_assert_eq!(nsd(&a, &a, s, DEFAULT_NSD_TOLERANCE).unwrap(), 1.0);
    }

    #[test]
    fn boundary_metrics_are_symmetric((a, b) in pair()) {
        let s = PixelSpacing::default();
        prop_assert_eq!(hd95(&a, &b, s).unwrap(), hd95(&b, &a, s).unwrap());
        let n = nsd(&a, &b, s, DEFAULT_NSD_TOLERANCE).unwrap();
        prop_assert!((n - nsd(&b, &a, s, DEFAULT_NSD_TOLERANCE).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn distances_scale_with_isotropic_spacing((a, b) in pair(), k in 0.1f64..5.0) {
        prop_assume!(!a.is_empty() && !b.is_empty());
        let unit = surface_distances(&a, &b, PixelSpacing::default()).unwrap();
        let scaled = surface_distances(&a, &b, PixelSpacing { row: k, col: k }).unwrap();
        for (u, s) in unit.iter().zip(&scaled) {
            prop_assert!((u * k - s).abs() < 1e-9);
        }
    }

    #[test]
    fn nsd_grows_with_tolerance((a, b) in pair(), t in 0.5f64..4.0) {
        let s = PixelSpacing::default();
        prop_assert!(nsd(&a, &b, s, t).unwrap() <= nsd(&a, &b, s, t + 1.0).unwrap());
    }
}

#[test]
fn anisotropic_spacing_weights_axes() {
    let a = BinaryMask::from_fn(5, 5, |r, c| r == 0 && c == 0);
    let b = BinaryMask::from_fn(5, 5, |r, c| r == 3 && c == 0);
    let c = BinaryMask::from_fn(5, 5, |r, c| r == 0 && c == 3);
    let s = PixelSpacing { row: 2.0, col: 0.5 };
    assert_eq!(hd95(&a, &b, s).unwrap(), Some(6.0));
    assert_eq!(hd95(&a, &c, s).unwrap(), Some(1.5));
}

#[test]
fn one_empty_mask_has_no_hd95() {
    let a = BinaryMask::from_fn(4, 4, |r, _| r == 1);
    let e = BinaryMask::empty(4, 4);
    let s = PixelSpacing::default();
    assert_eq!(hd95(&a, &e, s).unwrap(), None);
    assert_eq!(nsd(&a, &e, s, 1.0).unwrap(), 0.0);
    assert_eq!(dice(&a, &e).unwrap(), 0.0);
    assert_eq!(hd95(&e, &e, s).unwrap(), Some(0.0));
}
