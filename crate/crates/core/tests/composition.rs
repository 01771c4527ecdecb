use onedir::composition::*;
use onedir::{ImageBatch, MaskBatch};
use proptest::prelude::*;
use tapegrad::Tensor;

const SHAPE: [usize; 4] = [2, 3, 4, 4];
const MASK: [usize; 4] = [2, 1, 4, 4];

fn batch(v: Vec<f32>) -> ImageBatch {
    ImageBatch::new(Tensor::new(SHAPE.to_vec(), v).unwrap()).unwrap()
}

fn mask(v: Vec<f32>) -> MaskBatch {
    MaskBatch::new(Tensor::new(MASK.to_vec(), v).unwrap()).unwrap()
}

fn n_img() -> usize {
    SHAPE.iter().product()
}

fn n_mask() -> usize {
    MASK.iter().product()
}

fn images() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..=1.0, n_img())
}

fn masks() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, n_mask())
}

/// Spacing of f32 values at magnitude `x`.
fn ulp(x: f32) -> f32 {
    let x = x.abs().max(f32::MIN_POSITIVE);
    f32::from_bits(x.to_bits() + 1) - x
}

fn mask_at(m: &[f32], i: usize) -> f32 {
    let plane = 16;
    let n = i / (3 * plane);
    m[n * plane + i % plane]
}

proptest! {
    #[test]
    fn endpoints_are_exact(a in images(), b in images()) {
        let (ab, bb) = (batch(a.clone()), batch(b.clone()));
        let ones = mask(vec![1.0; n_mask()]);
        let zeros = mask(vec![0.0; n_mask()]);
        prop_assert_eq!(compose_healthy(&ab, &bb, &ones).unwrap().tensor().data().to_vec(), b.clone());
        prop_assert_eq!(compose_healthy(&ab, &bb, &zeros).unwrap().tensor().data().to_vec(), a.clone());
        prop_assert_eq!(compose_reconstruction(&ab, &bb, &ones).unwrap().tensor().data().to_vec(), a.clone());
        prop_assert_eq!(compose_reconstruction(&ab, &bb, &zeros).unwrap().tensor().data().to_vec(), b.clone());
    }

    #[test]
    fn sum_identity_within_four_ulps(a in images(), b in images(), m in masks()) {
        let pair = compose_pair(&batch(a.clone()), &batch(b.clone()), &mask(m)).unwrap();
        let (h, r) = (pair.healthy_out.tensor().data(), pair.reconstruction.tensor().data());
        for i in 0..n_img() {
            let lhs = h[i] + r[i];
            let rhs = a[i] + b[i];
            let scale = a[i].abs().max(b[i].abs());
            prop_assert!((lhs - rhs).abs() <= 4.0 * ulp(scale), "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn fixed_point_for_any_mask(a in images(), m in masks()) {
        let ab = batch(a.clone());
        let out = compose_healthy(&ab, &ab, &mask(m)).unwrap();
        for (x, y) in out.tensor().data().iter().zip(&a) {
            prop_assert!((x - y).abs() <= 2.0 * ulp(*y));
        }
    }

    #[test]
    fn output_is_between_operands(a in images(), b in images(), m in masks()) {
        let out = compose_healthy(&batch(a.clone()), &batch(b.clone()), &mask(m.clone())).unwrap();
        for (i, &v) in out.tensor().data().iter().enumerate() {
            let lo = a[i].min(b[i]);
            let hi = a[i].max(b[i]);
            let slack = 2.0 * ulp(hi.abs().max(lo.abs()));
            prop_assert!(v >= lo - slack && v <= hi + slack);
            let expected = b[i] * mask_at(&m, i) + a[i] * (1.0 - mask_at(&m, i));
            prop_assert!((v - expected).abs() <= 2.0 * ulp(1.0));
        }
    }

    #[test]
    fn difference_is_symmetric(a in images(), b in images()) {
        let (ab, bb) = (batch(a.clone()), batch(b.clone()));
        let d1 = difference_map(&ab, &bb).unwrap();
        let d2 = difference_map(&bb, &ab).unwrap();
        prop_assert_eq!(d1.data(), d2.data());
        for (i, &v) in d1.data().iter().enumerate() {
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, a[i] == b[i]);
        }
    }
}

#[test]
fn quarter_mask_blend() {
    let a = batch(vec![-1.0; n_img()]);
    let b = batch(vec![1.0; n_img()]);
    let out = compose_healthy(&a, &b, &mask(vec![0.25; n_mask()])).unwrap();
    assert!(out.tensor().data().iter().all(|&v| v == -0.5));
}

#[test]
fn difference_examples() {
    let x = batch(vec![0.5; n_img()]);
    let y = batch(vec![-0.25; n_img()]);
    assert!(difference_map(&x, &y).unwrap().data().iter().all(|&v| v == 0.75));
    assert!(difference_map(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn mismatched_operands_error() {
    let a = batch(vec![0.0; n_img()]);
    let other = ImageBatch::new(Tensor::full(&[2, 3, 4, 8], 0.0f32)).unwrap();
    let m = mask(vec![0.5; n_mask()]);
    assert!(compose_healthy(&a, &other, &m).is_err());
    assert!(compose_reconstruction(&other, &a, &m).is_err());
    assert!(difference_map(&a, &other).is_err());
    let wide = MaskBatch::new(Tensor::full(&[2, 1, 4, 8], 0.5f32)).unwrap();
    assert!(compose_healthy(&a, &a, &wide).is_err());
    assert!(MaskBatch::new(Tensor::full(&[2, 1, 4, 4], 1.5f32)).is_err());
}

#[test]
fn heatmap_png_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.png");
    let map = Tensor::from_fn(&[1, 1, 2, 2], |i| [0.0f32, 0.5, 1.0, 2.0][i]);
    write_heatmap(&map, &p).unwrap();
    let img = image::open(&p).unwrap().to_luma8();
    let px: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
    assert_eq!(px, vec![0, 64, 128, 255]);
}
