//! Invariants that must hold for every input, checked with random cases.

use iriskit::metrics::{boundary_points, dice, e1, e2_batch, hausdorff, normalized_hausdorff, BinaryMask};
use iriskit::nn::kernels::{conv_output_len, conv_transpose_output_len};
use iriskit::nn::{conv2d, conv_transpose2d, depthwise_conv2d, relu6, LayerSpec, Tensor};
use iriskit::recognition::cosine_similarity;
use iriskit::training::{augment, split_dataset, AugmentationConfig, SplitSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        (prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w))
            .prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    })
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn segmentation_metrics_are_fractions((a, b) in mask_pair(16)) {
        let v = e1(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let v = e2_batch(&[(&a, &b)]).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(e1(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(e1(&a, &a.complement()).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_is_a_metric(
        (a, b) in mask_pair(12),
        c_bits in prop::collection::vec(any::<bool>(), 144),
    ) {
        let (h, w) = a.dims();
        let c = BinaryMask::new(h, w, c_bits[..h * w].to_vec()).unwrap();
        let (pa, pb, pc) = (boundary_points(&a), boundary_points(&b), boundary_points(&c));
        prop_assume!(!pa.is_empty() && !pb.is_empty() && !pc.is_empty());
        let ab = hausdorff(&pa, &pb).unwrap();
        prop_assert_eq!(ab, hausdorff(&pb, &pa).unwrap());
        prop_assert_eq!(hausdorff(&pa, &pa).unwrap(), 0.0);
        let ac = hausdorff(&pa, &pc).unwrap();
        let cb = hausdorff(&pc, &pb).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
        let n = normalized_hausdorff(&pa, &pb, h, w).unwrap();
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn boundary_is_subset_of_region(m in mask_strategy(16)) {
        let b = boundary_points(&m);
        prop_assert!(b.points.iter().all(|&(r, c)| m.get(r, c)));
        prop_assert_eq!(b.is_empty(), !m.has_foreground());
    }

    #[test]
    fn split_is_a_partition(n in 20usize..2000, seed in any::<u64>(), va in 1u32..30, te in 1u32..30) {
        let (va, te) = (va as f64 / 100.0, te as f64 / 100.0);
        let split = split_dataset(n, &SplitSpec { ratios: (1.0 - va - te, va, te), seed }).unwrap();
        prop_assert_eq!(split.val.len(), (va * n as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(split.test.len(), (te * n as f64 + 1e-9).floor() as usize);
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let again = split_dataset(n, &SplitSpec { ratios: (1.0 - va - te, va, te), seed }).unwrap();
        prop_assert_eq!(split, again);
    }

    #[test]
    fn augmentation_keeps_dims_and_range(seed in any::<u64>(), h in 4usize..24, w in 4usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0f32..=1.0));
        let mask = BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.5)).collect()).unwrap();
        let (img, masks) = augment(&image, &[mask.clone(), mask.complement()], &AugmentationConfig::default(), &mut rng).unwrap();
        prop_assert_eq!(img.shape(), image.shape());
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(masks.len(), 2);
        prop_assert!(masks.iter().all(|m| m.dims() == (h, w)));
    }

    #[test]
    fn layer_shapes_match_kernels(
        seed in any::<u64>(), ci in 1usize..4, co in 1usize..4, h in 2usize..12, w in 2usize..12,
        k in prop::sample::select(vec![1usize, 3]), s in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(vec![ci, h, w], &mut rng);
        let spec = LayerSpec::standard_conv(ci, co, k, s);
        let y = conv2d(&x, &random(vec![co, ci, k, k], &mut rng), None, s, spec.padding).unwrap();
        let (c, ho, wo) = spec.output_shape(h, w).unwrap();
        prop_assert_eq!(y.shape(), &[c, ho, wo][..]);
        prop_assert_eq!(ho, conv_output_len(h, k, s, k / 2).unwrap());

        let dw = depthwise_conv2d(&x, &random(vec![ci, 1, 3, 3], &mut rng), None, s, 1).unwrap();
        prop_assert_eq!(dw.shape(), &[ci, (h - 1) / s + 1, (w - 1) / s + 1][..]);

        let spec = LayerSpec::transposed_conv(ci, co);
        let t = conv_transpose2d(&x, &random(vec![ci, co, 4, 4], &mut rng), None, 2, 1, 0).unwrap();
        prop_assert_eq!(t.shape(), &[co, 2 * h, 2 * w][..]);
        let (c, ho, wo) = spec.output_shape(h, w).unwrap();
        prop_assert_eq!(t.shape(), &[c, ho, wo][..]);

        let spec = LayerSpec::inverted_residual(ci, co, s, 6);
        let (c, ho, _) = spec.output_shape(h, w).unwrap();
        prop_assert_eq!((c, ho), (co, (h - 1) / s + 1));
    }

    #[test]
    fn transpose_is_adjoint_of_conv(
        seed in any::<u64>(), ci in 1usize..4, co in 1usize..4, h in 4usize..11, w in 4usize..11,
        k in 1usize..5, s in 1usize..4, p in 0usize..2,
    ) {
        prop_assume!(k <= h + 2 * p && k <= w + 2 * p && p < k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(vec![ci, h, w], &mut rng);
        let weight = random(vec![co, ci, k, k], &mut rng);
        let cx = conv2d(&x, &weight, None, s, p).unwrap();
        let y = random(cx.shape().to_vec(), &mut rng);
        let (oph, opw) = ((h + 2 * p - k) % s, (w + 2 * p - k) % s);
        prop_assume!(oph == opw);
        prop_assert_eq!(conv_transpose_output_len(cx.shape()[1], k, s, p, oph).unwrap(), h);
        let ty = conv_transpose2d(&y, &weight, None, s, p, oph).unwrap();
        prop_assert_eq!(ty.shape(), x.shape());
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn relu6_is_idempotent_and_clamped(seed in any::<u64>(), n in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![1, 1, n], |_| rng.gen_range(-20.0f64..20.0));
        let once = relu6(&x);
        prop_assert_eq!(relu6(&once), once.clone());
        prop_assert!(once.data().iter().all(|v| (0.0..=6.0).contains(v)));
    }

    #[test]
    fn cosine_ignores_positive_scale(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let base = cosine_similarity(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
