//! Property tests: shape algebra, unfold/fold bijection, determinism.

use proptest::prelude::*;

use mvtk_tensor::kernels as k;
use mvtk_tensor::{Rng, Shape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_is_pure_function(
        n in 1usize..3, cin in 1usize..5, h in 1usize..9, w in 1usize..9,
        kk in 1usize..4, stride in 1usize..3, padding in 0usize..2,
        coutg in 1usize..3, seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * padding >= kk && w + 2 * padding >= kk);
        let groups = cin; // depthwise-style grouping keeps the grid legal
        let cout = coutg * groups;
        let mut rng = Rng::seed_from(seed);
        let x = rng.uniform_tensor::<f64>(Shape::nchw(n, cin, h, w), -1.0, 1.0);
        let wt = rng.uniform_tensor::<f64>(Shape::nchw(cout, 1, kk, kk), -1.0, 1.0);
        let y = k::conv2d(&x, &wt, None, stride, padding, groups, None).unwrap();
        let hout = (h + 2 * padding - kk) / stride + 1;
        let wout = (w + 2 * padding - kk) / stride + 1;
        prop_assert_eq!(y.shape(), Shape::nchw(n, cout, hout, wout));
    }

    #[test]
    fn fold_unfold_round_trip_bit_exact(
        n in 1usize..3, d in 1usize..6,
        nh in 1usize..5, nw in 1usize..5,
        ph in 1usize..4, pw in 1usize..4,
        seed in 0u64..10_000,
    ) {
        let (h, w) = (nh * ph, nw * pw);
        let mut rng = Rng::seed_from(seed);
        let x = rng.uniform_tensor::<f64>(Shape::nchw(n, d, h, w), -1.0, 1.0);
        let t = k::unfold(&x, ph, pw).unwrap();
        let back = k::fold(&t, ph, pw, h, w).unwrap();
        prop_assert!(x.bit_eq(&back));
    }

    #[test]
    fn gemm_deterministic_across_thread_counts(
        m in 1usize..12, kk in 1usize..12, nn in 1usize..12, seed in 0u64..1000,
    ) {
        let mut rng = Rng::seed_from(seed);
        let a = rng.uniform_tensor::<f32>(Shape::mat(m, kk), -1.0, 1.0);
        let b = rng.uniform_tensor::<f32>(Shape::mat(kk, nn), -1.0, 1.0);
        k::set_num_threads(1);
        let c1 = k::matmul2(&a, &b, None).unwrap();
        k::set_num_threads(4);
        let c4 = k::matmul2(&a, &b, None).unwrap();
        k::set_num_threads(1);
        prop_assert!(c1.bit_eq(&c4));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = Rng::seed_from(seed);
        let x = rng.uniform_tensor::<f64>(Shape::mat(rows, cols), -5.0, 5.0);
        let y = k::softmax(&x, 1);
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn reshape_preserves_count_or_errors(n in 1usize..4, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let x = Tensor::<f64>::zeros(Shape::nchw(n, c, h, w));
        prop_assert!(x.reshape(Shape::nchw(1, x.numel(), 1, 1)).is_ok());
        prop_assert!(x.reshape(Shape::nchw(1, x.numel() + 1, 1, 1)).is_err());
    }
}

#[test]
fn fold_unfold_hundred_randomized_shapes() {
    let mut rng = Rng::seed_from(2024);
    for trial in 0..100 {
        let (ph, pw) = (1 + rng.below(3), 1 + rng.below(3));
        let (nh, nw) = (1 + rng.below(6), 1 + rng.below(6));
        let n = 1 + rng.below(3);
        let d = 1 + rng.below(8);
        let (h, w) = (nh * ph, nw * pw);
        let x = rng.uniform_tensor::<f32>(Shape::nchw(n, d, h, w), -2.0, 2.0);
        let t = k::unfold(&x, ph, pw).unwrap();
        let back = k::fold(&t, ph, pw, h, w).unwrap();
        assert!(x.bit_eq(&back), "trial {trial} failed round trip");
    }
}
