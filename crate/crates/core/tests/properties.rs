mod common;

use binarygan_core::data::{binarize, encode_idx, parse_idx, RawImages};
use binarygan_core::harness::{postprocess_real, render_grid, Histogram, PostprocessStrategy};
use binarygan_core::neurons::{dbn_forward, preactivate};
use binarygan_core::rng::{stream, Stream};
use binarygan_core::{Tape, Tensor};
use common::{conv2d_oracle, conv_transpose2d_oracle, grad_check, project};
use proptest::prelude::*;

fn ints(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-4i32..=4, n).prop_map(move |v| Tensor::new(shape.clone(), v.into_iter().map(f64::from).collect()).unwrap())
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn geometry() -> impl Strategy<Value = Geometry> {
    (1usize..3, 1usize..3, 1usize..3, 1usize..4, 1usize..3)
        .prop_flat_map(|(n, ci, co, k, stride)| {
            (Just((n, ci, co, k, stride)), 0..k, k..k + 5, k..k + 5)
        })
        .prop_map(|((n, ci, co, k, stride), pad, h, w)| Geometry { n, ci, co, h, w, k, stride, pad })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_nested_loops(
        (g, x, k) in geometry().prop_flat_map(|g| (Just(g), ints(vec![g.n, g.ci, g.h, g.w]), ints(vec![g.co, g.ci, g.k, g.k])))
    ) {
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, g.stride, g.pad).unwrap();
        prop_assert_eq!(tape.value(y), &conv2d_oracle(&x, &k, g.stride, g.pad));
    }

    #[test]
    fn conv_transpose2d_matches_scatter(
        (g, y, k) in geometry().prop_flat_map(|g| (Just(g), ints(vec![g.n, g.ci, g.h, g.w]), ints(vec![g.ci, g.co, g.k, g.k])))
    ) {
        let mut tape = Tape::new();
        let (yv, kv) = (tape.constant(y.clone()), tape.constant(k.clone()));
        let out = tape.conv_transpose2d(yv, kv, g.stride, g.pad).unwrap();
        prop_assert_eq!(tape.value(out), &conv_transpose2d_oracle(&y, &k, g.stride, g.pad));
    }

    #[test]
    fn matmul_gradients_agree_with_differences(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::Eval);
        let a = common::random_tensor(&[m, k], &mut rng);
        let b = common::random_tensor(&[k, n], &mut rng);
        let report = grad_check(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.softplus(y);
            project(t, y, seed)
        }, None, &mut rng);
        prop_assert!(report.max_rel_err < 1e-4, "{}", report.worst);
    }

    #[test]
    fn binarize_is_idempotent(pixels in prop::collection::vec(any::<u8>(), 12)) {
        let raw = RawImages { count: 3, rows: 2, cols: 2, pixels };
        let once = binarize(&raw);
        let again = binarize(&RawImages {
            count: 3, rows: 2, cols: 2,
            pixels: once.values().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect(),
        });
        prop_assert_eq!(once.values(), again.values());
        prop_assert!(once.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn idx_round_trips(count in 1usize..4, rows in 1usize..6, cols in 1usize..6, seed in any::<u8>()) {
        let pixels = (0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let raw = RawImages { count, rows, cols, pixels };
        prop_assert_eq!(parse_idx(&encode_idx(&raw)).unwrap(), raw);
    }

    #[test]
    fn histogram_counts_sum_to_total(values in prop::collection::vec(1e-9f64..1.0, 0..500)) {
        let mut h = Histogram::empty();
        h.extend(values.iter().copied()).unwrap();
        prop_assert_eq!(h.counts().iter().sum::<u64>(), values.len() as u64);
        prop_assert_eq!(h.total(), values.len() as u64);
    }

    #[test]
    fn deterministic_neurons_fire_on_nonnegative_input(x in prop::collection::vec(-50.0f64..50.0, 1..40), k in 0i32..30) {
        let slope = 1.1f64.powi(k);
        let t = Tensor::new(vec![x.len()], x.clone()).unwrap();
        let (out, record) = dbn_forward(&t, slope);
        prop_assert_eq!(&record, &preactivate(&t, slope));
        for (&p, &b) in record.values.data().iter().zip(out.data()) {
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert_eq!(b, if p >= 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn threshold_postprocessing_is_idempotent(p in prop::collection::vec(0.0f64..1.0, 1..64)) {
        let t = Tensor::new(vec![p.len()], p).unwrap();
        let mut rng = stream(0, Stream::Eval);
        let once = postprocess_real(&t, PostprocessStrategy::Threshold, &mut rng);
        let twice = postprocess_real(&once, PostprocessStrategy::Threshold, &mut rng);
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn grid_layout_has_two_pixel_gutters() {
    let images = Tensor::<f32>::full(vec![4, 784], 0.0);
    let grid = render_grid(&images).unwrap();
    assert_eq!(grid.dimensions(), (2 + 2 * 30, 2 + 2 * 30));
    assert_eq!(grid.get_pixel(0, 0).0, [255]);
    assert_eq!(grid.get_pixel(2, 2).0, [0]);
    assert_eq!(grid.get_pixel(30, 10).0, [255]);
    assert!(render_grid(&Tensor::<f32>::zeros(vec![3, 784])).is_err());
}

#[test]
fn histogram_rejects_saturated_values() {
    for bad in [0.0, 1.0, f64::NAN, -0.5] {
        assert!(Histogram::empty().extend([bad]).is_err(), "{bad} accepted");
    }
}
