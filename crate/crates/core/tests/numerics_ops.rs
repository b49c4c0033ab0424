use exemplar_seg::numerics::gradcheck::GradCheckTolerance;
use exemplar_seg::{Error, Graph, Tensor, Tensor64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop cross-correlation.
fn naive_conv(
    x: &Tensor64,
    w: &Tensor64,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let (ci, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (co, k) = (w.dims()[0], w.dims()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.data()[(c * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_all_ones_center_is_nine() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(g.value(y).data()[4], 9.0);
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input: Tensor<f32> = random(&[1, 5, 4], &mut rng).cast();
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0f32));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn conv_matches_loop_oracle_on_random_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 4, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let (want, _, _) = naive_conv(&x, &w, b.data(), 1, 1);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.cast());
    let wv = g.constant(w.cast());
    let bv = g.constant(b.cast());
    let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
    for (got, want) in g.value(y).data().iter().zip(&want) {
        assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    match g.conv2d(x, w, None, 1, 1) {
        Err(Error::Dimension {
            axis,
            expected: 3,
            got: 2,
            ..
        }) => assert_eq!(axis, "input channels"),
        other => panic!("unexpected {other:?}"),
    }
    let w_even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.conv2d(x, w_even, None, 1, 0).is_err());
    let w_ok = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(
        g.conv2d(x, w_ok, None, 2, 0).is_err(),
        "(4-3)/2 is not integral"
    );
    let bias = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        g.conv2d(x, w_ok, Some(bias), 1, 1),
        Err(Error::Dimension { axis: "bias", .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn conv_matches_loop_oracle(seed in any::<u64>(), ci in 1usize..4, co in 1usize..4, h in 3usize..8, w in 3usize..8, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3) {
        let pad = k / 2;
        prop_assume!((h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[ci, h, w], &mut rng);
        let wt = random(&[co, ci, k, k], &mut rng);
        let b = random(&[co], &mut rng);
        let (want, oh, ow) = naive_conv(&x, &wt, b.data(), stride, pad);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(wt), g.constant(b));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        prop_assert_eq!(g.dims(y), &[co, oh, ow][..]);
        for (got, want) in g.value(y).data().iter().zip(&want) {
            prop_assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_constant_stays_constant() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 3, 5], 0.7));
    for (oh, ow) in [(1, 1), (7, 2), (6, 10)] {
        let y = g.bilinear_resize(x, oh, ow).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
}

#[test]
fn bilinear_half_pixel_example() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let y = g.bilinear_resize(x, 2, 4).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]
    );
}

#[test]
fn bilinear_up_then_box_down_is_smooth() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = random(&[1, 6, 6], &mut rng);
        let (lo, hi) = x.min_max();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let up = g.bilinear_resize(xv, 12, 12).unwrap();
        let u = g.value(up).data();
        assert!(u.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        let mut max_dev: f64 = 0.0;
        for y in 0..6 {
            for xx in 0..6 {
                let s: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| u[(2 * y + dy) * 12 + 2 * xx + dx])
                    .sum::<f64>()
                    / 4.0;
                max_dev = max_dev.max((s - x.data()[y * 6 + xx]).abs());
            }
        }
        assert!(max_dev < 0.5 * (hi - lo));
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros(&[4, 2, 2]));
    let s = g.softmax_channel(z);
    assert!(g.value(s).data().iter().all(|&v| v == 0.25));
    let big = g.constant(Tensor::from_vec(&[2, 1, 1], vec![1000.0, 0.0]).unwrap());
    let s = g.softmax_channel(big);
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r: Tensor<f32> = random(&[5, 3, 4], &mut rng).cast();
    let r = g.constant(
        Tensor::from_vec(&[5, 3, 4], r.data().iter().map(|v| v * 30.0).collect()).unwrap(),
    );
    let s = g.softmax_channel(r);
    let p = g.value(s).data();
    for px in 0..12 {
        let sum: f32 = (0..5).map(|c| p[c * 12 + px]).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!((0..5).all(|c| p[c * 12 + px] >= 0.0));
    }
}

#[test]
fn backward_of_sum_and_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = random(&[2, 3, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let t = g.param(&theta);
    let s = g.sum(t);
    g.backward(s).unwrap();
    assert!(g.grad(t).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let t = g.param(&theta);
    let sq = g.mul(t, t).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gr, th) in g.grad(t).unwrap().iter().zip(theta.data()) {
        assert_eq!(*gr, 2.0 * th);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let t = g.param(&Tensor::zeros(&[3]));
    assert!(matches!(g.backward(t), Err(Error::Contract(_))));
}

#[test]
fn second_backward_doubles_gradients_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 6, 6], &mut rng).cast::<f32>();
    let w = random(&[3, 2, 3, 3], &mut rng).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let (xv, wv) = (g.param(&x), g.param(&w));
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    let r = g.relu(y);
    let p = g.max_pool2(r).unwrap();
    let e = g.exp(p);
    let l = g.mean(e);
    g.backward(l).unwrap();
    let first: Vec<f32> = g.grad(wv).unwrap().to_vec();
    let first_x: Vec<f32> = g.grad(xv).unwrap().to_vec();
    g.backward(l).unwrap();
    for (a, b) in g.grad(wv).unwrap().iter().zip(&first) {
        assert_eq!(*a, 2.0 * b);
    }
    for (a, b) in g.grad(xv).unwrap().iter().zip(&first_x) {
        assert_eq!(*a, 2.0 * b);
    }
    g.zero_grad();
    assert!(g.grad(wv).is_none());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = random(&[3, 8, 8], &mut rng).cast::<f32>();
        let w = random(&[4, 3, 3, 3], &mut rng).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.constant(x), g.param(&w));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let s = g.softmax_channel(y);
        let l = g.sum(s);
        g.backward(l).unwrap();
        (g.value(y).data().to_vec(), g.grad(wv).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}

#[test]
fn every_op_passes_finite_differences() {
    let reports = exemplar_seg::gradsuite::op_checks(&GradCheckTolerance::default()).unwrap();
    assert_eq!(reports.len(), 20);
    for rep in reports {
        assert!(rep.passed, "{rep:?}");
    }
}
