use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use svbrdf_tensor::gradcheck::{check_gradients, run_op_suite};
use svbrdf_tensor::{
    ConvTranspose2dSpec, Conv2dSpec, Graph, PadMode, Padding, ParamSet, Tensor, INSTANCE_NORM_EPS,
};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

#[test]
fn identity_1x1_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[2, 3, 4, 5]);
    let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv2d(xv, wv, None, Conv2dSpec::new(1, Padding::NONE)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn strided_conv_halves_512() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 512, 512]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, Conv2dSpec::new(2, Padding::zero(1))).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 256, 256]);
}

#[test]
fn transposed_conv_doubles_256() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 256, 256]));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g
        .conv_transpose2d(x, w, None, ConvTranspose2dSpec::UPSAMPLE2)
        .unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 512, 512]);
    // zero input, no bias -> zero output
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = ConvTranspose2dSpec::UPSAMPLE2;
    for _ in 0..20 {
        let w = randn(&mut rng, &[4, 3, 3, 3]); // conv: 3 -> 4 channels; convT: 4 -> 3
        let x = randn(&mut rng, &[2, 3, 8, 8]);
        let y = randn(&mut rng, &[2, 4, 4, 4]);
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv2d(xv, wv, None, spec.adjoint()).unwrap();
        let ty = g.conv_transpose2d(yv, wv, None, spec).unwrap();
        let lhs = g.value(cx).dot(&y).unwrap();
        let rhs = x.dot(g.value(ty)).unwrap();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    assert!(g.conv2d(x, w, None, Conv2dSpec::new(1, Padding::zero(1))).is_err());
    let w2 = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let bad_bias = g.constant(Tensor::zeros(&[3]));
    assert!(g
        .conv2d(x, w2, Some(bad_bias), Conv2dSpec::new(1, Padding::zero(1)))
        .is_err());
    let flat = g.constant(Tensor::zeros(&[8, 8]));
    assert!(g.conv2d(flat, w2, None, Conv2dSpec::new(1, Padding::zero(1))).is_err());
}

#[test]
fn instance_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[2, 3, 6, 6]).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.instance_norm(xv, gamma, beta, INSTANCE_NORM_EPS).unwrap();
    for plane in g.value(y).data().chunks(36) {
        let mean = plane.iter().sum::<f64>() / 36.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn instance_norm_constant_channel_gives_shift() {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::full(&[1, 2, 3, 3], 4.0));
    let gamma = g.constant(Tensor::full(&[2], 2.0));
    let beta = g.constant(Tensor::new(&[2], vec![0.0, 0.5]).unwrap());
    let y = g.instance_norm(xv, gamma, beta, INSTANCE_NORM_EPS).unwrap();
    let d = g.value(y).data();
    assert!(d[..9].iter().all(|&v| v == 0.0));
    assert!(d[9..].iter().all(|&v| v == 0.5));
}

#[test]
fn instance_norm_rejects_single_pixel() {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let p = g.constant(Tensor::zeros(&[1]));
    assert!(g.instance_norm(xv, p, p, INSTANCE_NORM_EPS).is_err());
}

#[test]
fn activation_values() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let l = g.leaky_relu(x, 0.2);
    assert_eq!(g.value(l).data(), &[-0.2, 0.0, 2.0]);
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = g.sigmoid(x);
    assert!((g.value(s).data()[1] - 0.5).abs() < 1e-7);
}

#[test]
fn resize_half_of_constant_is_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 2, 8, 6], 0.7));
    let y = g.resize_half(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 4, 3]);
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(g.resize_half(odd).is_err());
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    assert!(g.log(x).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let s = g.sum(xv);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[1, 2, 3, 3]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.square(xv);
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    for (gi, xi) in grads.get(xv).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*gi, 2.0 * xi);
    }
}

#[test]
fn fan_out_sums_cotangents() {
    // loss = sum(x * x) built from the same leaf twice -> 2x
    let x = Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let y = g.mul(xv, xv).unwrap();
    let a = g.add(y, xv).unwrap();
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap().data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn unreachable_leaves_get_zero() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(&[2], 1.0), true);
    let b = g.leaf(Tensor::full(&[3], 1.0), true);
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(b).is_none());
    assert_eq!(grads.get_or_zeros(b), Tensor::zeros(&[3]));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(&[2], 1.0), true);
    let r = g.relu(a);
    assert!(g.backward(r).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(&[2], 3.0), true);
    let d = g.detach(a);
    let p = g.mul(a, d).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn forward_backward_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 3, 8, 8]).cast::<f32>();
        let w = randn(&mut rng, &[4, 3, 3, 3]).cast::<f32>();
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let wv = g.leaf(w, true);
        let y = g.conv2d(xv, wv, None, Conv2dSpec::new(2, Padding::reflect(1))).unwrap();
        let s = g.square(y);
        let m = g.mean(s);
        let grads = g.backward(m).unwrap();
        (g.value(m).item(), grads.get_or_zeros(wv))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn every_op_matches_finite_differences_f64() {
    for s in run_op_suite(100, 2024).unwrap() {
        assert!(s.max_rel_error <= 1e-4, "{}: rel error {}", s.op, s.max_rel_error);
    }
}

/// c7s1-style conv, instance norm, relu and a residual connection in
/// 32-bit precision on an 8x8 input.
#[test]
fn composed_block_gradient_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs: Vec<Tensor<f32>> = vec![
        randn(&mut rng, &[1, 3, 8, 8]).cast(),
        randn(&mut rng, &[4, 3, 3, 3]).map(|v| 0.3 * v).cast(),
        Tensor::full(&[4], 1.0),
        Tensor::zeros(&[4]),
        randn(&mut rng, &[4, 4, 3, 3]).map(|v| 0.3 * v).cast(),
        randn(&mut rng, &[4]).cast(),
    ];
    let proj = randn(&mut rng, &[1, 4, 8, 8]).cast::<f32>();
    let build = move |g: &mut Graph<f32>, v: &[svbrdf_tensor::Var]| {
        let spec = Conv2dSpec::new(1, Padding::reflect(1));
        let h = g.conv2d(v[0], v[1], None, spec)?;
        let h = g.instance_norm(h, v[2], v[3], INSTANCE_NORM_EPS)?;
        let h = g.relu(h);
        let r = g.conv2d(h, v[4], Some(v[5]), spec)?;
        let y = g.add(h, r)?;
        let p = g.constant(proj.clone());
        let y = g.mul(y, p)?;
        Ok(g.sum(y))
    };
    let check = check_gradients(build, &inputs, 1e-3).unwrap();
    assert!(check.rel_error <= 1e-3, "rel error {}", check.rel_error);
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut set = ParamSet::<f32>::new();
    set.add_normal("a", &[3, 2, 4, 4], 0.02, &mut rng);
    set.add("b", Tensor::full(&[3], 1.0));
    let path = dir.path().join("net.ckpt");
    set.save(&path).unwrap();
    assert_eq!(ParamSet::load(&path).unwrap(), set);
}

#[test]
fn padding_modes_round_through_conv() {
    // A reflect-padded 3x3 box filter on a constant image stays constant.
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 5, 5], 2.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = g
        .conv2d(x, w, None, Conv2dSpec::new(1, Padding::uniform(1, PadMode::Reflect)))
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
}

proptest! {
    #[test]
    fn leaky_relu_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2], vec![a, b]).unwrap());
        let y = g.leaky_relu(x, 0.2);
        let d = g.value(y).data();
        prop_assert_eq!(a < b, d[0] < d[1]);
    }
}
