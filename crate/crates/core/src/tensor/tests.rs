use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fd_tol() -> f64 {
    1e-4
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut t = Tape::new();
    let i = t.constant(Tensor::identity(2));
    let m = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let p = t.matmul(i, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
    let b = t.constant(Tensor::matrix(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap());
    let p = t.matmul(a, b).unwrap();
    assert_eq!(t.value(p).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_sum_gradient_is_column_sums_of_b_transposed() {
    let mut r = rng(1);
    let a0 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b0 = Tensor::randn(&[4, 2], 1.0, &mut r);
    let mut t = Tape::new();
    let a = t.param(a0.clone());
    let b = t.constant(b0.clone());
    let p = t.matmul(a, b).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    let ga = g.get(a).unwrap();
    // d/dA_ij sum(AB) = sum_k B_jk
    for i in 0..3 {
        for j in 0..4 {
            let want: f64 = (0..2).map(|k| b0.at(&[j, k])).sum();
            assert!((ga.at(&[i, j]) - want).abs() < 1e-12);
        }
    }
    let b_closure = b0.clone();
    let err = check_gradients(
        move |t, x| {
            let b = t.constant(b_closure.clone());
            let p = t.matmul(x, b)?;
            Ok(t.sum(p))
        },
        &a0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn conv_zero_kernel_and_delta_kernel() {
    let mut r = rng(2);
    let x0 = Tensor::randn(&[1, 5, 5], 1.0, &mut r);
    let mut t = Tape::new();
    let x = t.constant(x0.clone());
    let kz = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let y = t.conv2d(x, kz, 1, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.set(&[0, 0, 1, 1], 1.0);
    let kd = t.constant(delta);
    let y = t.conv2d(x, kd, 1, 1).unwrap();
    assert_eq!(t.value(y), &x0);
}

#[test]
fn conv_output_size_follows_stride_and_padding() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 3, 7, 6]));
    let k = t.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = t.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[2, 4, 4, 3]);
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[2, 4, 5, 4]);
}

#[test]
fn conv_kernel_larger_than_input_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 2]));
    let k = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(t.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut r = rng(3);
    let x0 = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
    let k0 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let w0 = Tensor::randn(&[3, 5, 5], 1.0, &mut r);
    let (k1, w1) = (k0.clone(), w0.clone());
    let err_x = check_gradients(
        move |t, x| {
            let k = t.constant(k1.clone());
            let w = t.constant(w1.clone());
            let y = t.conv2d(x, k, 1, 1)?;
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        },
        &x0,
        1e-5,
    )
    .unwrap();
    let (x2, w2) = (x0.clone(), w0.clone());
    let err_k = check_gradients(
        move |t, k| {
            let x = t.constant(x2.clone());
            let w = t.constant(w2.clone());
            let y = t.conv2d(x, k, 1, 1)?;
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        },
        &k0,
        1e-5,
    )
    .unwrap();
    assert!(err_x < fd_tol() && err_k < fd_tol(), "{err_x} {err_k}");
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).item().unwrap(), 0.5);

    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![4.0]));
    let y = t.pow_scalar(x, 0.5).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!((g.get(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn elementwise_domain_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(t.log(x), Err(Error::Domain(_))));
    let y = t.constant(Tensor::from_vec(vec![1.0, 1.0]));
    assert!(matches!(t.div(y, x), Err(Error::Domain(_))));
    let n = t.constant(Tensor::from_vec(vec![-1.0]));
    assert!(matches!(t.pow_scalar(n, 0.5), Err(Error::Domain(_))));
    let z = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(t.add(y, z), Err(Error::Dimension(_))));
}

#[test]
fn min_max_ties_route_gradient_to_first_argument() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 0.5, 2.0]));
    let m = t.min_scalar(x, 1.0);
    let s = t.sum(m);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 0.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 0.5, 2.0]));
    let m = t.max_scalar(x, 1.0);
    let s = t.sum(m);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 1.0]);
}

#[test]
fn reduction_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let s = t.sum(x);
    assert_eq!(t.value(s).item().unwrap(), 10.0);

    let x4 = t.reshape(x, &[1, 1, 2, 2]).unwrap();
    let p = t.max_pool2(x4).unwrap();
    assert_eq!(t.value(p).data(), &[4.0]);
    let ps = t.sum(p);
    let g = t.backward(ps).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

    let mut t = Tape::new();
    let i = t.constant(Tensor::identity(3));
    let tr = t.trace(i).unwrap();
    assert_eq!(t.value(tr).item().unwrap(), 3.0);
    let bad = t.constant(Tensor::zeros(&[2, 3]));
    assert!(t.sum_axis(bad, 2).is_err());
    assert!(t.trace(bad).is_err());
}

#[test]
fn adaptive_pool_bins_cover_the_input() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
    let y = t.adaptive_avg_pool(x, 2).unwrap();
    assert_eq!(t.value(y).data(), &[2.5, 4.5, 10.5, 12.5]);
    let one = t.adaptive_avg_pool(x, 1).unwrap();
    assert_eq!(t.value(one).data(), &[7.5]);
    let c = t.constant(Tensor::full(&[1, 1, 1], 3.0));
    let up = t.adaptive_avg_pool(c, 2).unwrap();
    assert_eq!(t.value(up).data(), &[3.0; 4]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_of_sum_and_sum_of_squares() {
    let mut r = rng(4);
    let x0 = Tensor::randn(&[2, 3, 2], 1.0, &mut r);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let sq = t.square(x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    let want = x0.map(|v| 2.0 * v);
    assert_eq!(g.get(x).unwrap(), &want);
}

#[test]
fn composite_conv_pool_matmul_chain_matches_finite_differences() {
    let mut r = rng(5);
    let x0 = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r);
    let k0 = Tensor::randn(&[3, 2, 3, 3], 0.4, &mut r);
    let w0 = Tensor::randn(&[27, 2], 0.3, &mut r);
    let err = check_gradients(
        move |t, x| {
            let k = t.constant(k0.clone());
            let w = t.constant(w0.clone());
            let y = t.conv2d(x, k, 1, 1)?;
            let y = t.sigmoid(y);
            let y = t.max_pool2(y)?;
            let y = t.reshape(y, &[1, 27])?;
            let y = t.matmul(y, w)?;
            let y = t.square(y)?;
            Ok(t.sum(y))
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < fd_tol(), "{err}");
}

#[test]
fn check_gradients_of_sum_is_exact() {
    let mut r = rng(6);
    let x0 = Tensor::randn(&[4, 3], 1.0, &mut r);
    let err = check_gradients(|t, x| Ok(t.sum(x)), &x0, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn check_gradients_of_linear_mse() {
    let mut r = rng(7);
    let w0 = Tensor::randn(&[4, 3], 0.5, &mut r);
    let xs = Tensor::randn(&[5, 4], 1.0, &mut r);
    let ys = Tensor::randn(&[5, 3], 1.0, &mut r);
    let err = check_gradients(
        move |t, w| {
            let x = t.constant(xs.clone());
            let y = t.constant(ys.clone());
            let p = t.matmul(x, w)?;
            let d = t.sub(p, y)?;
            let d = t.square(d)?;
            Ok(t.mean(d))
        },
        &w0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Every differentiable op, each wrapped to a scalar through a fixed random
/// weighting so that no output entry gets a trivially uniform gradient.
#[test]
fn every_op_matches_finite_differences_at_ten_points() {
    for c in crate::verify::op_cases() {
        let err = crate::verify::check_case(&c, 10, None).unwrap();
        assert!(err < fd_tol(), "{}: rel err {err}", c.name);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(8);
    let x0 = Tensor::randn(&[3, 3], 1.0, &mut r);
    let grad_of = |fa: f64, fb: f64| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let e = t.exp(x);
        let f = t.sum(e);
        let g = t.batch_gram(x).unwrap();
        let g = t.sum(g);
        let a = t.mul_scalar(f, fa);
        let b = t.mul_scalar(g, fb);
        let l = t.add(a, b).unwrap();
        t.backward(l).unwrap().get(x).unwrap().clone()
    };
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    let combo = grad_of(2.5, -0.75);
    for i in 0..9 {
        let want = 2.5 * gf.data()[i] - 0.75 * gg.data()[i];
        assert!((combo.data()[i] - want).abs() < 1e-10);
    }
}

#[test]
fn seeded_forward_backward_is_bit_identical() {
    let run = || {
        let mut r = rng(9);
        let x0 = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut r);
        let k0 = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut r);
        let mut t = Tape::new();
        let x = t.constant(x0);
        let k = t.param(k0);
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let y = t.relu(y);
        let y = t.max_pool2(y).unwrap();
        let y = t.square(y).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap().get(k).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn tape_is_topologically_ordered() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2, 2]));
    let y = t.exp(x);
    let z = t.mul(x, y).unwrap();
    let _ = t.sum(z);
    for (i, parents) in t.parent_lists().iter().enumerate() {
        assert!(parents.iter().all(|&p| p < i));
    }
}

#[test]
fn injected_fault_breaks_the_gradient_check() {
    let x0 = Tensor::from_vec(vec![0.01, 0.02, 0.05]);
    let f = |t: &mut Tape, x: Var| {
        let y = t.mul_scalar(x, 10.0);
        let y = t.min_scalar(y, 1.0);
        let y = t.square(y)?;
        Ok(t.sum(y))
    };
    let ok = check_gradients(f, &x0, 1e-6).unwrap();
    assert!(ok < 1e-6);
    let broken = check_gradients(
        move |t: &mut Tape, x: Var| {
            t.inject_fault(OpKind::MinScalar);
            f(t, x)
        },
        &x0,
        1e-6,
    )
    .unwrap();
    assert!(broken > 0.5, "{broken}");
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn gradient_of_any_tensor_has_its_shape(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor::randn(&[rows, cols], 1.0, &mut r);
            let mut t = Tape::new();
            let x = t.param(x0);
            let g = t.batch_gram(x).unwrap();
            let s = t.sum(g);
            let grads = t.backward(s).unwrap();
            prop_assert_eq!(grads.get(x).unwrap().shape(), &[rows, cols]);
        }
    }
}
