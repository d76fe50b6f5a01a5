use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Six nested loops, no unfolding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (m, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * m * oh * ow];
    for ni in 0..n {
        for mi in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[mi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((mi * c + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * m + mi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, m, oh, ow], out).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);
}

#[test]
fn conv_zero_kernel_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let wi = tape.constant(w.clone());
    let y = tape.conv2d(xi, wi, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    let oracle = naive_conv(&x, &w, &[0.0], 1, 0);
    assert!(tape.value(y).max_abs_diff(&oracle) < 1e-6);

    // wider coverage: strides, padding, multiple channels
    for (stride, pad) in [(1, 1), (2, 0), (2, 1), (3, 2)] {
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let wi = tape.constant(w.clone());
        let bi = tape.constant(Tensor::vector(b.clone()));
        let y = tape.conv2d(xi, wi, Some(bi), stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, &b, stride, pad);
        assert_eq!(tape.value(y).shape(), oracle.shape());
        assert!(tape.value(y).max_abs_diff(&oracle) < 1e-10);
    }
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    let w = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(tape.conv2d(x, w, None, 1, 0).is_err());
}

#[test]
fn batchnorm_identity_on_standardized_input() {
    // per channel: values {-1, 1} have mean 0 and biased variance 1
    let x = t(&[2, 2, 1, 2], &[-1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let (y, stats) = tape.batchnorm_train(xi, g, b, 1e-5).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
    assert_eq!(stats.mean, vec![0.0, 0.0]);
    assert!((stats.var[0] - 4.0 / 3.0).abs() < 1e-12);
}

#[test]
fn batchnorm_zero_gamma_returns_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[4, 3, 2, 2], 2.0, &mut rng));
    let g = tape.constant(Tensor::zeros(&[3]));
    let b = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let (y, _) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        let c = (i / 4) % 3;
        assert_eq!(*v, [0.5, -1.0, 2.0][c]);
    }
    let e = tape.batchnorm_eval(x, g, b, &[0.0; 3], &[1.0; 3], 1e-5).unwrap();
    assert_eq!(tape.value(e).data(), tape.value(y).data());
}

#[test]
fn batchnorm_normalizes_random_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut data = Tensor::randn(&[8, 3, 4, 4], 1.0, &mut rng);
    for (i, v) in data.data_mut().iter_mut().enumerate() {
        let c = (i / 16) % 3;
        *v = *v * (c as f64 + 0.5) + 3.0 * c as f64;
    }
    let mut tape = Tape::new();
    let x = tape.constant(data);
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
    let y = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..8)
            .flat_map(|n| y.data()[(n * 3 + c) * 16..][..16].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn activations() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(t(&[1], &[0.0]));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x);
    let loss = tape.sum(r);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);

    // subgradient at exactly zero is zero
    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[0.0]));
    let r = tape.relu(x);
    let loss = tape.sum(r);
    assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn backward_basics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(xv.clone());
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));

    let mut tape = Tape::new();
    let x = tape.param(xv.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let loss = tape.affine(s, 0.5, 0.0);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().max_abs_diff(&xv) < 1e-15);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let p = tape.param(Tensor::ones(&[2]));
    let y = tape.mul(c, p).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(p).is_some());
    assert_eq!(g.params().count(), 1);
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central differences over every entry of every parameter.
fn check_fd(params: &[Tensor], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    let g = tape.backward(loss).unwrap();
    let eval = |ps: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let l = build(&mut tape, &ids);
        tape.value(l).item()
    };
    let eps = 1e-3;
    for (pi, p) in params.iter().enumerate() {
        let analytic = g.wrt(ids[pi], p.shape());
        for j in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += eps;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[j];
            assert!(rel_err(a, fd) <= 1e-3, "param {pi}[{j}]: analytic {a} vs fd {fd}");
        }
    }
}

#[test]
fn finite_differences_conv_bn_pool_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(&[3, 2, 6, 6], 1.0, &mut rng);
    let params = vec![
        Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng),
        Tensor::randn(&[3], 0.1, &mut rng),
        Tensor::uniform(&[3], 0.5, 1.5, &mut rng),
        Tensor::randn(&[3], 0.1, &mut rng),
        Tensor::randn(&[4, 3], 0.5, &mut rng),
        Tensor::randn(&[4], 0.1, &mut rng),
    ];
    let labels = [0usize, 3, 1];
    check_fd(&params, |tape, p| {
        let xi = tape.constant(x.clone());
        let c = tape.conv2d(xi, p[0], Some(p[1]), 1, 1).unwrap();
        let (b, _) = tape.batchnorm_train(c, p[2], p[3], 1e-5).unwrap();
        let s = tape.sigmoid(b);
        let m = tape.maxpool2d(s, 2, 2).unwrap();
        let a = tape.avgpool2d(m, 3, 3).unwrap();
        let f = tape.flatten(a).unwrap();
        let z = tape.linear(f, p[4], Some(p[5])).unwrap();
        tape.cross_entropy(z, &labels).unwrap()
    });
}

#[test]
fn finite_differences_channel_mixing() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
    let params = vec![Tensor::randn(&[3], 1.0, &mut rng), Tensor::randn(&[3], 1.0, &mut rng)];
    check_fd(&params, |tape, p| {
        let ai = tape.constant(a.clone());
        let bi = tape.constant(b.clone());
        let beta = tape.sigmoid(p[0]);
        let beta_t = tape.affine(beta, -1.0, 1.0);
        let ma = tape.channel_scale(ai, beta).unwrap();
        let mb = tape.channel_scale(bi, beta_t).unwrap();
        let mix = tape.add(ma, mb).unwrap();
        let w = tape.channel_scale(mix, p[1]).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let d = tape.sub(sq, mix).unwrap();
        tape.mean(d)
    });
}

#[test]
fn finite_differences_eval_batchnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = vec![
        Tensor::randn(&[4, 2], 1.0, &mut rng),
        Tensor::uniform(&[2], 0.5, 1.5, &mut rng),
        Tensor::randn(&[2], 1.0, &mut rng),
    ];
    check_fd(&params, |tape, p| {
        let y = tape.batchnorm_eval(p[0], p[1], p[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5).unwrap();
        let r = tape.relu(y);
        let s = tape.mul(r, r).unwrap();
        tape.sum(s)
    });
}

#[test]
fn repeated_backward_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 1, 5, 5], 1.0, &mut rng));
    let w = tape.param(Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng));
    let c = tape.conv2d(x, w, None, 2, 1).unwrap();
    let r = tape.relu(c);
    let loss = tape.mean(r);
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn forward_ops_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let run = || {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let wi = tape.constant(w.clone());
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let c = tape.conv2d(xi, wi, None, 1, 0).unwrap();
        let n = tape.batchnorm_eval(c, g, b, &[0.1; 3], &[2.0; 3], 1e-5).unwrap();
        let r = tape.relu(n);
        tape.value(r).clone()
    };
    assert_eq!(run().to_le_bytes(), run().to_le_bytes());
}
