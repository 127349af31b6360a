use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(t: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Central finite differences of `f` at `x`, compared element-wise to `analytic`.
fn assert_grad(name: &str, x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) {
    assert_eq!(x.shape(), analytic.shape(), "{name}: gradient shape");
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * EPS);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
        worst = worst.max(rel);
    }
    assert!(worst < TOL, "{name}: max relative gradient error {worst:e}");
}

#[test]
fn conv_same_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 1, 3, 4, 5], &mut rng);
    let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]);
    k.data_mut()[13] = 1.0;
    let y = conv3d_same(&x, &k, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_same_neighbor_kernel() {
    let x = Tensor::new(vec![1, 1, 1, 1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
    let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]);
    k.data_mut()[13] = 1.0; // centre
    k.data_mut()[14] = 1.0; // +w neighbour
    let y = conv3d_same(&x, &k, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(y.data(), &[3.0, 5.0, 3.0]);
}

/// Direct nested-loop convolution used as an oracle for the row kernels.
fn naive_conv_same(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, cin, d, h, wd] = x.dims5().unwrap();
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(&[n, cout, d, h, wd]);
    for ni in 0..n {
        for co in 0..cout {
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for xx in 0..wd as isize {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for kd in 0..3isize {
                                for kh in 0..3isize {
                                    for kw in 0..3isize {
                                        let (iz, iy, ix) = (z + kd - 1, y + kh - 1, xx + kw - 1);
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((ni * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * cin + ci) * 3 + kd as usize) * 3 + kh as usize) * 3 + kw as usize;
                                        s += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let oi = (((ni * cout + co) * d + z as usize) * h + y as usize) * wd + xx as usize;
                        out.data_mut()[oi] = s;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_same_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 3, 3, 4, 5], &mut rng);
    let w = rand_tensor(&[2, 3, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    let fast = conv3d_same(&x, &w, &b).unwrap();
    let slow = naive_conv_same(&x, &w, &b);
    for (a, e) in fast.data().iter().zip(slow.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_same_rejects_channel_mismatch() {
    let x = Tensor::<f32>::zeros(&[1, 2, 2, 2, 2]);
    let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
    assert!(matches!(conv3d_same(&x, &w, &Tensor::zeros(&[1])), Err(Error::Usage(_))));
}

#[test]
fn conv_same_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let r = rand_tensor(&[1, 3, 4, 4, 4], &mut rng);
    let g = conv3d_same_backward(&x, &w, &r).unwrap();
    assert_grad("conv input", &x, &g.input, |x| weighted_sum(&conv3d_same(x, &w, &b).unwrap(), &r));
    assert_grad("conv weight", &w, &g.weight, |w| weighted_sum(&conv3d_same(&x, w, &b).unwrap(), &r));
    assert_grad("conv bias", &b, &g.bias, |b| weighted_sum(&conv3d_same(&x, &w, b).unwrap(), &r));
}

#[test]
fn conv_1x1_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[1, 3, 2, 2, 2], &mut rng);
    let mut eye = Tensor::zeros(&[3, 3, 1, 1, 1]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    assert_eq!(conv3d_1x1(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);

    let x = Tensor::new(vec![1, 2, 1, 1, 1], vec![1.0f64, 2.0]).unwrap();
    let w = Tensor::new(vec![1, 2, 1, 1, 1], vec![2.0, 3.0]).unwrap();
    let b = Tensor::new(vec![1], vec![1.0]).unwrap();
    assert_eq!(conv3d_1x1(&x, &w, &b).unwrap().data(), &[9.0]);
}

#[test]
fn conv_1x1_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 2, 2, 4, 4], &mut rng);
    let w = rand_tensor(&[3, 2, 1, 1, 1], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let r = rand_tensor(&[2, 3, 2, 4, 4], &mut rng);
    let g = conv3d_1x1_backward(&x, &w, &r).unwrap();
    assert_grad("1x1 input", &x, &g.input, |x| weighted_sum(&conv3d_1x1(x, &w, &b).unwrap(), &r));
    assert_grad("1x1 weight", &w, &g.weight, |w| weighted_sum(&conv3d_1x1(&x, w, &b).unwrap(), &r));
    assert_grad("1x1 bias", &b, &g.bias, |b| weighted_sum(&conv3d_1x1(&x, &w, b).unwrap(), &r));
}

#[test]
fn maxpool_examples() {
    let c = Tensor::full(&[1, 2, 2, 4, 4], 1.5f32);
    let p = maxpool3d_2(&c).unwrap();
    assert_eq!(p.output.shape(), &[1, 2, 1, 2, 2]);
    assert!(p.output.data().iter().all(|&v| v == 1.5));
    // ties route to the first element of each window
    assert_eq!(p.argmax[0], 0);

    let x = Tensor::new(vec![1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
    let p = maxpool3d_2(&x).unwrap();
    assert_eq!(p.output.data(), &[7.0]);
    assert_eq!(p.argmax, vec![7]);

    let odd = Tensor::<f32>::zeros(&[1, 1, 3, 2, 2]);
    assert!(matches!(maxpool3d_2(&odd), Err(Error::Usage(_))));
}

#[test]
fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[1, 2, 4, 4, 4], &mut rng);
    let r = rand_tensor(&[1, 2, 2, 2, 2], &mut rng);
    let p = maxpool3d_2(&x).unwrap();
    let g = maxpool3d_2_backward(x.shape(), &p.argmax, &r).unwrap();
    assert_grad("maxpool", &x, &g, |x| weighted_sum(&maxpool3d_2(x).unwrap().output, &r));
}

#[test]
fn upconv_examples() {
    let x = Tensor::new(vec![1, 1, 1, 1, 1], vec![3.0f32]).unwrap();
    let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
    let y = upconv3d_2(&x, &w, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 3.0));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = rand_tensor(&[2, 3, 2, 2, 2], &mut rng);
    let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let y = upconv3d_2(&Tensor::zeros(&[1, 2, 1, 2, 3]), &w, &b).unwrap();
    assert_eq!(y.shape(), &[1, 3, 2, 4, 6]);
    for (c, &bias) in [0.5, -1.0, 2.0].iter().enumerate() {
        assert!(y.data()[c * 48..(c + 1) * 48].iter().all(|&v| v == bias));
    }
}

#[test]
fn upconv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[1, 2, 2, 2, 2], &mut rng);
    let w = rand_tensor(&[2, 3, 2, 2, 2], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let r = rand_tensor(&[1, 3, 4, 4, 4], &mut rng);
    let g = upconv3d_2_backward(&x, &w, &r).unwrap();
    assert_grad("upconv input", &x, &g.input, |x| weighted_sum(&upconv3d_2(x, &w, &b).unwrap(), &r));
    assert_grad("upconv weight", &w, &g.weight, |w| weighted_sum(&upconv3d_2(&x, w, &b).unwrap(), &r));
    assert_grad("upconv bias", &b, &g.bias, |b| weighted_sum(&upconv3d_2(&x, &w, b).unwrap(), &r));
}

#[test]
fn relu_examples_and_gradient() {
    let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    let pos = Tensor::new(vec![2], vec![0.5f32, 3.0]).unwrap();
    assert_eq!(relu(&pos), pos);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = rand_tensor(&[1, 2, 2, 4, 4], &mut rng);
    // keep inputs away from the kink
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let r = rand_tensor(x.shape(), &mut rng);
    let g = relu_backward(&x, &r).unwrap();
    assert_grad("relu", &x, &g, |x| weighted_sum(&relu(x), &r));
}

#[test]
fn concat_examples_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&[2, 2, 1, 2, 2], &mut rng);
    let b = rand_tensor(&[2, 3, 1, 2, 2], &mut rng);
    let c = concat_channels(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 5, 1, 2, 2]);
    // sample 1, channel 2 is b's channel 0
    assert_eq!(&c.data()[(5 + 2) * 4..(5 + 3) * 4], &b.data()[3 * 4..4 * 4]);
    assert_eq!(&c.data()[..8], &a.data()[..8]);

    let empty = Tensor::zeros(&[2, 0, 1, 2, 2]);
    assert_eq!(concat_channels(&a, &empty).unwrap(), a);

    let bad = Tensor::zeros(&[2, 1, 1, 2, 3]);
    assert!(matches!(concat_channels(&a, &bad), Err(Error::Usage(_))));

    let r = rand_tensor(c.shape(), &mut rng);
    let (ga, gb) = split_channels(&r, 2).unwrap();
    assert_grad("concat a", &a, &ga, |a| weighted_sum(&concat_channels(a, &b).unwrap(), &r));
    assert_grad("concat b", &b, &gb, |b| weighted_sum(&concat_channels(&a, b).unwrap(), &r));
}

#[test]
fn softmax_examples() {
    let t = |v: [f64; 3]| Tensor::new(vec![1, 3, 1, 1, 1], v.to_vec()).unwrap();
    let u = softmax_channels(&t([0.0, 0.0, 0.0])).unwrap();
    assert!(u.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let big = softmax_channels(&t([1000.0, 0.0, 0.0])).unwrap();
    assert!(big.is_finite());
    assert!((big.data()[0] - 1.0).abs() < 1e-12);

    let p = softmax_channels(&t([1.0, 2.0, 3.0])).unwrap();
    for (got, want) in p.data().iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((got - want).abs() < 1e-5);
    }
}

#[test]
fn softmax_normalized_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[2, 3, 2, 3, 4], &mut rng).cast::<f32>();
    let p = softmax_channels(&x).unwrap();
    let vol = 24;
    for n in 0..2 {
        for v in 0..vol {
            let s: f32 = (0..3).map(|k| p.data()[(n * 3 + k) * vol + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..3).all(|k| {
                let q = p.data()[(n * 3 + k) * vol + v];
                q > 0.0 && q < 1.0
            }));
        }
    }
    let mut shifted = x.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 5.0);
    let q = softmax_channels(&shifted).unwrap();
    for (a, b) in p.data().iter().zip(q.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[1, 3, 2, 2, 2], &mut rng);
    let r = rand_tensor(x.shape(), &mut rng);
    let p = softmax_channels(&x).unwrap();
    let g = softmax_channels_backward(&p, &r).unwrap();
    assert_grad("softmax", &x, &g, |x| weighted_sum(&softmax_channels(x).unwrap(), &r));
}

#[test]
fn he_init_statistics() {
    assert_eq!(he_distribution(2).unwrap().std_dev(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t = he_init(&[100_000], 27, &mut rng).unwrap();
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let target = (2.0f64 / 27.0).sqrt();
    assert!((target - 0.27217).abs() < 1e-5);
    assert!((var.sqrt() - target).abs() / target < 0.02);

    let a = he_init(&[4, 2, 3, 3, 3], 54, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = he_init(&[4, 2, 3, 3, 3], 54, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert!(he_init(&[1], 0, &mut rng).is_err());
}

#[test]
fn sgd_step_examples() {
    let mut p = vec![Parameter::new("w", Tensor::new(vec![1], vec![1.0]).unwrap())];
    p[0].grad.data_mut()[0] = 0.5;
    sgd_step(&mut p, 5e-4, 1).unwrap();
    assert!((p[0].value.data()[0] - 0.99975).abs() < 1e-7);
    assert_eq!(p[0].grad.data()[0], 0.0);

    let before = p[0].value.clone();
    sgd_step(&mut p, 5e-4, 2).unwrap();
    assert_eq!(p[0].value, before);
}

#[test]
fn sgd_two_steps_equal_one_summed_step() {
    let init = Tensor::new(vec![3], vec![0.3f32, -1.2, 2.0]).unwrap();
    let grad = [0.25f32, -0.5, 1.0];
    let mut twice = vec![Parameter::new("w", init.clone())];
    for it in 0..2 {
        twice[0].grad.data_mut().copy_from_slice(&grad);
        sgd_step(&mut twice, 1e-3, it).unwrap();
    }
    let mut once = vec![Parameter::new("w", init)];
    once[0].grad.data_mut().iter_mut().zip(grad).for_each(|(g, v)| *g = 2.0 * v);
    sgd_step(&mut once, 1e-3, 0).unwrap();
    for (a, b) in twice[0].value.data().iter().zip(once[0].value.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn sgd_rejects_non_finite_gradient() {
    let mut p = vec![Parameter::new("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())];
    p[0].grad.data_mut()[1] = f32::NAN;
    let err = sgd_step(&mut p, 1e-3, 17).unwrap_err();
    assert!(matches!(err, Error::Divergence { iteration: 17, .. }));
    assert_eq!(p[0].value.data(), &[1.0, 2.0]);
}

#[test]
fn forward_ops_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[2, 4, 4, 8, 8], &mut rng).cast::<f32>();
    let w = rand_tensor(&[6, 4, 3, 3, 3], &mut rng).cast::<f32>();
    let b = Tensor::zeros(&[6]);
    let a = conv3d_same(&x, &w, &b).unwrap();
    for _ in 0..3 {
        assert_eq!(conv3d_same(&x, &w, &b).unwrap(), a);
    }
}
