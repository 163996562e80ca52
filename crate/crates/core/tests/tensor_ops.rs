use binet_core::tensor::{grad_check, Graph, Tensor, Var};
use binet_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type LinearOp = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Direct quadruple loop; independent of the im2col/gemm path.
fn naive_conv1d(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, t) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        for j in 0..t_out {
            let mut acc = b[co];
            for ci in 0..c_in {
                for kk in 0..k {
                    let pos = (j * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < t {
                        acc += w.data()[(co * c_in + ci) * k + kk] * x.data()[ci * t + pos as usize];
                    }
                }
            }
            out[co * t_out + j] = acc;
        }
    }
    out
}

/// Scatter form of the transposed convolution, written from its definition.
fn naive_conv_transpose1d(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, t) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[1], w.shape()[2]);
    let t_out = (t - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        for v in out[co * t_out..(co + 1) * t_out].iter_mut() {
            *v = b[co];
        }
    }
    for ci in 0..c_in {
        for i in 0..t {
            for co in 0..c_out {
                for kk in 0..k {
                    let pos = (i * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < t_out {
                        out[co * t_out + pos as usize] += x.data()[ci * t + i] * w.data()[(ci * c_out + co) * k + kk];
                    }
                }
            }
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let w = g.constant(Tensor::new([1, 1, 1], vec![1.0]).unwrap());
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv1d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn conv1d_box_filter_stride_two() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 4], 1.0));
    let w = g.constant(Tensor::new([1, 1, 2], vec![1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv1d(x, w, Some(b), 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 2]);
    assert_eq!(g.value(y).data(), &[2.0, 2.0]);
}

#[test]
fn conv1d_random_config_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 17]);
    let w = rand_tensor(&mut rng, &[4, 3, 5]);
    let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let bv = g.constant(Tensor::new([4], b.clone()).unwrap());
    let y = g.conv1d(xv, wv, Some(bv), 2, 2).unwrap();
    assert_eq!(g.shape(y), &[4, 9]);
    assert!(max_abs(g.value(y).data(), &naive_conv1d(&x, &w, &b, 2, 2)) <= 1e-12);
}

#[test]
fn conv1d_hundred_random_configs_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let c_in = rng.random_range(1..5);
        let c_out = rng.random_range(1..5);
        let k = rng.random_range(1..7);
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..3);
        let t = rng.random_range(k.max(2)..40);
        let x = rand_tensor(&mut rng, &[c_in, t]);
        let w = rand_tensor(&mut rng, &[c_out, c_in, k]);
        let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bv = g.constant(Tensor::new([c_out], b.clone()).unwrap());
        let y = g.conv1d(xv, wv, Some(bv), stride, pad).unwrap();
        let err = max_abs(g.value(y).data(), &naive_conv1d(&x, &w, &b, stride, pad));
        assert!(err <= 1e-12, "c_in={c_in} c_out={c_out} k={k} s={stride} p={pad} t={t}: {err}");
    }
}

#[test]
fn conv1d_shape_errors_name_the_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([2, 8]));
    let w = g.constant(Tensor::zeros([1, 3, 3]));
    let err = g.conv1d(x, w, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("axis 0"), "{err}");

    let w = g.constant(Tensor::zeros([1, 2, 9]));
    let err = g.conv1d(x, w, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("axis 1"), "{err}");
}

#[test]
fn conv_transpose_single_tap_spread() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 1], vec![1.0]).unwrap());
    let w = g.constant(Tensor::new([1, 1, 2], vec![1.0, 1.0]).unwrap());
    let y = g.conv_transpose1d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0]);
}

#[test]
fn conv_transpose_hundred_random_configs_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let c_in = rng.random_range(1..5);
        let c_out = rng.random_range(1..5);
        let k = rng.random_range(1..7);
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..usize::div_ceil(k, 2));
        let t = rng.random_range(2..30);
        let x = rand_tensor(&mut rng, &[c_in, t]);
        let w = rand_tensor(&mut rng, &[c_in, c_out, k]);
        let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bv = g.constant(Tensor::new([c_out], b.clone()).unwrap());
        let y = g.conv_transpose1d(xv, wv, Some(bv), stride, pad).unwrap();
        let err = max_abs(g.value(y).data(), &naive_conv_transpose1d(&x, &w, &b, stride, pad));
        assert!(err <= 1e-12, "{err}");
    }
}

/// ⟨conv1d(x, W), y⟩ = ⟨x, conv_transpose1d(y, W)⟩ with zero bias.
#[test]
fn conv_adjoint_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let a = rng.random_range(1..5);
        let bch = rng.random_range(1..5);
        let k = rng.random_range(1..7);
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..usize::div_ceil(k, 2));
        let t_y = rng.random_range(2..20);
        // choose T_x so the transposed conv lands exactly on it
        let t_x = (t_y - 1) * stride + k - 2 * pad;
        let x = rand_tensor(&mut rng, &[bch, t_x]);
        let y = rand_tensor(&mut rng, &[a, t_y]);
        let w = rand_tensor(&mut rng, &[a, bch, k]);
        let mut g = Graph::new();
        let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w));
        let cx = g.conv1d(xv, wv, None, stride, pad).unwrap();
        assert_eq!(g.shape(cx), y.shape());
        let ty = g.conv_transpose1d(yv, wv, None, stride, pad).unwrap();
        let lhs = inner(g.value(cx).data(), y.data());
        let rhs = inner(x.data(), g.value(ty).data());
        assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
    }
}

/// conv_transpose1d(y, W) is the input-gradient of ⟨conv1d(x, W), y⟩.
#[test]
fn conv_transpose_matches_autodiff_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..20 {
        let (a, bch, k, stride) = (3, 2, 4, 2);
        let t_y = rng.random_range(3..15);
        let t_x = (t_y - 1) * stride + k;
        let x = rand_tensor(&mut rng, &[bch, t_x]);
        let y = rand_tensor(&mut rng, &[a, t_y]);
        let w = rand_tensor(&mut rng, &[a, bch, k]);

        let mut g = Graph::new();
        let xv = g.variable(x);
        let (yv, wv) = (g.constant(y.clone()), g.constant(w.clone()));
        let cx = g.conv1d(xv, wv, None, stride, 0).unwrap();
        let loss = g.dot(cx, yv).unwrap();
        let grads = g.backward(loss).unwrap();
        let oracle = grads.get(xv).unwrap().to_vec();

        let mut g = Graph::new();
        let (yv, wv) = (g.constant(y), g.constant(w));
        let ty = g.conv_transpose1d(yv, wv, None, stride, 0).unwrap();
        assert!(max_abs(g.value(ty).data(), &oracle) <= 1e-12);
    }
}

#[test]
fn concat_then_split_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 5]);
    let b = rand_tensor(&mut rng, &[3, 5]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat(&[av, bv], 0).unwrap();
    let parts = g.split(c, 0, &[2, 3]).unwrap();
    assert_eq!(g.value(parts[0]).data(), a.data());
    assert_eq!(g.value(parts[1]).data(), b.data());

    let d = g.concat(&[av, av], 1).unwrap();
    assert_eq!(g.shape(d), &[2, 10]);
    let halves = g.split(d, 1, &[5, 5]).unwrap();
    assert_eq!(g.value(halves[1]).data(), a.data());
}

#[test]
fn mean_of_constant_is_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([3, 4], 2.5));
    let m = g.mean(x, 1).unwrap();
    assert_eq!(g.value(m).data(), &[2.5, 2.5, 2.5]);
    let ma = g.mean_all(x).unwrap();
    assert_eq!(g.value(ma).data(), &[2.5]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new([3], vec![0.3, -1.0, 4.0]).unwrap());
    let s = g.sum_all(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros([2]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_into_leaf_tensor() {
    let mut leaf = Tensor::new([2], vec![1.0, -2.0]).unwrap().with_grad();
    for _ in 0..2 {
        let mut g = Graph::new();
        let x = g.leaf(&leaf);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap().accumulate_into(x, &mut leaf).unwrap();
    }
    assert_eq!(leaf.grad().unwrap(), &[2.0, 2.0]);
    leaf.zero_grad();
    assert!(leaf.grad().is_none());
}

#[test]
fn gradient_of_sum_of_losses_equals_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[6]);
    let w = rand_tensor(&mut rng, &[6]);
    let f = |g: &mut Graph, x: Var| -> Result<Var> {
        let s = g.sigmoid(x)?;
        g.sum_all(s)
    };
    let h = |g: &mut Graph, x: Var, w: &Tensor| -> Result<Var> {
        let wv = g.constant(w.clone());
        g.dot(x, wv)
    };

    let mut leaf = x.clone().with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&leaf);
    let l = f(&mut g, xv).unwrap();
    g.backward(l).unwrap().accumulate_into(xv, &mut leaf).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(&leaf);
    let l = h(&mut g, xv, &w).unwrap();
    g.backward(l).unwrap().accumulate_into(xv, &mut leaf).unwrap();

    let mut g = Graph::new();
    let xv = g.variable(x);
    let a = f(&mut g, xv).unwrap();
    let b = h(&mut g, xv, &w).unwrap();
    let l = g.add(a, b).unwrap();
    let joint = g.backward(l).unwrap();
    assert_eq!(joint.get(xv).unwrap(), leaf.grad().unwrap());
}

#[test]
fn grad_check_of_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let err = grad_check(|g, x| g.sum_all(x), &x, 1e-5).unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn grad_check_of_sigmoid_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[10]);
    let err = grad_check(
        |g, x| {
            let s = g.sigmoid(x)?;
            g.sum_all(s)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn grad_check_rejects_bad_eps_and_non_finite_objective() {
    let x = Tensor::full([2], 1.0);
    assert!(matches!(grad_check(|g, x| g.sum_all(x), &x, 0.1), Err(Error::Contract(_))));
    // ln(x − 1) at x = 1 is non-finite one eps to the left; ln itself rejects it.
    let r = grad_check(
        |g, x| {
            let y = g.add_scalar(x, -1.0 + 1e-7)?;
            let l = g.ln(y)?;
            g.sum_all(l)
        },
        &x,
        1e-5,
    );
    assert!(r.is_err());
}

/// Weighted sum against a fixed random probe so every output element matters.
fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let p = g.constant(rand_tensor(&mut rng, &shape));
    g.dot(y, p)
}

fn check_primitive(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(
        |g, x| {
            let y = f(g, x)?;
            probe_loss(g, y, 4242)
        },
        x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{name}: relative error {err}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor(&mut rng, &[3, 8]);
    let other = rand_tensor(&mut rng, &[3, 8]);
    let positive = Tensor::from_fn([3, 8], |i| 0.5 + (i as f64) * 0.1);
    let w = rand_tensor(&mut rng, &[4, 3, 3]);
    let wt = rand_tensor(&mut rng, &[3, 2, 4]);
    let dw = rand_tensor(&mut rng, &[3, 1, 5]);
    let bias3 = rand_tensor(&mut rng, &[3]);
    let bias4 = rand_tensor(&mut rng, &[4]);
    let mat = rand_tensor(&mut rng, &[8, 5]);
    let slope = Tensor::full([3], 0.25);
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);

    let k = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    check_primitive("add", &x, |g, x| {
        let o = k(g, &other);
        g.add(x, o)
    });
    check_primitive("sub", &x, |g, x| {
        let o = k(g, &other);
        g.sub(o, x)
    });
    check_primitive("mul", &x, |g, x| {
        let o = k(g, &other);
        g.mul(x, o)
    });
    check_primitive("mul_self", &x, |g, x| g.mul(x, x));
    check_primitive("div_num", &x, |g, x| {
        let p = k(g, &positive);
        g.div(x, p)
    });
    check_primitive("div_den", &positive, |g, x| {
        let o = k(g, &other);
        g.div(o, x)
    });
    check_primitive("scale", &x, |g, x| g.scale(x, -1.7));
    check_primitive("scale_by", &x, |g, x| {
        let s = g.sum_all(x)?;
        g.scale_by(x, s)
    });
    check_primitive("matmul_lhs", &x, |g, x| {
        let m = k(g, &mat);
        g.matmul(x, m)
    });
    check_primitive("matmul_rhs", &mat, |g, m| {
        let xv = k(g, &x);
        g.matmul(xv, m)
    });
    check_primitive("concat", &x, |g, x| {
        let o = k(g, &other);
        g.concat(&[o, x, x], 1)
    });
    check_primitive("split", &x, |g, x| {
        let p = g.split(x, 1, &[3, 5])?;
        g.mul(p[1], p[1])
    });
    check_primitive("mean", &x, |g, x| g.mean(x, 0));
    check_primitive("sum", &x, |g, x| g.sum(x, 1));
    check_primitive("relu", &x, |g, x| g.relu(x));
    check_primitive("prelu_x", &x, |g, x| {
        let s = k(g, &slope);
        g.prelu(x, s)
    });
    check_primitive("prelu_slope", &slope, |g, s| {
        let xv = k(g, &x);
        g.prelu(xv, s)
    });
    check_primitive("sigmoid", &x, |g, x| g.sigmoid(x));
    check_primitive("ln", &positive, |g, x| g.ln(x));
    check_primitive("gln_x", &x, |g, x| {
        let (ga, be) = (k(g, &gamma), k(g, &beta));
        g.global_layer_norm(x, ga, be, 1e-8)
    });
    check_primitive("gln_gamma", &gamma, |g, ga| {
        let (xv, be) = (k(g, &x), k(g, &beta));
        g.global_layer_norm(xv, ga, be, 1e-8)
    });
    check_primitive("gln_beta", &beta, |g, be| {
        let (xv, ga) = (k(g, &x), k(g, &gamma));
        g.global_layer_norm(xv, ga, be, 1e-8)
    });
    check_primitive("conv1d_x", &x, |g, x| {
        let (wv, b) = (k(g, &w), k(g, &bias4));
        g.conv1d(x, wv, Some(b), 2, 1)
    });
    check_primitive("conv1d_w", &w, |g, wv| {
        let (xv, b) = (k(g, &x), k(g, &bias4));
        g.conv1d(xv, wv, Some(b), 2, 1)
    });
    check_primitive("conv1d_b", &bias4, |g, b| {
        let (xv, wv) = (k(g, &x), k(g, &w));
        g.conv1d(xv, wv, Some(b), 2, 1)
    });
    check_primitive("conv_t_x", &x, |g, x| {
        let wv = k(g, &wt);
        g.conv_transpose1d(x, wv, None, 3, 1)
    });
    check_primitive("conv_t_w", &wt, |g, wv| {
        let xv = k(g, &x);
        g.conv_transpose1d(xv, wv, None, 3, 1)
    });
    check_primitive("depthwise_x", &x, |g, x| {
        let (wv, b) = (k(g, &dw), k(g, &bias3));
        g.depthwise_conv1d(x, wv, b, 2, 2)
    });
    check_primitive("depthwise_w", &dw, |g, wv| {
        let (xv, b) = (k(g, &x), k(g, &bias3));
        g.depthwise_conv1d(xv, wv, b, 2, 2)
    });
    check_primitive("interpolate", &x, |g, x| g.interpolate_time(x, 13));
    check_primitive("upsample", &x, |g, x| g.upsample_nearest2(x, 15));
    check_primitive("reshape", &x, |g, x| g.reshape(x, &[4, 6]));
    check_primitive("transpose", &x, |g, x| g.transpose(x));
    check_primitive("fit_crop", &x, |g, x| g.fit_length(x, 5));
    check_primitive("fit_pad", &x, |g, x| g.fit_length(x, 11));
}

#[test]
fn interpolate_time_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 2], vec![0.0, 2.0]).unwrap());
    let y = g.interpolate_time(x, 3).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = rand_tensor(&mut rng, &[3, 7]);
    let x = g.constant(t.clone());
    let y = g.interpolate_time(x, 7).unwrap();
    assert_eq!(g.value(y).data(), t.data());
}

/// Closed-form piecewise-linear reference: sample the polyline through the
/// original points at the resampled positions.
fn polyline_at(points: &[f64], pos: f64) -> f64 {
    let last = points.len() - 1;
    if pos >= last as f64 {
        return points[last];
    }
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    points[i] + f * (points[i + 1] - points[i])
}

#[test]
fn interpolate_round_trip_matches_polyline_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = 9;
    let t = rand_tensor(&mut rng, &[2, f]);
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let up = g.interpolate_time(x, 2 * f).unwrap();
    let back = g.interpolate_time(up, f).unwrap();
    for ch in 0..2 {
        let pts = &t.data()[ch * f..(ch + 1) * f];
        let ups: Vec<f64> =
            (0..2 * f).map(|j| polyline_at(pts, j as f64 * (f - 1) as f64 / (2 * f - 1) as f64)).collect();
        let expected: Vec<f64> =
            (0..f).map(|j| polyline_at(&ups, j as f64 * (2 * f - 1) as f64 / (f - 1) as f64)).collect();
        let got = &g.value(back).data()[ch * f..(ch + 1) * f];
        assert!(max_abs(got, &expected) <= 1e-12);
        // endpoints survive the round trip exactly
        assert_eq!(got[0], pts[0]);
        assert_eq!(got[f - 1], pts[f - 1]);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(&mut rng, &[4, 50]);
        let w = rand_tensor(&mut rng, &[6, 4, 5]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = g.conv1d(xv, wv, None, 2, 2).unwrap();
        let z = g.sigmoid(y).unwrap();
        g.value(z).clone()
    };
    assert_eq!(run(), run());
}

fn linear_adjoint(op: impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor, seed: u64) -> (f64, f64) {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = op(&mut g, xv).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = rand_tensor(&mut rng, g.shape(y));
    let lhs = inner(g.value(y).data(), probe.data());
    let pv = g.constant(probe);
    let l = g.dot(y, pv).unwrap();
    // the tape's reverse sweep is Lᵀ applied to the probe
    let grads = g.backward(l).unwrap();
    let rhs = inner(x.data(), grads.get(xv).unwrap());
    (lhs, rhs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_primitives_are_adjoint(seed in any::<u64>(), c in 1usize..4, f in 2usize..20, target in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[c, f]);
        let ops: Vec<LinearOp> = vec![
            Box::new(move |g, x| g.interpolate_time(x, target)),
            Box::new(move |g, x| g.fit_length(x, target)),
            Box::new(move |g, x| g.upsample_nearest2(x, (2 * f).min(target.max(1)))),
            Box::new(|g, x| g.transpose(x)),
            Box::new(move |g, x| g.narrow(x, 1, f / 2, f - f / 2)),
        ];
        for op in &ops {
            let (lhs, rhs) = linear_adjoint(op, &x, seed ^ 0x55);
            prop_assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_adjoint_holds_for_random_shapes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..6);
        let stride = rng.random_range(1..4);
        let t_y = rng.random_range(2..16);
        let t_x = (t_y - 1) * stride + k;
        let w = rand_tensor(&mut rng, &[a, b, k]);
        let x = rand_tensor(&mut rng, &[b, t_x]);
        let (lhs, rhs) = linear_adjoint(|g, xv| { let wv = g.constant(w.clone()); g.conv1d(xv, wv, None, stride, 0) }, &x, seed);
        prop_assert!((lhs - rhs).abs() <= 1e-10);
    }
}

#[test]
fn replayed_gates_reproduce_the_recorded_branch() {
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, -0.1, 3.0, -4.0]).unwrap();
    let slope = Tensor::new(vec![2], vec![0.25, 0.5]).unwrap();
    let run = |g: &mut Graph, x: &Tensor| {
        let a = g.constant(x.clone());
        let s = g.constant(slope.clone());
        let r = g.relu(a).unwrap();
        let p = g.prelu(a, s).unwrap();
        (g.value(r).data().to_vec(), g.value(p).data().to_vec())
    };
    let mut g = Graph::new();
    g.record_gates();
    let (r0, p0) = run(&mut g, &x);
    let gates = g.take_gates().unwrap();
    assert_eq!(gates.len(), 2);
    assert_eq!(r0, vec![1.0, 0.0, 0.5, 0.0, 3.0, 0.0]);
    assert_eq!(p0, vec![1.0, -0.5, 0.5, -0.05, 3.0, -2.0]);

    // flip every sign; the gates keep the original branch
    let flipped = Tensor::new(vec![2, 3], x.data().iter().map(|v| -v).collect()).unwrap();
    let mut g = Graph::new();
    g.replay_gates(gates.clone());
    let (r1, p1) = run(&mut g, &flipped);
    assert_eq!(r1, vec![-1.0, 0.0, -0.5, 0.0, -3.0, 0.0]);
    assert_eq!(p1, vec![-1.0, 0.5, -0.5, 0.05, -3.0, 2.0]);

    // a pattern from a different graph is rejected
    let mut g = Graph::new();
    g.replay_gates(gates);
    let a = g.constant(Tensor::zeros([4]));
    assert!(matches!(g.relu(a), Err(Error::Contract(_))));
    assert!(g.take_gates().is_none());
}

#[test]
fn replayed_gates_match_gradients_through_the_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let slope = rand_tensor(&mut rng, &[3]);
    let mut g = Graph::new();
    g.record_gates();
    let a = g.variable(x.clone());
    let s = g.variable(slope.clone());
    let p = g.prelu(a, s).unwrap();
    let r = g.relu(p).unwrap();
    let y = g.sum_all(r).unwrap();
    let gates = g.take_gates().unwrap();
    let y_live = g.value(y).data().to_vec();
    let live = g.backward(y).unwrap();

    let mut h = Graph::new();
    h.replay_gates(gates);
    let a2 = h.variable(x);
    let s2 = h.variable(slope);
    let p2 = h.prelu(a2, s2).unwrap();
    let r2 = h.relu(p2).unwrap();
    let y2 = h.sum_all(r2).unwrap();
    assert_eq!(h.value(y2).data(), &y_live[..]);
    let replay = h.backward(y2).unwrap();
    assert_eq!(live.get(a).unwrap(), replay.get(a2).unwrap());
    assert_eq!(live.get(s).unwrap(), replay.get(s2).unwrap());
}
