use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vphype::tensor::{grad_check_inputs, kernels, InterpMode, Tape, Tensor, Var};
use vphype::Result;

const TOL: f64 = 1e-6;
const SHAPES: u64 = 20;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// `Σ y ⊙ W` for a fixed random `W`, so every output coordinate matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(t.shape(y).to_vec(), 1.0, &mut rng(seed ^ 0xabcdef));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check<F>(name: &str, seed: u64, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check_inputs(
        |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        },
        &inputs,
        1e-5,
        None,
    )
    .unwrap_or_else(|e| panic!("{name} (seed {seed}): {e}"));
    assert!(
        report.max_rel_error < TOL,
        "{name} (seed {seed}): error {} at input {} index {}",
        report.max_rel_error,
        report.input,
        report.index
    );
}

/// Moves entries away from the kink of relu.
fn away_from_zero(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| v + 0.1f64.copysign(v)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn elementwise_binary_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(s);
        let shape = [dim(&mut r, 1, 4), dim(&mut r, 1, 5)];
        let (a, b) = (randn(&shape, &mut r), randn(&shape, &mut r));
        check("add", s, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check("sub", s, vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check("mul", s, vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check("mul_self", s, vec![a.clone()], |t, v| t.mul(v[0], v[0]));
        check("scale", s, vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
        let c = randn(&[1], &mut r);
        check("mul_scalar", s, vec![a, c], |t, v| t.mul_scalar(v[0], v[1]));
    }
}

#[test]
fn broadcast_along_axis_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(100 + s);
        let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 3)];
        let axis = r.random_range(0..3);
        let x = randn(&shape, &mut r);
        let v = randn(&[shape[axis]], &mut r);
        check("add_along", s, vec![x.clone(), v.clone()], move |t, a| t.add_along(a[0], a[1], axis));
        check("mul_along", s, vec![x, v], move |t, a| t.mul_along(a[0], a[1], axis));
    }
}

#[test]
fn unary_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(200 + s);
        let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 6)];
        let x = randn(&shape, &mut r);
        check("relu", s, vec![away_from_zero(x.clone())], |t, v| Ok(t.relu(v[0])));
        check("silu", s, vec![x.clone()], |t, v| Ok(t.silu(v[0])));
        check("gelu", s, vec![x.clone()], |t, v| Ok(t.gelu(v[0])));
        check("softplus", s, vec![x.clone()], |t, v| Ok(t.softplus(v[0])));
        check("sigmoid", s, vec![x.clone()], |t, v| Ok(t.sigmoid(v[0])));
        check("exp", s, vec![x], |t, v| Ok(t.exp(v[0])));
    }
}

#[test]
fn matmul_gradients_with_broadcast() {
    for s in 0..SHAPES {
        let mut r = rng(300 + s);
        let (m, k, p) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
        let batch = dim(&mut r, 1, 3);
        let a = randn(&[batch, m, k], &mut r);
        let b = if s % 2 == 0 {
            randn(&[k, p], &mut r)
        } else {
            randn(&[batch, k, p], &mut r)
        };
        check("matmul", s, vec![a, b], |t, v| t.matmul(v[0], v[1]));
    }
}

#[test]
fn layout_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(400 + s);
        let shape = [dim(&mut r, 1, 3), dim(&mut r, 2, 4), dim(&mut r, 1, 3)];
        let x = randn(&shape, &mut r);
        check("permute", s, vec![x.clone()], |t, v| t.permute(v[0], &[2, 0, 1]));
        check("transpose", s, vec![x.clone()], |t, v| t.transpose(v[0]));
        let flat = shape.iter().product::<usize>();
        check("reshape", s, vec![x.clone()], move |t, v| t.reshape(v[0], &[flat]));
        let y = randn(&[shape[0], dim(&mut r, 1, 3), shape[2]], &mut r);
        check("concat", s, vec![x.clone(), y], |t, v| t.concat(&[v[0], v[1], v[0]], 1));
        check("narrow", s, vec![x.clone()], |t, v| t.narrow(v[0], 1, 1, 1));
        let axis = r.random_range(0..3);
        check("sum_axis", s, vec![x.clone()], move |t, v| t.sum_axis(v[0], axis));
        check("mean_axis", s, vec![x.clone()], move |t, v| t.mean_axis(v[0], axis));
        check("softmax", s, vec![x.clone()], move |t, v| t.softmax(v[0], axis));
        check("gather2d", s, vec![x.clone()], |t, v| t.gather2d(v[0], vec![1, 0, 1], vec![0, 0]));
    }
}

#[test]
fn cross_entropy_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(500 + s);
        let (b, n) = (dim(&mut r, 1, 5), dim(&mut r, 2, 6));
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
        let logits = randn(&[b, n], &mut r);
        let report = grad_check_inputs(|t, v| t.cross_entropy(v[0], &labels), &[logits], 1e-5, None).unwrap();
        assert!(report.max_rel_error < TOL, "seed {s}: {}", report.max_rel_error);
    }
}

#[test]
fn normalization_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(600 + s);
        let (rows, d) = (dim(&mut r, 1, 4), dim(&mut r, 2, 6));
        let x = randn(&[rows, d], &mut r);
        let (g, b) = (randn(&[d], &mut r), randn(&[d], &mut r));
        check("layer_norm", s, vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));

        let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3), 2];
        let c = shape[1];
        let x = randn(&shape, &mut r);
        let (g, b) = (randn(&[c], &mut r), randn(&[c], &mut r));
        check("batch_norm_train", s, vec![x.clone(), g.clone(), b.clone()], |t, v| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        });
        let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        check("batch_norm_eval", s, vec![x, g, b], move |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        });
    }
}

#[test]
fn convolution_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(700 + s);
        let groups = if s % 3 == 0 { 2 } else { 1 };
        let c_in = groups * dim(&mut r, 1, 2);
        let c_out = groups * dim(&mut r, 1, 2);
        let k = [1, 3][s as usize % 2];
        let stride = dim(&mut r, 1, 2);
        let pad = r.random_range(0..=k / 2);
        let (h, w) = (dim(&mut r, k, 5), dim(&mut r, k, 5));
        let x = randn(&[dim(&mut r, 1, 2), c_in, h, w], &mut r);
        let wt = randn(&[c_out, c_in / groups, k, k], &mut r);
        let b = randn(&[c_out], &mut r);
        check("conv2d", s, vec![x.clone(), wt.clone(), b], move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups)
        });
        check("conv2d_nobias", s, vec![x, wt], move |t, v| t.conv2d(v[0], v[1], None, stride, pad, groups));

        let (m, c, l, kk) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 6), dim(&mut r, 1, 4));
        let x = randn(&[m, c, l], &mut r);
        let w = randn(&[c, kk], &mut r);
        check("depthwise_conv1d", s, vec![x, w], |t, v| t.depthwise_conv1d(v[0], v[1]));
    }
}

#[test]
fn resampling_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(800 + s);
        let shape = [dim(&mut r, 1, 2), dim(&mut r, 1, 2), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
        let x = randn(&shape, &mut r);
        let (oh, ow) = (dim(&mut r, 1, 7), dim(&mut r, 1, 7));
        check("bilinear", s, vec![x.clone()], move |t, v| t.interpolate(v[0], oh, ow, InterpMode::Bilinear));
        check("nearest", s, vec![x.clone()], move |t, v| t.interpolate(v[0], oh, ow, InterpMode::Nearest));
        let (pb, pr) = (shape[2] - 1, shape[3] - 1);
        check("reflect_pad2d", s, vec![x], move |t, v| t.reflect_pad2d(v[0], 0, pb, 0, pr));
    }
}

#[test]
fn selective_scan_gradients() {
    for s in 0..SHAPES {
        let mut r = rng(900 + s);
        let (m, d, l, n) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 6), dim(&mut r, 1, 3));
        let u = randn(&[m, d, l], &mut r);
        let delta = Tensor::rand_uniform(vec![m, d, l], 0.1, 1.0, &mut r);
        let a = Tensor::rand_uniform(vec![d, n], -2.0, -0.2, &mut r);
        let b = randn(&[m, n, l], &mut r);
        let c = randn(&[m, n, l], &mut r);
        let dd = randn(&[d], &mut r);
        check("selective_scan", s, vec![u, delta, a, b, c, dd], |t, v| {
            t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
        });
    }
}

#[test]
fn cross_entropy_of_random_logits_passes_gradient_check() {
    let mut r = rng(4242);
    let logits = randn(&[3, 5], &mut r);
    let report = grad_check_inputs(|t, v| t.cross_entropy(v[0], &[4, 0, 2]), &[logits], 1e-5, None).unwrap();
    assert!(report.max_rel_error < 1e-6);
}

// ── naive-loop oracles ──────────────────────────────────────────────────────

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let (a, b) = (randn(&[4, 5], &mut r), randn(&[5, 3], &mut r));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let mut max = 0.0f64;
    for i in 0..4 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += a.get(&[i, k]) * b.get(&[k, j]);
            }
            max = max.max((acc - tape.value(c).get(&[i, j])).abs());
        }
    }
    assert!(max < 1e-12, "{max}");
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut r = rng(12);
    let x = randn(&[1, 2, 6, 6], &mut r);
    let w = randn(&[3, 2, 3, 3], &mut r);
    let bias = randn(&[3], &mut r);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
    let y = tape.conv2d(vx, vw, Some(vb), 2, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 3, 3]);
    let mut max = 0.0f64;
    for co in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = bias.data()[co];
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                acc += w.get(&[co, ci, ky, kx]) * x.get(&[0, ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                max = max.max((acc - tape.value(y).get(&[0, co, oy, ox])).abs());
            }
        }
    }
    assert!(max < 1e-12, "{max}");
}

#[test]
fn depthwise_conv1d_matches_sliding_window() {
    let mut r = rng(13);
    let (m, c, l, k) = (2, 3, 9, 3);
    let x = randn(&[m, c, l], &mut r);
    let w = randn(&[c, k], &mut r);
    let mut tape = Tape::new();
    let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.depthwise_conv1d(vx, vw).unwrap();
    let mut max = 0.0f64;
    for s in 0..m {
        for ch in 0..c {
            // zero-pad k − 1 on the left and slide the kernel
            let mut padded = vec![0.0; k - 1];
            padded.extend((0..l).map(|t| x.get(&[s, ch, t])));
            for t in 0..l {
                let acc: f64 = (0..k).map(|j| w.get(&[ch, j]) * padded[t + j]).sum();
                max = max.max((acc - tape.value(y).get(&[s, ch, t])).abs());
            }
        }
    }
    assert!(max < 1e-12, "{max}");
}

#[test]
fn depthwise_conv1d_is_per_channel_causal() {
    let mut r = rng(14);
    let x = randn(&[1, 2, 8], &mut r);
    let w = randn(&[2, 3], &mut r);
    let mut tape = Tape::new();
    let vw = tape.constant(w);
    let vx = tape.constant(x.clone());
    let base = tape.depthwise_conv1d(vx, vw).unwrap();
    let mut bumped = x;
    bumped.set(&[0, 0, 5], 10.0);
    let vx2 = tape.constant(bumped);
    let out = tape.depthwise_conv1d(vx2, vw).unwrap();
    for t in 0..8 {
        assert_eq!(tape.value(out).get(&[0, 1, t]), tape.value(base).get(&[0, 1, t]));
        if t < 5 {
            assert_eq!(tape.value(out).get(&[0, 0, t]), tape.value(base).get(&[0, 0, t]));
        }
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut r = rng(15);
    let x = randn(&[7], &mut r);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v, 0).unwrap();
    // shifted by the first entry rather than the max, then Kahan-summed
    let e: Vec<f64> = x.data().iter().map(|v| (v - x.data()[0]).exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in &e {
        let yk = v - comp;
        let t = sum + yk;
        comp = (t - sum) - yk;
        sum = t;
    }
    for (i, &ei) in e.iter().enumerate() {
        assert!((ei / sum - tape.value(y).data()[i]).abs() < 1e-12);
    }
}

#[test]
fn kernel_attention_rows_are_convex_combinations() {
    let mut r = rng(16);
    let (len, d) = (5, 3);
    let q = randn(&[len, d], &mut r);
    let k = randn(&[len, d], &mut r);
    let v = Tensor::full(vec![len, d], 0.75);
    let out = kernels::attention(q.data(), k.data(), v.data(), len, d);
    assert!(out.iter().all(|&o| (o - 0.75).abs() < 1e-15));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        data in prop::collection::vec(-1e4f64..1e4, 1..40),
        cols in 1usize..8,
    ) {
        let rows = data.len() / cols;
        prop_assume!(rows >= 1);
        let x = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_stay_finite(x in -1e6f64..1e6) {
        for y in [kernels::softplus(x), kernels::silu(x), kernels::gelu(x), kernels::sigmoid(x)] {
            prop_assert!(y.is_finite());
        }
    }

    #[test]
    fn backward_twice_is_bit_identical(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[3, 4], &mut r));
        let w = tape.leaf(randn(&[4, 2], &mut r));
        let g = tape.leaf(Tensor::ones(vec![2]));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.layer_norm(y, g, b, 1e-5).unwrap();
        let y = tape.silu(y);
        let l = tape.cross_entropy(y, &[0, 1, 1]).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        for v in [x, w, g, b] {
            prop_assert_eq!(g1.get(v).unwrap().data(), g2.get(v).unwrap().data());
        }
    }
}

#[test]
fn activation_examples() {
    assert!((kernels::softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(kernels::relu(-1.0), 0.0);
    assert_eq!(kernels::relu(2.0), 2.0);
    assert!((kernels::silu(1000.0) - 1000.0).abs() < 1e-9);
}
