//! Finite-difference gradient suites shared by the test harness and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::Model;
use crate::nn::{Fwd, ParamId};
use crate::tensor::{grad_check_inputs, InterpMode, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

struct Suite {
    results: Vec<CheckResult>,
}

impl Suite {
    /// Checks `Σ W ⊙ f(inputs)` for a fixed random `W`.
    fn check<F>(&mut self, name: &str, seed: u64, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = grad_check_inputs(
            |t, v| {
                let y = f(t, v)?;
                let w = Tensor::randn(t.shape(y).to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
                let w = t.constant(w);
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &inputs,
            STEP,
            None,
        )?;
        match self.results.iter_mut().find(|r| r.name == name) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(report.max_rel_error);
                r.checked += report.checked;
            }
            None => self.results.push(CheckResult {
                name: name.to_string(),
                max_rel_error: report.max_rel_error,
                checked: report.checked,
            }),
        }
        Ok(())
    }
}

/// Every differentiable tape primitive over `cases` random shapes each.
pub fn primitive_suite(cases: u64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite { results: Vec::new() };
    for case in 0..cases {
        let cs = seed.wrapping_mul(1000).wrapping_add(case);
        let r = &mut ChaCha8Rng::seed_from_u64(cs);

        let shape = [dim(r, 1, 3), dim(r, 2, 4), dim(r, 1, 3)];
        let (a, b) = (randn(&shape, r), randn(&shape, r));
        s.check("add", cs, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
        s.check("sub", cs, vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
        s.check("mul", cs, vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?;
        s.check("scale", cs, vec![a.clone()], |t, v| Ok(t.scale(v[0], 0.37)))?;
        s.check("mul_scalar", cs, vec![a.clone(), randn(&[1], r)], |t, v| t.mul_scalar(v[0], v[1]))?;
        let axis = r.random_range(0..3);
        let along = randn(&[shape[axis]], r);
        s.check("add_along", cs, vec![a.clone(), along.clone()], |t, v| t.add_along(v[0], v[1], axis))?;
        s.check("mul_along", cs, vec![a.clone(), along], |t, v| t.mul_along(v[0], v[1], axis))?;

        // keep relu inputs away from the kink
        let kinkless = Tensor::new(
            shape.to_vec(),
            a.data().iter().map(|v| v + 0.1f64.copysign(*v)).collect(),
        )?;
        s.check("relu", cs, vec![kinkless], |t, v| Ok(t.relu(v[0])))?;
        s.check("silu", cs, vec![a.clone()], |t, v| Ok(t.silu(v[0])))?;
        s.check("gelu", cs, vec![a.clone()], |t, v| Ok(t.gelu(v[0])))?;
        s.check("softplus", cs, vec![a.clone()], |t, v| Ok(t.softplus(v[0])))?;
        s.check("sigmoid", cs, vec![a.clone()], |t, v| Ok(t.sigmoid(v[0])))?;
        s.check("exp", cs, vec![a.clone()], |t, v| Ok(t.exp(v[0])))?;

        s.check("permute", cs, vec![a.clone()], |t, v| t.permute(v[0], &[2, 0, 1]))?;
        s.check("transpose", cs, vec![a.clone()], |t, v| t.transpose(v[0]))?;
        let n = a.numel();
        s.check("reshape", cs, vec![a.clone()], |t, v| t.reshape(v[0], &[n]))?;
        s.check("concat", cs, vec![a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]], 1))?;
        s.check("narrow", cs, vec![a.clone()], |t, v| t.narrow(v[0], 1, 1, 1))?;
        s.check("sum", cs, vec![a.clone()], |t, v| Ok(t.sum(v[0])))?;
        s.check("sum_axis", cs, vec![a.clone()], |t, v| t.sum_axis(v[0], axis))?;
        s.check("mean_axis", cs, vec![a.clone()], |t, v| t.mean_axis(v[0], axis))?;
        s.check("softmax", cs, vec![a.clone()], |t, v| t.softmax(v[0], axis))?;

        let (m, k, p) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
        let batch = dim(r, 1, 3);
        let (ma, mb) = (randn(&[batch, m, k], r), randn(&[k, p], r));
        s.check("matmul", cs, vec![ma, mb], |t, v| t.matmul(v[0], v[1]))?;

        let (rows, classes) = (dim(r, 1, 4), dim(r, 2, 5));
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
        s.check("cross_entropy", cs, vec![randn(&[rows, classes], r)], |t, v| {
            t.cross_entropy(v[0], &labels)
        })?;

        let d = dim(r, 2, 5);
        let x = randn(&[dim(r, 1, 3), d], r);
        s.check("layer_norm", cs, vec![x, randn(&[d], r), randn(&[d], r)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        })?;
        let c = dim(r, 1, 3);
        let img = randn(&[dim(r, 1, 2), c, dim(r, 2, 4), dim(r, 2, 4)], r);
        let (g, be) = (randn(&[c], r), randn(&[c], r));
        s.check("batch_norm_train", cs, vec![img.clone(), g.clone(), be.clone()], |t, v| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        })?;
        let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        s.check("batch_norm_eval", cs, vec![img.clone(), g, be], |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        })?;

        let groups = if case % 2 == 0 { 1 } else { c };
        let c_out = groups * dim(r, 1, 2);
        let stride = dim(r, 1, 2);
        let w = randn(&[c_out, c / groups, 3, 3], r);
        s.check("conv2d", cs, vec![img.clone(), w, randn(&[c_out], r)], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, 1, groups)
        })?;
        let (oh, ow) = (dim(r, 1, 6), dim(r, 1, 6));
        s.check("interpolate_bilinear", cs, vec![img.clone()], |t, v| {
            t.interpolate(v[0], oh, ow, InterpMode::Bilinear)
        })?;
        s.check("interpolate_nearest", cs, vec![img.clone()], |t, v| {
            t.interpolate(v[0], oh, ow, InterpMode::Nearest)
        })?;
        let (ph, pw) = (img.shape()[2] - 1, img.shape()[3] - 1);
        s.check("reflect_pad2d", cs, vec![img.clone()], |t, v| t.reflect_pad2d(v[0], ph, 0, 0, pw))?;
        s.check("gather2d", cs, vec![img], |t, v| t.gather2d(v[0], vec![1, 0], vec![0, 1, 1]))?;

        let (m, ch, l, kk) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 6), dim(r, 1, 3));
        s.check("depthwise_conv1d", cs, vec![randn(&[m, ch, l], r), randn(&[ch, kk], r)], |t, v| {
            t.depthwise_conv1d(v[0], v[1])
        })?;
        let n = dim(r, 1, 3);
        let inputs = vec![
            randn(&[m, ch, l], r),
            Tensor::rand_uniform(vec![m, ch, l], 0.1, 1.0, r),
            Tensor::rand_uniform(vec![ch, n], -2.0, -0.2, r),
            randn(&[m, n, l], r),
            randn(&[m, n, l], r),
            randn(&[ch], r),
        ];
        s.check("selective_scan", cs, inputs, |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]))?;
    }
    Ok(s.results)
}

/// End-to-end check of the whole model with respect to every trainable
/// parameter (at most `max_coords` coordinates each) and the input image.
///
/// Two losses are used: the sum of logits under inference BatchNorm, and the
/// cross entropy under training BatchNorm with a fixed DropPath draw.
pub fn model_grad_check(model: &Model, images: &Tensor, labels: &[usize], max_coords: usize) -> Result<Vec<CheckResult>> {
    let ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| model.trains(p))
        .map(|(id, _)| id)
        .collect();
    let mut inputs: Vec<Tensor> = ids.iter().map(|&id| model.params.get(id).value.clone()).collect();
    inputs.push(images.clone());
    let e = model.text_embedding(images.shape()[0])?;

    let bind = |t: &mut Tape, v: &[Var]| {
        let overrides: Vec<(ParamId, Var)> = ids.iter().copied().zip(v.iter().copied()).collect();
        let vars = model.params.bind_with(t, &overrides);
        let e_t = t.constant(e.clone());
        (vars, e_t, v[v.len() - 1])
    };

    let eval = grad_check_inputs(
        |t, v| {
            let (vars, e_t, x) = bind(t, v);
            let mut f = Fwd::eval(t, vars, model.params.bn_states());
            let logits = model.arch.forward(&mut f, x, e_t)?;
            Ok(t.sum(logits))
        },
        &inputs,
        STEP,
        Some(max_coords),
    )?;
    let train = grad_check_inputs(
        |t, v| {
            let (vars, e_t, x) = bind(t, v);
            let mut bn = model.params.bn_states().to_vec();
            let mut f = Fwd::train(t, vars, &mut bn, ChaCha8Rng::seed_from_u64(7));
            let logits = model.arch.forward(&mut f, x, e_t)?;
            t.cross_entropy(logits, labels)
        },
        &inputs,
        STEP,
        Some(max_coords),
    )?;
    Ok(vec![
        CheckResult {
            name: "model_eval_sum_logits".into(),
            max_rel_error: eval.max_rel_error,
            checked: eval.checked,
        },
        CheckResult {
            name: "model_train_cross_entropy".into(),
            max_rel_error: train.max_rel_error,
            checked: train.checked,
        },
    ])
}
