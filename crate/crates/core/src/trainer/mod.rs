//! AdamW training loop, sharded evaluation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{config_diff, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, learning_rate, AdamW, AdamWParams};

use std::io::Write;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{BandStats, HsiScene, PatchExtractor, Split, SplitSpec, DEFAULT_PATCH};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::Model;
use crate::nn::{Fwd, ParamId};
use crate::prompts::Arm;
use crate::tensor::Tape;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "VPHYPE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` means 5% of all steps, rounded up.
    pub warmup_steps: Option<usize>,
    /// Maximum global gradient norm; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Odd side length of the input patches.
    pub patch_size: usize,
    /// Test pixels scored after every epoch; 0 skips per-epoch validation.
    pub val_size: usize,
    pub eval_batch_size: usize,
    /// Apply a random flip/rotation of the square patch to each training sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            warmup_steps: None,
            grad_clip_norm: 1.0,
            patch_size: DEFAULT_PATCH,
            val_size: 256,
            eval_batch_size: 64,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        // lr = 0 is allowed: it freezes every parameter
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad(format!("grad_clip_norm {} must be non-negative", self.grad_clip_norm));
        }
        if self.patch_size.is_multiple_of(2) {
            return bad(format!("patch_size {} must be odd", self.patch_size));
        }
        Ok(())
    }

    pub fn adamw(&self, lr: f64) -> AdamWParams {
        AdamWParams {
            lr,
            weight_decay: self.weight_decay,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
        }
    }

    pub fn steps_per_epoch(&self, train_pixels: usize) -> usize {
        train_pixels.div_ceil(self.batch_size)
    }

    pub fn resolved_warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps.unwrap_or_else(|| total_steps.div_ceil(20))
    }
}

/// Seeded generator for one `(purpose, index)` pair of a run.
pub(crate) fn run_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const ORDER_RNG: u64 = 1;
const DROP_RNG: u64 = 2;
const AUGMENT_RNG: u64 = 3;

/// Maps output position `(i, j)` of a `p×p` patch to its source position under
/// symmetry `k` of the square (`k < 8`: four rotations, each optionally transposed).
fn dihedral(k: usize, i: usize, j: usize, p: usize) -> (usize, usize) {
    let (i, j) = if k & 4 != 0 { (j, i) } else { (i, j) };
    match k & 3 {
        0 => (i, j),
        1 => (j, p - 1 - i),
        2 => (p - 1 - i, p - 1 - j),
        _ => (p - 1 - j, i),
    }
}

/// Applies an independent random symmetry to every `[C, p, p]` sample of `x`.
fn augment_batch(x: &mut crate::Tensor, rng: &mut ChaCha8Rng) {
    let (b, c, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = p * p;
    let data = x.data_mut();
    let mut buf = vec![0.0; plane];
    for s in 0..b {
        let k = rng.random_range(0..8);
        if k == 0 {
            continue;
        }
        for ch in 0..c {
            let src = &mut data[(s * c + ch) * plane..][..plane];
            buf.copy_from_slice(src);
            for i in 0..p {
                for j in 0..p {
                    let (si, sj) = dihedral(k, i, j, p);
                    src[i * p + j] = buf[si * p + sj];
                }
            }
        }
    }
}

/// Evaluation threads: `VPHYPE_THREADS` if set and positive, else the
/// available parallelism.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Confusion matrix of `model` on `pixels`, sharded over `threads` workers.
pub fn evaluate(
    model: &Model,
    extractor: &PatchExtractor,
    class_names: &[String],
    pixels: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<ConfusionMatrix> {
    let run = |shard: &[usize]| -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::with_names(class_names.to_vec());
        for chunk in shard.chunks(batch_size.max(1)) {
            let (x, labels) = extractor.batch(chunk)?;
            for (label, pred) in labels.into_iter().zip(model.classify(&x)?) {
                cm.record(label, pred)?;
            }
        }
        Ok(cm)
    };
    let threads = threads.clamp(1, pixels.len().max(1));
    if threads == 1 {
        return run(pixels);
    }
    let shard = pixels.len().div_ceil(threads);
    let parts: Vec<Result<ConfusionMatrix>> = thread::scope(|s| {
        let handles: Vec<_> = pixels.chunks(shard).map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut total = ConfusionMatrix::with_names(class_names.to_vec());
    for part in parts {
        total.merge(&part?)?;
    }
    Ok(total)
}

/// Evenly spaced subset of at most `n` pixels.
pub fn validation_slice(pixels: &[usize], n: usize) -> Vec<usize> {
    if n >= pixels.len() {
        return pixels.to_vec();
    }
    (0..n).map(|i| pixels[i * pixels.len() / n]).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One key-sorted object per epoch.
    pub log: Vec<Value>,
    pub test_metrics: Metrics,
    pub test_confusion: ConfusionMatrix,
}

impl TrainOutcome {
    /// The log as newline-terminated JSON lines.
    pub fn log_lines(&self) -> String {
        self.log.iter().map(|v| format!("{v}\n")).collect()
    }
}

/// One optimizer step on `pixels`; returns the batch loss.
fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    extractor: &PatchExtractor,
    pixels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let (mut x, labels) = extractor.batch(pixels)?;
    if cfg.augment {
        augment_batch(&mut x, &mut run_rng(cfg.seed, AUGMENT_RNG, step));
    }
    let e = model.text_embedding(pixels.len())?;
    let mut tape = Tape::new();
    let trainable: Vec<ParamId> = model.params.iter().filter(|(_, p)| model.trains(p)).map(|(id, _)| id).collect();
    let vars = model.params.bind(&mut tape, |p| model.trains(p));
    let xv = tape.constant(x);
    let ev = tape.constant(e);
    let logits = {
        let mut f = Fwd::train(&mut tape, vars.clone(), model.params.bn_states_mut(), run_rng(cfg.seed, DROP_RNG, step));
        model.arch.forward(&mut f, xv, ev)?
    };
    let loss = tape.cross_entropy(logits, &labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value} at step {step}")));
    }
    let grads = tape.backward(loss)?;
    let mut pairs: Vec<_> = trainable
        .into_iter()
        .map(|id| {
            let g = grads
                .get(vars[id.0])
                .cloned()
                .unwrap_or_else(|| crate::Tensor::zeros(model.params.get(id).value.shape().to_vec()));
            (id, g)
        })
        .collect();
    clip_grad_norm(&mut pairs, cfg.grad_clip_norm);
    opt.step(&mut model.params, &pairs, &cfg.adamw(lr))?;
    Ok(value)
}

/// Trains `model` under `arm` and scores it on the full test split.
///
/// Batch order and DropPath draws depend only on `cfg.seed` and the step, so
/// identical inputs give bit-identical logs. Each log line is also written to
/// `sink` as it is produced.
pub fn train(
    mut model: Model,
    scene: &HsiScene,
    split: &Split,
    split_spec: &SplitSpec,
    cfg: &TrainConfig,
    arm: Arm,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scene.bands() != model.config().in_bands {
        return Err(Error::Config(format!(
            "scene has {} bands, model expects {}",
            scene.bands(),
            model.config().in_bands
        )));
    }
    if scene.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "scene has {} classes, model expects {}",
            scene.num_classes(),
            model.config().num_classes
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Split("empty training split".into()));
    }
    model.set_arm(arm);
    let stats = BandStats::from_pixels(scene, &split.train)?;
    let extractor = PatchExtractor::new(scene, stats.clone(), cfg.patch_size)?;
    let total = cfg.epochs * cfg.steps_per_epoch(split.train.len());
    let warmup = cfg.resolved_warmup(total);
    let threads = eval_threads();
    let val = validation_slice(&split.test, cfg.val_size);

    let mut opt = AdamW::new(model.params.len());
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut run_rng(cfg.seed, ORDER_RNG, epoch as u64));
        let (mut loss_sum, mut seen, mut lr) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            lr = learning_rate(cfg.lr, step, warmup, total);
            // a lone sample has no batch statistics to normalize with
            if chunk.len() < 2 && order.len() > 1 {
                step += 1;
                continue;
            }
            let loss = train_step(&mut model, &mut opt, &extractor, chunk, lr, cfg, step as u64)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let mut line = json!({
            "epoch": epoch + 1,
            "loss": loss_sum / seen.max(1) as f64,
            "lr": lr,
            "step": step,
        });
        if !val.is_empty() {
            let cm = evaluate(&model, &extractor, scene.class_names(), &val, cfg.eval_batch_size, threads)?;
            line["val_oa"] = json!(cm.metrics()?.oa);
        }
        if epoch + 1 == cfg.epochs {
            let cm = evaluate(&model, &extractor, scene.class_names(), &split.test, cfg.eval_batch_size, threads)?;
            let m = cm.metrics()?;
            line["test_oa"] = json!(m.oa);
            line["test_aa"] = json!(m.aa);
            line["test_kappa"] = json!(m.kappa);
            final_eval = Some((cm, m));
        }
        if let Some(w) = sink.as_deref_mut() {
            writeln!(w, "{line}").map_err(|e| Error::io("<metrics log>", e))?;
        }
        log.push(line);
    }
    let (test_confusion, test_metrics) = match final_eval {
        Some(v) => v,
        None => {
            let cm = evaluate(&model, &extractor, scene.class_names(), &split.test, cfg.eval_batch_size, threads)?;
            let m = cm.metrics()?;
            (cm, m)
        }
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: opt,
            step: step as u64,
            train_config: cfg.clone(),
            split: split_spec.clone(),
            arm,
            band_stats: stats,
        },
        log,
        test_metrics,
        test_confusion,
    })
}
