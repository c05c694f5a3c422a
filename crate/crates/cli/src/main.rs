use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vphype::bench::run_bench;
use vphype::config::RunConfig;
use vphype::data::{make_synthetic_scene, stratified_split, HsiScene, PatchExtractor, SynthSpec};
use vphype::diagnostics::{model_grad_check, primitive_suite, CheckResult};
use vphype::prompts::Arm;
use vphype::trainer::{eval_threads, evaluate, Checkpoint};
use vphype::{Error, Tensor};

const CHECKPOINT_FILE: &str = "model.ckpt";
const CONFIG_FILE: &str = "config.json";
const METRICS_FILE: &str = "metrics.jsonl";
const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "vphype", version, about = "Hyperspectral classification with a prompted hybrid scan/attention backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, config echo and metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// full, visual_only, text_only or no_prompt
        #[arg(long, default_value = "full")]
        arm: Arm,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of a scene; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Defaults to the split seed stored in the checkpoint.
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Time the scan and full attention over growing sequence lengths (CSV).
    Bench {
        #[arg(long, default_value_t = 32)]
        dims: usize,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Finite-difference gradient checks of the primitives and the configured model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parameter counts per group and in total (JSON).
    Inspect {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic scene directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthSpec::default().num_classes)]
        classes: usize,
        #[arg(long, default_value_t = SynthSpec::default().bands)]
        bands: usize,
        #[arg(long, default_value_t = SynthSpec::default().height)]
        height: usize,
        #[arg(long, default_value_t = SynthSpec::default().width)]
        width: usize,
        #[arg(long, default_value_t = SynthSpec::default().separation)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure reported as one `category: message` line.
#[derive(Debug)]
struct Failure {
    category: &'static str,
    message: String,
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self.category {
            "config" => 2,
            _ => 1,
        }
    }

    fn line(&self) -> String {
        format!("{}: {}", self.category, self.message.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let category = e.category();
        let text = e.to_string();
        let message = text.strip_prefix(&format!("{category}: ")).unwrap_or(&text).to_string();
        Failure { category, message }
    }
}

type Outcome = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        category: "io",
        message: format!("{}: {e}", path.display()),
    }
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Prints the resolved configuration of a command on stderr.
fn echo(command: &str, resolved: Value) {
    eprintln!("resolved {}", json!({ "command": command, "config": resolved }));
}

fn train_cmd(config: &Path, arm: Arm, out: Option<PathBuf>) -> Outcome {
    let mut cfg = RunConfig::load(config)?;
    cfg.prompts = arm.apply(&cfg.prompts);
    cfg.validate()?;
    let Some(dir) = out.or_else(|| cfg.out_dir.clone()) else {
        return Err(Error::Config("no output directory: pass --out or set out_dir".into()).into());
    };
    let text = cfg.echo();
    echo("train", serde_json::from_str(&text).expect("echo is JSON"));
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &(text + "\n"))?;

    let log_path = dir.join(METRICS_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_failure(&log_path, e))?);
    let outcome = cfg.run(arm, Some(&mut log))?;
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;

    let m = &outcome.test_metrics;
    println!("{}", json!({ "aa": m.aa, "arm": arm.name(), "kappa": m.kappa, "oa": m.oa, "out": dir }));
    Ok(())
}

fn eval_cmd(checkpoint: &Path, scene_dir: &Path, split_seed: Option<u64>) -> Outcome {
    let ckpt = Checkpoint::load(checkpoint)?;
    let scene = HsiScene::load(scene_dir)?;
    let model_cfg = ckpt.model.config();
    if scene.bands() != model_cfg.in_bands || scene.num_classes() != model_cfg.num_classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} bands and {} classes, scene has {} and {}",
            model_cfg.in_bands,
            model_cfg.num_classes,
            scene.bands(),
            scene.num_classes()
        ))
        .into());
    }
    let mut spec = ckpt.split.clone();
    if let Some(seed) = split_seed {
        spec.seed = seed;
    }
    let tc = &ckpt.train_config;
    echo(
        "eval",
        json!({
            "arm": ckpt.arm,
            "checkpoint": checkpoint,
            "eval_batch_size": tc.eval_batch_size,
            "patch_size": tc.patch_size,
            "scene": scene_dir,
            "split": spec,
        }),
    );
    let split = stratified_split(&scene, &spec)?;
    let extractor = PatchExtractor::new(&scene, ckpt.band_stats.clone(), tc.patch_size)?;
    let cm = evaluate(&ckpt.model, &extractor, scene.class_names(), &split.test, tc.eval_batch_size, eval_threads())?;
    let mut report = cm.report()?;
    report["arm"] = json!(ckpt.arm);
    report["split"] = json!(spec);
    println!("{report}");
    Ok(())
}

fn bench_cmd(dims: usize, lengths: &[usize], repeats: usize) -> Outcome {
    echo("bench", json!({ "dims": dims, "lengths": lengths, "repeats": repeats }));
    print!("{}", run_bench(dims, lengths, repeats)?.to_csv());
    Ok(())
}

fn gradcheck_cmd(config: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    cfg.model.validate()?;
    cfg.prompts.validate()?;
    echo("gradcheck", json!({ "model": cfg.model, "prompts": cfg.prompts, "tolerance": GRAD_TOLERANCE }));
    let model = cfg.build_model()?;
    let p = cfg.train.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x = Tensor::randn(vec![2, cfg.model.in_bands, p, p], 1.0, &mut rng);
    let labels = [0, cfg.model.num_classes - 1];
    let mut results: Vec<CheckResult> = primitive_suite(3, cfg.train.seed)?;
    results.extend(model_grad_check(&model, &x, &labels, 2)?);
    let mut worst: Option<&CheckResult> = None;
    for r in &results {
        println!("{}", json!({ "checked": r.checked, "max_rel_error": r.max_rel_error, "name": r.name }));
        if worst.is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    match worst {
        Some(w) if w.max_rel_error >= GRAD_TOLERANCE => Err(Failure {
            category: "gradcheck",
            message: format!("{} has relative error {:.3e} (tolerance {GRAD_TOLERANCE:e})", w.name, w.max_rel_error),
        }),
        _ => Ok(()),
    }
}

fn inspect_cmd(config: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    cfg.model.validate()?;
    cfg.prompts.validate()?;
    echo("inspect", json!({ "model": cfg.model, "prompts": cfg.prompts }));
    let model = cfg.build_model()?;
    println!("{}", json!(model.param_counts()));
    Ok(())
}

fn synth_cmd(out: &Path, spec: SynthSpec) -> Outcome {
    echo("synth", json!({ "out": out, "spec": spec }));
    make_synthetic_scene(&spec)?.save(out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, arm, out } => train_cmd(&config, arm, out),
        Command::Eval {
            checkpoint,
            scene,
            split_seed,
        } => eval_cmd(&checkpoint, &scene, split_seed),
        Command::Bench { dims, lengths, repeats } => bench_cmd(dims, &lengths, repeats),
        Command::Gradcheck { config } => gradcheck_cmd(&config),
        Command::Inspect { config } => inspect_cmd(&config),
        Command::Synth {
            out,
            classes,
            bands,
            height,
            width,
            separation,
            seed,
        } => synth_cmd(
            &out,
            SynthSpec {
                num_classes: classes,
                bands,
                height,
                width,
                separation,
                seed,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code())
        }
    }
}
