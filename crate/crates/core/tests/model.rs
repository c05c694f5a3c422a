use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vphype::backbone::ModelConfig;
use vphype::diagnostics::{model_grad_check, primitive_suite};
use vphype::model::Model;
use vphype::prompts::{PromptBank, PromptConfig};
use vphype::Tensor;

fn tiny_model(depths: [usize; 4], seed: u64) -> Model {
    let cfg = ModelConfig {
        depths,
        ..ModelConfig::tiny(3, 4)
    };
    Model::new(&cfg, &PromptConfig::default(), PromptBank::synthetic(2, 1).unwrap(), seed).unwrap()
}

#[test]
fn end_to_end_gradients() {
    let t0 = Instant::now();
    let model = tiny_model([1, 1, 1, 1], 3);
    let x = Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    for r in model_grad_check(&model, &x, &[1, 3], 2).unwrap() {
        eprintln!("{} {:.3e} ({} coords)", r.name, r.max_rel_error, r.checked);
        assert!(r.max_rel_error < 1e-5, "{}: {}", r.name, r.max_rel_error);
    }
    eprintln!("elapsed {:?}", t0.elapsed());
}

#[test]
fn end_to_end_gradients_with_scan_blocks() {
    let model = tiny_model([2, 2, 1, 1], 5);
    let x = Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    for r in model_grad_check(&model, &x, &[0, 2], 2).unwrap() {
        assert!(r.max_rel_error < 1e-5, "{}: {}", r.name, r.max_rel_error);
    }
}

#[test]
fn primitive_suite_passes() {
    for r in primitive_suite(5, 1).unwrap() {
        assert!(r.max_rel_error < 1e-6, "{}: {}", r.name, r.max_rel_error);
    }
}
