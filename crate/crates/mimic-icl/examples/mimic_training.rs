//! The dual-forward distillation loop, end to end at tiny scale.
//!
//! Each step samples a k-shot episode from a fixed mapping task and runs
//! two forwards: a frozen *teacher* over `[demonstrations; query]`, and a
//! *student* over the query alone with the trainable shift heads active.
//! The loss aligns the student's per-layer hidden states with the teacher's
//! query-position states (L2, question rows), plus λ times the answer
//! cross-entropy. Only the shift parameters train — the base stays frozen.
//!
//! Run with: `cargo run --example mimic_training`

use mimic_icl::model::{ModelConfig, ModelParams};
use mimic_icl::rng::substream;
use mimic_icl::shift_variants::{VariantConfig, VariantKind};
use mimic_icl::tasks::{generate_task_dataset, MappingTask, TaskFamily, TokenLayout};
use mimic_icl::training::{train_loop, TrainConfig};

fn main() {
    let cfg = ModelConfig::tiny(11);
    let model = ModelParams::init(&cfg).unwrap();
    let layout = TokenLayout::compact(&cfg);

    let task = MappingTask::from_seed(TaskFamily::Permutation, 8, 1).unwrap();
    let mut rng = substream(5, "training_example");
    let dataset = generate_task_dataset(&task, 40, &mut rng, None).unwrap();

    let mut tc = TrainConfig::defaults(VariantConfig::new(VariantKind::Mimic), 9);
    tc.k_shots = 4;
    tc.epochs = 5;

    let before = model.checksum();
    let outcome = train_loop(&model, &dataset, &tc, &layout).unwrap();
    assert_eq!(model.checksum(), before, "the base model must stay frozen");

    let first = &outcome.log[0];
    let last = outcome.log.last().unwrap();
    println!("steps: {}", outcome.log.len());
    println!(
        "first step: align {:.4}  gt {:.4}  total {:.4}",
        first.align, first.gt, first.total
    );
    println!(
        "last step:  align {:.4}  gt {:.4}  total {:.4}",
        last.align, last.gt, last.total
    );
    assert!(last.total < first.total, "distillation should reduce the loss");

    // The bookkeeping identity total = align + λ·gt holds for every record.
    for r in &outcome.log {
        assert!((r.total - (r.align + tc.lambda * r.gt)).abs() < 1e-12);
    }

    // Determinism: the same seed reproduces the run bit for bit.
    let rerun = train_loop(&model, &dataset, &tc, &layout).unwrap();
    assert_eq!(outcome.log.len(), rerun.log.len());
    for (a, b) in outcome.log.iter().zip(&rerun.log) {
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    println!("rerun with the same seed: identical log ✓");

    println!(
        "trained parameters: {} (the base holds {})",
        outcome.variant.param_count(),
        model.num_params()
    );
}
