//! Latent-distance diagnostics: how close is a student to real ICL?
//!
//! For each evaluation sample the teacher runs k-shot in-context and the
//! student runs zero-shot; the report collects per-layer L2 distance and
//! cosine similarity between their hidden states at the answer-proposing
//! row. An untrained (neutral) shift is exactly the zero-shot baseline;
//! training pulls the student toward the teacher, so its distances shrink
//! and its cosines rise.
//!
//! Run with: `cargo run --example distance_report`

use mimic_icl::model::{AlignPoint, ModelConfig, ModelParams};
use mimic_icl::rng::substream;
use mimic_icl::shift_variants::{build_variant, VariantConfig, VariantKind};
use mimic_icl::tasks::{
    alignment_distance_report, generate_task_dataset, MappingTask, StudentKind, TaskFamily,
    TokenLayout,
};
use mimic_icl::training::{train_loop, TrainConfig};

fn main() {
    let cfg = ModelConfig::tiny(21);
    let model = ModelParams::init(&cfg).unwrap();
    let layout = TokenLayout::compact(&cfg);
    let task = MappingTask::from_seed(TaskFamily::Permutation, 8, 2).unwrap();
    let k = 4;

    let zero = alignment_distance_report(
        &model,
        &StudentKind::ZeroShot,
        &task,
        k,
        50,
        0,
        &layout,
        AlignPoint::AfterFfn,
    )
    .unwrap();
    println!("zero-shot:      mean L2 {:.4}  mean cos {:.4}", zero.mean_l2, zero.mean_cosine);

    // A neutral mimic variant is indistinguishable from zero-shot.
    let neutral = build_variant(&VariantConfig::new(VariantKind::Mimic), &cfg).unwrap();
    let rep = alignment_distance_report(
        &model,
        &StudentKind::Variant(&neutral),
        &task,
        k,
        50,
        0,
        &layout,
        AlignPoint::AfterFfn,
    )
    .unwrap();
    assert_eq!(rep.mean_l2.to_bits(), zero.mean_l2.to_bits());
    println!("neutral mimic:  mean L2 {:.4}  (identical to zero-shot)", rep.mean_l2);

    // Train briefly and measure again.
    let mut rng = substream(3, "distance_example");
    let dataset = generate_task_dataset(&task, 40, &mut rng, None).unwrap();
    let mut tc = TrainConfig::defaults(VariantConfig::new(VariantKind::Mimic), 4);
    tc.k_shots = k;
    tc.epochs = 20;
    let trained = train_loop(&model, &dataset, &tc, &layout).unwrap().variant;

    let rep = alignment_distance_report(
        &model,
        &StudentKind::Variant(&trained),
        &task,
        k,
        50,
        0,
        &layout,
        AlignPoint::AfterFfn,
    )
    .unwrap();
    println!("trained mimic:  mean L2 {:.4}  mean cos {:.4}", rep.mean_l2, rep.mean_cosine);
    println!("per-layer L2:   {:?}", rep.per_layer_l2.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
    assert!(rep.mean_l2 < zero.mean_l2, "training should reduce the distance");
    assert!(rep.mean_cosine > zero.mean_cosine, "…and raise the cosine");
}
