//! Why mimic demonstrations at all: the inference-cost argument.
//!
//! A k-shot prompt carries k demonstration blocks plus the query; a trained
//! shift variant answers from the query token alone. Token counts differ
//! by exactly the demonstration length, and with quadratic attention the
//! wall-clock gap is even larger.
//!
//! Run with: `cargo run --example latency`

use mimic_icl::model::{ModelConfig, ModelParams};
use mimic_icl::shift_variants::{build_variant, VariantConfig, VariantKind};
use mimic_icl::tasks::{latency_bench, MappingTask, TaskFamily, TokenLayout};

fn main() {
    let cfg = ModelConfig::toy(17);
    let model = ModelParams::init(&cfg).unwrap();
    // Realistic prompts pad each demonstration block; block length 6 here.
    let layout = TokenLayout::padded(&cfg, 6);
    let task = MappingTask::from_seed(TaskFamily::Permutation, 8, 3).unwrap();
    let variant = build_variant(&VariantConfig::new(VariantKind::Mimic), &cfg).unwrap();

    println!("{:>3}  {:>10} {:>12}  {:>10} {:>12}  {:>8}", "k", "icl tokens", "icl ms/query", "var tokens", "var ms/query", "speedup");
    for k in [1, 2, 4, 8] {
        let rep = latency_bench(&model, &variant, &task, k, 20, 0, &layout).unwrap();
        // Token counts are exact: k blocks of 6 plus the query token vs the
        // query token alone.
        assert_eq!(rep.icl_tokens, k * 6 + 1);
        assert_eq!(rep.variant_tokens, 1);
        println!(
            "{k:>3}  {:>10} {:>12.3}  {:>10} {:>12.3}  {:>7.1}x",
            rep.icl_tokens,
            rep.icl_latency_s * 1e3,
            rep.variant_tokens,
            rep.variant_latency_s * 1e3,
            rep.speedup
        );
    }
}
