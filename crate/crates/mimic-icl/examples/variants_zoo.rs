//! Every shift mechanism in the crate, at a glance.
//!
//! All variants start from a *neutral* initialization: their forward pass
//! reproduces the frozen base model exactly (to 1e-12, bit-for-bit for the
//! patching baselines), so nothing is accidentally perturbed before
//! training. This example builds each one against a tiny base, prints its
//! trainable parameter count, and verifies the neutrality.
//!
//! Run with: `cargo run --example variants_zoo`

use mimic_icl::model::{forward_with_trace, AlignPoint, ModelConfig, ModelParams};
use mimic_icl::shift_variants::{build_variant, variant_forward, VariantConfig, VariantKind};

fn main() {
    let cfg = ModelConfig::tiny(3);
    let model = ModelParams::init(&cfg).unwrap();
    let tokens = [1usize, 5, 2, 9, 0, 7];
    let base = forward_with_trace(&model, &tokens, None, AlignPoint::AfterFfn).unwrap();

    println!("{:<18} {:>8}  neutral-init max |Δlogit|", "variant", "params");
    for kind in VariantKind::ALL {
        let vc = VariantConfig::new(kind);
        let variant = build_variant(&vc, &cfg).unwrap();

        // The patching baselines replace one row's hidden state; give them
        // the final row, as at generation time.
        let patch_row = kind.uses_patch().then_some(tokens.len() - 1);
        let run = variant_forward(&model, &variant, &tokens, AlignPoint::AfterFfn, patch_row)
            .unwrap();

        let max_diff = base
            .logits
            .data
            .iter()
            .zip(&run.trace.logits.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!("{:<18} {:>8}  {:.3e}", format!("{kind:?}"), variant.param_count(), max_diff);
        assert!(max_diff < 1e-12, "{kind:?} must start neutral");
    }

    // The gate statistics are observable too: a mimic forward exposes μ̃ per
    // layer, head, and row. At neutral init f ≡ 0, so μ̃ = σ(−log Z₂) — small
    // but not zero; the shift stays zero because v = 0.
    let variant = build_variant(&VariantConfig::new(VariantKind::Mimic), &cfg).unwrap();
    let run = variant_forward(&model, &variant, &tokens, AlignPoint::AfterFfn, None).unwrap();
    let mu0 = &run.mu_per_layer[0][0];
    println!(
        "\nμ̃ at neutral init (layer 0, head 0, per row): {:?}",
        mu0.data.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
}
