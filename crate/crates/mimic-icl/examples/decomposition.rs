//! The exact attention decomposition, demonstrated numerically.
//!
//! Attention over a segmented prompt `[X_D; X]` (demonstration keys/values
//! `K_D, V_D` followed by the query-visible prefix `K, V`) splits exactly
//! into
//!
//!   SA(q, K_full, V_full) = (1 − μ)·SA(q, K, V) + μ·SA(q, K_D, V_D)
//!
//! where μ is the share of attention mass the query places on the
//! demonstrations. This identity is what makes in-context learning look
//! like an additive shift: the demonstrations contribute one rank-one-ish
//! term with a query-dependent weight, and a trained head can mimic it.
//!
//! Run with: `cargo run --example decomposition`

use mimic_icl::attention::{decomposed_icl_sa, mu, standard_sa};
use mimic_icl::numerics::Tensor;
use mimic_icl::rng::substream;
use rand::Rng;

fn rand_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn main() {
    let mut rng = substream(7, "decomposition_example");
    let d_h = 8; // head dimension
    let l_d = 6; // demonstration tokens
    let l_q = 3; // query-prefix tokens

    let q: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k_d = rand_matrix(l_d, d_h, &mut rng);
    let v_d = rand_matrix(l_d, d_h, &mut rng);
    let k = rand_matrix(l_q, d_h, &mut rng);
    let v = rand_matrix(l_q, d_h, &mut rng);

    // The decomposition returns both sides of the identity plus the worst
    // per-coordinate deviation between them.
    let rep = decomposed_icl_sa(&q, &k_d, &v_d, &k, &v).unwrap();
    println!("μ (attention mass on demonstrations) = {:.6}", rep.mu);
    println!("SA(q,K,V)      = {:?}", round3(&rep.sa_query));
    println!("SA(q,K_D,V_D)  = {:?}", round3(&rep.sa_icd));
    println!("recombined     = {:?}", round3(&rep.combined));
    println!("full reference = {:?}", round3(&rep.full_reference));
    println!("max |diff|     = {:.3e}", rep.max_abs_diff);
    assert!(rep.max_abs_diff < 1e-12, "identity should hold to roundoff");

    // μ behaves like a proper mixing weight: zero without demonstrations,
    // strictly inside (0,1) with them, and increasing when every
    // demonstration key is made more attractive by a uniform score boost.
    let empty = Tensor::new(vec![0, d_h], vec![]).unwrap();
    println!("\nμ with no demonstrations = {}", mu(&q, &empty, &k).unwrap());

    // Boost demo scores by adding δ·q/|q|² to every K_D row: each q·k_i
    // rises by exactly δ·√d_h worth of score, so μ must rise too.
    let q_norm2: f64 = q.iter().map(|x| x * x).sum();
    let mut prev = rep.mu;
    for step in 1..=4 {
        let delta = 0.5 * step as f64;
        let mut data = Vec::with_capacity(l_d * d_h);
        for i in 0..l_d {
            let row = k_d.row(i);
            for j in 0..d_h {
                data.push(row[j] + delta * q[j] / q_norm2);
            }
        }
        let boosted = Tensor::new(vec![l_d, d_h], data).unwrap();
        let m = mu(&q, &boosted, &k).unwrap();
        println!("μ after uniform demo-score boost δ={delta:.1}: {m:.6}");
        assert!(m > prev, "μ must increase monotonically with the boost");
        prev = m;
    }

    // Sanity: the "full" attention really is plain attention over the
    // concatenated context.
    let mut full_k = k_d.data.clone();
    full_k.extend_from_slice(&k.data);
    let mut full_v = v_d.data.clone();
    full_v.extend_from_slice(&v.data);
    let k_full = Tensor::new(vec![l_d + l_q, d_h], full_k).unwrap();
    let v_full = Tensor::new(vec![l_d + l_q, d_h], full_v).unwrap();
    let direct = standard_sa(&q, &k_full, &v_full).unwrap();
    let diff = direct
        .iter()
        .zip(&rep.full_reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("\nconcatenated-context check: max |diff| = {diff:.3e}");
    assert!(diff == 0.0);
}

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
