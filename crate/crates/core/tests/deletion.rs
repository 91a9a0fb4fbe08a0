mod common;

use common::*;
use rand::Rng;
use sagp_core::model::{forward_full, forward_perturbed};
use sagp_core::{MaskMode, MaskSpec};

/// A logit of -30 on one directed edge (others saturated open) matches the
/// plain forward pass on a graph whose normalized operator has that entry
/// removed.
#[test]
fn closed_edge_equals_removed_entry() {
    let dim = 8;
    let mut pairs = 0;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(900 + seed);
        let n = r.random_range(2..=8);
        let g = random_graph(&mut r, n, dim);
        let ckpt = random_checkpoint(dim, seed);
        for _ in 0..5 {
            let (i, j) = (r.random_range(0..n), r.random_range(0..n));
            let mut mask = MaskSpec::constant(MaskMode::Edge, n, 50.0);
            mask.edge_logits.as_mut().unwrap().set(i, j, -30.0);
            let masked = forward_perturbed(&ckpt, &g, &mask).unwrap();
            let mut cut = g.clone();
            cut.normalized.set(i, j, 0.0);
            let (plain, _) = forward_full(&ckpt, &cut).unwrap();
            let diff = masked.max_abs_diff(&plain);
            assert!(diff < 1e-9, "seed {seed} edge ({i},{j}): {diff}");
            worst = worst.max(diff);
            pairs += 1;
        }
    }
    assert_eq!(pairs, 100);
    eprintln!("worst deviation {worst:.2e}");
}
