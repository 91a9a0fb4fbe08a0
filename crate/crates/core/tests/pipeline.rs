mod common;

use common::*;
use sagp_core::data::{
    claim_entities, generate_synthetic, load_explanations, oracle_verdict, save_explanations, synthetic_vocabulary,
    OracleVerdict,
};
use sagp_core::explain::{FidelityTarget, MaskInit, RegReduction};
use sagp_core::featurize::EmbeddingProvider;
use sagp_core::{explain_instance, ExplainConfig, GraphOptions, MaskMode, SynthConfig};

fn suite(num: usize, seed: u64) -> (SynthConfig, Vec<sagp_core::Instance>) {
    let cfg = SynthConfig {
        num_instances: num,
        seed,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    (cfg, data)
}

/// Every subset of evidence that yields the gold verdict contains the
/// planted rationales, and the planted set alone yields it: the planted set
/// is the unique minimal sufficient subset.
#[test]
fn planted_set_is_the_unique_minimal_sufficient_subset() {
    let (cfg, data) = suite(40, 11);
    let vocab = synthetic_vocabulary(&cfg);
    for inst in &data {
        let entities = claim_entities(&vocab, &inst.claim);
        assert_eq!(entities.len(), cfg.rationales);
        let n = inst.evidence.len();
        let planted: u32 = (0..n)
            .filter(|&i| inst.evidence[i].is_rationale == Some(true))
            .map(|i| 1 << i)
            .sum();
        let target = OracleVerdict::from(inst.label);
        let mut minimal = Vec::new();
        for subset in 0u32..(1 << n) {
            let texts: Vec<&str> = (0..n)
                .filter(|i| subset & (1 << i) != 0)
                .map(|i| inst.evidence[i].text.as_str())
                .collect();
            let sufficient = oracle_verdict(&vocab, &entities, &texts) == target;
            assert_eq!(sufficient, subset & planted == planted, "{} subset {subset:b}", inst.id);
            if sufficient && minimal.iter().all(|&m: &u32| m & subset != m) {
                minimal.push(subset);
            }
        }
        assert_eq!(minimal, vec![planted]);
    }
}

fn graphs(data: &[sagp_core::Instance]) -> Vec<sagp_core::EvidenceGraph> {
    let provider = EmbeddingProvider::hashed(32).unwrap();
    data.iter()
        .map(|i| i.graph(&provider, GraphOptions::default()).unwrap())
        .collect()
}

#[test]
fn checkpoint_is_untouched_by_explanation() {
    let (_, data) = suite(3, 5);
    let gs = graphs(&data);
    let ckpt = random_checkpoint(32, 1);
    let before = serde_json::to_string(&ckpt).unwrap();
    for mode in [MaskMode::Edge, MaskMode::Node, MaskMode::All] {
        let mut cfg = ExplainConfig::new(mode);
        cfg.epochs = 20;
        cfg.supervised = mode == MaskMode::All;
        explain_instance(&ckpt, &data[0].id, &gs[0], &cfg).unwrap();
    }
    assert_eq!(serde_json::to_string(&ckpt).unwrap(), before);
}

#[test]
fn zero_epochs_reports_the_initial_mask() {
    let (_, data) = suite(1, 6);
    let gs = graphs(&data);
    let ckpt = random_checkpoint(32, 2);
    let mut cfg = ExplainConfig::new(MaskMode::All);
    cfg.epochs = 0;
    let e = explain_instance(&ckpt, &data[0].id, &gs[0], &cfg).unwrap();
    assert_eq!(e.losses.trace.len(), 1);
    assert_eq!(e.losses.trace[0], e.losses.last);
    for m in [
        e.mask.edge_probabilities().unwrap(),
        e.mask.node_probabilities().unwrap(),
    ] {
        assert!(m.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn identical_seeds_give_identical_traces() {
    let (_, data) = suite(2, 7);
    let gs = graphs(&data);
    let ckpt = random_checkpoint(32, 3);
    let mut cfg = ExplainConfig::new(MaskMode::All);
    cfg.init = MaskInit::Gaussian(0.1);
    cfg.seed = 42;
    let a = explain_instance(&ckpt, &data[1].id, &gs[1], &cfg).unwrap();
    let b = explain_instance(&ckpt, &data[1].id, &gs[1], &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    cfg.seed = 43;
    let c = explain_instance(&ckpt, &data[1].id, &gs[1], &cfg).unwrap();
    assert_ne!(a.losses.trace, c.losses.trace);
}

#[test]
fn loss_terms_stay_nonnegative_and_finite() {
    let (_, data) = suite(4, 8);
    let gs = graphs(&data);
    let ckpt = random_checkpoint(32, 4);
    for (k, mode) in [MaskMode::Edge, MaskMode::Node, MaskMode::All].into_iter().enumerate() {
        for supervised in [false, true] {
            let mut cfg = ExplainConfig::new(mode);
            cfg.supervised = supervised;
            cfg.fidelity = if k == 1 {
                FidelityTarget::SoftKl
            } else {
                FidelityTarget::Hard
            };
            cfg.reduction = if k == 2 {
                RegReduction::RawSum
            } else {
                RegReduction::Mean
            };
            let e = explain_instance(&ckpt, &data[k].id, &gs[k], &cfg).unwrap();
            assert_eq!(e.losses.trace.len(), cfg.epochs + 1);
            for terms in &e.losses.trace {
                assert!(terms.total.is_finite());
                for (name, v) in terms.named() {
                    assert!(v >= 0.0 && v.is_finite(), "{mode:?} {name} = {v}");
                }
            }
        }
    }
}

#[test]
fn explanations_round_trip_through_disk() {
    let (_, data) = suite(3, 9);
    let gs = graphs(&data);
    let ckpt = random_checkpoint(32, 5);
    let cfg = ExplainConfig::new(MaskMode::All);
    let out: Vec<_> = data
        .iter()
        .zip(&gs)
        .map(|(i, g)| explain_instance(&ckpt, &i.id, g, &cfg).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ex.jsonl");
    save_explanations(&path, &out).unwrap();
    let back = load_explanations(&path).unwrap();
    assert_eq!(back.len(), out.len());
    for (a, b) in back.iter().zip(&out) {
        assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
    }
}
