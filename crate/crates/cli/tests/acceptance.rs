//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::f64::consts::{LN_2, SQRT_2};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sagp_core::data::generate_synthetic;
use sagp_core::explain::{
    compact_term, explain_instance, fidelity_term, loss_compact, loss_fidelity, loss_mask_reg, mask_reg_terms,
    random_mask_baseline, supervised_term, term_gradient, topology_term, FidelityTarget, RegReduction, Term,
};
use sagp_core::featurize::EmbeddingProvider;
use sagp_core::graph::complete_adjacency;
use sagp_core::metrics::{
    aligned_gold, evaluate, joint_metrics, mask_diagnostics, rationale_metrics, EvalOptions, FullMatch,
};
use sagp_core::model::{
    accuracy, forward_full, forward_perturbed, train_base, FeaturizerSettings, ModelDims, Readout, TrainExample,
};
use sagp_core::{
    EvidenceGraph, ExplainConfig, Explanation, GraphOptions, Instance, MaskMode, MaskSpec, Matrix, ModelCheckpoint,
    SynthConfig, Tape, TrainConfig, Var,
};

type Outcome = Result<String, String>;
/// `(pred, gold, precision, recall, f1, exact)`.
type RationaleCase = (Vec<bool>, Vec<bool>, f64, f64, f64, bool);
/// `(claim correct, pred, gold, part, full)`.
type JointCase = (bool, Vec<bool>, Vec<bool>, bool, bool);

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).unwrap();
    Matrix::new(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EvidenceGraph {
    let features = gaussian(rng, n, dim, 1.0);
    let gold = (0..n).map(|_| rng.random_bool(0.5)).collect();
    EvidenceGraph::fully_connected(features, (0..n).map(|i| format!("s{i}")).collect(), Some(gold)).unwrap()
}

fn random_checkpoint(dim: usize, seed: u64) -> ModelCheckpoint {
    let dims = ModelDims {
        dim,
        layers: 2,
        residual: true,
        readout: Readout::Mean,
    };
    ModelCheckpoint::init(dims, FeaturizerSettings::default(), 0.3, seed).unwrap()
}

fn central_difference(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    const EPS: f64 = 1e-5;
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += EPS;
        let mut lo = x.clone();
        lo.data_mut()[i] -= EPS;
        grad.data_mut()[i] = (f(&hi) - f(&lo)) / (2.0 * EPS);
    }
    grad
}

fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn tape_check(x: &Matrix, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let eval = |m: &Matrix| {
        let mut t = Tape::new();
        let v = t.leaf(m.clone());
        let r = build(&mut t, v);
        t.value(r).scalar_value()
    };
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let r = build(&mut t, v);
    t.backward(r).unwrap();
    rel_error(t.grad(v), &central_difference(x, eval))
}

fn mask_check(ckpt: &ModelCheckpoint, g: &EvidenceGraph, mask: &MaskSpec, cfg: &ExplainConfig, term: Term) -> f64 {
    let (_, grad) = term_gradient(ckpt, g, mask, cfg, term).unwrap();
    let value = |m: &MaskSpec| term_gradient(ckpt, g, m, cfg, term).unwrap().0;
    let mut err = 0.0f64;
    if let (Some(p), Some(gp)) = (&mask.edge_logits, &grad.edge_logits) {
        let fd = central_difference(p, |x| {
            value(&MaskSpec {
                edge_logits: Some(x.clone()),
                ..mask.clone()
            })
        });
        err = err.max(rel_error(gp, &fd));
    }
    if let (Some(p), Some(gp)) = (&mask.node_logits, &grad.node_logits) {
        let fd = central_difference(p, |x| {
            value(&MaskSpec {
                node_logits: Some(x.clone()),
                ..mask.clone()
            })
        });
        err = err.max(rel_error(gp, &fd));
    }
    err
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let dim = 6;
    let mut worst = 0.0f64;
    let mut instances = 0;
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=8);
        let g = random_graph(&mut rng, n, dim);
        let ckpt = random_checkpoint(dim, seed);
        let mode = [MaskMode::Edge, MaskMode::Node, MaskMode::All][seed as usize % 3];
        let mut mask = MaskSpec::constant(mode, n, 0.0);
        mask.edge_logits = mask.edge_logits.map(|_| gaussian(&mut rng, n, n, 1.0));
        mask.node_logits = mask.node_logits.map(|_| gaussian(&mut rng, n, 1, 1.0));

        let mut cfg = ExplainConfig::new(mode);
        for term in [Term::Fidelity, Term::Compact, Term::Topology, Term::Sum, Term::Entropy] {
            worst = worst.max(mask_check(&ckpt, &g, &mask, &cfg, term));
        }
        cfg.supervised = true;
        worst = worst.max(mask_check(&ckpt, &g, &mask, &cfg, Term::Supervised));

        // Head inputs: subgraph logits, assignment, representations, head logits.
        let a = complete_adjacency(n);
        let gold = g.gold.clone().unwrap();
        let z = gaussian(&mut rng, 1, 2, 2.0);
        let s = gaussian(&mut rng, n, 2, 1.0).map(|v| 1.0 / (1.0 + (-v).exp()));
        let u = gaussian(&mut rng, n, dim, 0.5);
        let h = gaussian(&mut rng, n, 2, 2.0);
        let p = gaussian(&mut rng, n, n, 2.0);
        for target in [FidelityTarget::Hard, FidelityTarget::SoftKl] {
            worst = worst.max(tape_check(&z, &|t, v| {
                let lp = t.row_log_softmax(v).unwrap();
                fidelity_term(t, lp, [0.3, 0.7], target).unwrap()
            }));
        }
        worst = worst.max(tape_check(&s, &|t, v| compact_term(t, v, &a).unwrap()));
        worst = worst.max(tape_check(&u, &|t, v| topology_term(t, v, &a).unwrap()));
        worst = worst.max(tape_check(&p, &|t, v| {
            mask_reg_terms(t, v, true, RegReduction::Mean).unwrap().0
        }));
        worst = worst.max(tape_check(&p, &|t, v| {
            mask_reg_terms(t, v, true, RegReduction::Mean).unwrap().1
        }));
        worst = worst.max(tape_check(&h, &|t, v| supervised_term(t, v, &gold).unwrap()));
        instances += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{instances} instances, worst relative error {worst:.2e}, {secs:.1}s");
    if worst < 1e-3 && secs < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn deletion() -> Outcome {
    let dim = 8;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=8);
        let g = random_graph(&mut rng, n, dim);
        let ckpt = random_checkpoint(dim, seed);
        for _ in 0..5 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            let mut mask = MaskSpec::constant(MaskMode::Edge, n, 50.0);
            mask.edge_logits.as_mut().unwrap().set(i, j, -30.0);
            let masked = forward_perturbed(&ckpt, &g, &mask).unwrap();
            let mut cut = g.clone();
            cut.normalized.set(i, j, 0.0);
            worst = worst.max(masked.max_abs_diff(&forward_full(&ckpt, &cut).unwrap().0));
            pairs += 1;
        }
    }
    let detail = format!("{pairs} pairs, max abs difference {worst:.2e}");
    if worst < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn closed_forms() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    for mode in [MaskMode::Edge, MaskMode::Node] {
        let (sum, ent) = loss_mask_reg(&MaskSpec::constant(mode, 5, 0.0), RegReduction::Mean).unwrap()[0];
        expect("sum at zero logits", sum, 0.5, 1e-12);
        expect("entropy at zero logits", ent, LN_2, 1e-12);
    }
    let a = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
    let diag = Matrix::identity(2);
    let merged = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
    expect(
        "compact, diagonal assignment",
        loss_compact(&diag, &a).unwrap(),
        3f64.sqrt(),
        1e-9,
    );
    expect(
        "compact, merged assignment",
        loss_compact(&merged, &a).unwrap(),
        1.0,
        1e-9,
    );
    expect(
        "compact, empty assignment",
        loss_compact(&Matrix::zeros(2, 2), &a).unwrap(),
        SQRT_2,
        1e-9,
    );
    expect("sigmoid(0)", sagp_core::tensor::sigmoid(0.0), 0.5, 0.0);
    let sm = sagp_core::tensor::softmax(&[2.0, 0.0]);
    expect("softmax[2,0]_0", sm[0], 0.88079708, 5e-9);
    expect("softmax[2,0]_1", sm[1], 0.11920292, 5e-9);
    expect("fidelity", loss_fidelity([0.9, 0.1], [1.0, 0.0]), 0.10536052, 5e-9);
    let mut t = Tape::new();
    let x = t.leaf(Matrix::zeros(2, 3));
    let s = t.sigmoid(x).unwrap();
    let total = t.sum(s);
    t.backward(total).unwrap();
    expect(
        "d sum sigmoid at 0",
        t.grad(x).data().iter().fold(0.0, |m: f64, v| m.max((v - 0.25).abs())),
        0.0,
        0.0,
    );
    if failures.is_empty() {
        Ok("mask regularizers, compact hand cases, softmax/sigmoid/fidelity spot values".into())
    } else {
        Err(failures.join("; "))
    }
}

fn metric_oracles() -> Outcome {
    let set = |n: usize, ids: &[usize]| -> Vec<bool> { (0..n).map(|i| ids.contains(&i)).collect() };
    let rationale_cases: Vec<RationaleCase> = vec![
        (set(5, &[0, 1]), set(5, &[0, 1]), 1.0, 1.0, 1.0, true),
        (set(5, &[0, 2]), set(5, &[0, 1]), 0.5, 0.5, 0.5, false),
        (set(5, &[]), set(5, &[1]), 0.0, 0.0, 0.0, false),
        (set(4, &[]), set(4, &[]), 1.0, 1.0, 1.0, true),
        (set(4, &[2]), set(4, &[]), 0.0, 0.0, 0.0, false),
        (set(4, &[0, 1, 2, 3]), set(4, &[0]), 0.25, 1.0, 0.4, false),
        (set(8, &[0, 1]), set(8, &[0, 1, 2, 3]), 1.0, 0.5, 2.0 / 3.0, false),
    ];
    let joint_cases: Vec<JointCase> = vec![
        (true, set(5, &[0, 1, 2]), set(5, &[0, 1, 2]), true, true),
        (true, set(5, &[0]), set(5, &[0, 1, 2]), true, false),
        (false, set(5, &[0, 1, 2]), set(5, &[0, 1, 2]), false, false),
        (true, set(5, &[0, 1, 2, 4]), set(5, &[0, 1, 2]), true, true),
        (true, set(5, &[3, 4]), set(5, &[0, 1, 2]), false, false),
    ];
    let mut failures = Vec::new();
    for (k, (pred, gold, p, r, f1, exact)) in rationale_cases.iter().enumerate() {
        let s = rationale_metrics(pred, gold).unwrap();
        if (s.precision, s.recall, s.exact) != (*p, *r, *exact) || (s.f1 - f1).abs() > 1e-15 {
            failures.push(format!("rationale case {k}: {s:?}"));
        }
    }
    for (k, (claim, pred, gold, part, full)) in joint_cases.iter().enumerate() {
        let got = joint_metrics(*claim, pred, gold, FullMatch::Superset);
        if got != (*part, *full) {
            failures.push(format!("joint case {k}: {got:?}"));
        }
    }
    let cases = rationale_cases.len() + joint_cases.len();
    if failures.is_empty() {
        Ok(format!("{cases} hand cases"))
    } else {
        Err(failures.join("; "))
    }
}

struct Suite {
    test: Vec<Instance>,
    examples: Vec<TrainExample>,
    ckpt: ModelCheckpoint,
}

fn base_model() -> (Suite, Outcome) {
    let train = generate_synthetic(&SynthConfig::default()).unwrap();
    let test = generate_synthetic(&SynthConfig {
        num_instances: 50,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let provider = EmbeddingProvider::hashed(32).unwrap();
    let opts = GraphOptions::default();
    let tr: Vec<_> = train
        .iter()
        .map(|i| i.train_example(&provider, opts).unwrap())
        .collect();
    let examples: Vec<_> = test.iter().map(|i| i.train_example(&provider, opts).unwrap()).collect();
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let (ckpt, _) = train_base(&tr, FeaturizerSettings::default(), &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let acc = accuracy(&ckpt, &examples).unwrap();
    let detail = format!("test accuracy {acc:.3} after {} epochs in {secs:.1}s", cfg.epochs);
    let outcome = if acc >= 0.95 && cfg.epochs <= 200 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    };
    (Suite { test, examples, ckpt }, outcome)
}

fn explain_suite(s: &Suite, supervised: bool) -> Vec<Explanation> {
    let cfg = ExplainConfig {
        supervised,
        ..ExplainConfig::new(MaskMode::Edge)
    };
    s.examples
        .iter()
        .map(|e| explain_instance(&s.ckpt, &e.id, &e.graph, &cfg).unwrap())
        .collect()
}

fn rationale_recovery(s: &Suite, ex: &[Explanation]) -> (f64, Outcome) {
    let report = evaluate(&s.test, ex, EvalOptions::default()).unwrap();
    let (mut base_f1, mut base_ext) = (0.0, 0.0);
    for e in &s.examples {
        let pred = random_mask_baseline(e.graph.num_nodes(), 0, &e.id);
        let score = rationale_metrics(&pred, e.graph.gold.as_deref().unwrap()).unwrap();
        base_f1 += score.f1;
        base_ext += f64::from(u8::from(score.exact));
    }
    let n = s.examples.len() as f64;
    let (base_f1, base_ext) = (base_f1 / n, base_ext / n);
    let detail = format!(
        "rationale F1 {:.3}, Ext.acc {:.3}; random baseline F1 {base_f1:.3}, Ext.acc {base_ext:.3}",
        report.rationale_f1, report.ext_acc
    );
    let ok = report.rationale_f1 >= 0.85
        && report.ext_acc >= 0.60
        && report.rationale_f1 - base_f1 >= 0.3
        && report.ext_acc - base_ext >= 0.3;
    (report.ext_acc, if ok { Ok(detail) } else { Err(detail) })
}

fn supervision_gain(s: &Suite, unsupervised_ext: f64, ex: &[Explanation]) -> Outcome {
    let report = evaluate(&s.test, ex, EvalOptions::default()).unwrap();
    let gain = report.ext_acc - unsupervised_ext;
    let detail = format!(
        "Ext.acc {:.3} supervised vs {unsupervised_ext:.3} unsupervised (gain {gain:+.3})",
        report.ext_acc
    );
    if gain >= 0.05 - 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mask_sanity(s: &Suite, ex: &[Explanation]) -> Outcome {
    let items: Vec<_> = s
        .test
        .iter()
        .zip(&s.examples)
        .zip(ex)
        .map(|((i, e), x)| (i, &e.graph, x))
        .collect();
    let report = mask_diagnostics(&s.ckpt, &items, 0.5).unwrap();
    let partition = report.per_instance.iter().zip(&s.examples).all(|(m, e)| {
        let n = e.graph.num_nodes();
        m.removed + m.retained == n * (n - 1) && m.total == n * (n - 1)
    });
    let detail = format!(
        "partition identity {}, fidelity drop {:.1} pp, size {:.2}, sparsity {:.2}%",
        if partition { "holds" } else { "violated" },
        report.fidelity_drop,
        report.size,
        report.sparsity
    );
    if partition && report.fidelity_drop <= 5.0 + 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn full_implies_part(s: &Suite, runs: &[&[Explanation]]) -> bool {
    runs.iter().all(|ex| {
        s.test.iter().zip(*ex).all(|(inst, e)| {
            let gold = aligned_gold(inst, &e.node_ids);
            let (part, full) = joint_metrics(
                e.verdict_pred == inst.label,
                &e.rationale_set,
                &gold,
                FullMatch::Superset,
            );
            !full || part
        })
    })
}

fn sagp(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sagp"))
        .args(args)
        .current_dir(dir)
        .env_remove("SAGP_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() == Some(0) {
        Ok(())
    } else {
        Err(format!(
            "`sagp {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn pipeline(dir: &Path, jobs: &str) -> Result<Duration, String> {
    let start = Instant::now();
    sagp(dir, &["gen-synth", "--out", "train.jsonl", "--test-out", "test.jsonl"])?;
    sagp(dir, &["train", "--data", "train.jsonl", "--out-ckpt", "model.json"])?;
    sagp(
        dir,
        &[
            "explain",
            "--data",
            "test.jsonl",
            "--ckpt",
            "model.json",
            "--out",
            "explanations.jsonl",
            "--jobs",
            jobs,
        ],
    )?;
    sagp(
        dir,
        &[
            "eval",
            "--data",
            "test.jsonl",
            "--explanations",
            "explanations.jsonl",
            "--ckpt",
            "model.json",
            "--out-report",
            "report.json",
        ],
    )?;
    sagp(
        dir,
        &[
            "render-mask",
            "--explanations",
            "explanations.jsonl",
            "--instance-id",
            "synth-1-00000",
            "--out",
            "mask.svg",
        ],
    )?;
    Ok(start.elapsed())
}

fn end_to_end() -> (Result<(tempfile::TempDir, Duration), String>, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    match pipeline(dir.path(), "1") {
        Ok(elapsed) => {
            let secs = elapsed.as_secs_f64();
            let detail = format!("gen-synth, train, explain, eval, render-mask exited 0 in {secs:.1}s");
            let outcome = if secs < 300.0 { Ok(detail) } else { Err(detail) };
            (Ok((dir, elapsed)), outcome)
        }
        Err(e) => (Err(e.clone()), Err(e)),
    }
}

fn determinism(first: &Result<(tempfile::TempDir, Duration), String>) -> Outcome {
    let first = first.as_ref().map_err(|e| format!("first run failed: {e}"))?;
    let second = tempfile::tempdir().unwrap();
    pipeline(second.path(), "4")?;
    let mut differing = Vec::new();
    for file in [
        "train.jsonl",
        "test.jsonl",
        "model.json",
        "explanations.jsonl",
        "report.json",
        "mask.svg",
    ] {
        let a = std::fs::read(first.0.path().join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.path().join(file)).map_err(|e| e.to_string())?;
        if a != b {
            differing.push(file);
        }
    }
    if differing.is_empty() {
        Ok("checkpoint, explanation and report files byte-identical across runs (1 vs 4 jobs)".into())
    } else {
        Err(format!("files differ: {}", differing.join(", ")))
    }
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |k: usize, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {k:>2} {name}: {detail}");
        results.push((k, name, outcome));
    };

    report(1, "gradient correctness", gradients());
    report(2, "deletion equivalence", deletion());
    report(3, "closed-form loss values", closed_forms());

    let (suite, base) = base_model();
    report(4, "base model", base);
    let unsupervised = explain_suite(&suite, false);
    let supervised = explain_suite(&suite, true);
    let (unsup_ext, recovery) = rationale_recovery(&suite, &unsupervised);
    report(5, "rationale recovery", recovery);
    report(6, "supervised gain", supervision_gain(&suite, unsup_ext, &supervised));
    report(7, "mask diagnostics", mask_sanity(&suite, &unsupervised));
    let metrics = metric_oracles().and_then(|d| {
        if full_implies_part(&suite, &[&unsupervised, &supervised]) {
            Ok(format!("{d}; acc-full implies acc-part on all evaluated instances"))
        } else {
            Err("acc-full without acc-part on some instance".into())
        }
    });
    report(8, "metric oracles", metrics);

    let (first, smoke) = end_to_end();
    report(9, "determinism", determinism(&first));
    report(10, "end-to-end smoke", smoke);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
