//! Trains on a 200/50 synthetic split with default settings and reports
//! rationale recovery for unsupervised and supervised explanation. The
//! optional argument is the training seed; the test split uses seed + 1.

use std::time::Instant;

use sagp_core::data::generate_synthetic;
use sagp_core::explain::{explain_instance, random_mask_baseline};
use sagp_core::featurize::EmbeddingProvider;
use sagp_core::metrics::{evaluate, mask_diagnostics, rationale_metrics, EvalOptions};
use sagp_core::model::{accuracy, train_base, FeaturizerSettings, MaskMode, TrainConfig};
use sagp_core::{ExplainConfig, GraphOptions, SynthConfig};

fn main() -> sagp_core::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let train = generate_synthetic(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    let test = generate_synthetic(&SynthConfig {
        num_instances: 50,
        seed: seed + 1,
        ..SynthConfig::default()
    })?;
    let provider = EmbeddingProvider::hashed(32)?;
    let opts = GraphOptions::default();
    let tr: Vec<_> = train
        .iter()
        .map(|i| i.train_example(&provider, opts))
        .collect::<Result<_, _>>()?;
    let te: Vec<_> = test
        .iter()
        .map(|i| i.train_example(&provider, opts))
        .collect::<Result<_, _>>()?;

    let t = Instant::now();
    let (ckpt, _) = train_base(&tr, FeaturizerSettings::default(), &TrainConfig::default())?;
    println!(
        "trained in {:.1}s, test accuracy {:.3}",
        t.elapsed().as_secs_f64(),
        accuracy(&ckpt, &te)?
    );

    for supervised in [false, true] {
        let cfg = ExplainConfig {
            supervised,
            ..ExplainConfig::new(MaskMode::Edge)
        };
        let ex: Vec<_> = te
            .iter()
            .map(|e| explain_instance(&ckpt, &e.id, &e.graph, &cfg))
            .collect::<Result<_, _>>()?;
        let mut report = evaluate(&test, &ex, EvalOptions::default())?;
        let items: Vec<_> = test
            .iter()
            .zip(&te)
            .zip(&ex)
            .map(|((i, e), x)| (i, &e.graph, x))
            .collect();
        report.mask = Some(mask_diagnostics(&ckpt, &items, 0.5)?);
        println!("\nsupervised = {supervised}\n{}", report.to_table());
    }

    let mut f1 = 0.0;
    for e in &te {
        let pred = random_mask_baseline(e.graph.num_nodes(), 0, &e.id);
        f1 += rationale_metrics(&pred, e.graph.gold.as_deref().unwrap_or_default())?.f1;
    }
    println!("random baseline rationale F1 {:.3}", f1 / te.len() as f64);
    Ok(())
}
