use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sagp_core::data::{
    dataset_stats, generate_synthetic, load_checkpoint, load_dataset, load_explanations, save_checkpoint, save_dataset,
    save_explanations, Instance,
};
use sagp_core::explain::{explain_instance, FidelityTarget, MaskInit, RegReduction};
use sagp_core::featurize::{EmbeddingProvider, ProviderKind, DEFAULT_MAX_TOKENS};
use sagp_core::metrics::{evaluate, mask_diagnostics, Averaging, EvalOptions, FullMatch};
use sagp_core::model::{accuracy, train_base, FeaturizerSettings, Readout};
use sagp_core::tensor::OptimizerKind;
use sagp_core::{EvidenceGraph, ExplainConfig, Explanation, GraphOptions, MaskMode, SynthConfig, TrainConfig};

mod render;

#[derive(Parser)]
#[command(
    name = "sagp",
    version,
    about = "Rationale subgraph extraction for claim verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-rationale synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Train the base classifier.
    Train(TrainArgs),
    /// Extract a rationale subgraph per instance.
    Explain(ExplainArgs),
    /// Score explanations against gold labels and rationales.
    Eval(EvalArgs),
    /// Draw an edge mask as an SVG heatmap and a text grid.
    RenderMask(RenderArgs),
}

#[derive(Args, Serialize)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    num: usize,
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    rationales: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_overlap: f64,
    #[arg(long, env = "SAGP_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write a held-out split generated from `seed + 1`.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    test_num: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EmbeddingArg {
    HashedBow,
    File,
}

#[derive(Args, Serialize)]
struct EmbeddingArgs {
    #[arg(long, value_enum, default_value_t = EmbeddingArg::HashedBow)]
    embedding: EmbeddingArg,
    /// JSON-lines embedding file for `--embedding file`.
    #[arg(long)]
    embed_file: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Add a node holding the bare claim.
    #[arg(long)]
    claim_node: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_ckpt: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, env = "SAGP_SEED", default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    embedding: EmbeddingArgs,
    /// Weight of the gold-rationale loss on the assignment head.
    #[arg(long, default_value_t = TrainConfig::default().rationale_weight)]
    rationale_weight: f64,
    #[arg(long, default_value_t = TrainConfig::default().perturbation_std)]
    perturbation_std: f64,
    #[arg(long, default_value_t = TrainConfig::default().hard_perturbation_rate)]
    hard_perturbation_rate: f64,
    #[arg(long)]
    no_residual: bool,
    #[arg(long)]
    sum_readout: bool,
    #[arg(long)]
    sgd: bool,
    /// Held-out set whose accuracy is printed after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Edge,
    Node,
    All,
}

impl From<ModeArg> for MaskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Edge => MaskMode::Edge,
            ModeArg::Node => MaskMode::Node,
            ModeArg::All => MaskMode::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum InitArg {
    Zeros,
    Gaussian,
}

#[derive(Args, Serialize)]
struct ExplainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Edge)]
    mode: ModeArg,
    /// Replace the compact term by BCE against gold rationales.
    #[arg(long)]
    supervised: bool,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    /// Sum weight of the mask of `--mode` (the edge mask in `all` mode).
    #[arg(long)]
    lambda4: Option<f64>,
    /// Entropy weight of the mask of `--mode` (the edge mask in `all` mode).
    #[arg(long)]
    lambda5: Option<f64>,
    /// Node-mask sum weight in `all` mode.
    #[arg(long)]
    node_lambda4: Option<f64>,
    /// Node-mask entropy weight in `all` mode.
    #[arg(long)]
    node_lambda5: Option<f64>,
    #[arg(long, env = "SAGP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Zeros)]
    init: InitArg,
    #[arg(long, default_value_t = 0.1)]
    init_std: f64,
    /// Use KL to the full-graph distribution instead of its argmax.
    #[arg(long)]
    soft_fidelity: bool,
    /// Sum the mask regularizers instead of averaging them.
    #[arg(long)]
    raw_sum: bool,
    #[arg(long)]
    sgd: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Embedding file, when the checkpoint was trained on file embeddings.
    #[arg(long)]
    embed_file: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    explanations: PathBuf,
    /// Checkpoint for edge-mask diagnostics.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out_report: PathBuf,
    /// Pool node counts instead of averaging per instance.
    #[arg(long)]
    micro: bool,
    /// Count Acc.Full only on exact set match.
    #[arg(long)]
    exact_full: bool,
    #[arg(long)]
    embed_file: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    explanations: PathBuf,
    #[arg(long)]
    instance_id: String,
    #[arg(long)]
    out: PathBuf,
}

fn print_config(name: &str, config: &impl Serialize) -> Result<()> {
    println!("{name} config: {}", serde_json::to_string(config)?);
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path, lines: &[String]) -> Result<()> {
    let log = sidecar(path);
    std::fs::write(&log, lines.join("\n") + "\n").with_context(|| format!("writing {}", log.display()))
}

fn provider_for(settings: &FeaturizerSettings, dim: usize, embed_file: Option<&Path>) -> Result<EmbeddingProvider> {
    Ok(match settings.provider {
        ProviderKind::HashedBow => EmbeddingProvider::hashed(dim)?,
        ProviderKind::FileLookup => {
            let path = embed_file.context("checkpoint uses file embeddings; pass --embed-file")?;
            EmbeddingProvider::from_file(path, dim)?
        }
    })
}

fn graphs(
    instances: &[Instance],
    provider: &EmbeddingProvider,
    settings: &FeaturizerSettings,
) -> Result<Vec<EvidenceGraph>> {
    let options = GraphOptions {
        claim_node: settings.claim_node,
        max_tokens: settings.max_tokens,
    };
    Ok(instances
        .iter()
        .map(|i| i.graph(provider, options))
        .collect::<sagp_core::Result<_>>()?)
}

fn gen_synth(args: &GenSynthArgs) -> Result<()> {
    print_config("gen-synth", args)?;
    let cfg = SynthConfig {
        num_instances: args.num,
        nodes: args.nodes,
        rationales: args.rationales,
        dim: args.dim,
        noise_overlap: args.noise_overlap,
        seed: args.seed,
    };
    let data = generate_synthetic(&cfg)?;
    save_dataset(&args.out, &data)?;
    println!(
        "wrote {} instances to {}: {}",
        data.len(),
        args.out.display(),
        serde_json::to_string(&dataset_stats(&data))?
    );
    if let Some(test_out) = &args.test_out {
        let test_cfg = SynthConfig {
            num_instances: args.test_num,
            seed: args.seed.wrapping_add(1),
            ..cfg
        };
        let test = generate_synthetic(&test_cfg)?;
        save_dataset(test_out, &test)?;
        println!("wrote {} instances to {}", test.len(), test_out.display());
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    print_config("train", args)?;
    let start = Instant::now();
    let e = &args.embedding;
    let (provider, kind) = match e.embedding {
        EmbeddingArg::HashedBow => (EmbeddingProvider::hashed(e.dim)?, ProviderKind::HashedBow),
        EmbeddingArg::File => {
            let path = e
                .embed_file
                .as_deref()
                .context("--embedding file requires --embed-file")?;
            (EmbeddingProvider::from_file(path, e.dim)?, ProviderKind::FileLookup)
        }
    };
    let settings = FeaturizerSettings {
        provider: kind,
        claim_node: e.claim_node,
        max_tokens: e.max_tokens,
    };
    let options = GraphOptions {
        claim_node: e.claim_node,
        max_tokens: e.max_tokens,
    };
    let data = load_dataset(&args.data)?;
    let examples = data
        .iter()
        .map(|i| i.train_example(&provider, options))
        .collect::<sagp_core::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        residual: !args.no_residual,
        readout: if args.sum_readout { Readout::Sum } else { Readout::Mean },
        rationale_weight: args.rationale_weight,
        perturbation_std: args.perturbation_std,
        hard_perturbation_rate: args.hard_perturbation_rate,
        optimizer: if args.sgd {
            OptimizerKind::Sgd
        } else {
            OptimizerKind::Adam
        },
        ..TrainConfig::default()
    };
    print_config("resolved train", &cfg)?;
    let (ckpt, log) = train_base(&examples, settings, &cfg)?;
    for s in &log.epochs {
        if s.epoch % 10 == 0 || s.epoch + 1 == log.epochs.len() {
            println!(
                "epoch {:4} loss {:.6} verdict {:.6} acc {:.4}",
                s.epoch, s.loss, s.verdict_loss, s.accuracy
            );
        }
    }
    save_checkpoint(&args.out_ckpt, &ckpt)?;
    println!("wrote checkpoint {}", args.out_ckpt.display());
    if let Some(path) = &args.eval_data {
        let held = load_dataset(path)?;
        let held = held
            .iter()
            .map(|i| i.train_example(&provider, options))
            .collect::<sagp_core::Result<Vec<_>>>()?;
        println!("held-out accuracy {:.4}", accuracy(&ckpt, &held)?);
    }
    let mut lines: Vec<String> = log.epochs.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    lines.push(format!("elapsed_seconds {:.3}", start.elapsed().as_secs_f64()));
    write_sidecar(&args.out_ckpt, &lines)
}

fn explain_config(args: &ExplainArgs) -> ExplainConfig {
    let mode: MaskMode = args.mode.into();
    let mut cfg = ExplainConfig::new(mode);
    cfg.epochs = args.epochs;
    cfg.lr = args.lr;
    cfg.supervised = args.supervised;
    cfg.seed = args.seed;
    cfg.init = match args.init {
        InitArg::Zeros => MaskInit::Zeros,
        InitArg::Gaussian => MaskInit::Gaussian(args.init_std),
    };
    cfg.fidelity = if args.soft_fidelity {
        FidelityTarget::SoftKl
    } else {
        FidelityTarget::Hard
    };
    cfg.reduction = if args.raw_sum {
        RegReduction::RawSum
    } else {
        RegReduction::Mean
    };
    cfg.optimizer = if args.sgd {
        OptimizerKind::Sgd
    } else {
        OptimizerKind::Adam
    };
    let l = &mut cfg.lambdas;
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut l.fidelity, args.lambda1);
    set(&mut l.compact, args.lambda2);
    set(&mut l.topology, args.lambda3);
    match mode {
        MaskMode::Node => {
            set(&mut l.node_sum, args.lambda4);
            set(&mut l.node_entropy, args.lambda5);
        }
        _ => {
            set(&mut l.edge_sum, args.lambda4);
            set(&mut l.edge_entropy, args.lambda5);
        }
    }
    set(&mut l.node_sum, args.node_lambda4);
    set(&mut l.node_entropy, args.node_lambda5);
    cfg
}

fn explain(args: &ExplainArgs) -> Result<()> {
    print_config("explain", args)?;
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let cfg = explain_config(args);
    let (l4, l5) = cfg.lambdas.mask_pair(cfg.mode);
    let lam = &cfg.lambdas;
    println!(
        "lambdas: l1={} l2={} l3={} l4={l4} l5={l5}{}",
        lam.fidelity,
        lam.compact,
        lam.topology,
        if cfg.mode == MaskMode::All {
            format!(" node_l4={} node_l5={}", lam.node_sum, lam.node_entropy)
        } else {
            String::new()
        }
    );
    print_config("resolved explain", &cfg)?;

    let start = Instant::now();
    let ckpt = load_checkpoint(&args.ckpt)?;
    let provider = provider_for(&ckpt.featurizer, ckpt.dims.dim, args.embed_file.as_deref())?;
    let data = load_dataset(&args.data)?;
    let gs = graphs(&data, &provider, &ckpt.featurizer)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<sagp_core::Result<Explanation>>>> =
        Mutex::new((0..data.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.min(data.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= data.len() {
                    break;
                }
                let r = explain_instance(&ckpt, &data[i].id, &gs[i], &cfg);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let mut explanations = results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every instance visited"))
        .collect::<sagp_core::Result<Vec<_>>>()?;
    explanations.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    save_explanations(&args.out, &explanations)?;
    println!("wrote {} explanations to {}", explanations.len(), args.out.display());

    let mut lines: Vec<String> = explanations
        .iter()
        .map(|e| format!("{} elapsed_seconds {:.4}", e.instance_id, e.elapsed.as_secs_f64()))
        .collect();
    lines.push(format!("total elapsed_seconds {:.3}", start.elapsed().as_secs_f64()));
    write_sidecar(&args.out, &lines)
}

fn eval(args: &EvalArgs) -> Result<()> {
    print_config("eval", args)?;
    let data = load_dataset(&args.data)?;
    let explanations = load_explanations(&args.explanations)?;
    let options = EvalOptions {
        averaging: if args.micro { Averaging::Micro } else { Averaging::Macro },
        full_match: if args.exact_full {
            FullMatch::Exact
        } else {
            FullMatch::Superset
        },
    };
    let mut report = evaluate(&data, &explanations, options)?;
    if let Some(path) = &args.ckpt {
        let ckpt = load_checkpoint(path)?;
        let provider = provider_for(&ckpt.featurizer, ckpt.dims.dim, args.embed_file.as_deref())?;
        let by_id: std::collections::HashMap<&str, usize> =
            data.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
        let mut picked = Vec::new();
        for e in &explanations {
            let i = *by_id
                .get(e.instance_id.as_str())
                .with_context(|| format!("no instance {}", e.instance_id))?;
            picked.push(i);
        }
        let subset: Vec<Instance> = picked.iter().map(|&i| data[i].clone()).collect();
        let gs = graphs(&subset, &provider, &ckpt.featurizer)?;
        let items: Vec<_> = subset
            .iter()
            .zip(&gs)
            .zip(&explanations)
            .map(|((i, g), e)| (i, g, e))
            .collect();
        report.mask = Some(mask_diagnostics(&ckpt, &items, args.threshold)?);
    }
    print!("{}", report.to_table());
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(&args.out_report, text).with_context(|| format!("writing {}", args.out_report.display()))?;
    println!("wrote report {}", args.out_report.display());
    Ok(())
}

fn render_mask(args: &RenderArgs) -> Result<()> {
    print_config("render-mask", args)?;
    let explanations = load_explanations(&args.explanations)?;
    let e = explanations
        .iter()
        .find(|e| e.instance_id == args.instance_id)
        .with_context(|| format!("no explanation for instance {}", args.instance_id))?;
    let probs = e
        .mask
        .edge_probabilities()
        .with_context(|| format!("explanation {} has no edge mask", e.instance_id))?;
    let grid = render::text_grid(&probs, &e.node_ids);
    std::fs::write(&args.out, render::svg_heatmap(&probs, &e.node_ids, &e.instance_id))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let mut grid_path = args.out.clone().into_os_string();
    grid_path.push(".txt");
    std::fs::write(&grid_path, &grid).context("writing text grid")?;
    print!("{grid}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Explain(a) => explain(a),
        Command::Eval(a) => eval(a),
        Command::RenderMask(a) => render_mask(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
