//! Per-instance rationale extraction by optimizing perturbation masks.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Verdict;
use crate::error::{Error, Result};
use crate::featurize::fnv1a64;
use crate::graph::EvidenceGraph;
use crate::model::{
    argmax2, bce_with_logits, forward_full, gcn_stack, head_logits, head_margin, subgraph_log_probs, BoundMask,
    BoundParams, MaskMode, MaskSpec, ModelCheckpoint,
};
use crate::tensor::{sigmoid, Matrix, OptimizerKind, OptimizerState, Tape, Var};

/// Weights of the objective terms. Edge and node regularizers are weighted
/// separately so `all` mode can use both pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub fidelity: f64,
    pub compact: f64,
    pub topology: f64,
    pub edge_sum: f64,
    pub edge_entropy: f64,
    pub node_sum: f64,
    pub node_entropy: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            fidelity: 1.0,
            compact: 1.0,
            topology: 1.0,
            edge_sum: 5e-3,
            edge_entropy: 0.1,
            node_sum: 0.1,
            node_entropy: 1.0,
        }
    }
}

impl Lambdas {
    /// The `(sum, entropy)` pair that applies to the mask of `mode`.
    pub fn mask_pair(&self, mode: MaskMode) -> (f64, f64) {
        match mode {
            MaskMode::Node => (self.node_sum, self.node_entropy),
            _ => (self.edge_sum, self.edge_entropy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "std")]
pub enum MaskInit {
    Zeros,
    Gaussian(f64),
}

/// Target of the fidelity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityTarget {
    /// Cross-entropy against the argmax of the full-graph prediction.
    #[default]
    Hard,
    /// KL divergence from the full-graph distribution.
    SoftKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegReduction {
    #[default]
    Mean,
    RawSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub mode: MaskMode,
    pub epochs: usize,
    pub lr: f64,
    pub lambdas: Lambdas,
    /// Replaces the compact term by node-level BCE against gold rationales.
    pub supervised: bool,
    pub seed: u64,
    pub init: MaskInit,
    pub fidelity: FidelityTarget,
    pub reduction: RegReduction,
    pub optimizer: OptimizerKind,
}

impl ExplainConfig {
    pub fn new(mode: MaskMode) -> Self {
        Self {
            mode,
            epochs: 100,
            lr: 1e-2,
            lambdas: Lambdas::default(),
            supervised: false,
            seed: 0,
            init: MaskInit::Zeros,
            fidelity: FidelityTarget::Hard,
            reduction: RegReduction::Mean,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self::new(MaskMode::Edge)
    }
}

/// Values of each objective term at one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub fidelity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compact: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervised: Option<f64>,
    pub topology: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_sum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_sum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_entropy: Option<f64>,
}

impl LossTerms {
    /// Every term that is present, by name.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("fidelity", self.fidelity), ("topology", self.topology)];
        let optional = [
            ("compact", self.compact),
            ("supervised", self.supervised),
            ("edge_sum", self.edge_sum),
            ("edge_entropy", self.edge_entropy),
            ("node_sum", self.node_sum),
            ("node_entropy", self.node_entropy),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "final")]
    pub last: LossTerms,
    /// Entry `e` is evaluated after `e` optimizer steps.
    pub trace: Vec<LossTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub instance_id: String,
    pub node_ids: Vec<String>,
    pub verdict_pred: Verdict,
    pub verdict_full: Verdict,
    pub rationales: Vec<String>,
    pub rationale_set: Vec<bool>,
    /// `S`, column 0 is the in-subgraph probability.
    pub assignment: Matrix,
    pub y_sub: [f64; 2],
    pub y_full: [f64; 2],
    pub mask: MaskSpec,
    pub losses: LossReport,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Individual objective terms, for gradient checks and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Fidelity,
    Compact,
    Topology,
    Sum,
    Entropy,
    Supervised,
    Total,
}

fn one_hot_row(class: usize) -> Matrix {
    let mut m = Matrix::zeros(1, 2);
    m.set(0, class, 1.0);
    m
}

/// Fidelity of subgraph log-probabilities (1 x 2) to the full-graph output.
pub fn fidelity_term(tape: &mut Tape, log_y_sub: Var, y_full: [f64; 2], target: FidelityTarget) -> Result<Var> {
    match target {
        FidelityTarget::Hard => {
            let pick = tape.constant(one_hot_row(argmax2(y_full)));
            let picked = tape.mul(log_y_sub, pick)?;
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0))
        }
        FidelityTarget::SoftKl => {
            let p = Matrix::row_vector(&y_full);
            let entropy: f64 = y_full.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();
            let p = tape.constant(p);
            let cross = tape.mul(log_y_sub, p)?;
            let cross = tape.sum(cross);
            let shift = tape.constant(Matrix::scalar(entropy));
            Ok(tape.sub(shift, cross)?)
        }
    }
}

/// `|| X / ||X||_F - I ||_F` with `X = S^T A S`; `sqrt(2)` when `X = 0`.
pub fn compact_term(tape: &mut Tape, assignment: Var, adjacency: &Matrix) -> Result<Var> {
    let a = tape.constant(adjacency.clone());
    let st = tape.transpose(assignment);
    let sa = tape.matmul(st, a)?;
    let x = tape.matmul(sa, assignment)?;
    let norm = tape.frobenius_norm(x);
    if tape.value(norm).scalar_value() == 0.0 {
        return Ok(tape.constant(Matrix::scalar(std::f64::consts::SQRT_2)));
    }
    let xn = tape.div(x, norm)?;
    let k = tape.shape(x).0;
    let eye = tape.constant(Matrix::identity(k));
    let diff = tape.sub(xn, eye)?;
    Ok(tape.frobenius_norm(diff))
}

/// Mean binary cross-entropy between `clamp(sigmoid(U U^T), 1e-7, 1 - 1e-7)`
/// and `A`. The logs are taken as `-softplus(-x)` and `-softplus(x)`, clamped
/// to the log of the same range, which avoids `1 - sigmoid(x)` cancelling.
pub fn topology_term(tape: &mut Tape, u: Var, adjacency: &Matrix) -> Result<Var> {
    let (lo, hi) = (1e-7f64.ln(), (1.0 - 1e-7f64).ln());
    let ut = tape.transpose(u);
    let gram = tape.matmul(u, ut)?;
    let neg_gram = tape.scale(gram, -1.0);
    let sp_neg = tape.softplus(neg_gram)?;
    let log_rec = tape.scale(sp_neg, -1.0);
    let log_rec = tape.clamp(log_rec, lo, hi);
    let sp = tape.softplus(gram)?;
    let log_inv = tape.scale(sp, -1.0);
    let log_inv = tape.clamp(log_inv, lo, hi);
    let a = tape.constant(adjacency.clone());
    let not_a = tape.constant(adjacency.map(|v| 1.0 - v));
    let pos = tape.mul(a, log_rec)?;
    let neg = tape.mul(not_a, log_inv)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll);
    Ok(tape.scale(mean, -1.0))
}

/// `(sum, entropy)` regularizers of `sigmoid(logits)`. Entropy uses the
/// identity `H(sigmoid(z)) = softplus(z) - z sigmoid(z)`. With
/// `off_diagonal`, diagonal entries are excluded.
pub fn mask_reg_terms(tape: &mut Tape, logits: Var, off_diagonal: bool, reduction: RegReduction) -> Result<(Var, Var)> {
    let (rows, cols) = tape.shape(logits);
    let m = tape.sigmoid(logits)?;
    let sp = tape.softplus(logits)?;
    let zm = tape.mul(logits, m)?;
    let h = tape.sub(sp, zm)?;
    let mut count = rows * cols;
    let (m, h) = if off_diagonal {
        let mut keep = Matrix::filled(rows, cols, 1.0);
        for i in 0..rows.min(cols) {
            keep.set(i, i, 0.0);
        }
        count -= rows.min(cols);
        let keep = tape.constant(keep);
        (tape.mul(m, keep)?, tape.mul(h, keep)?)
    } else {
        (m, h)
    };
    let factor = match reduction {
        RegReduction::Mean if count > 0 => 1.0 / count as f64,
        RegReduction::Mean => 0.0,
        RegReduction::RawSum => 1.0,
    };
    let s = tape.sum(m);
    let e = tape.sum(h);
    Ok((tape.scale(s, factor), tape.scale(e, factor)))
}

/// Mean BCE of `sigmoid(logit_0 - logit_1)` against the gold flags.
pub fn supervised_term(tape: &mut Tape, head_logits: Var, gold: &[bool]) -> Result<Var> {
    if gold.len() != tape.shape(head_logits).0 {
        return Err(Error::Dimension(format!(
            "{} gold flags for {} nodes",
            gold.len(),
            tape.shape(head_logits).0
        )));
    }
    let margin = head_margin(tape, head_logits)?;
    bce_with_logits(tape, margin, gold)
}

fn scalar_of(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).scalar_value())
}

/// `S = row_softmax(U W_sub + b)`.
pub fn assign_nodes(ckpt: &ModelCheckpoint, u: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, ckpt, false);
    let u = tape.constant(u.clone());
    let z = head_logits(&mut tape, &params, u)?;
    let s = tape.row_softmax(z)?;
    Ok(tape.value(s).clone())
}

/// Verdict distribution of the subgraph `R = S[:,0]^T U`.
pub fn subgraph_predict(ckpt: &ModelCheckpoint, assignment: &Matrix, u: &Matrix) -> Result<[f64; 2]> {
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, ckpt, false);
    let s = tape.constant(assignment.clone());
    let u = tape.constant(u.clone());
    let lp = subgraph_log_probs(&mut tape, &params, s, u)?;
    let v = tape.value(lp);
    Ok([v.get(0, 0).exp(), v.get(0, 1).exp()])
}

pub fn loss_fidelity(y_sub: [f64; 2], y_full: [f64; 2]) -> f64 {
    -y_sub[argmax2(y_full)].ln()
}

pub fn loss_compact(assignment: &Matrix, adjacency: &Matrix) -> Result<f64> {
    scalar_of(|t| {
        let s = t.constant(assignment.clone());
        compact_term(t, s, adjacency)
    })
}

pub fn loss_topology(u: &Matrix, adjacency: &Matrix) -> Result<f64> {
    scalar_of(|t| {
        let u = t.constant(u.clone());
        topology_term(t, u, adjacency)
    })
}

/// `(L_sum, L_entropy)` per active mask: edge first, then node.
pub fn loss_mask_reg(mask: &MaskSpec, reduction: RegReduction) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (logits, off_diagonal) in [(&mask.edge_logits, true), (&mask.node_logits, false)] {
        if let Some(m) = logits {
            let mut tape = Tape::new();
            let z = tape.constant(m.clone());
            let (s, e) = mask_reg_terms(&mut tape, z, off_diagonal, reduction)?;
            out.push((tape.value(s).scalar_value(), tape.value(e).scalar_value()));
        }
    }
    Ok(out)
}

pub fn loss_supervised(head_logits: &Matrix, gold: &[bool]) -> Result<f64> {
    scalar_of(|t| {
        let z = t.constant(head_logits.clone());
        supervised_term(t, z, gold)
    })
}

struct TermVars {
    fidelity: Var,
    compact: Option<Var>,
    supervised: Option<Var>,
    topology: Var,
    edge: Option<(Var, Var)>,
    node: Option<(Var, Var)>,
    total: Var,
}

struct Pass {
    terms: TermVars,
    assignment: Var,
    log_y_sub: Var,
    edge_leaf: Option<Var>,
    node_leaf: Option<Var>,
}

fn objective_pass(
    tape: &mut Tape,
    ckpt: &ModelCheckpoint,
    g: &EvidenceGraph,
    mask: &MaskSpec,
    cfg: &ExplainConfig,
    y_full: [f64; 2],
) -> Result<Pass> {
    let params = BoundParams::bind(tape, ckpt, false);
    let norm = tape.constant(g.normalized.clone());
    let h = tape.constant(g.features.clone());
    let (bound, leaves) = BoundMask::from_logits(tape, mask, true)?;
    let (u, _) = gcn_stack(tape, &params, &ckpt.dims, norm, h, bound)?;
    let logits = head_logits(tape, &params, u)?;
    let s = tape.row_softmax(logits)?;
    let log_y_sub = subgraph_log_probs(tape, &params, s, u)?;

    let lam = &cfg.lambdas;
    let fidelity = fidelity_term(tape, log_y_sub, y_full, cfg.fidelity)?;
    let mut total = tape.scale(fidelity, lam.fidelity);
    let (compact, supervised) = if cfg.supervised {
        let gold = g
            .gold
            .as_deref()
            .ok_or_else(|| Error::Config("supervised explanation needs gold rationale flags".into()))?;
        (None, Some(supervised_term(tape, logits, gold)?))
    } else {
        (Some(compact_term(tape, s, &g.adjacency)?), None)
    };
    let second = tape.scale(compact.or(supervised).expect("one of the two"), lam.compact);
    total = tape.add(total, second)?;
    let topology = topology_term(tape, u, &g.adjacency)?;
    let t = tape.scale(topology, lam.topology);
    total = tape.add(total, t)?;

    let mut regs = [None, None];
    for (slot, leaf, off_diagonal, (ls, le)) in [
        (0, leaves.edge, true, (lam.edge_sum, lam.edge_entropy)),
        (1, leaves.node, false, (lam.node_sum, lam.node_entropy)),
    ] {
        if let Some(z) = leaf {
            let (s, e) = mask_reg_terms(tape, z, off_diagonal, cfg.reduction)?;
            let ws = tape.scale(s, ls);
            let we = tape.scale(e, le);
            total = tape.add(total, ws)?;
            total = tape.add(total, we)?;
            regs[slot] = Some((s, e));
        }
    }
    Ok(Pass {
        terms: TermVars {
            fidelity,
            compact,
            supervised,
            topology,
            edge: regs[0],
            node: regs[1],
            total,
        },
        assignment: s,
        log_y_sub,
        edge_leaf: leaves.edge,
        node_leaf: leaves.node,
    })
}

fn read_terms(tape: &Tape, t: &TermVars) -> LossTerms {
    let v = |x: Var| tape.value(x).scalar_value();
    LossTerms {
        total: v(t.total),
        fidelity: v(t.fidelity),
        compact: t.compact.map(v),
        supervised: t.supervised.map(v),
        topology: v(t.topology),
        edge_sum: t.edge.map(|p| v(p.0)),
        edge_entropy: t.edge.map(|p| v(p.1)),
        node_sum: t.node.map(|p| v(p.0)),
        node_entropy: t.node.map(|p| v(p.1)),
    }
}

/// Value of one objective term and its gradient with respect to the mask
/// logits (returned in the shape of `mask`). `Sum`/`Entropy` add up every
/// active mask's regularizer, unweighted.
pub fn term_gradient(
    ckpt: &ModelCheckpoint,
    g: &EvidenceGraph,
    mask: &MaskSpec,
    cfg: &ExplainConfig,
    term: Term,
) -> Result<(f64, MaskSpec)> {
    mask.validate(g.num_nodes())?;
    let (_, y_full) = forward_full(ckpt, g)?;
    let mut tape = Tape::new();
    let pass = objective_pass(&mut tape, ckpt, g, mask, cfg, y_full)?;
    let t = &pass.terms;
    let regs: Vec<(Var, Var)> = t.edge.into_iter().chain(t.node).collect();
    let root = match term {
        Term::Fidelity => t.fidelity,
        Term::Compact => t
            .compact
            .ok_or_else(|| Error::Config("compact term is inactive".into()))?,
        Term::Supervised => t
            .supervised
            .ok_or_else(|| Error::Config("supervised term is inactive".into()))?,
        Term::Topology => t.topology,
        Term::Total => t.total,
        Term::Sum | Term::Entropy => {
            let pick = |p: &(Var, Var)| if term == Term::Sum { p.0 } else { p.1 };
            let mut acc = pick(&regs[0]);
            for p in &regs[1..] {
                acc = tape.add(acc, pick(p))?;
            }
            acc
        }
    };
    tape.backward(root)?;
    let grad = MaskSpec {
        mode: mask.mode,
        edge_logits: pass.edge_leaf.map(|v| tape.grad(v).clone()),
        node_logits: pass.node_leaf.map(|v| tape.grad(v).clone()),
    };
    Ok((tape.value(root).scalar_value(), grad))
}

/// Per-instance mask seed, independent of scheduling order.
pub fn instance_seed(seed: u64, instance_id: &str) -> u64 {
    seed ^ fnv1a64(instance_id.as_bytes())
}

fn initial_mask(cfg: &ExplainConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
    let mut draw = |rows: usize, cols: usize| -> Result<Matrix> {
        match cfg.init {
            MaskInit::Zeros => Ok(Matrix::zeros(rows, cols)),
            MaskInit::Gaussian(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("mask init std {std}: {e}")))?;
                let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
                Ok(Matrix::new(rows, cols, data)?)
            }
        }
    };
    Ok(MaskSpec {
        mode: cfg.mode,
        edge_logits: if cfg.mode.uses_edges() { Some(draw(n, n)?) } else { None },
        node_logits: if cfg.mode.uses_nodes() { Some(draw(n, 1)?) } else { None },
    })
}

/// Optimizes fresh mask logits for one graph against the frozen checkpoint
/// and reads off the rationale subgraph.
pub fn explain_instance(
    ckpt: &ModelCheckpoint,
    instance_id: &str,
    g: &EvidenceGraph,
    cfg: &ExplainConfig,
) -> Result<Explanation> {
    let start = Instant::now();
    let n = g.num_nodes();
    let (_, y_full) = forward_full(ckpt, g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(cfg.seed, instance_id));
    let mut mask = initial_mask(cfg, n, &mut rng)?;
    let mut params: Vec<Matrix> = [&mask.edge_logits, &mask.node_logits]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);

    let mut epoch = 0;
    let (tape, pass) = loop {
        let mut tape = Tape::new();
        let pass = objective_pass(&mut tape, ckpt, g, &mask, cfg, y_full)?;
        trace.push(read_terms(&tape, &pass.terms));
        if epoch == cfg.epochs {
            break (tape, pass);
        }
        tape.backward(pass.terms.total)?;
        let grads: Vec<&Matrix> = [pass.edge_leaf, pass.node_leaf]
            .into_iter()
            .flatten()
            .map(|v| tape.grad(v))
            .collect();
        opt.step(&mut params, &grads, cfg.lr)?;
        let mut it = params.iter().cloned();
        if mask.edge_logits.is_some() {
            mask.edge_logits = it.next();
        }
        if mask.node_logits.is_some() {
            mask.node_logits = it.next();
        }
        epoch += 1;
    };

    let assignment = tape.value(pass.assignment).clone();
    let rationale_set: Vec<bool> = (0..n).map(|i| assignment.get(i, 0) >= assignment.get(i, 1)).collect();
    let lp = tape.value(pass.log_y_sub);
    let y_sub = [lp.get(0, 0).exp(), lp.get(0, 1).exp()];
    Ok(Explanation {
        instance_id: instance_id.to_string(),
        node_ids: g.node_ids.clone(),
        verdict_pred: Verdict::from_index(argmax2(y_sub)),
        verdict_full: Verdict::from_index(argmax2(y_full)),
        rationales: g
            .node_ids
            .iter()
            .zip(&rationale_set)
            .filter(|(_, keep)| **keep)
            .map(|(id, _)| id.clone())
            .collect(),
        rationale_set,
        assignment,
        y_sub,
        y_full,
        mask,
        losses: LossReport {
            last: *trace.last().expect("at least one evaluation"),
            trace,
        },
        elapsed: start.elapsed(),
    })
}

/// Baseline rationale set from random node salience `sigmoid(N(0, 1))`,
/// keeping nodes whose salience reaches 0.5.
pub fn random_mask_baseline(n: usize, seed: u64, instance_id: &str) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, instance_id));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| sigmoid(normal.sample(&mut rng)) >= 0.5).collect()
}
