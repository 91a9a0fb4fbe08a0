//! Two-layer GCN verdict classifier, its subgraph heads, and perturbed passes.
//!
//! Every pass is recorded on a [`Tape`] so the same code serves training
//! (weights as leaves), explanation (weights as constants, mask logits as
//! leaves) and plain inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Verdict;
use crate::error::{Error, Result};
use crate::featurize::{ProviderKind, DEFAULT_MAX_TOKENS};
use crate::graph::EvidenceGraph;
use crate::tensor::{softmax, Matrix, OptimizerKind, OptimizerState, Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Pooling of node representations for the full-graph verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub layers: usize,
    /// Adds each layer's (masked) input to its output.
    pub residual: bool,
    pub readout: Readout,
}

/// How node features were produced; replayed at explanation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerSettings {
    pub provider: ProviderKind,
    pub claim_node: bool,
    pub max_tokens: usize,
}

impl Default for FeaturizerSettings {
    fn default() -> Self {
        Self {
            provider: ProviderKind::HashedBow,
            claim_node: false,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

/// Affine map `x W + b` to two logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `d x 2`.
    pub weight: Matrix,
    /// `1 x 2`.
    pub bias: Matrix,
}

impl Linear {
    fn zeros(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, 2),
            bias: Matrix::zeros(1, 2),
        }
    }

    pub fn logits(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [self.bias.get(0, 0), self.bias.get(0, 1)];
        for (k, v) in x.iter().enumerate() {
            out[0] += v * self.weight.get(k, 0);
            out[1] += v * self.weight.get(k, 1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub dims: ModelDims,
    pub featurizer: FeaturizerSettings,
    /// One `d x d` weight per GCN layer.
    pub layers: Vec<Matrix>,
    /// Full-graph verdict head.
    pub classifier: Linear,
    /// Node assignment head producing `S`.
    pub subgraph_head: Linear,
    /// Verdict head over the aggregated subgraph representation.
    pub subgraph_classifier: Linear,
}

impl ModelCheckpoint {
    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn init(dims: ModelDims, featurizer: FeaturizerSettings, std: f64, seed: u64) -> Result<Self> {
        if dims.dim == 0 || dims.layers == 0 {
            return Err(Error::Config("model needs dim > 0 and at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std {std}: {e}")))?;
        let mut gaussian = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::new(rows, cols, data).expect("sized buffer")
        };
        let layers = (0..dims.layers).map(|_| gaussian(dims.dim, dims.dim)).collect();
        let mut head = || Linear {
            weight: gaussian(dims.dim, 2),
            bias: Matrix::zeros(1, 2),
        };
        let classifier = head();
        let subgraph_head = head();
        let subgraph_classifier = head();
        Ok(Self {
            version: CHECKPOINT_VERSION,
            dims,
            featurizer,
            layers,
            classifier,
            subgraph_head,
            subgraph_classifier,
        })
    }

    /// Checkpoint with every weight zero; used as a neutral base in tests.
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            dims,
            featurizer: FeaturizerSettings::default(),
            layers: vec![Matrix::zeros(dims.dim, dims.dim); dims.layers],
            classifier: Linear::zeros(dims.dim),
            subgraph_head: Linear::zeros(dims.dim),
            subgraph_classifier: Linear::zeros(dims.dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims.dim;
        if self.layers.len() != self.dims.layers {
            return Err(Error::Dimension(format!(
                "{} layer matrices for {} layers",
                self.layers.len(),
                self.dims.layers
            )));
        }
        let all = self
            .layers
            .iter()
            .map(|w| (w, (d, d)))
            .chain(self.heads().flat_map(|h| [(&h.weight, (d, 2)), (&h.bias, (1, 2))]));
        for (m, shape) in all {
            if m.shape() != shape {
                return Err(Error::Dimension(format!(
                    "parameter of shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Dimension("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    fn heads(&self) -> impl Iterator<Item = &Linear> {
        [&self.classifier, &self.subgraph_head, &self.subgraph_classifier].into_iter()
    }

    fn check_graph(&self, g: &EvidenceGraph) -> Result<()> {
        if g.feature_dim() != self.dims.dim {
            return Err(Error::Dimension(format!(
                "graph features have dim {}, model expects {}",
                g.feature_dim(),
                self.dims.dim
            )));
        }
        Ok(())
    }

    /// Flattened parameter list in a fixed order.
    fn to_params(&self) -> Vec<Matrix> {
        let mut out = self.layers.clone();
        for h in self.heads() {
            out.push(h.weight.clone());
            out.push(h.bias.clone());
        }
        out
    }

    fn load_params(&mut self, params: &[Matrix]) {
        let l = self.layers.len();
        self.layers.clone_from_slice(&params[..l]);
        let mut rest = params[l..].chunks(2);
        for h in [
            &mut self.classifier,
            &mut self.subgraph_head,
            &mut self.subgraph_classifier,
        ] {
            let pair = rest.next().expect("three heads");
            h.weight = pair[0].clone();
            h.bias = pair[1].clone();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Edge,
    Node,
    All,
}

impl MaskMode {
    pub fn uses_edges(self) -> bool {
        matches!(self, Self::Edge | Self::All)
    }

    pub fn uses_nodes(self) -> bool {
        matches!(self, Self::Node | Self::All)
    }
}

/// Mask logits; the effective mask is their sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    /// `n x n`, row `i` gates the messages node `i` aggregates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_logits: Option<Matrix>,
    /// `n x 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_logits: Option<Matrix>,
}

impl MaskSpec {
    pub fn constant(mode: MaskMode, n: usize, logit: f64) -> Self {
        Self {
            mode,
            edge_logits: mode.uses_edges().then(|| Matrix::filled(n, n, logit)),
            node_logits: mode.uses_nodes().then(|| Matrix::filled(n, 1, logit)),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let check = |m: &Option<Matrix>, wanted: bool, shape: (usize, usize), what: &str| match (m, wanted) {
            (None, true) => Err(Error::Config(format!("{:?} mode requires {what} logits", self.mode))),
            (Some(_), false) => Err(Error::Config(format!(
                "{:?} mode does not take {what} logits",
                self.mode
            ))),
            (Some(m), true) if m.shape() != shape => Err(Error::Dimension(format!(
                "{what} logits of shape {:?}, expected {shape:?}",
                m.shape()
            ))),
            _ => Ok(()),
        };
        check(&self.edge_logits, self.mode.uses_edges(), (n, n), "edge")?;
        check(&self.node_logits, self.mode.uses_nodes(), (n, 1), "node")
    }

    pub fn edge_probabilities(&self) -> Option<Matrix> {
        self.edge_logits.as_ref().map(|m| m.map(crate::tensor::sigmoid))
    }

    pub fn node_probabilities(&self) -> Option<Matrix> {
        self.node_logits.as_ref().map(|m| m.map(crate::tensor::sigmoid))
    }
}

/// Checkpoint parameters placed on a tape.
#[derive(Debug, Clone)]
pub(crate) struct BoundParams {
    pub layers: Vec<Var>,
    pub classifier: (Var, Var),
    pub head: (Var, Var),
    pub subgraph: (Var, Var),
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, ckpt: &ModelCheckpoint, trainable: bool) -> Self {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let layers = ckpt.layers.iter().map(&mut put).collect();
        let mut pair = |l: &Linear| (put(&l.weight), put(&l.bias));
        Self {
            classifier: pair(&ckpt.classifier),
            head: pair(&ckpt.subgraph_head),
            subgraph: pair(&ckpt.subgraph_classifier),
            layers,
        }
    }

    fn all(&self) -> Vec<Var> {
        let mut out = self.layers.clone();
        for (w, b) in [self.classifier, self.head, self.subgraph] {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Effective (post-sigmoid or hard) mask values on a tape.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BoundMask {
    pub edge: Option<Var>,
    pub node: Option<Var>,
}

impl BoundMask {
    /// Places sigmoid(logits) on the tape; logits become leaves when `trainable`.
    pub fn from_logits(tape: &mut Tape, mask: &MaskSpec, trainable: bool) -> Result<(Self, MaskLeaves)> {
        let mut put = |m: &Option<Matrix>| -> Result<(Option<Var>, Option<Var>)> {
            match m {
                None => Ok((None, None)),
                Some(m) => {
                    let logits = if trainable {
                        tape.leaf(m.clone())
                    } else {
                        tape.constant(m.clone())
                    };
                    Ok((Some(tape.sigmoid(logits)?), Some(logits)))
                }
            }
        };
        let (edge, edge_logits) = put(&mask.edge_logits)?;
        let (node, node_logits) = put(&mask.node_logits)?;
        Ok((
            Self { edge, node },
            MaskLeaves {
                edge: edge_logits,
                node: node_logits,
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct MaskLeaves {
    pub edge: Option<Var>,
    pub node: Option<Var>,
}

/// Stacked GCN layers `relu((N [* E]) (X [* m]) W)`, plus the layer input when
/// residual. Returns the final representation and the first layer's
/// pre-activation.
pub(crate) fn gcn_stack(
    tape: &mut Tape,
    params: &BoundParams,
    dims: &ModelDims,
    normalized: Var,
    features: Var,
    mask: BoundMask,
) -> Result<(Var, Var)> {
    let propagation = match mask.edge {
        Some(e) => tape.mul(normalized, e)?,
        None => normalized,
    };
    let mut x = features;
    let mut first_pre = None;
    for &w in &params.layers {
        let input = match mask.node {
            Some(m) => tape.mul(x, m)?,
            None => x,
        };
        let agg = tape.matmul(propagation, input)?;
        let pre = tape.matmul(agg, w)?;
        first_pre.get_or_insert(pre);
        let act = tape.relu(pre)?;
        x = if dims.residual { tape.add(act, input)? } else { act };
    }
    Ok((x, first_pre.expect("at least one layer")))
}

/// Full-graph verdict log-probabilities (1 x 2) from node representations.
pub(crate) fn full_log_probs(tape: &mut Tape, params: &BoundParams, dims: &ModelDims, u: Var) -> Result<Var> {
    let n = tape.shape(u).0;
    let weight = match dims.readout {
        Readout::Mean => 1.0 / n as f64,
        Readout::Sum => 1.0,
    };
    let pool = tape.constant(Matrix::filled(1, n, weight));
    let pooled = tape.matmul(pool, u)?;
    let z = tape.matmul(pooled, params.classifier.0)?;
    let z = tape.add(z, params.classifier.1)?;
    Ok(tape.row_log_softmax(z)?)
}

/// Assignment head logits (n x 2).
pub(crate) fn head_logits(tape: &mut Tape, params: &BoundParams, u: Var) -> Result<Var> {
    let z = tape.matmul(u, params.head.0)?;
    Ok(tape.add(z, params.head.1)?)
}

/// Subgraph verdict log-probabilities from `S` and node representations:
/// `R = S[:,0]^T U`, then a linear layer.
pub(crate) fn subgraph_log_probs(tape: &mut Tape, params: &BoundParams, assignment: Var, u: Var) -> Result<Var> {
    let pick = tape.constant(Matrix::column_vector(&[1.0, 0.0]));
    let first = tape.matmul(assignment, pick)?;
    let first_t = tape.transpose(first);
    let r = tape.matmul(first_t, u)?;
    let z = tape.matmul(r, params.subgraph.0)?;
    let z = tape.add(z, params.subgraph.1)?;
    Ok(tape.row_log_softmax(z)?)
}

fn probs_of(tape: &Tape, log_probs: Var) -> [f64; 2] {
    let v = tape.value(log_probs);
    [v.get(0, 0).exp(), v.get(0, 1).exp()]
}

pub fn argmax2(p: [f64; 2]) -> usize {
    usize::from(p[1] > p[0])
}

/// Unperturbed node representations and full-graph verdict probabilities.
pub fn forward_full(ckpt: &ModelCheckpoint, g: &EvidenceGraph) -> Result<(Matrix, [f64; 2])> {
    ckpt.check_graph(g)?;
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, ckpt, false);
    let norm = tape.constant(g.normalized.clone());
    let h = tape.constant(g.features.clone());
    let (u, _) = gcn_stack(&mut tape, &params, &ckpt.dims, norm, h, BoundMask::default())?;
    let lp = full_log_probs(&mut tape, &params, &ckpt.dims, u)?;
    Ok((tape.value(u).clone(), probs_of(&tape, lp)))
}

/// Node representations under the sigmoid of `mask`'s logits.
pub fn forward_perturbed(ckpt: &ModelCheckpoint, g: &EvidenceGraph, mask: &MaskSpec) -> Result<Matrix> {
    Ok(perturbed_pass(ckpt, g, mask)?.0)
}

/// First GCN layer pre-activation under `mask` (`None` for the plain graph).
pub fn first_layer_preactivation(ckpt: &ModelCheckpoint, g: &EvidenceGraph, mask: Option<&MaskSpec>) -> Result<Matrix> {
    match mask {
        Some(m) => Ok(perturbed_pass(ckpt, g, m)?.1),
        None => {
            ckpt.check_graph(g)?;
            let mut tape = Tape::new();
            let params = BoundParams::bind(&mut tape, ckpt, false);
            let norm = tape.constant(g.normalized.clone());
            let h = tape.constant(g.features.clone());
            let (_, pre) = gcn_stack(&mut tape, &params, &ckpt.dims, norm, h, BoundMask::default())?;
            Ok(tape.value(pre).clone())
        }
    }
}

fn perturbed_pass(ckpt: &ModelCheckpoint, g: &EvidenceGraph, mask: &MaskSpec) -> Result<(Matrix, Matrix)> {
    ckpt.check_graph(g)?;
    mask.validate(g.num_nodes())?;
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, ckpt, false);
    let norm = tape.constant(g.normalized.clone());
    let h = tape.constant(g.features.clone());
    let (bound, _) = BoundMask::from_logits(&mut tape, mask, false)?;
    let (u, pre) = gcn_stack(&mut tape, &params, &ckpt.dims, norm, h, bound)?;
    Ok((tape.value(u).clone(), tape.value(pre).clone()))
}

/// Node representations with the edge gates given directly as values
/// (e.g. a 0/1 hard mask) instead of logits.
pub fn forward_with_edge_values(
    ckpt: &ModelCheckpoint,
    g: &EvidenceGraph,
    edge_values: &Matrix,
) -> Result<(Matrix, [f64; 2])> {
    ckpt.check_graph(g)?;
    let n = g.num_nodes();
    if edge_values.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "edge values of shape {:?}, expected {:?}",
            edge_values.shape(),
            (n, n)
        )));
    }
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, ckpt, false);
    let norm = tape.constant(g.normalized.clone());
    let h = tape.constant(g.features.clone());
    let edge = tape.constant(edge_values.clone());
    let mask = BoundMask {
        edge: Some(edge),
        node: None,
    };
    let (u, _) = gcn_stack(&mut tape, &params, &ckpt.dims, norm, h, mask)?;
    let lp = full_log_probs(&mut tape, &params, &ckpt.dims, u)?;
    Ok((tape.value(u).clone(), probs_of(&tape, lp)))
}

/// Full-graph verdict probabilities computed from given node representations.
pub fn full_probs_from(ckpt: &ModelCheckpoint, u: &Matrix) -> [f64; 2] {
    let n = u.rows() as f64;
    let scale = match ckpt.dims.readout {
        Readout::Mean => 1.0 / n,
        Readout::Sum => 1.0,
    };
    let pooled: Vec<f64> = (0..u.cols()).map(|c| u.column(c).iter().sum::<f64>() * scale).collect();
    let p = softmax(&ckpt.classifier.logits(&pooled));
    [p[0], p[1]]
}

pub fn predict(ckpt: &ModelCheckpoint, g: &EvidenceGraph) -> Result<Verdict> {
    let (_, probs) = forward_full(ckpt, g)?;
    Ok(Verdict::from_index(argmax2(probs)))
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub graph: EvidenceGraph,
    pub label: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub init_std: f64,
    pub residual: bool,
    pub readout: Readout,
    /// Weight of the node-level rationale loss on the assignment head; zero
    /// trains the subgraph branch from verdict labels alone.
    pub rationale_weight: f64,
    /// Std of the random edge-mask logits the subgraph branch is trained under;
    /// zero trains it on the unperturbed graph.
    pub perturbation_std: f64,
    /// Fraction of steps whose perturbed view deletes edges outright instead
    /// of scaling them.
    pub hard_perturbation_rate: f64,
    /// Skews the keep-rate of hard deletions toward zero; larger values mean
    /// sparser surviving graphs.
    pub keep_rate_exponent: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            seed: 0,
            init_std: 0.1,
            residual: true,
            readout: Readout::Mean,
            rationale_weight: 0.25,
            perturbation_std: 1.0,
            hard_perturbation_rate: 0.5,
            keep_rate_exponent: 8.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total training objective.
    pub loss: f64,
    /// Mean full-graph verdict cross-entropy.
    pub verdict_loss: f64,
    /// Full-graph training accuracy measured during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Mean binary cross-entropy of `sigmoid(margin)` against 0/1 `targets`,
/// computed as `softplus(z) - t z`.
pub(crate) fn bce_with_logits(tape: &mut Tape, margin: Var, targets: &[bool]) -> Result<Var> {
    let t = tape.constant(Matrix::column_vector(
        &targets.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>(),
    ));
    let sp = tape.softplus(margin)?;
    let tz = tape.mul(margin, t)?;
    let per = tape.sub(sp, tz)?;
    Ok(tape.mean(per))
}

/// In-subgraph margin `logit_0 - logit_1` of the assignment head (n x 1).
pub(crate) fn head_margin(tape: &mut Tape, logits: Var) -> Result<Var> {
    let diff = tape.constant(Matrix::column_vector(&[1.0, -1.0]));
    Ok(tape.matmul(logits, diff)?)
}

fn pick(tape: &mut Tape, log_probs: Var, class: usize) -> Result<Var> {
    let mut onehot = Matrix::zeros(1, 2);
    onehot.set(0, class, 1.0);
    let c = tape.constant(onehot);
    let m = tape.mul(log_probs, c)?;
    Ok(tape.sum(m))
}

fn random_logits(rng: &mut ChaCha8Rng, normal: &Normal<f64>, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::new(rows, cols, data).expect("sized buffer")
}

/// 0/1 edge gates kept with probability `u^keep_exponent`, `u ~ U[0, 1)`.
fn random_deletion(rng: &mut ChaCha8Rng, n: usize, keep_exponent: f64) -> Matrix {
    let keep: f64 = rng.random::<f64>().powf(keep_exponent);
    let data = (0..n * n)
        .map(|_| f64::from(u8::from(rng.random::<f64>() < keep)))
        .collect();
    Matrix::new(n, n, data).expect("sized buffer")
}

/// Trains every parameter of a fresh checkpoint, one graph per step.
///
/// Objective per instance: verdict cross-entropy of the full-graph head, plus
/// verdict cross-entropy of the subgraph head and (when gold rationales are
/// present) node-level rationale BCE on the assignment head, both evaluated
/// on a randomly perturbed copy of the graph: sigmoid-of-Gaussian edge
/// scaling, or on a share of steps a sparse 0/1 edge deletion.
pub fn train_base(
    examples: &[TrainExample],
    featurizer: FeaturizerSettings,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainLog)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let dim = first.graph.feature_dim();
    if let Some(bad) = examples.iter().find(|e| e.graph.feature_dim() != dim) {
        return Err(Error::Dimension(format!(
            "instance {} has feature dim {}, expected {dim}",
            bad.id,
            bad.graph.feature_dim()
        )));
    }
    let dims = ModelDims {
        dim,
        layers: 2,
        residual: cfg.residual,
        readout: cfg.readout,
    };
    let mut ckpt = ModelCheckpoint::init(dims, featurizer, cfg.init_std, cfg.seed)?;
    let mut params = ckpt.to_params();
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, cfg.perturbation_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("perturbation std: {e}")))?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut verdict, mut correct) = (0.0, 0.0, 0usize);
        for &idx in &order {
            let ex = &examples[idx];
            let n = ex.graph.num_nodes();
            let label = ex.label.index();
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &ckpt, true);
            let norm = tape.constant(ex.graph.normalized.clone());
            let h = tape.constant(ex.graph.features.clone());

            let (u, _) = gcn_stack(&mut tape, &bound, &dims, norm, h, BoundMask::default())?;
            let full = full_log_probs(&mut tape, &bound, &dims, u)?;
            if argmax2(probs_of(&tape, full)) == label {
                correct += 1;
            }
            let full_ll = pick(&mut tape, full, label)?;
            let mut loss = tape.scale(full_ll, -1.0);
            verdict -= tape.value(full_ll).scalar_value();

            let view = if cfg.perturbation_std > 0.0 {
                let edge = if rng.random_bool(cfg.hard_perturbation_rate) {
                    tape.constant(random_deletion(&mut rng, n, cfg.keep_rate_exponent))
                } else {
                    let e = tape.constant(random_logits(&mut rng, &noise, n, n));
                    tape.sigmoid(e)?
                };
                let mask = BoundMask {
                    edge: Some(edge),
                    node: None,
                };
                gcn_stack(&mut tape, &bound, &dims, norm, h, mask)?.0
            } else {
                u
            };
            let logits = head_logits(&mut tape, &bound, view)?;
            let s = tape.row_softmax(logits)?;
            let sub = subgraph_log_probs(&mut tape, &bound, s, view)?;
            let sub_ll = pick(&mut tape, sub, label)?;
            loss = tape.sub(loss, sub_ll)?;
            if let (Some(gold), true) = (&ex.graph.gold, cfg.rationale_weight > 0.0) {
                let margin = head_margin(&mut tape, logits)?;
                let bce = bce_with_logits(&mut tape, margin, gold)?;
                let bce = tape.scale(bce, cfg.rationale_weight);
                loss = tape.add(loss, bce)?;
            }

            total += tape.value(loss).scalar_value();
            tape.backward(loss)?;
            let vars = bound.all();
            let grads: Vec<&Matrix> = vars.iter().map(|v| tape.grad(*v)).collect();
            opt.step(&mut params, &grads, cfg.lr)?;
            ckpt.load_params(&params);
        }
        let count = examples.len() as f64;
        log.epochs.push(EpochStats {
            epoch,
            loss: total / count,
            verdict_loss: verdict / count,
            accuracy: correct as f64 / count,
        });
    }
    ckpt.validate()?;
    Ok((ckpt, log))
}

/// Full-graph claim accuracy.
pub fn accuracy(ckpt: &ModelCheckpoint, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in examples {
        if predict(ckpt, &ex.graph)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(dim: usize) -> ModelDims {
        ModelDims {
            dim,
            layers: 2,
            residual: true,
            readout: Readout::Mean,
        }
    }

    fn graph(rows: &[Vec<f64>]) -> EvidenceGraph {
        let ids = (0..rows.len()).map(|i| format!("n{i}")).collect();
        EvidenceGraph::fully_connected(Matrix::from_rows(rows).unwrap(), ids, None).unwrap()
    }

    fn random_model(dim: usize, seed: u64) -> ModelCheckpoint {
        ModelCheckpoint::init(dims(dim), FeaturizerSettings::default(), 0.5, seed).unwrap()
    }

    fn random_graph(n: usize, dim: usize, seed: u64) -> EvidenceGraph {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        graph(&rows)
    }

    #[test]
    fn single_node_identity_layer_is_inert() {
        let mut ckpt = ModelCheckpoint::zeros(dims(3));
        ckpt.layers[0] = Matrix::identity(3);
        let g = graph(&[vec![0.5, 1.0, 2.0]]);
        let pre = first_layer_preactivation(&ckpt, &g, None).unwrap();
        assert_eq!(pre.data(), &[0.5, 1.0, 2.0]);
    }

    #[test]
    fn identical_rows_stay_identical() {
        let ckpt = random_model(4, 1);
        let g = graph(&vec![vec![0.3, -0.2, 0.9, 0.1]; 5]);
        let (u, probs) = forward_full(&ckpt, &g).unwrap();
        for r in 1..5 {
            assert_eq!(u.row(r), u.row(0));
        }
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_edge_logits_halve_first_preactivation() {
        let ckpt = random_model(4, 2);
        let g = random_graph(5, 4, 3);
        let plain = first_layer_preactivation(&ckpt, &g, None).unwrap();
        let half = first_layer_preactivation(&ckpt, &g, Some(&MaskSpec::constant(MaskMode::Edge, 5, 0.0))).unwrap();
        for (a, b) in plain.data().iter().zip(half.data()) {
            assert_eq!(a * 0.5, *b);
        }
    }

    #[test]
    fn saturated_open_mask_matches_full_pass() {
        let ckpt = random_model(6, 4);
        let g = random_graph(7, 6, 5);
        let (u, _) = forward_full(&ckpt, &g).unwrap();
        for mode in [MaskMode::Edge, MaskMode::Node, MaskMode::All] {
            let p = forward_perturbed(&ckpt, &g, &MaskSpec::constant(mode, 7, 30.0)).unwrap();
            assert!(u.max_abs_diff(&p) < 1e-6, "{mode:?}");
        }
    }

    #[test]
    fn closed_node_contributes_nothing_to_first_aggregation() {
        let ckpt = random_model(4, 6);
        let g = random_graph(4, 4, 7);
        let mut mask = MaskSpec::constant(MaskMode::Node, 4, 30.0);
        mask.node_logits.as_mut().unwrap().set(2, 0, -30.0);
        let pre = first_layer_preactivation(&ckpt, &g, Some(&mask)).unwrap();

        let mut rows = g.features.to_rows();
        rows[2].iter_mut().for_each(|v| *v = 0.0);
        let zeroed = graph(&rows);
        let expected = first_layer_preactivation(&ckpt, &zeroed, None).unwrap();
        assert!(pre.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn mask_spec_validation() {
        let mut m = MaskSpec::constant(MaskMode::Edge, 3, 0.0);
        assert!(m.validate(3).is_ok());
        assert!(m.validate(4).is_err());
        m.mode = MaskMode::All;
        assert!(m.validate(3).is_err());
        m.mode = MaskMode::Node;
        assert!(m.validate(3).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ckpt = random_model(4, 1);
        let g = random_graph(3, 5, 1);
        assert!(matches!(forward_full(&ckpt, &g), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(train_base(&[], FeaturizerSettings::default(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn train_rejects_mixed_dims() {
        let a = TrainExample {
            id: "a".into(),
            graph: random_graph(3, 4, 1),
            label: Verdict::Supports,
        };
        let b = TrainExample {
            id: "b".into(),
            graph: random_graph(3, 5, 2),
            label: Verdict::Refutes,
        };
        assert!(matches!(
            train_base(&[a, b], FeaturizerSettings::default(), &TrainConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn single_instance_loss_decreases() {
        let ex = TrainExample {
            id: "a".into(),
            graph: random_graph(5, 6, 9),
            label: Verdict::Refutes,
        };
        let cfg = TrainConfig {
            epochs: 10,
            lr: 1e-3,
            perturbation_std: 0.0,
            ..TrainConfig::default()
        };
        let (_, log) = train_base(&[ex], FeaturizerSettings::default(), &cfg).unwrap();
        for w in log.epochs.windows(2) {
            assert!(w[1].loss < w[0].loss, "{:?}", log.epochs);
        }
    }
}
