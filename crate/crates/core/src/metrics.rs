//! Claim, rationale and joint metrics plus edge-mask diagnostics.

use std::collections::HashMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, Verdict};
use crate::error::{Error, Result};
use crate::explain::Explanation;
use crate::explain::{assign_nodes, subgraph_predict};
use crate::graph::EvidenceGraph;
use crate::model::{argmax2, forward_full, forward_with_edge_values, ModelCheckpoint};
use crate::tensor::{sigmoid, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RationaleScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact: bool,
}

/// Positive-class P/R/F1 of one predicted rationale set. Empty denominators
/// give 0, except that an empty prediction of an empty gold set scores 1.
pub fn rationale_metrics(pred: &[bool], gold: &[bool]) -> Result<RationaleScore> {
    if pred.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} predicted flags for {} gold flags",
            pred.len(),
            gold.len()
        )));
    }
    let tp = pred.iter().zip(gold).filter(|(p, g)| **p && **g).count() as f64;
    let np = pred.iter().filter(|p| **p).count() as f64;
    let ng = gold.iter().filter(|g| **g).count() as f64;
    let exact = pred == gold;
    if np == 0.0 && ng == 0.0 {
        return Ok(RationaleScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            exact,
        });
    }
    let precision = if np > 0.0 { tp / np } else { 0.0 };
    let recall = if ng > 0.0 { tp / ng } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(RationaleScore {
        precision,
        recall,
        f1,
        exact,
    })
}

/// Reading of "claim correct with all rationales".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullMatch {
    /// Every gold rationale is predicted.
    #[default]
    Superset,
    /// Predicted set equals the gold set.
    Exact,
}

/// `(part, full)`: the claim is right and the prediction hits at least one /
/// all gold rationales.
pub fn joint_metrics(claim_correct: bool, pred: &[bool], gold: &[bool], full: FullMatch) -> (bool, bool) {
    let hit = pred.iter().zip(gold).any(|(p, g)| *p && *g);
    let covered = match full {
        FullMatch::Superset => pred.iter().zip(gold).all(|(p, g)| *p || !*g),
        FullMatch::Exact => pred == gold,
    };
    (claim_correct && hit, claim_correct && covered)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of per-instance scores.
    #[default]
    Macro,
    /// Scores from pooled node counts.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub averaging: Averaging,
    pub full_match: FullMatch,
}

/// `counts[gold][pred]` over verdict indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; 2]; 2],
}

impl Confusion {
    pub fn add(&mut self, gold: Verdict, pred: Verdict) {
        self.counts[gold.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (self.counts[0][0] + self.counts[1][1]) as f64 / t as f64
    }

    /// Mean over both classes of the per-class F1.
    pub fn macro_f1(&self) -> f64 {
        let f1 = |c: usize| {
            let tp = self.counts[c][c] as f64;
            let pred = (self.counts[0][c] + self.counts[1][c]) as f64;
            let gold = (self.counts[c][0] + self.counts[c][1]) as f64;
            if pred + gold == 0.0 {
                0.0
            } else {
                2.0 * tp / (pred + gold)
            }
        };
        (f1(0) + f1(1)) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    /// Macro F1 of the subgraph verdict.
    pub claim_f1: f64,
    pub claim_acc: f64,
    /// Accuracy of the full-graph verdict.
    pub full_graph_acc: f64,
    pub rationale_precision: f64,
    pub rationale_recall: f64,
    pub rationale_f1: f64,
    pub ext_acc: f64,
    pub acc_part: f64,
    pub acc_full: f64,
    pub confusion: Confusion,
    pub options: EvalOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskReport>,
}

/// Gold flags aligned with an explanation's node order; nodes without a
/// matching evidence piece (the claim node) are not gold.
pub fn aligned_gold(instance: &Instance, node_ids: &[String]) -> Vec<bool> {
    let by_id: HashMap<&str, bool> = instance
        .evidence
        .iter()
        .map(|p| (p.id.as_str(), p.is_rationale == Some(true)))
        .collect();
    node_ids
        .iter()
        .map(|id| by_id.get(id.as_str()).copied().unwrap_or(false))
        .collect()
}

fn pair_up<'a>(
    instances: &'a [Instance],
    explanations: &'a [Explanation],
) -> Result<Vec<(&'a Instance, &'a Explanation)>> {
    let by_id: HashMap<&str, &Instance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    explanations
        .iter()
        .map(|e| {
            by_id
                .get(e.instance_id.as_str())
                .map(|i| (*i, e))
                .ok_or_else(|| Error::InvalidInstance {
                    id: e.instance_id.clone(),
                    detail: "explanation has no matching instance".into(),
                })
        })
        .collect()
}

pub fn evaluate(instances: &[Instance], explanations: &[Explanation], options: EvalOptions) -> Result<EvalReport> {
    let pairs = pair_up(instances, explanations)?;
    let mut confusion = Confusion::default();
    let (mut full_correct, mut part, mut full, mut exact) = (0usize, 0usize, 0usize, 0usize);
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (inst, e) in &pairs {
        let gold = aligned_gold(inst, &e.node_ids);
        let score = rationale_metrics(&e.rationale_set, &gold)?;
        confusion.add(inst.label, e.verdict_pred);
        full_correct += usize::from(e.verdict_full == inst.label);
        let (jp, jf) = joint_metrics(
            e.verdict_pred == inst.label,
            &e.rationale_set,
            &gold,
            options.full_match,
        );
        part += usize::from(jp);
        full += usize::from(jf);
        exact += usize::from(score.exact);
        p_sum += score.precision;
        r_sum += score.recall;
        f_sum += score.f1;
        tp += e.rationale_set.iter().zip(&gold).filter(|(p, g)| **p && **g).count();
        np += e.rationale_set.iter().filter(|p| **p).count();
        ng += gold.iter().filter(|g| **g).count();
    }
    let count = pairs.len().max(1) as f64;
    let (precision, recall, f1) = match options.averaging {
        Averaging::Macro => (p_sum / count, r_sum / count, f_sum / count),
        Averaging::Micro => {
            let p = if np > 0 { tp as f64 / np as f64 } else { 0.0 };
            let r = if ng > 0 { tp as f64 / ng as f64 } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        }
    };
    Ok(EvalReport {
        instances: pairs.len(),
        claim_f1: confusion.macro_f1(),
        claim_acc: confusion.accuracy(),
        full_graph_acc: full_correct as f64 / count,
        rationale_precision: precision,
        rationale_recall: recall,
        rationale_f1: f1,
        ext_acc: exact as f64 / count,
        acc_part: part as f64 / count,
        acc_full: full as f64 / count,
        confusion,
        options,
        mask: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskInstance {
    pub instance_id: String,
    pub removed: usize,
    pub retained: usize,
    pub total: usize,
    /// Full-graph verdict on the unmasked graph is correct.
    pub full_correct: bool,
    /// Subgraph verdict under the hard mask is correct.
    pub hard_correct: bool,
    /// Full-graph head under the hard mask is correct.
    pub hard_head_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    /// Full-graph accuracy minus accuracy of the subgraph verdict under the
    /// hard mask, in percentage points.
    pub fidelity_drop: f64,
    /// Same drop measured with the full-graph head on the hard-masked graph.
    pub head_fidelity_drop: f64,
    /// Mean number of removed directed edges.
    pub size: f64,
    /// Mean percentage of directed edges retained.
    pub sparsity: f64,
    pub threshold: f64,
    pub per_instance: Vec<MaskInstance>,
}

/// 0/1 reading of an edge mask: 1 where `sigmoid(logit) >= threshold`.
pub fn binarize(logits: &Matrix, threshold: f64) -> Matrix {
    logits.map(|z| if sigmoid(z) >= threshold { 1.0 } else { 0.0 })
}

/// Hard-mask diagnostics over `(instance, graph, explanation)` triples.
pub fn mask_diagnostics(
    ckpt: &ModelCheckpoint,
    items: &[(&Instance, &EvidenceGraph, &Explanation)],
    threshold: f64,
) -> Result<MaskReport> {
    let mut per_instance = Vec::with_capacity(items.len());
    for (inst, g, e) in items {
        let logits = e
            .mask
            .edge_logits
            .as_ref()
            .ok_or_else(|| Error::Config(format!("explanation {} has no edge mask", e.instance_id)))?;
        let n = g.num_nodes();
        if logits.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "edge mask of {} is {:?} for {n} nodes",
                e.instance_id,
                logits.shape()
            )));
        }
        let hard = binarize(logits, threshold);
        let (mut removed, mut retained) = (0, 0);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                if hard.get(i, j) == 1.0 {
                    retained += 1;
                } else {
                    removed += 1;
                }
            }
        }
        let (_, full) = forward_full(ckpt, g)?;
        let (u_hard, masked) = forward_with_edge_values(ckpt, g, &hard)?;
        let sub = subgraph_predict(ckpt, &assign_nodes(ckpt, &u_hard)?, &u_hard)?;
        per_instance.push(MaskInstance {
            instance_id: e.instance_id.clone(),
            removed,
            retained,
            total: n * (n - 1),
            full_correct: argmax2(full) == inst.label.index(),
            hard_correct: argmax2(sub) == inst.label.index(),
            hard_head_correct: argmax2(masked) == inst.label.index(),
        });
    }
    let count = per_instance.len().max(1) as f64;
    let rate = |f: fn(&MaskInstance) -> bool| per_instance.iter().filter(|m| f(m)).count() as f64 / count;
    let fidelity_drop = 100.0 * (rate(|m| m.full_correct) - rate(|m| m.hard_correct));
    let head_fidelity_drop = 100.0 * (rate(|m| m.full_correct) - rate(|m| m.hard_head_correct));
    let size = per_instance.iter().map(|m| m.removed as f64).sum::<f64>() / count;
    let sparsity = per_instance
        .iter()
        .map(|m| {
            if m.total == 0 {
                100.0
            } else {
                100.0 * m.retained as f64 / m.total as f64
            }
        })
        .sum::<f64>()
        / count;
    Ok(MaskReport {
        fidelity_drop,
        head_fidelity_drop,
        size,
        sparsity,
        threshold,
        per_instance,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let rows = [
            ("instances", format!("{:6}", self.instances)),
            ("claim F1", pct(self.claim_f1)),
            ("claim acc", pct(self.claim_acc)),
            ("full-graph acc", pct(self.full_graph_acc)),
            ("rationale P", pct(self.rationale_precision)),
            ("rationale R", pct(self.rationale_recall)),
            ("rationale F1", pct(self.rationale_f1)),
            ("Ext.acc", pct(self.ext_acc)),
            ("Acc.Part", pct(self.acc_part)),
            ("Acc.Full", pct(self.acc_full)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<16} {v}");
        }
        let c = &self.confusion.counts;
        let _ = writeln!(
            s,
            "confusion (gold x pred): S/S {} S/R {} R/S {} R/R {}",
            c[0][0], c[0][1], c[1][0], c[1][1]
        );
        if let Some(m) = &self.mask {
            let _ = writeln!(s, "mask threshold   {:6.2}", m.threshold);
            let _ = writeln!(s, "fidelity drop    {:6.2} pp", m.fidelity_drop);
            let _ = writeln!(s, "  (full head)    {:6.2} pp", m.head_fidelity_drop);
            let _ = writeln!(s, "size             {:6.2}", m.size);
            let _ = writeln!(s, "sparsity         {:6.2} %", m.sparsity);
        }
        s
    }
}
