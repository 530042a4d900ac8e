//! Cross-entropy, edge BCE and adversarial losses, and the weighted
//! objective of one adaptation batch.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Matrix, Tape, Var};
use crate::data::MiniBatch;
use crate::data::stack_features;
use crate::error::{Error, Result};
use crate::graph::{build_target_affinity, NodeLabel, TargetAffinity};
use crate::model::{BoundBundle, GrlCoefficient, ModelBundle};
use crate::nn::Mode;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_edge: f64,
    pub lambda_node: f64,
    pub lambda_adv: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_edge: 1.0,
            lambda_node: 0.3,
            lambda_adv: 1.0,
            tau: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_edge", self.lambda_edge),
            ("lambda_node", self.lambda_node),
            ("lambda_adv", self.lambda_adv),
            ("tau", self.tau),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_labels(rows: usize, cols: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Contract(format!(
            "label {bad} outside [0, {cols})"
        )));
    }
    Ok(())
}

/// Mean `-log softmax(logits)[label]`.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (r, c) = tape.shape(logits);
    check_labels(r, c, labels)?;
    if r == 0 {
        return Err(Error::Shape("cross-entropy over an empty batch".into()));
    }
    Ok(tape.cross_entropy(logits, labels))
}

pub fn ce_loss_value(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = ce_loss(&mut tape, l, labels)?;
    Ok(tape.scalar(out))
}

/// Negated mean over unmasked pairs of
/// `t log p + (1 - t) log(1 - p)`; a constant zero when no pair is active.
pub fn edge_bce_loss(tape: &mut Tape, scores: Var, target: &TargetAffinity) -> Result<Var> {
    let shape = tape.shape(scores);
    if shape != target.values.dim() || shape != target.mask.dim() {
        return Err(Error::Shape(format!(
            "edge scores {shape:?} vs target {:?}",
            target.values.dim()
        )));
    }
    let count = target.active_pairs();
    if count == 0 {
        return Ok(tape.constant(Matrix::zeros((1, 1))));
    }
    let w = -1.0 / count as f64;
    let pos = Matrix::from_shape_fn(shape, |ij| {
        if target.mask[ij] {
            w * target.values[ij]
        } else {
            0.0
        }
    });
    let neg = Matrix::from_shape_fn(shape, |ij| {
        if target.mask[ij] {
            w * (1.0 - target.values[ij])
        } else {
            0.0
        }
    });
    let log_p = tape.log_clamped(scores, PROB_EPS, 1.0 - PROB_EPS);
    let one_minus = tape.affine(scores, -1.0, 1.0);
    let log_q = tape.log_clamped(one_minus, PROB_EPS, 1.0 - PROB_EPS);
    let a = tape.mul_const(log_p, pos);
    let b = tape.mul_const(log_q, neg);
    let s = tape.add(a, b);
    Ok(tape.sum(s))
}

pub fn edge_bce_value(scores: &Matrix, target: &TargetAffinity) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let out = edge_bce_loss(&mut tape, s, target)?;
    Ok(tape.scalar(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainFlag {
    Source,
    Target,
}

/// `-mean_source log σ(z) - mean_target log(1 - σ(z))` over `n x 1` logits.
pub fn adversarial_loss(tape: &mut Tape, logits: Var, flags: &[DomainFlag]) -> Result<Var> {
    let (r, c) = tape.shape(logits);
    if c != 1 || r != flags.len() {
        return Err(Error::Shape(format!(
            "adversarial loss expects {} x 1 logits, got {r} x {c}",
            flags.len()
        )));
    }
    let n_src = flags.iter().filter(|f| **f == DomainFlag::Source).count();
    let n_tgt = r - n_src;
    if n_src == 0 || n_tgt == 0 {
        warn!("adversarial batch holds a single domain ({n_src} source, {n_tgt} target rows)");
    }
    if r == 0 {
        return Err(Error::Shape("adversarial loss over an empty batch".into()));
    }
    let src_w = Matrix::from_shape_fn((r, 1), |(i, _)| match flags[i] {
        DomainFlag::Source => -1.0 / n_src as f64,
        DomainFlag::Target => 0.0,
    });
    let tgt_w = Matrix::from_shape_fn((r, 1), |(i, _)| match flags[i] {
        DomainFlag::Source => 0.0,
        DomainFlag::Target => -1.0 / n_tgt as f64,
    });
    let s = tape.sigmoid(logits);
    let log_s = tape.log_clamped(s, PROB_EPS, 1.0 - PROB_EPS);
    let one_minus = tape.affine(s, -1.0, 1.0);
    let log_q = tape.log_clamped(one_minus, PROB_EPS, 1.0 - PROB_EPS);
    let a = tape.mul_const(log_s, src_w);
    let b = tape.mul_const(log_q, tgt_w);
    let sum = tape.add(a, b);
    Ok(tape.sum(sum))
}

pub fn adversarial_value(logits: &Matrix, flags: &[DomainFlag]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = adversarial_loss(&mut tape, l, flags)?;
    Ok(tape.scalar(out))
}

/// Unweighted loss values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mlp_ce: f64,
    pub edge_bce: f64,
    pub node_ce: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Component losses of one batch on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub mlp_ce: Var,
    pub edge_bce: Option<Var>,
    pub node_ce: Option<Var>,
    pub adversarial: Option<Var>,
}

/// `mlp_ce + λ_edge edge_bce + λ_node node_ce + λ_adv adv`.
///
/// A single reverse pass over the result routes gradients per parameter
/// group: the discriminator receives `λ_adv ∇adv`; the feature extractor and
/// MLP head receive `∇mlp_ce - c λ_adv ∇adv` through the reversal layer with
/// coefficient `c`; edge and node networks (and the feature extractor)
/// receive `λ_edge ∇edge_bce + λ_node ∇node_ce`.
pub fn total_objective(
    tape: &mut Tape,
    terms: &ObjectiveTerms,
    weights: &LossWeights,
) -> (Var, LossValues) {
    let mut values = LossValues {
        mlp_ce: tape.scalar(terms.mlp_ce),
        ..LossValues::default()
    };
    let mut total = terms.mlp_ce;
    if let Some(e) = terms.edge_bce {
        values.edge_bce = tape.scalar(e);
        let w = tape.scale(e, weights.lambda_edge);
        total = tape.add(total, w);
    }
    if let Some(n) = terms.node_ce {
        values.node_ce = tape.scalar(n);
        let w = tape.scale(n, weights.lambda_node);
        total = tape.add(total, w);
    }
    if let Some(a) = terms.adversarial {
        values.adversarial = tape.scalar(a);
        let w = tape.scale(a, weights.lambda_adv);
        total = tape.add(total, w);
    }
    values.total = tape.scalar(total);
    (total, values)
}

/// Which classifier supplies definitive labels for target nodes in the
/// edge-loss target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTargetSource {
    /// MLP head (co-teaching).
    #[default]
    Mlp,
    /// GCN head, labeling each batch's target nodes as it trains.
    Gcn,
}

/// What to include in a batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub grl: GrlCoefficient,
    pub use_graph: bool,
    pub use_adversarial: bool,
    pub edge_targets: EdgeTargetSource,
    pub source_domain: usize,
}

/// Tape nodes and diagnostics of one adaptation batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub total: Var,
    pub terms: ObjectiveTerms,
    pub values: LossValues,
    pub edge_target: Option<TargetAffinity>,
}

pub(crate) fn predicted(probs: &Matrix, row: usize) -> (usize, f64) {
    let r = probs.row(row);
    let mut best = 0;
    for c in 1..r.len() {
        if r[c] > r[best] {
            best = c;
        }
    }
    (best, r[best])
}

/// Forward pass of the full adaptation objective over `batch` (source half
/// first, then target half).
pub fn batch_objective(
    bundle: &ModelBundle,
    tape: &mut Tape,
    bound: &BoundBundle,
    batch: &MiniBatch,
    spec: &ObjectiveSpec,
    mode: &mut Mode,
) -> Result<BatchObjective> {
    let b = batch.batch_size();
    let n = b + batch.target_half.len();
    let x = stack_features(batch.all());
    let labels = batch.source_labels();

    let f = bundle.features_var(tape, bound, &x, mode)?;
    let logits = bundle.mlp_logits_var(tape, bound, f);
    let src_logits = tape.row_slice(logits, 0, b);
    let mlp_ce = ce_loss(tape, src_logits, &labels)?;

    let mut terms = ObjectiveTerms {
        mlp_ce,
        edge_bce: None,
        node_ce: None,
        adversarial: None,
    };
    let mut edge_target = None;

    if spec.use_graph {
        let gcn = bundle.gcn_var(tape, bound, f, mode)?;
        let mlp_probs = softmax_rows(tape.value(logits));
        let gcn_probs = softmax_rows(tape.value(gcn.logits));
        let nodes: Vec<NodeLabel> = (0..n)
            .map(|i| {
                if i < b {
                    return NodeLabel::Known(labels[i]);
                }
                let probs = match spec.edge_targets {
                    EdgeTargetSource::Mlp => &mlp_probs,
                    EdgeTargetSource::Gcn => &gcn_probs,
                };
                let (label, confidence) = predicted(probs, i);
                NodeLabel::Predicted { label, confidence }
            })
            .collect();
        let target = build_target_affinity(&nodes, spec.weights.tau);
        terms.edge_bce = Some(edge_bce_loss(tape, gcn.raw, &target)?);
        let src_node = tape.row_slice(gcn.logits, 0, b);
        terms.node_ce = Some(ce_loss(tape, src_node, &labels)?);
        edge_target = Some(target);
    }

    if spec.use_adversarial {
        let probs = tape.softmax(logits);
        let d = bundle.discriminator_var(tape, bound, f, probs, spec.grl, mode);
        let flags: Vec<DomainFlag> = batch
            .all()
            .map(|s| {
                if s.domain_id == spec.source_domain {
                    DomainFlag::Source
                } else {
                    DomainFlag::Target
                }
            })
            .collect();
        terms.adversarial = Some(adversarial_loss(tape, d, &flags)?);
    }

    let (total, values) = total_objective(tape, &terms, &spec.weights);
    Ok(BatchObjective {
        total,
        terms,
        values,
        edge_target,
    })
}
