//! GCN classifier head math: pairwise edge scoring, self-loop symmetric
//! normalization, neighbour aggregation and the edge-supervision target.

use ndarray::Array2;

use crate::autograd::{sym_normalize_value, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Mode, Module, Mlp};

const SYMMETRY_TOL: f64 = 1e-12;

/// Raw and normalized affinities of one mini-batch graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    /// Post-sigmoid edge scores with the diagonal cleared; the self-loop is
    /// added by normalization instead.
    pub raw: Matrix,
    pub normalized: Matrix,
    /// Row sums of `raw + I`.
    pub degree: Vec<f64>,
}

impl AffinityMatrix {
    pub fn from_raw(raw: Matrix) -> Result<Self> {
        let normalized = normalize_affinity(&raw)?;
        let degree = raw
            .rows()
            .into_iter()
            .map(|r| r.sum() + 1.0)
            .collect();
        Ok(Self {
            raw,
            normalized,
            degree,
        })
    }
}

/// Edge-loss supervision for one batch graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAffinity {
    /// 1 where both nodes carry the same definitive label, else 0.
    pub values: Matrix,
    /// Pairs that contribute to the edge loss.
    pub mask: Array2<bool>,
}

impl TargetAffinity {
    pub fn active_pairs(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Label information for one graph node when building [`TargetAffinity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeLabel {
    /// Ground truth (source or pseudo-source node).
    Known(usize),
    /// Classifier prediction for a target node; used only if `confidence`
    /// exceeds the threshold.
    Predicted { label: usize, confidence: f64 },
    /// No label available.
    Unknown,
}

fn check_nodes(tape: &Tape, v: Var) -> Result<usize> {
    let n = tape.shape(v).0;
    if n < 2 {
        return Err(Error::Graph(format!(
            "a batch graph needs at least 2 nodes, got {n}"
        )));
    }
    Ok(n)
}

/// Tape version of [`edge_scores`]: `n x n` post-sigmoid scores.
pub fn edge_scores_var(
    tape: &mut Tape,
    nodes: Var,
    edge_net: &Mlp,
    edge_vars: &[Var],
    mode: &mut Mode,
) -> Result<Var> {
    let n = check_nodes(tape, nodes)?;
    let pairs = tape.pairwise_abs_diff(nodes);
    let logits = edge_net.forward(tape, edge_vars, pairs, mode);
    let square = tape.reshape(logits, n, n);
    Ok(tape.sigmoid(square))
}

/// `score[i, j] = sigmoid(f_edge(|v_i - v_j|))` for every ordered pair.
pub fn edge_scores(nodes: &Matrix, edge_net: &Mlp) -> Result<Matrix> {
    let mut tape = Tape::new();
    let v = tape.constant(nodes.clone());
    let vars = edge_net.bind(&mut tape);
    let s = edge_scores_var(&mut tape, v, edge_net, &vars, &mut Mode::Eval)?;
    Ok(tape.value(s).clone())
}

/// `M^{-1/2} (raw + I) M^{-1/2}` with `M` the degree matrix of `raw + I`.
pub fn normalize_affinity(raw: &Matrix) -> Result<Matrix> {
    let (r, c) = raw.dim();
    if r != c {
        return Err(Error::Contract(format!(
            "affinity must be square, got {r}x{c}"
        )));
    }
    for i in 0..r {
        for j in 0..c {
            let v = raw[[i, j]];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!(
                    "affinity entry ({i},{j}) = {v} is not a finite non-negative score"
                )));
            }
            let w = raw[[j, i]];
            if (v - w).abs() > SYMMETRY_TOL * v.abs().max(w.abs()).max(1.0) {
                return Err(Error::Contract(format!(
                    "affinity is not symmetric at ({i},{j}): {v} vs {w}"
                )));
            }
        }
    }
    Ok(sym_normalize_value(raw))
}

/// Tape version of [`propagate_nodes`].
pub fn propagate_nodes_var(
    tape: &mut Tape,
    nodes: Var,
    normalized: Var,
    node_net: &Mlp,
    node_vars: &[Var],
    mode: &mut Mode,
) -> Result<Var> {
    let (n, d) = tape.shape(nodes);
    let (ar, ac) = tape.shape(normalized);
    if ar != n || ac != n {
        return Err(Error::Shape(format!(
            "affinity is {ar}x{ac} but there are {n} nodes"
        )));
    }
    if node_net.input_width() != 2 * d {
        return Err(Error::Shape(format!(
            "node network expects width {}, nodes have {d} features",
            node_net.input_width()
        )));
    }
    let context = tape.matmul(normalized, nodes);
    let joined = tape.concat_cols(nodes, context);
    Ok(node_net.forward(tape, node_vars, joined, mode))
}

/// Logits `f_node([v_i, sum_j A[i, j] v_j])` for every node.
pub fn propagate_nodes(nodes: &Matrix, normalized: &Matrix, node_net: &Mlp) -> Result<Matrix> {
    let mut tape = Tape::new();
    let v = tape.constant(nodes.clone());
    let a = tape.constant(normalized.clone());
    let vars = node_net.bind(&mut tape);
    let out = propagate_nodes_var(&mut tape, v, a, node_net, &vars, &mut Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// Edge-loss target: pairs of definitively labeled nodes get 1 when the
/// labels agree and 0 otherwise. Predicted nodes count as labeled only when
/// `confidence > tau`. The diagonal is always masked.
pub fn build_target_affinity(nodes: &[NodeLabel], tau: f64) -> TargetAffinity {
    let definitive: Vec<Option<usize>> = nodes
        .iter()
        .map(|n| match *n {
            NodeLabel::Known(l) => Some(l),
            NodeLabel::Predicted { label, confidence } if confidence > tau => Some(label),
            _ => None,
        })
        .collect();
    let n = nodes.len();
    let mut values = Matrix::zeros((n, n));
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if let (Some(a), Some(b)) = (definitive[i], definitive[j]) {
                mask[[i, j]] = true;
                if a == b {
                    values[[i, j]] = 1.0;
                }
            }
        }
    }
    TargetAffinity { values, mask }
}
