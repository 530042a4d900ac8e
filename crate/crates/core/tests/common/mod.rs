//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod micro;

use cgct::autograd::Matrix;
use cgct::data::{InputShape, Sample};
use cgct::model::{ArchConfig, BackboneKind, GroupGradients, ModelBundle, ParamGroup};
use cgct::nn::{Activation, Mlp};

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
/// Below this magnitude both gradients count as zero.
pub const FD_FLOOR: f64 = 1e-8;

/// Vector-input bundle with a few hundred parameters and no dropout.
pub fn micro_bundle(seed: u64) -> ModelBundle {
    let arch = ArchConfig {
        input: InputShape::Vector { dim: 3 },
        backbone: BackboneKind::Mlp,
        backbone_hidden: 4,
        backbone_dropout: 0.0,
        feature_dim: 4,
        n_classes: 3,
        edge_hidden: 4,
        node_hidden: 4,
        disc_hidden: 4,
        disc_dropout: 0.0,
    };
    ModelBundle::new(arch, seed).unwrap()
}

pub fn samples(rows: &[[f64; 3]], labels: &[Option<usize>], domain: usize, uid0: u64) -> Vec<Sample> {
    rows.iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (r, &l))| Sample {
            features: r.to_vec().into(),
            label: l,
            domain_id: domain,
            uid: uid0 + i as u64,
        })
        .collect()
}

/// Worst violation of `|a - n| <= rtol * max(|a|, |n|)` over all parameters,
/// where `n` is a central difference of `loss` scaled per group by `scale`.
/// Returns `(worst ratio, parameters checked)`; a ratio <= 1 passes.
pub fn fd_check(
    bundle: &ModelBundle,
    analytic: &GroupGradients,
    scale: impl Fn(ParamGroup) -> f64,
    loss: impl Fn(&ModelBundle) -> f64,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut probe = bundle.clone();
    for g in ParamGroup::ALL {
        let n_mats = bundle.module(g).params().len();
        for m in 0..n_mats {
            let len = bundle.module(g).params()[m].len();
            for k in 0..len {
                let orig = bundle.module(g).params()[m].as_slice().unwrap()[k];
                probe.module_mut(g).params_mut()[m].as_slice_mut().unwrap()[k] = orig + FD_STEP;
                let up = loss(&probe);
                probe.module_mut(g).params_mut()[m].as_slice_mut().unwrap()[k] = orig - FD_STEP;
                let down = loss(&probe);
                probe.module_mut(g).params_mut()[m].as_slice_mut().unwrap()[k] = orig;
                let numeric = scale(g) * (up - down) / (2.0 * FD_STEP);
                let grad = analytic.group(g)[m].as_standard_layout();
                assert_eq!(grad.dim(), bundle.module(g).params()[m].dim());
                let a = grad.as_slice().unwrap()[k];
                let big = a.abs().max(numeric.abs());
                if big > FD_FLOOR {
                    worst = worst.max((a - numeric).abs() / (FD_RTOL * big));
                }
                count += 1;
            }
        }
    }
    (worst, count)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]]).collect()
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
        Activation::Identity => v,
    }
}

/// Scalar-loop forward of an `Mlp` on one input row.
pub fn mlp_loop(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.outputs()];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = layer.bias[[0, o]];
            for (i, hi) in h.iter().enumerate() {
                acc += hi * layer.weight[[i, o]];
            }
            *slot = act(if l < last { net.hidden } else { net.output }, acc);
        }
        h = out;
    }
    h
}

/// Per-node loop: `context_i = sum_j A[i, j] v_j`, then `f_node([v_i, context_i])`.
pub fn propagate_loop(nodes: &Matrix, a: &Matrix, node_net: &Mlp) -> Matrix {
    let (n, d) = nodes.dim();
    let nc = node_net.output_width();
    let mut out = Matrix::zeros((n, nc));
    for i in 0..n {
        let mut joined: Vec<f64> = nodes.row(i).to_vec();
        for k in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[[i, j]] * nodes[[j, k]];
            }
            joined.push(acc);
        }
        for (c, v) in mlp_loop(node_net, &joined).into_iter().enumerate() {
            out[[i, c]] = v;
        }
    }
    out
}

/// Pairwise loop: `sigmoid(f_edge(|v_i - v_j|))`.
pub fn edge_loop(nodes: &Matrix, edge_net: &Mlp) -> Matrix {
    let n = nodes.nrows();
    Matrix::from_shape_fn((n, n), |(i, j)| {
        let diff: Vec<f64> = nodes
            .row(i)
            .iter()
            .zip(nodes.row(j))
            .map(|(a, b)| (a - b).abs())
            .collect();
        1.0 / (1.0 + (-mlp_loop(edge_net, &diff)[0]).exp())
    })
}

pub fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
