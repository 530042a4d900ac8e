//! Loss builders over a four-sample micro-batch for gradient checks.

use cgct::autograd::{Matrix, Tape, Var};
use cgct::graph::{build_target_affinity, NodeLabel};
use cgct::model::{BoundBundle, GrlCoefficient, GroupGradients, ModelBundle, ParamGroup};
use cgct::nn::Mode;
use cgct::data::MiniBatch;
use cgct::objectives::{
    adversarial_loss, batch_objective, ce_loss, edge_bce_loss, DomainFlag, EdgeTargetSource, LossValues, LossWeights,
    ObjectiveSpec,
};
use ndarray::array;

use super::{fd_check, micro_bundle, samples, FD_FLOOR, FD_RTOL, FD_STEP};

pub type Build = dyn Fn(&ModelBundle, &mut Tape, &BoundBundle) -> Var;

pub fn inputs() -> Matrix {
    array![[0.3, -1.2, 0.8], [1.1, 0.4, -0.5], [-0.7, 0.9, 0.2], [0.05, -0.3, 1.4]]
}

pub const LABELS: [usize; 4] = [0, 2, 1, 2];

pub fn analytic(bundle: &ModelBundle, build: &Build) -> GroupGradients {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let loss = build(bundle, &mut tape, &bound);
    bound.gradients(&tape.backward(loss))
}

pub fn value(bundle: &ModelBundle, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let loss = build(bundle, &mut tape, &bound);
    tape.scalar(loss)
}

/// Worst tolerance ratio over three random micro-networks.
pub fn worst_ratio(build: &Build, scale: impl Fn(ParamGroup) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let b = micro_bundle(seed);
        assert!(b.num_params() <= 500, "{} parameters", b.num_params());
        let (w, n) = fd_check(&b, &analytic(&b, build), &scale, |p| value(p, build));
        assert_eq!(n, b.num_params());
        worst = worst.max(w);
    }
    worst
}

fn features(b: &ModelBundle, t: &mut Tape, bound: &BoundBundle) -> Var {
    b.features_var(t, bound, &inputs(), &mut Mode::Eval).unwrap()
}

pub fn mlp_ce(b: &ModelBundle, t: &mut Tape, bound: &BoundBundle) -> Var {
    let f = features(b, t, bound);
    let g = b.mlp_logits_var(t, bound, f);
    ce_loss(t, g, &LABELS).unwrap()
}

pub fn node_ce(b: &ModelBundle, t: &mut Tape, bound: &BoundBundle) -> Var {
    let f = features(b, t, bound);
    let gcn = b.gcn_var(t, bound, f, &mut Mode::Eval).unwrap();
    ce_loss(t, gcn.logits, &LABELS).unwrap()
}

pub fn edge_bce(b: &ModelBundle, t: &mut Tape, bound: &BoundBundle) -> Var {
    let f = features(b, t, bound);
    let gcn = b.gcn_var(t, bound, f, &mut Mode::Eval).unwrap();
    let nodes: Vec<NodeLabel> = LABELS.iter().map(|&l| NodeLabel::Known(l)).collect();
    edge_bce_loss(t, gcn.raw, &build_target_affinity(&nodes, 0.7)).unwrap()
}

pub fn adversarial(c: f64) -> impl Fn(&ModelBundle, &mut Tape, &BoundBundle) -> Var {
    move |b, t, bound| {
        let f = features(b, t, bound);
        let g = b.mlp_logits_var(t, bound, f);
        let p = t.softmax(g);
        let d = b.discriminator_var(t, bound, f, p, GrlCoefficient::constant(c), &mut Mode::Eval);
        use DomainFlag::*;
        adversarial_loss(t, d, &[Source, Source, Target, Target]).unwrap()
    }
}

/// Finite-difference scale for the adversarial loss: reversed by `-c`
/// below the discriminator.
pub fn grl_scale(c: f64) -> impl Fn(ParamGroup) -> f64 {
    move |g| match g {
        ParamGroup::Discriminator => 1.0,
        _ => -c,
    }
}

pub fn micro_batch() -> MiniBatch {
    MiniBatch {
        source_half: samples(&[[0.3, -1.2, 0.8], [1.1, 0.4, -0.5]], &[Some(0), Some(2)], 0, 0),
        target_half: samples(&[[-0.7, 0.9, 0.2], [0.05, -0.3, 1.4]], &[None, None], 1, 100),
    }
}

pub fn spec(weights: LossWeights, c: f64) -> ObjectiveSpec {
    ObjectiveSpec {
        weights,
        grl: GrlCoefficient::constant(c),
        use_graph: true,
        use_adversarial: true,
        edge_targets: EdgeTargetSource::Mlp,
        source_domain: 0,
    }
}

pub fn objective_grads(b: &ModelBundle, s: &ObjectiveSpec) -> GroupGradients {
    let mut tape = Tape::new();
    let bound = b.bind(&mut tape);
    let obj = batch_objective(b, &mut tape, &bound, &micro_batch(), s, &mut Mode::Eval).unwrap();
    bound.gradients(&tape.backward(obj.total))
}

pub fn objective_values(b: &ModelBundle, s: &ObjectiveSpec) -> LossValues {
    let mut tape = Tape::new();
    let bound = b.bind(&mut tape);
    batch_objective(b, &mut tape, &bound, &micro_batch(), s, &mut Mode::Eval)
        .unwrap()
        .values
}

pub fn fd_single(b: &ModelBundle, g: ParamGroup, m: usize, k: usize, f: &impl Fn(&ModelBundle) -> f64) -> f64 {
    let mut p = b.clone();
    let orig = b.module(g).params()[m].as_slice().unwrap()[k];
    p.module_mut(g).params_mut()[m].as_slice_mut().unwrap()[k] = orig + FD_STEP;
    let up = f(&p);
    p.module_mut(g).params_mut()[m].as_slice_mut().unwrap()[k] = orig - FD_STEP;
    let down = f(&p);
    (up - down) / (2.0 * FD_STEP)
}

/// Worst tolerance ratio of the full objective's routed gradient against
/// finite differences of its descent part plus the signed adversarial part.
pub fn total_objective_worst(seed: u64) -> f64 {
    // tau 0 keeps every target node labeled so the edge mask cannot flip.
    let w = LossWeights {
        tau: 0.0,
        ..LossWeights::default()
    };
    let c = 0.6;
    let s = spec(w, c);
    let b = micro_bundle(seed);
    let g = objective_grads(&b, &s);
    let descent = |p: &ModelBundle| {
        let v = objective_values(p, &s);
        v.mlp_ce + w.lambda_edge * v.edge_bce + w.lambda_node * v.node_ce
    };
    let adv = |p: &ModelBundle| w.lambda_adv * objective_values(p, &s).adversarial;
    let mut worst: f64 = 0.0;
    for grp in ParamGroup::ALL {
        let sign = match grp {
            ParamGroup::Discriminator => 1.0,
            ParamGroup::FeatureExtractor | ParamGroup::MlpHead => -c,
            _ => 0.0,
        };
        for (m, mat) in g.group(grp).iter().enumerate() {
            for (k, &a) in mat.iter().enumerate() {
                let r = fd_single(&b, grp, m, k, &descent) + sign * fd_single(&b, grp, m, k, &adv);
                let big = a.abs().max(r.abs());
                if big > FD_FLOOR {
                    worst = worst.max((a - r).abs() / (FD_RTOL * big));
                }
            }
        }
    }
    worst
}
