mod common;

use cgct::autograd::Tape;
use cgct::model::ParamGroup;
use cgct::nn::Mode;
use cgct::objectives::{ce_loss, LossWeights};
use common::micro::{
    adversarial, analytic, edge_bce, grl_scale, micro_batch, mlp_ce, node_ce, objective_grads, spec,
    total_objective_worst, worst_ratio, Build,
};
use common::micro_bundle;

fn check(build: &Build, scale: impl Fn(ParamGroup) -> f64) {
    let worst = worst_ratio(build, scale);
    assert!(worst <= 1.0, "worst tolerance ratio {worst}");
}

#[test]
fn mlp_cross_entropy_matches_finite_differences() {
    check(&mlp_ce, |_| 1.0);
}

#[test]
fn node_cross_entropy_matches_finite_differences() {
    check(&node_ce, |_| 1.0);
}

#[test]
fn edge_bce_matches_finite_differences() {
    check(&edge_bce, |_| 1.0);
}

#[test]
fn adversarial_gradient_is_reversed_below_the_discriminator() {
    for c in [0.0, 0.1, 1.0] {
        check(&adversarial(c), grl_scale(c));
    }
}

#[test]
fn zero_coefficient_blocks_all_adversarial_gradient_into_features() {
    let b = micro_bundle(4);
    let g = analytic(&b, &adversarial(0.0));
    for grp in [ParamGroup::FeatureExtractor, ParamGroup::MlpHead] {
        assert!(g.group(grp).iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }
    assert!(g.group(ParamGroup::Discriminator).iter().any(|m| m.iter().any(|&v| v != 0.0)));
}

#[test]
fn total_objective_routes_gradients_per_group() {
    for seed in 0..3 {
        let worst = total_objective_worst(seed);
        assert!(worst <= 1.0, "seed {seed}: worst tolerance ratio {worst}");
    }
}

#[test]
fn zero_weights_leave_only_the_mlp_gradient() {
    let zero = LossWeights {
        lambda_edge: 0.0,
        lambda_node: 0.0,
        lambda_adv: 0.0,
        tau: 0.7,
    };
    let b = micro_bundle(1);
    let g = objective_grads(&b, &spec(zero, 1.0));
    let mut tape = Tape::new();
    let bound = b.bind(&mut tape);
    let x = cgct::data::stack_features(micro_batch().all());
    let f = b.features_var(&mut tape, &bound, &x, &mut Mode::Eval).unwrap();
    let logits = b.mlp_logits_var(&mut tape, &bound, f);
    let src = tape.row_slice(logits, 0, 2);
    let loss = ce_loss(&mut tape, src, &[0, 2]).unwrap();
    let only = bound.gradients(&tape.backward(loss));
    for grp in ParamGroup::ALL {
        for (a, r) in g.group(grp).iter().zip(only.group(grp)) {
            for (x, y) in a.iter().zip(r.iter()) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{grp:?}");
            }
        }
    }
}

#[test]
fn node_weight_scales_its_contribution_linearly() {
    let base = LossWeights {
        lambda_edge: 0.0,
        lambda_node: 0.0,
        lambda_adv: 0.0,
        tau: 0.7,
    };
    let b = micro_bundle(2);
    let g0 = objective_grads(&b, &spec(base, 1.0));
    let g1 = objective_grads(&b, &spec(LossWeights { lambda_node: 1.0, ..base }, 1.0));
    let g3 = objective_grads(&b, &spec(LossWeights { lambda_node: 0.3, ..base }, 1.0));
    for grp in ParamGroup::ALL {
        for ((a0, a1), a3) in g0.group(grp).iter().zip(g1.group(grp)).zip(g3.group(grp)) {
            for ((x0, x1), x3) in a0.iter().zip(a1.iter()).zip(a3.iter()) {
                let unweighted = x1 - x0;
                assert!((x3 - x0 - 0.3 * unweighted).abs() <= 1e-12 * unweighted.abs().max(1.0));
            }
        }
    }
    // The node loss reaches the node network only through its own term.
    assert!(g0.group(ParamGroup::NodeNet).iter().all(|m| m.iter().all(|&v| v == 0.0)));
}
