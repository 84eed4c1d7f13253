mod common;

use bitrap::bidecoder::BackwardFeed;
use bitrap::gmm::BackwardAnchor;
use bitrap::model::{ModelConfig, Variant};
use common::{analytic_gradients, fixture, gradient_check, tiny_config};

fn check(config: ModelConfig, seed: u64) {
    let f = fixture(config.clone(), seed);
    let r = gradient_check(&f);
    assert!(
        r.max_rel_err < 1e-4,
        "{:?}: max relative error {:.3e} at {}",
        config.variant,
        r.max_rel_err,
        r.worst
    );
}

#[test]
fn sampling_loss_matches_finite_differences() {
    check(tiny_config(Variant::Np), 1);
}

#[test]
fn mixture_loss_matches_finite_differences() {
    check(tiny_config(Variant::Gmm), 2);
}

#[test]
fn deterministic_loss_matches_finite_differences() {
    check(tiny_config(Variant::Deterministic), 3);
}

#[test]
fn forward_only_loss_matches_finite_differences() {
    check(tiny_config(Variant::NpForwardOnly), 4);
}

#[test]
fn alternative_backward_feeds_and_anchor_match_finite_differences() {
    for feed in [BackwardFeed::Goal, BackwardFeed::Zeros] {
        check(
            ModelConfig {
                backward_feed: feed,
                ..tiny_config(Variant::Np)
            },
            5,
        );
    }
    check(
        ModelConfig {
            backward_anchor: BackwardAnchor::GroundTruth,
            ..tiny_config(Variant::Gmm)
        },
        6,
    );
}

#[test]
fn every_parameter_receives_gradient() {
    for v in [
        Variant::Np,
        Variant::Gmm,
        Variant::Deterministic,
        Variant::NpForwardOnly,
    ] {
        let f = fixture(tiny_config(v), 7);
        let grads = analytic_gradients(&f);
        for (id, g) in f.store.ids().zip(&grads) {
            assert!(
                g.max_abs() > 0.0,
                "{v:?}: parameter {} has zero gradient",
                f.store.name(id)
            );
        }
    }
}
