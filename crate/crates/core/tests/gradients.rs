//! Analytic gradients against central finite differences (f64, tiny nets).

mod common;

use std::collections::HashSet;

use cellsplit::losses::{gradients_of, loss_pass, FrwConfig, LossWeights};
use cellsplit::nn::Mode;
use common::{check, setup, TOL};

#[test]
fn gradients_match_finite_differences_without_frw() {
    let r = check(3, LossWeights::defaults(false), FrwConfig::default(), &HashSet::new());
    assert!(r.worst < TOL, "worst relative error {:.3e} at {}", r.worst, r.worst_name);
}

#[test]
fn gradients_match_finite_differences_with_frw() {
    for layer in ["enc1", "bottleneck"] {
        let frw = FrwConfig { layer: layer.into(), enabled: true };
        let r = check(5, LossWeights::defaults(true), frw, &HashSet::new());
        assert!(r.worst < TOL, "{layer}: worst relative error {:.3e} at {}", r.worst, r.worst_name);
    }
}

#[test]
fn zero_loss_weights_give_zero_gradients() {
    let (model, image, labels) = setup(1);
    let frw = FrwConfig { layer: "enc1".into(), enabled: true };
    let w = LossWeights::zero();
    let p = loss_pass(&model, &image, &labels, &w, &frw, Mode::Training, None).unwrap();
    assert_eq!((p.terms.loss_seg, p.terms.loss_cc), (0.0, 0.0));
    let g = gradients_of(&model, &p, &labels, &w, &HashSet::new()).unwrap();
    assert!(g.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn frozen_layers_have_no_gradient_entry() {
    let (model, image, labels) = setup(2);
    let frozen: HashSet<String> = ["enc1.conv1".to_string(), "cc.bn1".to_string()].into();
    let w = LossWeights::defaults(false);
    let p = loss_pass(&model, &image, &labels, &w, &FrwConfig::default(), Mode::Training, None).unwrap();
    let g = gradients_of(&model, &p, &labels, &w, &frozen).unwrap();
    for k in ["enc1.conv1.w", "enc1.conv1.b", "cc.bn1.gamma", "cc.bn1.beta"] {
        assert!(!g.contains_key(k), "{k}");
    }
    assert!(g.contains_key("enc1.conv2.w"));
    assert!(!g.keys().any(|k| k.ends_with(".mean") || k.ends_with(".var")));
}
