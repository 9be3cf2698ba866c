//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use cellsplit::labels::{LabelMap, BACKGROUND, CELL, IGNORE};
use cellsplit::losses::{gradients_of, loss_pass, FrwConfig, LossWeights, TrainingLabels};
use cellsplit::nn::{Mode, NetworkModel, WeightInit};
use cellsplit::raster::Grid;
use cellsplit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
/// Arrays whose gradient norm is below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-7;

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, with_ignore: bool) -> LabelMap {
    Grid::from_fn(h, w, |_, _| match rng.random_range(0..if with_ignore { 3 } else { 2 }) {
        0 => BACKGROUND,
        1 => CELL,
        _ => IGNORE,
    })
}

pub fn setup(seed: u64) -> (NetworkModel<f64>, Tensor<f64>, TrainingLabels) {
    let model = NetworkModel::<f64>::unet(2, 4, WeightInit::Random { seed, zero_bias: false });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let image = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.random::<f64>());
    let labels = TrainingLabels {
        voronoi: random_labels(&mut rng, 8, 8, true),
        cluster: random_labels(&mut rng, 8, 8, true),
        point: random_labels(&mut rng, 8, 8, false),
    };
    (model, image, labels)
}

pub struct Report {
    pub worst: f64,
    pub worst_name: String,
    pub arrays: usize,
}

pub fn check(seed: u64, weights: LossWeights, frw: FrwConfig, frozen: &HashSet<String>) -> Report {
    let (model, image, labels) = setup(seed);
    let base = loss_pass(&model, &image, &labels, &weights, &frw, Mode::Training, None).unwrap();
    let fixed_w = base.frw.as_ref().map(|(_, w)| w.clone());
    let grads = gradients_of(&model, &base, &labels, &weights, frozen).unwrap();

    let loss = |m: &NetworkModel<f64>| {
        let p = loss_pass(m, &image, &labels, &weights, &frw, Mode::Training, fixed_w.clone()).unwrap();
        p.terms.loss_seg + p.terms.loss_cc
    };
    let mut report = Report { worst: 0.0, worst_name: String::new(), arrays: 0 };
    for (name, g) in &grads {
        let mut num = vec![0.0; g.len()];
        for (i, n) in num.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.weights.get_mut(name).unwrap().data_mut()[i] += STEP;
            let mut minus = model.clone();
            minus.weights.get_mut(name).unwrap().data_mut()[i] -= STEP;
            *n = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = g.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = g.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let err = if scale < ABS_FLOOR { diff } else { diff / scale };
        if err > report.worst {
            report.worst = err;
            report.worst_name = name.clone();
        }
        report.arrays += 1;
    }
    report
}

