//! Randomised invariants over the network, relevance propagation, losses,
//! post-processing and metrics.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use cellsplit::labels::{LabelMap, IGNORE};
use cellsplit::losses::{frw_weight, masked_cross_entropy};
use cellsplit::lrp::{explain, OutputTarget};
use cellsplit::metrics::{aji, object_dice};
use cellsplit::nn::ops::{linear_forward, LinearGeom};
use cellsplit::nn::{forward, Mode, NetworkModel, WeightInit};
use cellsplit::postprocess::{
    condense_cc, expand_cc, instance_count, instance_pixels, renumber, split_instances, CcPoint, InstanceMap,
    PostprocessConfig,
};
use cellsplit::raster::{label_components, Connectivity, Grid, Mask};
use cellsplit::{Error, Tensor};

fn image<T: cellsplit::Real>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    // cheap deterministic texture in [0, 1]
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let v = (i as u64).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(40503)) % 1000;
        T::from_f64_lossy(v as f64 / 999.0)
    })
}

fn single_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn four_threads<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(f)
}

/// Instance map painted from rectangles (later ones overwrite), renumbered.
fn instance_map() -> impl Strategy<Value = InstanceMap> {
    (4usize..=16, 4usize..=16).prop_flat_map(|(h, w)| {
        prop::collection::vec((0..h, 0..w, 1usize..6, 1usize..6), 0..7).prop_map(move |rects| {
            let mut g = Grid::filled(h, w, 0u32);
            for (k, &(y, x, dh, dw)) in rects.iter().enumerate() {
                for yy in y..(y + dh).min(h) {
                    for xx in x..(x + dw).min(w) {
                        g.set(yy, xx, k as u32 + 1);
                    }
                }
            }
            renumber(&g)
        })
    })
}

fn mask() -> impl Strategy<Value = Mask> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Grid::from_vec(h, w, v).unwrap())
    })
}

// ---- network ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_shapes_follow_the_topology(depth in 1usize..=3, width in 1usize..=4, a in 1usize..=3, b in 1usize..=3) {
        let model = NetworkModel::<f32>::unet(depth, width, WeightInit::He { seed: 3 });
        let m = model.size_multiple();
        prop_assert_eq!(m, 1 << depth);
        let (h, w) = (a * m, b * m);
        let out = forward(&model, &image(h, w, 1), Mode::Inference).unwrap();
        prop_assert_eq!(out.y_seg.dims(), &[1, 2, h, w]);
        prop_assert_eq!(out.y_cc.dims(), &[1, 2, h, w]);
        for level in 1..=depth {
            let c = width << (level - 1);
            let (lh, lw) = (h >> (level - 1), w >> (level - 1));
            prop_assert_eq!(out.trace.output(&format!("enc{level}.relu2")).unwrap().dims(), &[1, c, lh, lw]);
            prop_assert_eq!(out.trace.output(&format!("pool{level}")).unwrap().dims(), &[1, c, lh / 2, lw / 2]);
            prop_assert_eq!(out.trace.output(&format!("cat{level}")).unwrap().dims(), &[1, 2 * c, lh, lw]);
            prop_assert_eq!(out.trace.output(&format!("dec{level}.relu2")).unwrap().dims(), &[1, c, lh, lw]);
        }
        let bottom = out.trace.output("bottleneck.relu2").unwrap();
        prop_assert_eq!(bottom.dims(), &[1, width << depth, h >> depth, w >> depth]);

        let bad = forward(&model, &image(h + 1, w, 1), Mode::Inference);
        prop_assert!(matches!(bad, Err(Error::InputSize { .. })), "unexpected {:?}", bad.err());
    }

    #[test]
    fn softmax_outputs_sum_to_one(seed in 0u64..1000, a in 1usize..=3, b in 1usize..=3) {
        let model = NetworkModel::<f32>::unet(2, 4, WeightInit::Random { seed, zero_bias: false });
        let out = forward(&model, &image(4 * a, 4 * b, seed), Mode::Inference).unwrap();
        for y in [&out.y_seg, &out.y_cc] {
            let (p0, p1) = (y.plane(0, 0), y.plane(0, 1));
            for (u, v) in p0.iter().zip(p1) {
                prop_assert!((u + v - 1.0).abs() < 1e-5);
                prop_assert!(*u >= 0.0 && *v >= 0.0);
            }
        }
    }

    #[test]
    fn forward_and_heatmaps_ignore_thread_count(seed in 0u64..1000) {
        let model = NetworkModel::<f32>::unet(2, 4, WeightInit::Random { seed, zero_bias: false });
        let x = image(16, 16, seed);
        let target = OutputTarget::cc_positive([(3, 5), (12, 9)]);
        let run = || {
            let out = forward(&model, &x, Mode::Inference).unwrap();
            let heat = explain(&model, &out.trace, &target, None).unwrap().into_tensor();
            (out.y_seg, out.y_cc, heat)
        };
        let (s1, c1, h1) = single_thread(run);
        let (s4, c4, h4) = four_threads(run);
        prop_assert!(s1 == s4 && c1 == c4 && h1 == h4);
    }

    #[test]
    fn convolution_is_linear(
        k in prop::sample::select(vec![1usize, 3]),
        cin in 1usize..4, cout in 1usize..4, h in 1usize..8, w in 1usize..8,
        a in -2.0f32..2.0, b in -2.0f32..2.0, seed in 0u64..1000,
    ) {
        let t = |dims: &[usize], s: u64| Tensor::<f32>::from_fn(dims, |i| {
            (((i as u64 * 7919 + s * 104729) % 2001) as f32 - 1000.0) / 1000.0
        });
        let x = t(&[1, cin, h, w], seed);
        let y = t(&[1, cin, h, w], seed + 1);
        for (geom, wk) in [(LinearGeom::Conv(k), t(&[cout, cin, k, k], seed + 2)), (LinearGeom::Up2, t(&[cout, cin, 2, 2], seed + 3))] {
            let mixed = x.zip_map(&y, |u, v| a * u + b * v);
            let lhs = linear_forward(geom, &mixed, &wk, None);
            let fx = linear_forward(geom, &x, &wk, None);
            let fy = linear_forward(geom, &y, &wk, None);
            let rhs = fx.zip_map(&fy, |u, v| a * u + b * v);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-4, "{geom:?}: {l} vs {r}");
            }
        }
    }
}

// ---- relevance ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn heatmaps_are_non_negative(seed in 0u64..1000, py in 0usize..16, px in 0usize..16) {
        let model = NetworkModel::<f64>::unet(2, 4, WeightInit::Random { seed, zero_bias: false });
        let out = forward(&model, &image(16, 16, seed), Mode::Inference).unwrap();
        for stop in [None, Some("enc1"), Some("bottleneck"), Some("dec2")] {
            let r = explain(&model, &out.trace, &OutputTarget::cc_positive([(py, px)]), stop).unwrap();
            prop_assert!(r.0.data().iter().all(|&v| v >= 0.0), "negative relevance at {stop:?}");
        }
    }

    #[test]
    fn heatmaps_scale_with_the_input(seed in 0u64..1000, s in prop::sample::select(vec![0.25f64, 0.5, 3.0, 10.0])) {
        // without additive terms the network is positively homogeneous; the
        // stabiliser in each denominator is the only thing that does not scale
        let model = NetworkModel::<f64>::unet(2, 4, WeightInit::Random { seed, zero_bias: true });
        let x = image::<f64>(16, 16, seed);
        let target = OutputTarget::cc_positive((4..12).map(|i| (i, 15 - i)));
        let heat = |x: &Tensor<f64>| {
            let out = forward(&model, x, Mode::Inference).unwrap();
            explain(&model, &out.trace, &target, None).unwrap().into_tensor()
        };
        let base = heat(&x);
        let scaled = heat(&x.map(|v| v * s));
        let peak = base.max_abs();
        for (u, v) in base.data().iter().zip(scaled.data()) {
            prop_assert!((u * s - v).abs() <= 1e-6 * peak * s, "{} vs {v}", u * s);
        }
    }

    #[test]
    fn relevance_stays_inside_the_receptive_field(seed in 0u64..1000, py in 36usize..44, px in 36usize..44) {
        // radius bound for two levels: 2 + 4 + 8 + 8 + 4 + 2 + 2 plus pooling alignment < 32
        const RADIUS: usize = 32;
        let model = NetworkModel::<f64>::unet(2, 4, WeightInit::Random { seed, zero_bias: false });
        let x = image::<f64>(80, 80, seed);
        let far = |i: usize| {
            let (y, xx) = ((i / 80) % 80, i % 80);
            y.abs_diff(py) > RADIUS || xx.abs_diff(px) > RADIUS
        };
        let cut = Tensor::from_fn(&[1, 3, 80, 80], |i| if far(i) { 0.0 } else { x.data()[i] });
        prop_assert!(cut != x);
        let target = OutputTarget::cc_positive([(py, px)]);
        let heat = |x: &Tensor<f64>| {
            let out = forward(&model, x, Mode::Inference).unwrap();
            explain(&model, &out.trace, &target, None).unwrap().into_tensor()
        };
        let (a, b) = (heat(&x), heat(&cut));
        for (i, (u, v)) in a.data().iter().zip(b.data()).enumerate() {
            prop_assert!((u - v).abs() < 1e-5, "pixel {i}: {u} vs {v}");
            if far(i) {
                prop_assert_eq!(*u, 0.0);
            }
        }
    }
}

// ---- losses ----

proptest! {
    #[test]
    fn frw_weights_are_bounded_and_ordered(r in prop::collection::vec(-5.0f64..5.0, 1..64), zeros in prop::collection::vec(any::<bool>(), 64)) {
        let r: Vec<f64> = r.iter().zip(&zeros).map(|(&v, &z)| if z { 0.0 } else { v }).collect();
        let rel = Tensor::new(vec![1, 1, 1, r.len()], r.clone()).unwrap();
        let w = frw_weight(&rel);
        for (&rv, &wv) in r.iter().zip(w.data()) {
            prop_assert!((0.0..=2.0).contains(&wv));
            match rv.partial_cmp(&0.0).unwrap() {
                std::cmp::Ordering::Greater => prop_assert!(wv > 1.0),
                std::cmp::Ordering::Less => prop_assert!(wv < 1.0),
                std::cmp::Ordering::Equal => prop_assert_eq!(wv, 1.0),
            }
        }
    }

    #[test]
    fn cross_entropy_ignores_ignored_pixels(
        p in prop::collection::vec(0.0f64..=1.0, 1..64),
        codes in prop::collection::vec(prop::sample::select(vec![0u8, 1, IGNORE]), 64),
    ) {
        let n = p.len();
        let pred = Tensor::new(vec![1, 2, 1, n], p.iter().map(|v| 1.0 - v).chain(p.iter().copied()).collect()).unwrap();
        let all_ignore = LabelMap::filled(1, n, IGNORE);
        prop_assert_eq!(masked_cross_entropy(&pred, &all_ignore).unwrap(), 0.0);
        let label = LabelMap::from_vec(1, n, codes[..n].to_vec()).unwrap();
        let ce = masked_cross_entropy(&pred, &label).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
        // changing the prediction on ignored pixels changes nothing
        let mut poked = pred.clone();
        for i in (0..n).filter(|&i| codes[i] == IGNORE) {
            poked.data_mut()[i] = 0.123;
            poked.data_mut()[n + i] = 0.877;
        }
        prop_assert_eq!(masked_cross_entropy(&poked, &label).unwrap(), ce);
    }
}

// ---- post-processing ----

fn points_in(map: &InstanceMap, raw: &[(usize, usize)]) -> Vec<CcPoint> {
    raw.iter()
        .map(|&(y, x)| (y % map.height(), x % map.width()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|(row, col)| CcPoint { row, col, source_blob_id: 0 })
        .collect()
}

/// Reference labelling by union-find over 8-neighbours.
fn union_find_components(mask: &Mask) -> Grid<usize> {
    let (h, w) = mask.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for (dy, dx) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < h as isize && nx >= 0 && nx < w as isize && mask.get(ny as usize, nx as usize) {
                    let (a, b) = (root(&mut parent, y * w + x), root(&mut parent, ny as usize * w + nx as usize));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    Grid::from_fn(h, w, |y, x| if mask.get(y, x) { root(&mut parent, y * w + x) + 1 } else { 0 })
}

proptest! {
    #[test]
    fn component_labels_match_union_find(m in mask()) {
        let (labels, k) = label_components(&m, Connectivity::Eight);
        let reference = union_find_components(&m);
        // same partition, numbered by first appearance in raster order
        let mut seen = BTreeMap::new();
        for (&l, &r) in labels.data().iter().zip(reference.data()) {
            prop_assert_eq!(l == 0, r == 0);
            if r != 0 {
                let next = seen.len() as u32 + 1;
                let want = *seen.entry(r).or_insert(next);
                prop_assert_eq!(l, want);
            }
        }
        prop_assert_eq!(k as usize, seen.len());
    }

    #[test]
    fn splitting_refines_instances(map in instance_map(), raw in prop::collection::vec((0usize..16, 0usize..16), 0..10)) {
        let points = points_in(&map, &raw);
        let out = split_instances(&map, &points);
        prop_assert!(instance_count(&out) >= instance_count(&map));
        for (y, x) in (0..map.height()).flat_map(|y| (0..map.width()).map(move |x| (y, x))) {
            prop_assert_eq!(out.get(y, x) == 0, map.get(y, x) == 0);
        }
        for pixels in instance_pixels(&out).values() {
            let parents: BTreeSet<u32> = pixels.iter().map(|&(y, x)| map.get(y, x)).collect();
            prop_assert_eq!(parents.len(), 1);
        }
        // instances with fewer than two points survive unchanged
        let before = instance_pixels(&map);
        let after: BTreeSet<_> = instance_pixels(&out).into_values().collect();
        for (id, pixels) in &before {
            if points.iter().filter(|p| map.get(p.row, p.col) == *id).count() < 2 {
                prop_assert!(after.contains(pixels));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn expansion_only_adds_on_background(
        map in instance_map(),
        seed in 0u64..1000,
        cc in prop::collection::vec(0.0f32..1.0, 256),
        threshold in 0.0f64..0.5,
    ) {
        let (h, w) = map.dims();
        let model = NetworkModel::<f32>::unet(2, 4, WeightInit::Random { seed, zero_bias: false });
        let out = forward(&model, &image(16, 16, seed), Mode::Inference).unwrap();
        let cc_prob = Grid::from_fn(h, w, |y, x| cc[y * 16 + x]);
        let cfg = PostprocessConfig { heatmap_threshold: threshold, min_object_size: 1, cc_confidence: 0.6, ..Default::default() };
        let blobs = condense_cc(&cc_prob, &cfg);
        let e = expand_cc(&map, &blobs, &model, &out.trace, &cfg).unwrap();
        let n = instance_count(&map);
        prop_assert!(instance_count(&e.instances) >= n);
        for y in 0..h {
            for x in 0..w {
                let (old, new) = (map.get(y, x), e.instances.get(y, x));
                if old != 0 {
                    prop_assert_eq!(new, old);
                } else {
                    prop_assert!(new == 0 || new > n);
                }
            }
        }
    }
}

// ---- metrics ----

/// True when every best match (by Jaccard for each ground-truth instance, by
/// overlap in both directions) is unique, so the lowest-ID tie rule never fires.
fn no_best_match_ties(gt: &InstanceMap, pred: &InstanceMap) -> bool {
    let (g, p) = (instance_pixels(gt), instance_pixels(pred));
    let inter = |a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>| a.intersection(b).count();
    let unique_max = |scores: Vec<(usize, usize)>| {
        // (numerator, denominator) pairs compared exactly
        let best = scores.iter().copied().max_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)));
        best.is_none_or(|m| m.0 == 0 || scores.iter().filter(|s| s.0 * m.1 == m.0 * s.1).count() == 1)
    };
    g.values().all(|a| {
        unique_max(p.values().map(|b| (inter(a, b), a.len() + b.len() - inter(a, b))).collect())
            && unique_max(p.values().map(|b| (inter(a, b), 1)).collect())
    }) && p.values().all(|b| unique_max(g.values().map(|a| (inter(a, b), 1)).collect()))
}

proptest! {
    #[test]
    fn metrics_ignore_instance_numbering(gt in instance_map(), shift in 0usize..4, perm_seed in any::<u64>()) {
        let (h, w) = gt.dims();
        // a prediction: the ground truth shifted right
        let pred = Grid::from_fn(h, w, |y, x| if x >= shift { gt.get(y, x - shift) } else { 0 });
        let n = instance_count(&pred);
        let mut ids: Vec<u32> = (1..=n).collect();
        let mut s = perm_seed;
        for i in (1..ids.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ids.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assume!(no_best_match_ties(&gt, &pred));
        let permuted = pred.map(|v| if v == 0 { 0 } else { ids[v as usize - 1] + 100 });
        let a = aji(&gt, &pred).unwrap();
        let d = object_dice(&gt, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&d));
        // sums run in ID order, so allow for rounding
        prop_assert!((aji(&gt, &permuted).unwrap() - a).abs() < 1e-12);
        prop_assert!((object_dice(&gt, &permuted).unwrap() - d).abs() < 1e-12);
        prop_assert_eq!(aji(&permuted, &gt).is_ok(), true);
    }

    #[test]
    fn merging_matched_predictions_lowers_aji(gt in instance_map(), pick in any::<(u32, u32)>()) {
        let n = instance_count(&gt);
        prop_assume!(n >= 2);
        let a = pick.0 % n + 1;
        let b = (a + pick.1 % (n - 1)) % n + 1;
        prop_assert_ne!(a, b);
        prop_assert_eq!(aji(&gt, &gt).unwrap(), 1.0);
        let merged = gt.map(|v| if v == b { a } else { v });
        prop_assert!(aji(&gt, &merged).unwrap() < 1.0);
    }
}
