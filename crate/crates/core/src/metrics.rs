//! Pixel accuracy, pixel F1, object-level Dice and the aggregated Jaccard
//! index.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{foreground, InstanceMap};
use crate::raster::Mask;

/// `(accuracy, f1)`; F1 is 1 when both masks are empty.
pub fn pixel_metrics(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::invalid(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut tp, mut fp, mut fnn, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => tn += 1,
        }
    }
    let n = (tp + fp + fnn + tn).max(1) as f64;
    let acc = (tp + tn) as f64 / n;
    let f1 = if tp + fp + fnn == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    };
    Ok((acc, f1))
}

/// Instance sizes and pairwise intersections of two maps.
struct Overlaps {
    gt_size: BTreeMap<u32, u64>,
    pred_size: BTreeMap<u32, u64>,
    /// `(gt id, pred id) -> |G ∩ S|`, non-zero entries only.
    inter: BTreeMap<(u32, u32), u64>,
}

impl Overlaps {
    fn new(gt: &InstanceMap, pred: &InstanceMap) -> Result<Self> {
        if gt.dims() != pred.dims() {
            return Err(Error::invalid(format!(
                "ground truth is {:?}, prediction is {:?}",
                gt.dims(),
                pred.dims()
            )));
        }
        let mut o = Overlaps {
            gt_size: BTreeMap::new(),
            pred_size: BTreeMap::new(),
            inter: BTreeMap::new(),
        };
        for (&g, &s) in gt.data().iter().zip(pred.data()) {
            if g != 0 {
                *o.gt_size.entry(g).or_default() += 1;
            }
            if s != 0 {
                *o.pred_size.entry(s).or_default() += 1;
            }
            if g != 0 && s != 0 {
                *o.inter.entry((g, s)).or_default() += 1;
            }
        }
        Ok(o)
    }

    fn by_gt(&self) -> BTreeMap<u32, Vec<(u32, u64)>> {
        let mut m: BTreeMap<u32, Vec<(u32, u64)>> = BTreeMap::new();
        for (&(g, s), &n) in &self.inter {
            m.entry(g).or_default().push((s, n));
        }
        m
    }

    fn by_pred(&self) -> BTreeMap<u32, Vec<(u32, u64)>> {
        let mut m: BTreeMap<u32, Vec<(u32, u64)>> = BTreeMap::new();
        for (&(g, s), &n) in &self.inter {
            m.entry(s).or_default().push((g, n));
        }
        m
    }
}

/// Partner with the largest overlap, lowest ID on ties. `cands` is ID-sorted.
fn max_overlap(cands: Option<&Vec<(u32, u64)>>) -> Option<(u32, u64)> {
    cands?
        .iter()
        .copied()
        .fold(None, |best: Option<(u32, u64)>, c| match best {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        })
}

fn weighted_dice(
    own: &BTreeMap<u32, u64>,
    other: &BTreeMap<u32, u64>,
    partners: &BTreeMap<u32, Vec<(u32, u64)>>,
) -> f64 {
    let total: u64 = own.values().sum();
    let mut acc = 0.0;
    for (&id, &size) in own {
        if let Some((o, inter)) = max_overlap(partners.get(&id)) {
            let dice = 2.0 * inter as f64 / (size + other[&o]) as f64;
            acc += size as f64 / total as f64 * dice;
        }
    }
    acc
}

/// Size-weighted symmetric object Dice with maximal-overlap matching.
pub fn object_dice(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let o = Overlaps::new(gt, pred)?;
    match (o.gt_size.is_empty(), o.pred_size.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let g = weighted_dice(&o.gt_size, &o.pred_size, &o.by_gt());
    let s = weighted_dice(&o.pred_size, &o.gt_size, &o.by_pred());
    Ok(0.5 * (g + s))
}

/// Aggregated Jaccard index. A prediction may be the best match of several
/// ground-truth instances but is counted as used once.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let o = Overlaps::new(gt, pred)?;
    match (o.gt_size.is_empty(), o.pred_size.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let partners = o.by_gt();
    let mut c = 0u64;
    let mut u = 0u64;
    let mut used = BTreeSet::new();
    for (&g, &gs) in &o.gt_size {
        // best Jaccard by exact cross-multiplication; strict > keeps lowest ID
        let mut best: Option<(u32, u64, u64)> = None;
        for &(s, inter) in partners.get(&g).into_iter().flatten() {
            let union = gs + o.pred_size[&s] - inter;
            let better = match best {
                None => true,
                Some((_, bi, bu)) => inter as u128 * bu as u128 > bi as u128 * union as u128,
            };
            if better {
                best = Some((s, inter, union));
            }
        }
        match best {
            Some((s, inter, union)) => {
                c += inter;
                u += union;
                used.insert(s);
            }
            None => u += gs,
        }
    }
    u += o
        .pred_size
        .iter()
        .filter(|(s, _)| !used.contains(*s))
        .map(|(_, &n)| n)
        .sum::<u64>();
    Ok(c as f64 / u as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub pixel_f1: f64,
    pub dice_obj: f64,
    pub aji: f64,
}

pub fn evaluate(gt: &InstanceMap, pred: &InstanceMap) -> Result<Scores> {
    let (acc, pixel_f1) = pixel_metrics(&foreground(pred), &foreground(gt))?;
    Ok(Scores {
        acc,
        pixel_f1,
        dice_obj: object_dice(gt, pred)?,
        aji: aji(gt, pred)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Per-image scores plus their unweighted means, sorted by image name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub mean: Scores,
    pub images: Vec<ImageScores>,
}

impl MetricsReport {
    pub fn from_images(mut images: Vec<ImageScores>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset("no images to report".into()));
        }
        images.sort_by(|a, b| a.name.cmp(&b.name));
        let n = images.len() as f64;
        let mean = |f: fn(&Scores) -> f64| images.iter().map(|i| f(&i.scores)).sum::<f64>() / n;
        let mean = Scores {
            acc: mean(|s| s.acc),
            pixel_f1: mean(|s| s.pixel_f1),
            dice_obj: mean(|s| s.dice_obj),
            aji: mean(|s| s.aji),
        };
        Ok(Self { mean, images })
    }
}
