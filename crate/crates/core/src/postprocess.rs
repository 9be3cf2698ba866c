//! Probability maps to instances: cleanup, cell-centre condensation,
//! Instance-Splitting and CC-Expansion.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::{explain, OutputTarget};
use crate::nn::{ActivationTrace, NetworkModel};
use crate::raster::{label_components, Connectivity, Grid, Mask};
use crate::tensor::Real;

/// Instance IDs per pixel, 0 = background, otherwise contiguous `1..=K`.
pub type InstanceMap = Grid<u32>;

/// Pixel coordinates `(row, col)`.
pub type PixelSet = BTreeSet<(usize, usize)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub cc_confidence: f64,
    /// Fraction of the heatmap maximum.
    pub heatmap_threshold: f64,
    pub overlap_threshold: f64,
    pub min_object_size: usize,
    pub seg_threshold: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            cc_confidence: 0.1,
            heatmap_threshold: 0.05,
            overlap_threshold: 0.5,
            min_object_size: 5,
            seg_threshold: 0.5,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cc_confidence", self.cc_confidence),
            ("heatmap_threshold", self.heatmap_threshold),
            ("overlap_threshold", self.overlap_threshold),
            ("seg_threshold", self.seg_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.min_object_size == 0 {
            return Err(Error::invalid("min_object_size must be at least 1"));
        }
        Ok(())
    }
}

pub fn instance_count(map: &InstanceMap) -> u32 {
    map.data().iter().copied().max().unwrap_or(0)
}

/// Pixel sets keyed by instance ID.
pub fn instance_pixels(map: &InstanceMap) -> BTreeMap<u32, PixelSet> {
    let mut out: BTreeMap<u32, PixelSet> = BTreeMap::new();
    for y in 0..map.height() {
        for x in 0..map.width() {
            let id = map.get(y, x);
            if id != 0 {
                out.entry(id).or_default().insert((y, x));
            }
        }
    }
    out
}

pub fn foreground(map: &InstanceMap) -> Mask {
    map.map(|v| v != 0)
}

/// Renumbers IDs to `1..=K` in raster order of each instance's first pixel.
pub fn renumber(map: &InstanceMap) -> InstanceMap {
    let mut remap = BTreeMap::new();
    map.map(|v| {
        if v == 0 {
            0
        } else {
            let next = remap.len() as u32 + 1;
            *remap.entry(v).or_insert(next)
        }
    })
}

/// Foreground where the cell probability exceeds `threshold`; a 0.5 tie goes
/// to background.
pub fn binarize(prob: &Grid<f32>, threshold: f64) -> Mask {
    prob.map(|p| p as f64 > threshold)
}

/// Background components not 4-connected to the border become foreground.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let mut outside = Grid::filled(h, w, false);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if border && !mask.get(y, x) {
                outside.set(y, x, true);
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for (ny, nx) in mask.neighbors(y, x, Connectivity::Four) {
            if !mask.get(ny, nx) && !outside.get(ny, nx) {
                outside.set(ny, nx, true);
                queue.push_back((ny, nx));
            }
        }
    }
    outside.map(|o| !o)
}

/// Fill holes, label 8-connected components, drop those below
/// `min_object_size`, renumber in raster order.
pub fn morph_cleanup(mask: &Mask, min_object_size: usize) -> InstanceMap {
    let filled = fill_holes(mask);
    let (labels, k) = label_components(&filled, Connectivity::Eight);
    let mut sizes = vec![0usize; k as usize + 1];
    for &v in labels.data() {
        sizes[v as usize] += 1;
    }
    renumber(&labels.map(|v| if v != 0 && sizes[v as usize] >= min_object_size { v } else { 0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcPoint {
    pub row: usize,
    pub col: usize,
    /// ID of the blob in [`CcBlobs::map`] this point condenses.
    pub source_blob_id: u32,
}

/// Cleaned cell-centre blobs together with one point per blob.
#[derive(Debug, Clone, PartialEq)]
pub struct CcBlobs {
    pub map: InstanceMap,
    pub points: Vec<CcPoint>,
}

impl CcBlobs {
    pub fn blob_pixels(&self, id: u32) -> PixelSet {
        let mut out = PixelSet::new();
        for y in 0..self.map.height() {
            for x in 0..self.map.width() {
                if self.map.get(y, x) == id {
                    out.insert((y, x));
                }
            }
        }
        out
    }
}

/// Thresholds the CC probability (`p ≥ cc_confidence`), cleans it up and
/// places one point per blob at the rounded centroid, snapped onto the blob
/// (nearest pixel by L1, raster-first on ties) when the centroid falls off it.
pub fn condense_cc(cc_prob: &Grid<f32>, cfg: &PostprocessConfig) -> CcBlobs {
    let mask = cc_prob.map(|p| p as f64 >= cfg.cc_confidence);
    let map = morph_cleanup(&mask, cfg.min_object_size);
    let blobs = instance_pixels(&map);
    let points = blobs
        .iter()
        .map(|(&id, px)| {
            let n = px.len() as f64;
            let cy = (px.iter().map(|p| p.0 as f64).sum::<f64>() / n).round() as usize;
            let cx = (px.iter().map(|p| p.1 as f64).sum::<f64>() / n).round() as usize;
            let (row, col) = if px.contains(&(cy, cx)) {
                (cy, cx)
            } else {
                // BTreeSet iterates in raster order, min_by_key keeps the first
                *px.iter()
                    .min_by_key(|p| p.0.abs_diff(cy) + p.1.abs_diff(cx))
                    .unwrap()
            };
            CcPoint {
                row,
                col,
                source_blob_id: id,
            }
        })
        .collect();
    CcBlobs { map, points }
}

fn raster_sorted(points: &[CcPoint]) -> Vec<CcPoint> {
    let mut p = points.to_vec();
    p.sort_by_key(|p| (p.row, p.col));
    p
}

/// Instances holding two or more points are partitioned among them by L1
/// distance; ties go to the raster-earliest point.
pub fn split_instances(instances: &InstanceMap, cc_points: &[CcPoint]) -> InstanceMap {
    let points = raster_sorted(cc_points);
    let mut inside: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for p in &points {
        let id = instances.get(p.row, p.col);
        if id != 0 {
            inside.entry(id).or_default().push((p.row, p.col));
        }
    }
    // fresh IDs above the current maximum; renumbered at the end
    let mut next = instance_count(instances) + 1;
    let mut sub_ids: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&id, pts) in &inside {
        if pts.len() >= 2 {
            sub_ids.insert(id, (0..pts.len() as u32).map(|k| next + k).collect());
            next += pts.len() as u32;
        }
    }
    let mut out = instances.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let id = out.get(y, x);
            if let Some(ids) = sub_ids.get(&id) {
                let pts = &inside[&id];
                let best = (0..pts.len())
                    .min_by_key(|&k| pts[k].0.abs_diff(y) + pts[k].1.abs_diff(x))
                    .unwrap();
                out.set(y, x, ids[best]);
            }
        }
    }
    renumber(&out)
}

/// `|a ∩ b| / min(|a|, |b|)`.
pub fn overlap_ratio(a: &PixelSet, b: &PixelSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("overlap ratio of an empty pixel set"));
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|p| large.contains(p)).count();
    Ok(inter as f64 / small.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CandidateOutcome {
    Added { id: u32, pixels: usize },
    /// Heatmap below threshold at the point or entirely non-positive.
    Empty,
    TooSmall { pixels: usize },
    Overlap { instance: u32, ratio: f64 },
}

#[derive(Debug, Clone)]
pub struct ExpansionRecord {
    pub point: CcPoint,
    pub outcome: CandidateOutcome,
    /// Max-normalised input heatmap cropped to the instance map.
    pub heatmap: Grid<f32>,
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub instances: InstanceMap,
    pub records: Vec<ExpansionRecord>,
}

/// 8-connected component of `mask` containing `seed`, empty if `seed` is off.
fn component_at(mask: &Mask, seed: (usize, usize)) -> PixelSet {
    let mut out = PixelSet::new();
    if !mask.get(seed.0, seed.1) {
        return out;
    }
    let mut queue = VecDeque::from([seed]);
    out.insert(seed);
    while let Some((y, x)) = queue.pop_front() {
        for n in mask.neighbors(y, x, Connectivity::Eight) {
            if mask.get(n.0, n.1) && out.insert(n) {
                queue.push_back(n);
            }
        }
    }
    out
}

/// Input heatmap of one CC blob, max-normalised and cropped to `h×w`. All
/// zero when no relevance reaches the input.
pub fn blob_heatmap<T: Real>(
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    blob: &PixelSet,
    h: usize,
    w: usize,
) -> Result<Grid<f32>> {
    let target = OutputTarget::cc_positive(blob.iter().copied());
    let heat = explain(model, trace, &target, None)?.into_tensor();
    let tw = heat.dims()[1];
    let raw = Grid::from_fn(h, w, |y, x| heat.data()[y * tw + x].to_f64().unwrap_or(0.0));
    let max = raw.data().iter().cloned().fold(0.0f64, f64::max);
    Ok(raw.map(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 }))
}

/// Grows every CC point lying on background into a new instance taken from
/// its blob's thresholded input heatmap. Existing instances are never
/// modified; candidates are added in raster order of their points.
pub fn expand_cc<T: Real>(
    instances: &InstanceMap,
    blobs: &CcBlobs,
    model: &NetworkModel<T>,
    trace: &ActivationTrace<T>,
    cfg: &PostprocessConfig,
) -> Result<Expansion> {
    let (h, w) = instances.dims();
    if blobs.map.dims() != (h, w) {
        return Err(Error::invalid(format!(
            "CC blob map is {:?}, instance map is {h}x{w}",
            blobs.map.dims()
        )));
    }
    let orphans: Vec<CcPoint> = raster_sorted(&blobs.points)
        .into_iter()
        .filter(|p| instances.get(p.row, p.col) == 0)
        .collect();
    let heatmaps = orphans
        .par_iter()
        .map(|p| blob_heatmap(model, trace, &blobs.blob_pixels(p.source_blob_id), h, w))
        .collect::<Result<Vec<_>>>()?;

    let mut out = instances.clone();
    let mut next = instance_count(instances) + 1;
    let mut records = Vec::with_capacity(orphans.len());
    for (point, heatmap) in orphans.into_iter().zip(heatmaps) {
        let mask = heatmap.map(|v| v as f64 >= cfg.heatmap_threshold && v > 0.0);
        let raw = component_at(&mask, (point.row, point.col));
        let outcome = evaluate_candidate(&out, &raw, cfg)?;
        let outcome = match outcome {
            None => {
                let mut n = 0;
                for &(y, x) in &raw {
                    if out.get(y, x) == 0 {
                        out.set(y, x, next);
                        n += 1;
                    }
                }
                next += 1;
                CandidateOutcome::Added { id: next - 1, pixels: n }
            }
            Some(reject) => reject,
        };
        records.push(ExpansionRecord { point, outcome, heatmap });
    }
    Ok(Expansion { instances: out, records })
}

fn evaluate_candidate(
    current: &InstanceMap,
    raw: &PixelSet,
    cfg: &PostprocessConfig,
) -> Result<Option<CandidateOutcome>> {
    if raw.is_empty() {
        return Ok(Some(CandidateOutcome::Empty));
    }
    let mut touched = BTreeSet::new();
    let mut free = 0usize;
    for &(y, x) in raw {
        match current.get(y, x) {
            0 => free += 1,
            id => {
                touched.insert(id);
            }
        }
    }
    if free == 0 {
        return Ok(Some(CandidateOutcome::Empty));
    }
    if free < cfg.min_object_size {
        return Ok(Some(CandidateOutcome::TooSmall { pixels: free }));
    }
    if !touched.is_empty() {
        let pixels = instance_pixels(current);
        for id in touched {
            let ratio = overlap_ratio(raw, &pixels[&id])?;
            if ratio > cfg.overlap_threshold {
                return Ok(Some(CandidateOutcome::Overlap { instance: id, ratio }));
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn ring_hole_is_filled() {
        let m = morph_cleanup(&mask(&["###", "#.#", "###"]), 1);
        assert!(m.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn small_objects_are_dropped() {
        let m = morph_cleanup(&mask(&["#...", "...#"]), 5);
        assert_eq!(instance_count(&m), 0);
    }

    #[test]
    fn diagonal_chain_is_one_instance() {
        let m = morph_cleanup(&mask(&["#....", ".#...", "..#..", "...#.", "....#"]), 5);
        assert_eq!(instance_count(&m), 1);
        assert_eq!(m.data().iter().filter(|&&v| v == 1).count(), 5);
    }

    #[test]
    fn border_touching_gap_is_not_a_hole() {
        let m = morph_cleanup(&mask(&["#.#", "#.#", "###"]), 1);
        assert_eq!(m.get(0, 1), 0);
        assert_eq!(m.get(1, 1), 0);
    }

    #[test]
    fn square_blob_condenses_to_its_centre() {
        let p = Grid::from_fn(11, 11, |y, x| if (4..=6).contains(&y) && (4..=6).contains(&x) { 0.9 } else { 0.0 });
        let b = condense_cc(&p, &PostprocessConfig::default());
        assert_eq!(b.points, vec![CcPoint { row: 5, col: 5, source_blob_id: 1 }]);
        let low = Grid::filled(11, 11, 0.09f32);
        assert!(condense_cc(&low, &PostprocessConfig::default()).points.is_empty());
    }

    #[test]
    fn off_blob_centroid_snaps_to_nearest_pixel() {
        // L-shape: column 0 rows 0..=4 and row 4 cols 0..=4; centroid (2.89,1.11)
        // rounds to (3,1), which is off the shape. L1 candidates at distance 1:
        // (3,0) and (4,1); (3,0) comes first in raster order.
        let m = mask(&["#....", "#....", "#....", "#....", "#####"]);
        let p = m.map(|b| if b { 0.9f32 } else { 0.0 });
        let b = condense_cc(&p, &PostprocessConfig::default());
        assert_eq!((b.points[0].row, b.points[0].col), (3, 0));
    }

    #[test]
    fn bar_splits_at_the_midpoint() {
        let inst = InstanceMap::filled(1, 6, 1);
        let pts = [
            CcPoint { row: 0, col: 4, source_blob_id: 2 },
            CcPoint { row: 0, col: 1, source_blob_id: 1 },
        ];
        let s = split_instances(&inst, &pts);
        assert_eq!(s.data(), &[1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn split_tie_goes_to_raster_earlier_point() {
        let inst = InstanceMap::filled(1, 5, 1);
        let pts = [
            CcPoint { row: 0, col: 4, source_blob_id: 1 },
            CcPoint { row: 0, col: 0, source_blob_id: 2 },
        ];
        let s = split_instances(&inst, &pts);
        assert_eq!(s.get(0, 2), s.get(0, 0));
    }

    #[test]
    fn single_point_instance_is_unchanged() {
        let inst = InstanceMap::from_vec(1, 4, vec![1, 1, 0, 2]).unwrap();
        let pts = [CcPoint { row: 0, col: 0, source_blob_id: 1 }];
        assert_eq!(split_instances(&inst, &pts), inst);
    }

    #[test]
    fn overlap_ratio_cases() {
        let set = |v: &[usize]| v.iter().map(|&i| (0, i)).collect::<PixelSet>();
        assert_eq!(overlap_ratio(&set(&[0, 1, 2]), &set(&[1])).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&set(&[0]), &set(&[1])).unwrap(), 0.0);
        assert_eq!(overlap_ratio(&set(&[0, 1, 2, 3]), &set(&[2, 3, 4, 5, 6, 7])).unwrap(), 0.5);
        assert!(overlap_ratio(&set(&[]), &set(&[1])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PostprocessConfig::default().validate().is_ok());
        let bad = PostprocessConfig { min_object_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PostprocessConfig { cc_confidence: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
