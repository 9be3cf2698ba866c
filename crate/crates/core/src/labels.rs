//! Coarse training labels from dot annotations: cluster, Voronoi and enlarged
//! point maps.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Connectivity, Grid, RgbImage};

pub const BACKGROUND: u8 = 0;
pub const CELL: u8 = 1;
pub const IGNORE: u8 = 255;

/// Zero-indexed `(row, col)` dot annotations, validated against image bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointAnnotation {
    points: Vec<(usize, usize)>,
    height: usize,
    width: usize,
}

impl PointAnnotation {
    pub fn new(points: Vec<(usize, usize)>, height: usize, width: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for &(r, c) in &points {
            if r >= height || c >= width {
                return Err(Error::invalid(format!(
                    "point ({r}, {c}) outside {height}x{width} image"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::invalid(format!("duplicate point ({r}, {c})")));
            }
        }
        Ok(Self { points, height, width })
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses `row,col` CSV with a header line.
    pub fn parse_csv(text: &str, height: usize, width: usize) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(|h| h.trim().replace(' ', "")) {
            Some(h) if h == "row,col" => {}
            other => {
                return Err(Error::invalid(format!(
                    "points CSV must start with header `row,col`, found {other:?}"
                )))
            }
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::invalid(format!("points CSV line {}: `{line}`", i + 2));
            let (r, c) = line.split_once(',').ok_or_else(bad)?;
            let r = r.trim().parse::<usize>().map_err(|_| bad())?;
            let c = c.trim().parse::<usize>().map_err(|_| bad())?;
            points.push((r, c));
        }
        Self::new(points, height, width)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col\n");
        for (r, c) in &self.points {
            s += &format!("{r},{c}\n");
        }
        s
    }

    pub fn read_csv(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_csv(&fs::read_to_string(path)?, height, width).map_err(|e| match e {
            Error::InvalidArgument(detail) => Error::Format {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-pixel class codes `{BACKGROUND, CELL, IGNORE}`.
pub type LabelMap = Grid<u8>;

pub fn validate_label_map(map: &LabelMap) -> Result<()> {
    match map.data().iter().find(|&&v| v != BACKGROUND && v != CELL && v != IGNORE) {
        Some(v) => Err(Error::invalid(format!("label map contains code {v}"))),
        None => Ok(()),
    }
}

fn paint_squares(map: &mut LabelMap, points: &[(usize, usize)], mut allow: impl FnMut(usize, usize, usize) -> bool) {
    let (h, w) = map.dims();
    for (k, &(r, c)) in points.iter().enumerate() {
        for y in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for x in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                if allow(k, y, x) {
                    map.set(y, x, CELL);
                }
            }
        }
    }
}

/// 3×3 cell squares around every point, background elsewhere.
pub fn enlarged_point_labels(points: &PointAnnotation) -> LabelMap {
    let (h, w) = points.dims();
    let mut map = LabelMap::filled(h, w, BACKGROUND);
    paint_squares(&mut map, points.points(), |_, _, _| true);
    map
}

const TIE: u32 = u32::MAX;

/// Nearest-point index per pixel; pixels equidistant to several points get
/// `TIE` so the ridge stays symmetric.
fn nearest_point_regions(points: &[(usize, usize)], h: usize, w: usize) -> Grid<u32> {
    Grid::from_fn(h, w, |y, x| {
        let mut best = u64::MAX;
        let mut who = TIE;
        for (k, &(r, c)) in points.iter().enumerate() {
            let dy = y.abs_diff(r) as u64;
            let dx = x.abs_diff(c) as u64;
            let d = dy * dy + dx * dx;
            if d < best {
                best = d;
                who = k as u32;
            } else if d == best {
                who = TIE;
            }
        }
        who
    })
}

/// Voronoi labels: ridge pixels background, point squares cell, rest ignore.
///
/// A pixel is on the ridge when it is equidistant to two points or has an
/// 8-neighbour in another region. Square pixels are only painted inside the
/// point's own region and off the ridge, except the point pixel itself.
pub fn voronoi_labels(points: &PointAnnotation) -> LabelMap {
    let (h, w) = points.dims();
    let mut map = LabelMap::filled(h, w, IGNORE);
    if points.is_empty() {
        return map;
    }
    let region = nearest_point_regions(points.points(), h, w);
    let mut ridge = Grid::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let me = region.get(y, x);
            let on = me == TIE
                || region
                    .neighbors(y, x, Connectivity::Eight)
                    .any(|(ny, nx)| region.get(ny, nx) != me);
            if on {
                ridge.set(y, x, true);
                map.set(y, x, BACKGROUND);
            }
        }
    }
    let pts = points.points();
    paint_squares(&mut map, pts, |k, y, x| {
        (y, x) == pts[k] || (region.get(y, x) == k as u32 && !ridge.get(y, x))
    });
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub seed: u64,
    /// Weight of the normalised distance feature relative to colour.
    pub distance_weight: f64,
    pub max_iter: usize,
    pub max_reseeds: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 3,
            seed: 0,
            distance_weight: 0.5,
            max_iter: 100,
            max_reseeds: 5,
        }
    }
}

/// Exact Euclidean distance from every pixel to the nearest site.
pub fn distance_to_points(points: &[(usize, usize)], h: usize, w: usize) -> Grid<f64> {
    const INF: f64 = 1e20;
    let mut f = vec![INF; h * w];
    for &(r, c) in points {
        f[r * w + c] = 0.0;
    }
    // separable squared EDT, columns then rows
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| f[y * w + x]).collect();
        edt_1d(&col, &mut buf[..h]);
        for y in 0..h {
            f[y * w + x] = buf[y];
        }
    }
    for y in 0..h {
        let row = f[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut buf[..w]);
        f[y * w..(y + 1) * w].copy_from_slice(&buf[..w]);
    }
    Grid::from_vec(h, w, f.into_iter().map(f64::sqrt).collect()).unwrap()
}

/// Lower envelope of parabolas rooted at `(q, f[q])`.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
            // z[0] is -inf, so this stops at k = 0
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

struct Partition {
    assign: Vec<usize>,
    centers: Vec<[f64; 4]>,
}

fn sq_dist(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans(features: &[[f64; 4]], k: usize, rng: &mut ChaCha8Rng, max_iter: usize) -> Partition {
    let n = features.len();
    // k-means++ seeding
    let mut centers = vec![features[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(features[next]);
        let c = *centers.last().unwrap();
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(f, &c));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (a, f) in assign.iter_mut().zip(features) {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(f, c);
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 4]; k];
        let mut counts = vec![0usize; k];
        for (&a, f) in assign.iter().zip(features) {
            counts[a] += 1;
            for d in 0..4 {
                sums[a][d] += f[d];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..4 {
                    centers[j][d] = sums[j][d] / counts[j] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Partition { assign, centers }
}

/// Empty clusters, or clusters that only differ in the distance feature,
/// cannot be told apart by appearance.
fn degenerate(p: &Partition, k: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &a in &p.assign {
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return true;
    }
    for i in 0..k {
        for j in i + 1..k {
            let dc: f64 = (0..3)
                .map(|d| (p.centers[i][d] - p.centers[j][d]).powi(2))
                .sum();
            if dc < 1e-12 {
                return true;
            }
        }
    }
    false
}

/// K-Means (k = 3) over `(R, G, B, λ·d)`; the cluster holding the largest
/// share of annotation pixels becomes cell, the remaining cluster with larger
/// mean `d` becomes background, the last one ignore.
pub fn cluster_labels(image: &RgbImage, points: &PointAnnotation, cfg: &ClusterConfig) -> Result<LabelMap> {
    if cfg.k != 3 {
        return Err(Error::invalid(format!("cluster labels need k = 3, got {}", cfg.k)));
    }
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty image"));
    }
    if points.is_empty() {
        return Err(Error::invalid("cluster labels need at least one point"));
    }
    if points.dims() != (h, w) {
        return Err(Error::invalid(format!(
            "points are for {:?}, image is {h}x{w}",
            points.dims()
        )));
    }
    let dist = distance_to_points(points.points(), h, w);
    let dmax = dist.data().iter().cloned().fold(0.0, f64::max);
    let dnorm: Vec<f64> = dist
        .data()
        .iter()
        .map(|&d| if dmax > 0.0 { d / dmax } else { 0.0 })
        .collect();
    let features: Vec<[f64; 4]> = (0..h * w)
        .map(|i| {
            let p = image.pixel(i / w, i % w);
            [p[0] as f64, p[1] as f64, p[2] as f64, cfg.distance_weight * dnorm[i]]
        })
        .collect();

    let mut partition = None;
    for attempt in 0..=cfg.max_reseeds {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(attempt as u64));
        let p = kmeans(&features, cfg.k, &mut rng, cfg.max_iter);
        if !degenerate(&p, cfg.k) {
            partition = Some(p);
            break;
        }
    }
    let p = partition.ok_or_else(|| {
        Error::Clustering(format!(
            "K-Means produced degenerate clusters after {} re-seeds",
            cfg.max_reseeds
        ))
    })?;

    // cluster statistics; ties are broken by each cluster's first raster pixel
    // so the labelling depends only on the partition
    let k = cfg.k;
    let mut first = vec![usize::MAX; k];
    let mut count = vec![0usize; k];
    let mut dsum = vec![0.0f64; k];
    for (i, &a) in p.assign.iter().enumerate() {
        first[a] = first[a].min(i);
        count[a] += 1;
        dsum[a] += dnorm[i];
    }
    let mut hits = vec![0usize; k];
    for &(r, c) in points.points() {
        hits[p.assign[r * w + c]] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&j| first[j]);
    let cell = *order
        .iter()
        .max_by(|&&a, &&b| hits[a].cmp(&hits[b]).then(first[b].cmp(&first[a])))
        .unwrap();
    let rest: Vec<usize> = order.into_iter().filter(|&j| j != cell).collect();
    let mean_d = |j: usize| dsum[j] / count[j] as f64;
    let (bg, ign) = if mean_d(rest[1]) > mean_d(rest[0]) {
        (rest[1], rest[0])
    } else {
        (rest[0], rest[1])
    };
    let code = |j: usize| {
        if j == cell {
            CELL
        } else if j == bg {
            BACKGROUND
        } else {
            debug_assert_eq!(j, ign);
            IGNORE
        }
    };
    Grid::from_vec(h, w, p.assign.iter().map(|&a| code(a)).collect())
}
