//! Synthetic H&E-like images with exact instance ground truth.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::PointAnnotation;
use crate::postprocess::InstanceMap;
use crate::raster::{Connectivity, Grid, RgbImage};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of cells per image.
    pub cells: (usize, usize),
    /// Inclusive range of the major semi-axis, in pixels.
    pub radius: (f64, f64),
    /// Fraction of cells placed touching a partner.
    pub clump_fraction: f64,
    /// Fraction of cells drawn from `small_radius` instead of `radius`.
    pub small_fraction: f64,
    pub small_radius: (f64, f64),
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_count: 10,
            height: 64,
            width: 64,
            cells: (5, 10),
            radius: (4.0, 7.0),
            clump_fraction: 0.0,
            small_fraction: 0.0,
            small_radius: (2.0, 3.0),
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        frac("clump_fraction", self.clump_fraction)?;
        frac("small_fraction", self.small_fraction)?;
        if self.cells.0 > self.cells.1 {
            return Err(Error::invalid("cells range is empty"));
        }
        for (name, (lo, hi)) in [("radius", self.radius), ("small_radius", self.small_radius)] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::invalid(format!("{name} range ({lo}, {hi}) is empty or non-positive")));
            }
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if self.noise < 0.0 {
            return Err(Error::invalid("noise must be non-negative"));
        }
        Ok(())
    }
}

/// One generated image. Instance `i + 1` owns `points[i]`, `clumped[i]` and
/// `small[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub name: String,
    pub image: RgbImage,
    pub instances: InstanceMap,
    pub points: PointAnnotation,
    pub clumped: Vec<bool>,
    pub small: Vec<bool>,
}

pub const BACKGROUND_RGB: [f32; 3] = [0.90, 0.75, 0.85];
pub const NUCLEUS_RGB: [f32; 3] = [0.35, 0.25, 0.60];

struct Shape {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Shape {
    fn pixels(&self, h: usize, w: usize) -> Option<Vec<(usize, usize)>> {
        let r = self.a.ceil() as isize + 1;
        let (s, c) = self.theta.sin_cos();
        let mut out = Vec::new();
        for y in (self.cy.round() as isize - r)..=(self.cy.round() as isize + r) {
            for x in (self.cx.round() as isize - r)..=(self.cx.round() as isize + r) {
                let dy = y as f64 - self.cy;
                let dx = x as f64 - self.cx;
                let u = (dx * c + dy * s) / self.a;
                let v = (-dx * s + dy * c) / self.b;
                if u * u + v * v <= 1.0 {
                    // keep a one-pixel margin so instances never touch the border
                    if y < 1 || x < 1 || y as usize + 1 >= h || x as usize + 1 >= w {
                        return None;
                    }
                    out.push((y as usize, x as usize));
                }
            }
        }
        (!out.is_empty()).then_some(out)
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, radius: (f64, f64), cy: f64, cx: f64) -> Shape {
    let a = rng.random_range(radius.0..=radius.1);
    let b = a * rng.random_range(0.7..=1.0);
    Shape {
        cy,
        cx,
        a,
        b,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    }
}

/// IDs of instances that overlap or 8-touch `px`; `None` on overlap.
fn touching(occupied: &Grid<u32>, px: &[(usize, usize)]) -> Option<BTreeSet<u32>> {
    let mut ids = BTreeSet::new();
    for &(y, x) in px {
        if occupied.get(y, x) != 0 {
            return None;
        }
        for (ny, nx) in occupied.neighbors(y, x, Connectivity::Eight) {
            let id = occupied.get(ny, nx);
            if id != 0 {
                ids.insert(id);
            }
        }
    }
    Some(ids)
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<SyntheticImage> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let n = rng.random_range(spec.cells.0..=spec.cells.1);
    let n_clumped = ((n as f64 * spec.clump_fraction / 2.0).round() as usize * 2).min(n - n % 2);
    let mut occupied = Grid::filled(h, w, 0u32);
    let mut cells: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n);
    let mut clumped = Vec::with_capacity(n);
    let mut small = Vec::with_capacity(n);

    for i in 0..n {
        let is_small = rng.random::<f64>() < spec.small_fraction;
        let radius = if is_small { spec.small_radius } else { spec.radius };
        // odd members of the clumped prefix attach to the cell placed just before
        let partner = (i < n_clumped && i % 2 == 1).then_some(i as u32);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let px = match partner {
                None => {
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let shape = sample_shape(&mut rng, radius, cy, cx);
                    match shape.pixels(h, w) {
                        Some(px) => px,
                        None => continue,
                    }
                }
                Some(pid) => match place_touching(&mut rng, radius, &cells[pid as usize - 1], &occupied, pid, h, w) {
                    Some(px) => px,
                    None => continue,
                },
            };
            let ok = match touching(&occupied, &px) {
                None => false,
                Some(ids) => match partner {
                    None => ids.is_empty(),
                    Some(pid) => ids.len() == 1 && ids.contains(&pid),
                },
            };
            if ok {
                placed = Some(px);
                break;
            }
        }
        let px = placed.ok_or_else(|| {
            Error::Placement(format!(
                "image {index}: could not place cell {} of {n} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                i + 1
            ))
        })?;
        for &(y, x) in &px {
            occupied.set(y, x, i as u32 + 1);
        }
        cells.push(px);
        clumped.push(i < n_clumped);
        small.push(is_small);
    }

    let points = cells
        .iter()
        .map(|px| {
            let m = px.len() as f64;
            let cy = (px.iter().map(|p| p.0 as f64).sum::<f64>() / m).round() as usize;
            let cx = (px.iter().map(|p| p.1 as f64).sum::<f64>() / m).round() as usize;
            if px.contains(&(cy, cx)) {
                (cy, cx)
            } else {
                *px.iter().min_by_key(|p| p.0.abs_diff(cy) + p.1.abs_diff(cx)).unwrap()
            }
        })
        .collect();
    let points = PointAnnotation::new(points, h, w)?;

    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let tints: Vec<f32> = (0..n).map(|_| rng.random_range(-0.05..=0.05)).collect();
    let mut image = RgbImage::filled(h, w, BACKGROUND_RGB);
    for y in 0..h {
        for x in 0..w {
            let id = occupied.get(y, x);
            let base = if id == 0 {
                BACKGROUND_RGB
            } else {
                NUCLEUS_RGB.map(|v| v + tints[id as usize - 1])
            };
            let px = base.map(|v| (v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0));
            image.set_pixel(y, x, px);
        }
    }
    Ok(SyntheticImage {
        name: format!("synth_{index:04}"),
        image,
        instances: occupied,
        points,
        clumped,
        small,
    })
}

/// Walks outward from the partner's centre along a random direction until the
/// new ellipse no longer overlaps anything.
fn place_touching(
    rng: &mut ChaCha8Rng,
    radius: (f64, f64),
    partner_px: &[(usize, usize)],
    occupied: &Grid<u32>,
    partner: u32,
    h: usize,
    w: usize,
) -> Option<Vec<(usize, usize)>> {
    let m = partner_px.len() as f64;
    let py = partner_px.iter().map(|p| p.0 as f64).sum::<f64>() / m;
    let px = partner_px.iter().map(|p| p.1 as f64).sum::<f64>() / m;
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let mut shape = sample_shape(rng, radius, py, px);
    let mut d = 0.5;
    while d < 4.0 * (radius.1 + 8.0) {
        shape.cy = py + d * phi.sin();
        shape.cx = px + d * phi.cos();
        d += 0.5;
        // near the border the walk may start outside the margin
        let Some(cand) = shape.pixels(h, w) else {
            continue;
        };
        if let Some(ids) = touching(occupied, &cand) {
            return (ids.len() == 1 && ids.contains(&partner)).then_some(cand);
        }
    }
    None
}

/// Deterministic per seed and independent of the thread count.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticImage>> {
    spec.validate()?;
    (0..spec.image_count)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}
