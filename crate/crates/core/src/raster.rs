//! Row-major 2-D grids, the image type and connected-component labelling.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "grid data has {} elements, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pads on the bottom and right with `fill`.
    pub fn pad_to(&self, height: usize, width: usize, fill: T) -> Self {
        Grid::from_fn(height, width, |y, x| {
            if y < self.height && x < self.width {
                self.get(y, x)
            } else {
                fill
            }
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Self {
        Grid::from_fn(height, width, |y, x| self.get(y0 + y, x0 + x))
    }

    pub fn flip_horizontal(&self) -> Self {
        Grid::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Grid::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    /// Rotates by 90° counter-clockwise.
    pub fn rot90(&self) -> Self {
        Grid::from_fn(self.width, self.height, |y, x| self.get(x, self.width - 1 - y))
    }

    /// In-bounds neighbours of `(y, x)` under the given connectivity.
    pub fn neighbors(
        &self,
        y: usize,
        x: usize,
        conn: Connectivity,
    ) -> impl Iterator<Item = (usize, usize)> + '_ {
        conn.offsets().iter().filter_map(move |&(dy, dx)| {
            let ny = y as isize + dy;
            let nx = x as isize + dx;
            (ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width)
                .then_some((ny as usize, nx as usize))
        })
    }
}

pub type Mask = Grid<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Labels the `true` pixels of `mask` into components numbered 1..=K in raster
/// order of each component's first pixel. Returns the label grid and K.
pub fn label_components(mask: &Mask, conn: Connectivity) -> (Grid<u32>, u32) {
    let (h, w) = mask.dims();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) || labels.get(y, x) != 0 {
                continue;
            }
            next += 1;
            labels.set(y, x, next);
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for (ny, nx) in mask.neighbors(cy, cx, conn) {
                    if mask.get(ny, nx) && labels.get(ny, nx) == 0 {
                        labels.set(ny, nx, next);
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (labels, next)
}

/// RGB image with channel values in [0, 1], stored HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "RGB data has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_grid(&self) -> Grid<[f32; 3]> {
        Grid::from_fn(self.height, self.width, |y, x| self.pixel(y, x))
    }

    pub fn from_grid(g: &Grid<[f32; 3]>) -> Self {
        Self {
            height: g.height(),
            width: g.width(),
            data: g.data().iter().flatten().copied().collect(),
        }
    }

    /// `1×3×H×W` network input.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            T::from_f64_lossy(self.data[p * 3 + c] as f64)
        })
    }

    /// Reflect-pads on the bottom and right so that both sides become
    /// multiples of `m`.
    pub fn pad_reflect_to_multiple(&self, m: usize) -> RgbImage {
        let ph = self.height.div_ceil(m) * m;
        let pw = self.width.div_ceil(m) * m;
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        let mut out = RgbImage::filled(ph, pw, [0.0; 3]);
        for y in 0..ph {
            for x in 0..pw {
                out.set_pixel(y, x, self.pixel(reflect(y, self.height), reflect(x, self.width)));
            }
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> RgbImage {
        let mut out = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(y, x, self.pixel(y0 + y, x0 + x));
            }
        }
        out
    }
}

/// Crops the spatial extent of an NCHW tensor to its top-left `h×w`.
pub fn crop_tensor<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, th, tw) = t.nchw().expect("4-D tensor");
    if th == h && tw == w {
        return t.clone();
    }
    Tensor::from_fn(&[n, c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let plane = i / (h * w);
        t.data()[plane * th * tw + y * tw + x]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_chain_is_one_component_under_eight() {
        let mask = Mask::from_fn(5, 5, |y, x| y == x);
        assert_eq!(label_components(&mask, Connectivity::Eight).1, 1);
        assert_eq!(label_components(&mask, Connectivity::Four).1, 5);
    }

    #[test]
    fn labels_follow_raster_order() {
        let mask = Mask::from_vec(2, 4, vec![false, false, false, true, true, false, false, false]).unwrap();
        let (l, k) = label_components(&mask, Connectivity::Four);
        assert_eq!(k, 2);
        assert_eq!(l.get(0, 3), 1);
        assert_eq!(l.get(1, 0), 2);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let g = Grid::from_fn(2, 3, |y, x| y * 3 + x);
        let r = g.rot90();
        assert_eq!(r.dims(), (3, 2));
        assert_eq!(r.get(0, 0), g.get(0, 2));
        assert_eq!(r.rot90().rot90().rot90(), g);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let img = RgbImage::new(1, 3, vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0]).unwrap();
        let p = img.pad_reflect_to_multiple(4);
        assert_eq!((p.height(), p.width()), (4, 4));
        assert_eq!(p.pixel(0, 3), [0.5; 3]);
        assert_eq!(p.pixel(3, 2), [1.0; 3]);
    }
}
