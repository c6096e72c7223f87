//! Plain 2-D scalar fields.

use crate::error::{ensure, Result};

/// Row-major `height × width` field of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2 {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(width >= 1 && height >= 1, dim, "grid must be at least 1x1");
        ensure!(
            data.len() == width * height,
            dim,
            "{}x{} grid needs {} values, got {}",
            width,
            height,
            width * height,
            data.len()
        );
        Ok(Grid2 { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Grid2 {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid2 { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Grid2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Grid2) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Block mean over `factor × factor` cells.
    pub fn coarsen(&self, factor: usize) -> Result<Grid2> {
        ensure!(factor >= 1, contract, "coarsen factor must be >= 1");
        ensure!(
            self.width % factor == 0 && self.height % factor == 0,
            contract,
            "{}x{} grid not divisible by coarsen factor {}",
            self.width,
            self.height,
            factor
        );
        if factor == 1 {
            return Ok(self.clone());
        }
        let (cw, ch) = (self.width / factor, self.height / factor);
        let inv = 1.0 / (factor * factor) as f64;
        Ok(Grid2::from_fn(cw, ch, |cx, cy| {
            let mut acc = 0.0;
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    acc += self.get(x, y);
                }
            }
            acc * inv
        }))
    }

    /// Bilinear upsampling by an integer factor with cell-centre alignment and
    /// edge clamping.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Grid2> {
        ensure!(factor >= 1, contract, "upsample factor must be >= 1");
        if factor == 1 {
            return Ok(self.clone());
        }
        let coord = |i: usize, n: usize| -> (usize, usize, f64) {
            let s = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let (w, h) = (self.width * factor, self.height * factor);
        let xs: Vec<_> = (0..w).map(|x| coord(x, self.width)).collect();
        Ok(Grid2::from_fn(w, h, |x, y| {
            let (y0, y1, fy) = coord(y, self.height);
            let (x0, x1, fx) = xs[x];
            let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
            let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
            top * (1.0 - fy) + bot * fy
        }))
    }

    /// Copy of the `size × size` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Grid2> {
        ensure!(
            x0 + w <= self.width && y0 + h <= self.height,
            dim,
            "crop {}x{} at ({}, {}) exceeds {}x{} grid",
            w,
            h,
            x0,
            y0,
            self.width,
            self.height
        );
        Ok(Grid2::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }
}
