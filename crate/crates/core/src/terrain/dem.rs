use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::Grid2;

/// Ground elevations in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct Dem {
    pub elevations: Grid2,
    /// Metres per cell edge.
    pub cell_size: f64,
}

impl Dem {
    pub fn new(elevations: Grid2, cell_size: f64) -> Result<Self> {
        ensure!(cell_size > 0.0, contract, "cell size must be positive");
        ensure!(elevations.data().iter().all(|v| v.is_finite()), numeric, "non-finite elevation");
        Ok(Dem { elevations, cell_size })
    }

    pub fn width(&self) -> usize {
        self.elevations.width()
    }

    pub fn height(&self) -> usize {
        self.elevations.height()
    }

    /// Block-averaged DEM with `factor`-times larger cells.
    pub fn coarsen(&self, factor: usize) -> Result<Dem> {
        Dem::new(self.elevations.coarsen(factor)?, self.cell_size * factor as f64)
    }
}

/// Parameters of the synthetic terrain generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainParams {
    /// Grid edge length; a power of two or a power of two plus one.
    pub size: usize,
    /// Amplitude decay per octave, in `[0, 1]`.
    pub roughness: f64,
    /// Elevation range in metres.
    pub relief: f64,
    /// Fraction of the relief given to a west-to-east downhill ramp.
    pub tilt: f64,
    pub cell_size: f64,
}

impl Default for TerrainParams {
    fn default() -> Self {
        TerrainParams {
            size: 256,
            roughness: 0.55,
            relief: 12.0,
            tilt: 0.3,
            cell_size: 5.0,
        }
    }
}

fn is_pow2(n: usize) -> bool {
    n >= 2 && n.is_power_of_two()
}

/// Diamond-square surface on an `(2^k + 1)²` lattice, unscaled.
fn diamond_square(n: usize, roughness: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    let mut amp = 1.0;
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| amp * rng.random_range(-1.0..=1.0);
    for &(x, y) in &[(0, 0), (n - 1, 0), (0, n - 1), (n - 1, n - 1)] {
        g[y * n + x] = jitter(rng, amp);
    }
    let mut step = n - 1;
    while step > 1 {
        let half = step / 2;
        for y in (half..n).step_by(step) {
            for x in (half..n).step_by(step) {
                let avg = (g[(y - half) * n + x - half]
                    + g[(y - half) * n + x + half]
                    + g[(y + half) * n + x - half]
                    + g[(y + half) * n + x + half])
                    / 4.0;
                g[y * n + x] = avg + jitter(rng, amp);
            }
        }
        for y in (0..n).step_by(half) {
            let x_start = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (x_start..n).step_by(step) {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                if y >= half {
                    acc += g[(y - half) * n + x];
                    cnt += 1.0;
                }
                if y + half < n {
                    acc += g[(y + half) * n + x];
                    cnt += 1.0;
                }
                if x >= half {
                    acc += g[y * n + x - half];
                    cnt += 1.0;
                }
                if x + half < n {
                    acc += g[y * n + x + half];
                    cnt += 1.0;
                }
                g[y * n + x] = acc / cnt + jitter(rng, amp);
            }
        }
        step = half;
        amp *= roughness;
    }
    g
}

/// Fractal DEM plus tilt, rescaled to `[0, relief]`.
pub fn generate_dem_with(seed: u64, p: &TerrainParams) -> Result<Dem> {
    let size = p.size;
    let lattice = if is_pow2(size) {
        size + 1
    } else {
        ensure!(size >= 3 && is_pow2(size - 1), contract, "DEM size {} must be 2^k or 2^k+1", size);
        size
    };
    ensure!(
        (0.0..=1.0).contains(&p.roughness),
        contract,
        "roughness must lie in [0, 1], got {}",
        p.roughness
    );
    ensure!(p.relief >= 0.0 && p.relief.is_finite(), contract, "relief must be >= 0");
    ensure!((0.0..=1.0).contains(&p.tilt), contract, "tilt must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = diamond_square(lattice, p.roughness, &mut rng);
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let denom = (size - 1).max(1) as f64;
    let mut field = Grid2::from_fn(size, size, |x, y| {
        let f = if span > 0.0 { (raw[y * lattice + x] - lo) / span } else { 0.0 };
        let ramp = 1.0 - x as f64 / denom;
        (1.0 - p.tilt) * f + p.tilt * ramp
    });
    let (fmin, fmax) = (field.min(), field.max());
    let s = if fmax > fmin { p.relief / (fmax - fmin) } else { 0.0 };
    field = field.map(|v| ((v - fmin) * s).clamp(0.0, p.relief));
    Dem::new(field, p.cell_size)
}

/// Diamond-square DEM without tilt.
pub fn generate_dem(seed: u64, size: usize, roughness: f64, relief: f64) -> Result<Dem> {
    generate_dem_with(
        seed,
        &TerrainParams {
            size,
            roughness,
            relief,
            tilt: 0.0,
            cell_size: 1.0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_parameters_give_flat_plane() {
        let d = generate_dem(1, 33, 0.0, 0.0).unwrap();
        assert!(d.elevations.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_dem(11, 64, 0.5, 10.0).unwrap();
        let b = generate_dem(11, 64, 0.5, 10.0).unwrap();
        let c = generate_dem(12, 64, 0.5, 10.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn range_within_relief() {
        for size in [16, 17, 64, 65] {
            let d = generate_dem(7, size, 0.5, 10.0).unwrap();
            assert_eq!(d.width(), size);
            assert!(d.elevations.min() >= 0.0 && d.elevations.max() <= 10.0);
        }
    }

    #[test]
    fn invalid_sizes_rejected() {
        for size in [0, 1, 2 * 3, 100] {
            assert!(matches!(generate_dem(1, size, 0.5, 1.0), Err(crate::Error::Contract(_))), "size {size}");
        }
        assert!(generate_dem(1, 16, 1.5, 1.0).is_err());
    }

    #[test]
    fn tilt_drains_east() {
        let p = TerrainParams {
            size: 64,
            roughness: 0.5,
            relief: 10.0,
            tilt: 0.8,
            cell_size: 1.0,
        };
        let d = generate_dem_with(3, &p).unwrap();
        let col_mean = |x: usize| (0..64).map(|y| d.elevations.get(x, y)).sum::<f64>() / 64.0;
        assert!(col_mean(0) > col_mean(63));
    }
}
