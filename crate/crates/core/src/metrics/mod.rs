//! Depth-map error metrics and inundation skill scores.

mod report;

pub use report::{evaluate_grids, evaluate_run, write_diff_pgm, EvalReport, SkillScores};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::terrain::DepthGrid;

/// Compensated (Neumaier) sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_same(a: &DepthGrid, b: &DepthGrid) -> Result<()> {
    ensure!(
        a.depths.same_shape(&b.depths),
        dim,
        "{}x{} map vs {}x{} map",
        a.width(),
        a.height(),
        b.width(),
        b.height()
    );
    Ok(())
}

/// Sum of squared per-pixel differences (cm²).
pub fn squared_error(a: &DepthGrid, b: &DepthGrid) -> Result<f64> {
    check_same(a, b)?;
    Ok(stable_sum(
        a.depths.data().iter().zip(b.depths.data()).map(|(x, y)| (x - y) * (x - y)),
    ))
}

/// Mean squared per-pixel difference (cm²).
pub fn mse(a: &DepthGrid, b: &DepthGrid) -> Result<f64> {
    Ok(squared_error(a, b)? / a.depths.len() as f64)
}

/// MSE pooled over every pixel of every pair.
pub fn pooled_mse(a: &[DepthGrid], b: &[DepthGrid]) -> Result<f64> {
    ensure!(a.len() == b.len(), dim, "{} maps vs {} maps", a.len(), b.len());
    ensure!(!a.is_empty(), contract, "no maps to compare");
    let mut parts = Vec::with_capacity(a.len());
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        parts.push(squared_error(x, y)?);
        n += x.depths.len();
    }
    Ok(stable_sum(parts) / n as f64)
}

/// Relative MSE change in percent: `100 (sr − cg) / cg`.
pub fn pct_change_mse(cg_fg: f64, sr_fg: f64) -> Result<f64> {
    ensure!(cg_fg > 0.0, contract, "baseline MSE must be > 0, got {}", cg_fg);
    Ok(100.0 * (sr_fg - cg_fg) / cg_fg)
}

/// Change of a skill score in percentage points: `100 (sr − cg)`.
pub fn metric_pct_point_change(cg: f64, sr: f64) -> f64 {
    100.0 * (sr - cg)
}

/// Mean and population variance of per-catchment % changes, the spread
/// statistic used to compare consistency across catchments.
pub fn mean_and_variance(values: &[f64]) -> Result<(f64, f64)> {
    ensure!(!values.is_empty(), contract, "no values to summarize");
    let n = values.len() as f64;
    let mean = stable_sum(values.iter().copied()) / n;
    let var = stable_sum(values.iter().map(|x| (x - mean) * (x - mean))) / n;
    Ok((mean, var))
}

/// Flooded/dry classification of a depth map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InundationMask {
    pub width: usize,
    pub height: usize,
    pub flooded: Vec<bool>,
}

impl InundationMask {
    pub fn count(&self) -> usize {
        self.flooded.iter().filter(|&&f| f).count()
    }
}

/// A pixel is flooded iff its depth is strictly above `threshold_cm`.
pub fn inundation_mask(map: &DepthGrid, threshold_cm: f64) -> Result<InundationMask> {
    ensure!(threshold_cm >= 0.0, contract, "threshold must be >= 0, got {}", threshold_cm);
    Ok(InundationMask {
        width: map.width(),
        height: map.height(),
        flooded: map.depths.data().iter().map(|&d| d > threshold_cm).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InundationCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl InundationCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for InundationCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        InundationCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Confusion tallies with `truth` as the reference.
pub fn confusion(pred: &InundationMask, truth: &InundationMask) -> Result<InundationCounts> {
    ensure!(
        pred.width == truth.width && pred.height == truth.height,
        dim,
        "{}x{} mask vs {}x{} mask",
        pred.width,
        pred.height,
        truth.width,
        truth.height
    );
    let mut c = InundationCounts::default();
    for (&p, &t) in pred.flooded.iter().zip(&truth.flooded) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Probability of detection, `tp / (tp + fn)`.
pub fn pod(c: &InundationCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

/// Rate of false alarms, `fp / (tp + fp)`.
pub fn rfa(c: &InundationCounts) -> Option<f64> {
    ratio(c.fp, c.tp + c.fp)
}

/// Critical success index, `tp / (tp + fn + fp)`.
pub fn csi(c: &InundationCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_ + c.fp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid2;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> DepthGrid {
        DepthGrid::new(Grid2::new(v.len(), 1, v.to_vec()).unwrap(), 1.0, 0).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&row(&[1.0, 2.0]), &row(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse(&row(&[1.0, 2.0]), &row(&[1.0, 4.0])).unwrap(), 2.0);
        assert!(matches!(mse(&row(&[1.0]), &row(&[1.0, 2.0])), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn pct_change_examples() {
        assert_eq!(pct_change_mse(5.0, 5.0).unwrap(), 0.0);
        assert!(matches!(pct_change_mse(0.0, 1.0), Err(crate::Error::Contract(_))));
        assert_eq!(metric_pct_point_change(0.5, 0.5), 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        let m = inundation_mask(&row(&[30.0, 31.0, 0.0]), 30.0).unwrap();
        assert_eq!(m.flooded, vec![false, true, false]);
        let all = inundation_mask(&row(&[0.1, 2.0]), 0.0).unwrap();
        assert_eq!(all.count(), 2);
        assert!(inundation_mask(&row(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn confusion_examples() {
        let wet = inundation_mask(&row(&[1.0; 10]), 0.0).unwrap();
        let dry = inundation_mask(&row(&[0.0; 10]), 0.0).unwrap();
        let c = confusion(&wet, &dry).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 10, 0, 0));
        let same = confusion(&wet, &wet).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
    }

    #[test]
    fn score_formulas() {
        let c = |tp, fp, fn_| InundationCounts { tp, fp, fn_, tn: 0 };
        assert_eq!(pod(&c(3, 0, 1)), Some(0.75));
        assert_eq!(rfa(&c(9, 1, 0)), Some(0.1));
        assert_eq!(csi(&c(8, 1, 1)), Some(0.8));
        assert_eq!(pod(&c(0, 0, 0)), None);
        assert_eq!(rfa(&c(0, 0, 4)), None);
        assert_eq!(csi(&c(0, 0, 0)), None);
    }

    #[test]
    fn stable_sum_cancellation() {
        assert_eq!(stable_sum([1e16, 1.0, -1e16]), 1.0);
    }

    proptest! {
        #[test]
        fn mse_symmetric_and_nonnegative(
            a in prop::collection::vec(0.0f64..500.0, 12),
            b in prop::collection::vec(0.0f64..500.0, 12),
        ) {
            let (x, y) = (row(&a), row(&b));
            let m = mse(&x, &y).unwrap();
            prop_assert_eq!(m, mse(&y, &x).unwrap());
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m == 0.0, a == b);
        }

        #[test]
        fn counts_cover_every_pixel(p in prop::collection::vec(any::<bool>(), 1..80), seed in any::<u64>()) {
            let n = p.len();
            let t: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let mk = |f: Vec<bool>| InundationMask { width: n, height: 1, flooded: f };
            let c = confusion(&mk(p), &mk(t)).unwrap();
            prop_assert_eq!(c.total(), n as u64);
        }

        #[test]
        fn csi_bounded_by_pod_and_rfa(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let c = InundationCounts { tp, fp, fn_, tn: 0 };
            if let (Some(s), Some(p), Some(r)) = (csi(&c), pod(&c), rfa(&c)) {
                prop_assert!(s <= p + 1e-15);
                prop_assert!(s <= 1.0 - r + 1e-15);
            }
        }

        #[test]
        fn raising_threshold_never_adds_flooded(v in prop::collection::vec(0.0f64..100.0, 1..40), lo in 0.0f64..50.0, dt in 0.0f64..50.0) {
            let g = row(&v);
            prop_assert!(inundation_mask(&g, lo + dt).unwrap().count() <= inundation_mask(&g, lo).unwrap().count());
        }
    }
}
