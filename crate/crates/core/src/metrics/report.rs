use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    confusion, csi, inundation_mask, metric_pct_point_change, pct_change_mse, pod, pooled_mse, rfa,
    InundationCounts,
};
use crate::error::{ensure, Error, Result};
use crate::io::{read_depth, write_atomic};
use crate::par;
use crate::terrain::DepthGrid;

/// Skill scores of one map family against the fine grid. Each score is the
/// mean over tiles where it is defined; `n_*` counts those tiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillScores {
    pub pod: Option<f64>,
    pub rfa: Option<f64>,
    pub csi: Option<f64>,
    pub n_pod: usize,
    pub n_rfa: usize,
    pub n_csi: usize,
    /// Counts summed over every tile.
    pub pooled: InundationCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold_cm: f64,
    pub n_images: usize,
    /// Pooled over every pixel of the evaluated images (cm²).
    pub cg_fg_mse: f64,
    pub sr_fg_mse: f64,
    /// Relative change, percent.
    pub mse_pct_change: f64,
    pub cg: SkillScores,
    pub sr: SkillScores,
    /// Skill-score changes in percentage points.
    pub pod_pp_change: Option<f64>,
    pub rfa_pp_change: Option<f64>,
    pub csi_pp_change: Option<f64>,
    /// Names of the evaluated images, when read from disk.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let v: Vec<f64> = vals.flatten().collect();
    let n = v.len();
    ((n > 0).then(|| super::stable_sum(v.iter().copied()) / n as f64), n)
}

fn skill(pred: &[DepthGrid], truth: &[DepthGrid], threshold: f64) -> Result<SkillScores> {
    let counts = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| confusion(&inundation_mask(p, threshold)?, &inundation_mask(t, threshold)?))
        .collect::<Result<Vec<_>>>()?;
    let (pod_m, n_pod) = mean_defined(counts.iter().map(pod));
    let (rfa_m, n_rfa) = mean_defined(counts.iter().map(rfa));
    let (csi_m, n_csi) = mean_defined(counts.iter().map(csi));
    Ok(SkillScores {
        pod: pod_m,
        rfa: rfa_m,
        csi: csi_m,
        n_pod,
        n_rfa,
        n_csi,
        pooled: counts.into_iter().fold(InundationCounts::default(), |a, b| a + b),
    })
}

fn pp(cg: Option<f64>, sr: Option<f64>) -> Option<f64> {
    Some(metric_pct_point_change(cg?, sr?))
}

/// Report for aligned super-resolved, fine and coarse maps.
pub fn evaluate_grids(sr: &[DepthGrid], fg: &[DepthGrid], cg: &[DepthGrid], threshold_cm: f64) -> Result<EvalReport> {
    ensure!(
        sr.len() == fg.len() && fg.len() == cg.len(),
        dim,
        "{} SR, {} FG and {} CG maps",
        sr.len(),
        fg.len(),
        cg.len()
    );
    ensure!(!fg.is_empty(), contract, "nothing to evaluate");
    let cg_fg_mse = pooled_mse(cg, fg)?;
    let sr_fg_mse = pooled_mse(sr, fg)?;
    let cgs = skill(cg, fg, threshold_cm)?;
    let srs = skill(sr, fg, threshold_cm)?;
    Ok(EvalReport {
        threshold_cm,
        n_images: fg.len(),
        cg_fg_mse,
        sr_fg_mse,
        mse_pct_change: pct_change_mse(cg_fg_mse, sr_fg_mse)?,
        pod_pp_change: pp(cgs.pod, srs.pod),
        rfa_pp_change: pp(cgs.rfa, srs.rfa),
        csi_pp_change: pp(cgs.csi, srs.csi),
        cg: cgs,
        sr: srs,
        images: Vec::new(),
    })
}

fn list_fmaps(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".fmap") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Evaluates same-named rasters from three directories. When `sample_n` is
/// below the number of SR rasters, a seed-determined subset is used.
pub fn evaluate_run(
    sr_dir: &Path,
    fg_dir: &Path,
    cg_dir: &Path,
    threshold_cm: f64,
    sample_n: usize,
    seed: u64,
) -> Result<EvalReport> {
    let names = list_fmaps(sr_dir)?;
    ensure!(!names.is_empty(), config, "no .fmap files in {}", sr_dir.display());
    let chosen: Vec<String> = if sample_n > 0 && sample_n < names.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, names.len(), sample_n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| names[i].clone()).collect()
    } else {
        names
    };
    for dir in [fg_dir, cg_dir] {
        for n in &chosen {
            let p: PathBuf = dir.join(n);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "missing counterpart raster"),
                ));
            }
        }
    }
    let triples = par::map_slice(&chosen, |n| -> Result<(DepthGrid, DepthGrid, DepthGrid)> {
        Ok((read_depth(&sr_dir.join(n))?, read_depth(&fg_dir.join(n))?, read_depth(&cg_dir.join(n))?))
    });
    let mut sr = Vec::with_capacity(chosen.len());
    let mut fg = Vec::with_capacity(chosen.len());
    let mut cg = Vec::with_capacity(chosen.len());
    for t in triples {
        let (a, b, c) = t?;
        sr.push(a);
        fg.push(b);
        cg.push(c);
    }
    let mut report = evaluate_grids(&sr, &fg, &cg, threshold_cm)?;
    report.images = chosen;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into())
}

impl EvalReport {
    /// Tab-separated table: one row per metric with CG, SR and the change.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tcg\tsr\tchange\tchange_unit\n");
        let _ = writeln!(
            s,
            "mse_cm2\t{:.4}\t{:.4}\t{:.2}\tpercent",
            self.cg_fg_mse, self.sr_fg_mse, self.mse_pct_change
        );
        for (name, c, r, d) in [
            ("pod", self.cg.pod, self.sr.pod, self.pod_pp_change),
            ("rfa", self.cg.rfa, self.sr.rfa, self.rfa_pp_change),
            ("csi", self.cg.csi, self.sr.csi, self.csi_pp_change),
        ] {
            let _ = writeln!(
                s,
                "{name}\t{}\t{}\t{}\tpercentage_points",
                fmt_opt(c),
                fmt_opt(r),
                d.map(|x| format!("{x:.2}")).unwrap_or_else(|| "NA".into())
            );
        }
        let _ = writeln!(s, "# threshold_cm={} n_images={}", self.threshold_cm, self.n_images);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes `a − b` as a 16-bit binary PGM. Zero maps to mid-grey; `±scale_cm`
/// maps to white/black and larger differences saturate.
pub fn write_diff_pgm(path: &Path, a: &DepthGrid, b: &DepthGrid, scale_cm: f64) -> Result<()> {
    ensure!(a.depths.same_shape(&b.depths), dim, "difference of differently shaped maps");
    ensure!(scale_cm > 0.0, contract, "heatmap scale must be > 0");
    let mut buf = format!("P5\n{} {}\n65535\n", a.width(), a.height()).into_bytes();
    for (x, y) in a.depths.data().iter().zip(b.depths.data()) {
        let u = ((x - y) / scale_cm).clamp(-1.0, 1.0);
        let v = ((u + 1.0) * 0.5 * 65535.0).round() as u16;
        buf.extend_from_slice(&v.to_be_bytes());
    }
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid2;

    fn g(v: &[f64]) -> DepthGrid {
        DepthGrid::new(Grid2::new(v.len(), 1, v.to_vec()).unwrap(), 1.0, 0).unwrap()
    }

    #[test]
    fn self_comparison_is_perfect() {
        let fg = vec![g(&[0.0, 50.0, 40.0]), g(&[35.0, 0.0, 1.0])];
        let cg = vec![g(&[10.0, 20.0, 40.0]), g(&[0.0, 0.0, 60.0])];
        let r = evaluate_grids(&fg, &fg, &cg, 30.0).unwrap();
        assert_eq!(r.sr_fg_mse, 0.0);
        assert_eq!(r.mse_pct_change, -100.0);
        assert_eq!((r.sr.pod, r.sr.rfa, r.sr.csi), (Some(1.0), Some(0.0), Some(1.0)));
        let same = evaluate_grids(&cg, &fg, &cg, 30.0).unwrap();
        assert_eq!(same.mse_pct_change, 0.0);
        assert_eq!(same.csi_pp_change, Some(0.0));
    }

    #[test]
    fn undefined_tiles_are_excluded() {
        let fg = vec![g(&[0.0, 0.0]), g(&[50.0, 0.0])];
        let sr = vec![g(&[0.0, 0.0]), g(&[50.0, 50.0])];
        let cg = vec![g(&[1.0, 0.0]), g(&[0.0, 0.0])];
        let r = evaluate_grids(&sr, &fg, &cg, 30.0).unwrap();
        assert_eq!(r.sr.n_pod, 1);
        assert_eq!(r.sr.pod, Some(1.0));
        assert_eq!(r.sr.rfa, Some(0.5));
        assert_eq!(r.cg.n_pod, 1);
        assert_eq!(r.cg.pod, Some(0.0));
        assert_eq!(r.cg.rfa, None);
        assert_eq!(r.rfa_pp_change, None);
    }

    #[test]
    fn zero_baseline_rejected() {
        let fg = vec![g(&[0.0, 50.0])];
        assert!(matches!(evaluate_grids(&fg, &fg, &fg, 30.0), Err(Error::Contract(_))));
    }

    #[test]
    fn tsv_has_one_row_per_metric() {
        let fg = vec![g(&[0.0, 50.0])];
        let cg = vec![g(&[10.0, 20.0])];
        let t = evaluate_grids(&fg, &fg, &cg, 30.0).unwrap().to_tsv();
        assert_eq!(t.lines().count(), 6);
        assert!(t.contains("mse_cm2\t"));
    }
}
