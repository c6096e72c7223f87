use std::path::PathBuf;

use floodsr::grid::Grid2;
use floodsr::io::{read_dem, read_depth, write_dem};
use floodsr::terrain::{
    build_dataset, generate_dem, patch_origins, Boundary, DatasetConfig, Dem, FloodSolver, Split, TerrainParams,
};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/dem_seed7_64.fmap")
}

#[test]
fn golden_dem_seed7() {
    let dem = generate_dem(7, 64, 0.5, 10.0).unwrap();
    assert!(dem.elevations.min() >= 0.0 && dem.elevations.max() <= 10.0);
    let path = golden_path();
    if std::env::var_os("FLOODSR_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_dem(&path, &dem).unwrap();
    }
    let frozen = read_dem(&path).unwrap();
    assert_eq!(frozen.elevations.width(), 64);
    // The container stores f32, so the comparison is at f32 rounding.
    for (a, b) in dem.elevations.data().iter().zip(frozen.elevations.data()) {
        assert_eq!(*a as f32, *b as f32);
    }
}

/// Lake level `L` with `sum max(0, L - z) * 100 = volume_cm` by bisection.
fn lake_level(z: &[f64], volume_cm: f64) -> f64 {
    let stored = |l: f64| z.iter().map(|&zi| (l - zi).max(0.0) * 100.0).sum::<f64>();
    let (mut lo, mut hi) = (z.iter().cloned().fold(f64::INFINITY, f64::min), 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if stored(mid) < volume_cm {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn bowl_pools_at_the_bottom() {
    let n = 21;
    let c = (n - 1) as f64 / 2.0;
    let g = Grid2::from_fn(n, n, |x, y| 0.01 * ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)));
    let dem = Dem::new(g, 2.0).unwrap();
    let mut s = FloodSolver::new(dem.clone(), Boundary::Closed);
    let injected = 400.0;
    s.inject(n / 2, 1, injected).unwrap();
    let v0 = s.volume();
    s.relax(20_000).unwrap();
    assert!((s.volume() - v0).abs() <= 1e-9 * v0);

    let z = dem.elevations.data();
    let level = lake_level(z, injected);
    for (i, (&d, &zi)) in s.depths().iter().zip(z).enumerate() {
        let expect = (level - zi).max(0.0) * 100.0;
        assert!((d - expect).abs() < 0.05, "cell {i}: {d} vs {expect}");
    }
    let centre = s.depths()[(n / 2) * n + n / 2];
    assert_eq!(s.depths().iter().cloned().fold(0.0, f64::max), centre);
    // Rim cell where the water entered is dry again.
    assert!(s.depths()[n + n / 2] < 1e-6);
}

#[test]
fn sliding_window_patch_count() {
    let o = patch_origins(128, 64);
    assert_eq!(o, vec![0, 32, 64]);
    assert_eq!(o.len() * o.len(), 9);
    assert_eq!(patch_origins(64, 64), vec![0]);
}

fn small_cfg(size: usize, patch: usize, events: usize) -> DatasetConfig {
    DatasetConfig {
        terrain: TerrainParams {
            size,
            ..TerrainParams::default()
        },
        patch,
        n_events: events,
        steps_per_event: 3,
        relax_iters: 10,
        ..DatasetConfig::default()
    }
}

#[test]
fn one_patch_per_step_when_patch_is_domain() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small_cfg(64, 64, 1), dir.path()).unwrap();
    assert_eq!(m.patches.len(), 1);
    assert_eq!(m.samples.len(), 3);
    assert_eq!(m.n_train, 0);
    assert!(!m.warnings.is_empty());
}

#[test]
fn manifest_max_depth_is_fine_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small_cfg(128, 64, 2), dir.path()).unwrap();
    assert_eq!(m.patches.len(), 9);
    assert_eq!(m.samples.len(), 2 * 3 * 9);
    assert_eq!(m.samples_in(Split::Test).count(), 27);
    let mut max = 0.0f64;
    for s in &m.samples {
        let g = read_depth(&dir.path().join(&s.fine)).unwrap();
        assert_eq!(g.width(), 64);
        max = max.max(g.depths.max());
    }
    assert_eq!(m.max_depth_cm as f32, max as f32);
}
