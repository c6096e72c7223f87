use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use floodsr::io::read_depth;
use floodsr::terrain::{DatasetManifest, Split};
use floodsr::workflow::ExperimentConfig;
use serde_json::json;

fn floodsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floodsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = floodsr(args);
    assert!(
        out.status.success(),
        "floodsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    floodsr(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, seed: u64, events: usize) -> PathBuf {
    let cfg = dir.join(format!("ds{seed}_{events}.json"));
    std::fs::write(
        &cfg,
        json!({
            "seed": seed,
            "terrain": {"size": 32, "roughness": 0.55, "relief": 8.0, "tilt": 0.3, "cell_size": 5.0},
            "patch": 16, "upscale": 4, "n_events": events, "steps_per_event": 4, "relax_iters": 20,
            "boundary": "open", "rain_peak_cm": [1.5, 4.0], "rain_fraction": 0.6
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.join(format!("data{seed}_{events}"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    out
}

fn tiny_config(dir: &Path, dataset: &Path, steps: u64) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.dataset = dataset.to_path_buf();
    c.unet.base_width = 8;
    c.unet.depth = 2;
    c.unet.attn_levels = vec![1];
    c.unet.time_embed_dim = 16;
    c.unet.norm_groups = 4;
    c.schedule.timesteps = 20;
    c.schedule.alpha_start = 1e-3;
    c.schedule.alpha_end = 0.3;
    c.sampler = floodsr::diffusion::SamplerConfig::full(20, 0);
    c.train.steps = steps;
    c.train.batch_size = 2;
    c.train.log_every = 1;
    c.train.checkpoint_every = 2;
    c.eval.sample_n = 4;
    c.eval.batch = 2;
    let p = dir.join(format!("exp{steps}.json"));
    std::fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
    p
}

#[test]
fn print_config_round_trips() {
    for mode in ["pixel", "latent"] {
        let text = ok(&["print-config", "--mode", mode]);
        let c: ExperimentConfig = serde_json::from_str(&text).unwrap();
        c.validate().unwrap();
    }
    let text = ok(&["print-config", "--dataset"]);
    let d: floodsr::terrain::DatasetConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(d, floodsr::terrain::DatasetConfig::default());
}

#[test]
fn gen_data_is_deterministic_and_reports_mse() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path(), 3, 2);
    let out = ok(&["gen-data", "--seed", "3", "--size", "32", "--patch", "16", "--events", "2", "--out", s(&dir.path().join("x"))]);
    assert!(out.contains("cg_fg_mse"));
    let b_dir = dir.path().join("b");
    std::fs::create_dir(&b_dir).unwrap();
    let b = small_dataset(&b_dir, 3, 2);
    let ma = std::fs::read(a.join(floodsr::terrain::MANIFEST_FILE)).unwrap();
    let mb = std::fs::read(b.join(floodsr::terrain::MANIFEST_FILE)).unwrap();
    assert_eq!(ma, mb);
    let m = DatasetManifest::load(&a).unwrap();
    assert!(m.cg_fg_mse > 0.0 && m.n_train > 0 && m.n_test > 0);
    assert!(a.join(commands_run_file()).is_file());
}

fn commands_run_file() -> &'static str {
    floodsr::workflow::commands::RUN_INFO_FILE
}

#[test]
fn single_event_warns_about_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gen-data", "--seed", "1", "--size", "32", "--patch", "16", "--events", "1", "--out", s(&dir.path().join("d"))]);
    assert!(out.contains("warning"), "{out}");
    let m = DatasetManifest::load(&dir.path().join("d")).unwrap();
    assert_eq!(m.n_train, 0);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = s(dir.path());
    assert_eq!(code(&["gen-data", "--size", "30", "--out", d]), 2);
    let missing = dir.path().join("nope.fmap");
    assert_eq!(code(&["eval", "--sr", s(&missing), "--fg", d, "--cg", d, "--threshold", "5"]), 3);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--out", s(&dir.path().join("o"))]), 2);
    std::fs::write(&bad, r#"{"mode": "latent"}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--out", s(&dir.path().join("o"))]), 2);
}

#[test]
fn eval_of_fine_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 5, 2);
    let fine = data.join("fine");
    let coarse = data.join("coarse");
    let out = dir.path().join("report");
    let tsv = ok(&["eval", "--sr", s(&fine), "--fg", s(&fine), "--cg", s(&coarse), "--threshold", "1", "--out", s(&out), "--heatmaps"]);
    assert!(tsv.contains("\t-100.00\tpercent"), "{tsv}");
    let r: floodsr::metrics::EvalReport = floodsr::io::read_json(&out.join("report.json")).unwrap();
    assert_eq!(r.sr_fg_mse, 0.0);
    assert_eq!(r.sr.csi.unwrap_or(1.0), 1.0);
    assert_eq!(r.sr.rfa.unwrap_or(0.0), 0.0);
    let recomputed = (r.sr_fg_mse - r.cg_fg_mse) / r.cg_fg_mse * 100.0;
    assert_eq!(r.mse_pct_change, recomputed);
    assert!(std::fs::read_dir(out.join("heatmaps")).unwrap().count() > 0);
    let sum = ok(&["summarize", s(&out.join("report.json")), s(&out.join("report.json"))]);
    assert!(sum.contains("variance\t0.00"), "{sum}");
}

#[test]
fn mismatched_rasters_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path(), 2, 2);
    let sub = dir.path().join("big");
    std::fs::create_dir(&sub).unwrap();
    let cfg = sub.join("ds.json");
    std::fs::write(
        &cfg,
        json!({"seed": 2, "terrain": {"size": 64}, "patch": 32, "n_events": 2, "steps_per_event": 4, "relax_iters": 20})
            .to_string(),
    )
    .unwrap();
    let b = sub.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    let name = "e01_s003_p000.fmap";
    let sr = dir.path().join("sr");
    std::fs::create_dir(&sr).unwrap();
    std::fs::copy(b.join("fine").join(name), sr.join(name)).unwrap();
    let c = code(&["eval", "--sr", s(&sr), "--fg", s(&a.join("fine")), "--cg", s(&a.join("coarse")), "--threshold", "1"]);
    assert_eq!(c, 2);
}

#[test]
fn train_sample_sweep_and_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 11, 2);
    let zero = dir.path().join("zero");
    ok(&["train", "--config", s(&tiny_config(dir.path(), &data, 0)), "--out", s(&zero)]);
    let ck0 = zero.join(floodsr::workflow::commands::CHECKPOINT_FILE);
    let cfg = tiny_config(dir.path(), &data, 4);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let ck = run.join(floodsr::workflow::commands::CHECKPOINT_FILE);
    assert_ne!(std::fs::read(&ck0).unwrap(), std::fs::read(&ck).unwrap());
    let log = std::fs::read_to_string(run.join(floodsr::workflow::commands::TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(run.join(floodsr::workflow::commands::CONFIG_SNAPSHOT_FILE).is_file());

    // Locked output directory.
    std::fs::write(run.join(".floodsr.lock"), "1").unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&run)]), 2);
    std::fs::remove_file(run.join(".floodsr.lock")).unwrap();

    // m = 0 returns the upsampled coarse map unchanged.
    let m = DatasetManifest::load(&data).unwrap();
    let entry = m.samples_in(Split::Test).next().unwrap().clone();
    let patch = m.patch(entry.patch).unwrap().clone();
    let cg = data.join(&entry.coarse);
    let dem = data.join(&patch.dem);
    let sr0 = dir.path().join("sr0.fmap");
    ok(&["sample", "--checkpoint", s(&ck), "--cg", s(&cg), "--dem", s(&dem), "--start", "truncated", "--m", "0", "--out", s(&sr0)]);
    let a = read_depth(&sr0).unwrap();
    let b = read_depth(&cg).unwrap();
    for (x, y) in a.depths.data().iter().zip(b.depths.data()) {
        assert!((x - y).abs() <= 1e-4 * m.max_depth_cm, "{x} vs {y}");
    }

    // Same seed, same rasters.
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    for out in [&s1, &s2] {
        ok(&["sample", "--checkpoint", s(&ck), "--dataset", s(&data), "--limit", "3", "--seed", "9", "--out", s(out)]);
    }
    let names: Vec<_> = std::fs::read_dir(&s1).unwrap().map(|e| e.unwrap().file_name()).filter(|n| n.to_string_lossy().ends_with(".fmap")).collect();
    assert_eq!(names.len(), 3);
    for n in &names {
        assert_eq!(std::fs::read(s1.join(n)).unwrap(), std::fs::read(s2.join(n)).unwrap());
    }
    assert_eq!(code(&["sample", "--checkpoint", s(&ck), "--cg", s(&dir.path().join("missing.fmap")), "--dem", s(&dem), "--out", s(&sr0)]), 3);

    // Sweep bounds.
    let sweep = |tol: &str| -> floodsr::workflow::SweepReport {
        let p = dir.path().join(format!("sweep{tol}.json"));
        ok(&["sweep-m", "--checkpoint", s(&ck), "--dataset", s(&data), "--tolerance-pct", tol, "--n-images", "2", "--grid", "2,5,20", "--out", s(&p)]);
        floodsr::io::read_json(&p).unwrap()
    };
    assert_eq!(sweep("1e9").best_m, 2);
    let tight = sweep("0");
    let last = tight.points.last().unwrap();
    assert_eq!((last.m, last.pct_vs_full), (20, 0.0));
    let first_ok = tight.points.iter().find(|p| p.pct_vs_full <= 0.0).unwrap().m;
    assert_eq!(tight.best_m, first_ok);

    // Finetuning for zero steps leaves the weights alone.
    let ft = dir.path().join("ft");
    ok(&["finetune", "--from-checkpoint", s(&ck), "--dataset", s(&data), "--steps", "0", "--out", s(&ft)]);
    let a = floodsr::io::load_checkpoint(&ck).unwrap();
    let b = floodsr::io::load_checkpoint(&ft.join(floodsr::workflow::commands::CHECKPOINT_FILE)).unwrap();
    for (name, t) in a.with_prefix("unet/") {
        assert_eq!(b.get(&format!("unet/{name}")).unwrap().data(), t.data(), "{name}");
    }
    for (_, t) in b.with_prefix("adam_m/") {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    // Resume continues to the configured total.
    let cfg6 = tiny_config(dir.path(), &data, 6);
    let out = ok(&["train", "--config", s(&cfg6), "--out", s(&run), "--resume"]);
    assert!(out.contains("step 6"), "{out}");
}
