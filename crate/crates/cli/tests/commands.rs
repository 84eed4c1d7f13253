use std::path::{Path, PathBuf};
use std::process::Command;

use bitrap::data::load_bev_scene;
use bitrap::metrics::EvalConfig;
use bitrap_cli::commands;
use bitrap_cli::config::RunConfig;
use bitrap_cli::dump::{read_dump, write_dump};
use tempfile::TempDir;

/// A small but complete configuration: tiny network, short training.
fn tiny(extra: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = [
        "synth.n_agents=24",
        "train.hidden=8",
        "train.latent_dim=4",
        "train.batch_size=8",
        "train.epochs=2",
        "train.n_train_samples=3",
        "train.components=3",
        "eval.n_kde=40",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &sets, Some(3)).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn scene(&self, cfg: &RunConfig) -> PathBuf {
        let p = self.path("scene.txt");
        commands::synth(cfg, &p).unwrap();
        p
    }

    fn trained(&self, cfg: &RunConfig, name: &str) -> (PathBuf, PathBuf) {
        let data = self.scene(cfg);
        let ck = self.path(name);
        commands::train(cfg, &data, &ck, None, None).unwrap();
        (data, ck)
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn synthesized_scene_loads_cleanly() {
    let ws = Workspace::new();
    let cfg = RunConfig::load(None, &[], None).unwrap();
    let p = ws.path("default.txt");
    let s = commands::synth(&cfg, &p).unwrap();
    let scene = load_bev_scene(&p, cfg.data.dt).unwrap();
    assert_eq!(scene.tracks.len(), 300);
    assert_eq!(s.agents, 300);
    assert_eq!(s.windows, 300);
    assert!(ws.path("default.txt.meta.json").exists());
    let back = RunConfig::load(Some(&ws.path("default.txt.config.toml")), &[], None).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn seed_changes_scene_deterministically() {
    let ws = Workspace::new();
    let write = |seed: u64, name: &str| {
        let cfg = RunConfig::load(None, &["synth.n_agents=20".into()], Some(seed)).unwrap();
        let p = ws.path(name);
        commands::synth(&cfg, &p).unwrap();
        read(&p)
    };
    let a = write(1, "a.txt");
    assert_eq!(a, write(1, "b.txt"));
    assert_ne!(a, write(2, "c.txt"));
}

#[test]
fn single_branch_scene_is_unimodal() {
    let ws = Workspace::new();
    let cfg = tiny(&["synth.branch_probs=[1.0]", "synth.branch_angles_deg=[0.0]"]);
    let p = ws.path("uni.txt");
    commands::synth(&cfg, &p).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&read(&ws.path("uni.txt.meta.json"))).unwrap();
    assert_eq!(meta["summary"]["branch_counts"], serde_json::json!([24]));
    assert!(meta["summary"]["labels"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l == 0));
}

#[test]
fn sampling_and_mixture_variants_train() {
    let ws = Workspace::new();
    for variant in ["np", "gmm"] {
        let cfg = tiny(&[&format!("train.variant={variant}")]);
        let (_, ck) = ws.trained(&cfg, &format!("{variant}.ckpt"));
        let loaded = bitrap::checkpoint::load(&ck).unwrap();
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.config.variant.name(), variant);
        assert_eq!(read(&ws.path(&format!("{variant}.ckpt.loss.ndjson"))).lines().count(), 2);
    }
}

#[test]
fn resume_continues_the_epoch_counter() {
    let ws = Workspace::new();
    let cfg = tiny(&["train.epochs=4"]);
    let data = ws.scene(&cfg);
    let whole = commands::train(&cfg, &data, &ws.path("whole.ckpt"), None, None).unwrap();

    let first = tiny(&["train.epochs=2"]);
    commands::train(&first, &data, &ws.path("half.ckpt"), None, None).unwrap();
    let resumed = commands::train(
        &cfg,
        &data,
        &ws.path("resumed.ckpt"),
        Some(&ws.path("half.ckpt")),
        None,
    )
    .unwrap();
    assert_eq!(resumed.epochs, 4);
    assert_eq!(resumed.epochs, whole.epochs);
    assert_eq!(resumed.final_lr, whole.final_lr);
    assert_eq!(read(&ws.path("resumed.ckpt.loss.ndjson")).lines().count(), 4);

    let behind = tiny(&["train.epochs=1"]);
    let e = commands::train(&behind, &data, &ws.path("x.ckpt"), Some(&ws.path("half.ckpt")), None)
        .unwrap_err();
    assert_eq!(bitrap_cli::exit_code(&e), 2);
}

#[test]
fn deterministic_report_has_no_likelihood() {
    let ws = Workspace::new();
    let cfg = tiny(&["train.variant=deterministic"]);
    let (data, ck) = ws.trained(&cfg, "det.ckpt");
    let r = commands::eval(&cfg, &ck, &data, &ws.path("det_eval"), None).unwrap();
    assert!(r.ade.is_some());
    assert!(r.anll.is_none() && r.fnll.is_none() && r.nll_per_step.is_none());
    assert!(!read(&ws.path("det_eval.md")).contains("NLL"));
}

#[test]
fn best_of_twenty_never_loses_to_best_of_one() {
    let ws = Workspace::new();
    let cfg = tiny(&[]);
    let (data, ck) = ws.trained(&cfg, "np.ckpt");
    let r20 = commands::eval(&cfg, &ck, &data, &ws.path("e20"), None).unwrap();
    let one = RunConfig {
        eval: EvalConfig {
            n_best: 1,
            ..cfg.eval.clone()
        },
        ..cfg.clone()
    };
    let r1 = commands::eval(&one, &ck, &data, &ws.path("e1"), None).unwrap();
    assert!(r20.ade.unwrap() <= r1.ade.unwrap());
    assert!(r20.fde.unwrap() <= r1.fde.unwrap());
    assert_eq!(r20.nll_per_step.unwrap().len(), cfg.train.delta);
}

#[test]
fn rerunning_eval_reproduces_metric_files() {
    let ws = Workspace::new();
    let cfg = tiny(&["predict.max_windows=6"]);
    let (data, ck) = ws.trained(&cfg, "np.ckpt");
    commands::eval(&cfg, &ck, &data, &ws.path("a"), Some(&ws.path("a.dump"))).unwrap();
    commands::eval(&cfg, &ck, &data, &ws.path("b"), Some(&ws.path("b.dump"))).unwrap();
    for ext in ["jsonl", "md", "dump"] {
        assert_eq!(read(&ws.path(&format!("a.{ext}"))), read(&ws.path(&format!("b.{ext}"))), "{ext}");
    }
    let lines: Vec<String> = read(&ws.path("a.jsonl")).lines().map(String::from).collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[6].starts_with("{\"summary\""));
}

#[test]
fn one_window_dump_gives_one_overlay() {
    let ws = Workspace::new();
    let cfg = tiny(&["predict.max_windows=1"]);
    let (data, ck) = ws.trained(&cfg, "np.ckpt");
    let dump = ws.path("p.dump");
    assert_eq!(commands::predict(&cfg, &ck, &data, &dump).unwrap(), 1);
    let records = read_dump(&dump).unwrap();
    assert_eq!(records[0].samples.len(), 20);
    let s = commands::plot(&cfg, &dump, &ws.path("figs")).unwrap();
    assert_eq!(s.overlays.len(), 1);
    assert_eq!(s.heatmaps.len(), 1);
    assert!(s.ellipse_figures.is_empty());
    let svg = read(&s.overlays[0]);
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn mixture_dump_draws_one_ellipse_per_component() {
    let ws = Workspace::new();
    let cfg = tiny(&["train.variant=gmm", "predict.max_windows=3", "train.components=4"]);
    let (data, ck) = ws.trained(&cfg, "gmm.ckpt");
    let dump = ws.path("g.dump");
    commands::predict(&cfg, &ck, &data, &dump).unwrap();
    let s = commands::plot(&cfg, &dump, &ws.path("figs")).unwrap();
    assert_eq!(s.ellipses_per_window, vec![4, 4, 4]);
    assert_eq!(s.ellipse_figures.len(), 3);
}

#[test]
fn likelihood_curve_spans_the_horizon() {
    let ws = Workspace::new();
    let cfg = tiny(&["predict.max_windows=2"]);
    let (data, ck) = ws.trained(&cfg, "np.ckpt");
    let dump = ws.path("p.dump");
    commands::predict(&cfg, &ck, &data, &dump).unwrap();
    let s = commands::plot(&cfg, &dump, &ws.path("figs")).unwrap();
    let (lo, hi) = s.nll_time_range.unwrap();
    let dt = cfg.train.dt;
    assert!((lo - dt).abs() < 1e-12);
    assert!((hi - cfg.train.delta as f64 * dt).abs() < 1e-12);
    assert!(s.nll_curve.unwrap().exists());
}

#[test]
fn empty_dump_is_rejected() {
    let ws = Workspace::new();
    let p = ws.path("empty.dump");
    write_dump(&[], &p).unwrap();
    let e = commands::plot(&tiny(&[]), &p, &ws.path("figs")).unwrap_err();
    assert_eq!(bitrap_cli::exit_code(&e), 3);
}

fn bitrap(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bitrap"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes_follow_error_kind() {
    let ws = Workspace::new();
    let cwd = ws.dir.path();
    let ok = bitrap(&["synth", "--out", "s.txt", "--set", "synth.n_agents=5"], cwd);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("5 agents"));

    let unknown = bitrap(&["synth", "--out", "x.txt", "--set", "synth.bogus=1"], cwd);
    assert_eq!(unknown.status.code(), Some(2));
    let invalid = bitrap(&["--set", "train.batch_size=0", "synth", "--out", "x.txt"], cwd);
    assert_eq!(invalid.status.code(), Some(2));

    std::fs::write(cwd.join("bad.txt"), "0 a 1.0\n").unwrap();
    let parse = bitrap(
        &["train", "--data", "bad.txt", "--out", "m.ckpt"],
        cwd,
    );
    assert_eq!(parse.status.code(), Some(3));
    let missing = bitrap(&["plot", "--dump", "nothing.dump", "--out", "f"], cwd);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn printed_defaults_reload() {
    let ws = Workspace::new();
    let out = bitrap(&["--print-config", "--seed", "9"], ws.dir.path());
    assert_eq!(out.status.code(), Some(0));
    let p = ws.path("printed.toml");
    std::fs::write(&p, &out.stdout).unwrap();
    let back = RunConfig::load(Some(&p), &[], None).unwrap();
    assert_eq!(back, RunConfig::load(None, &[], Some(9)).unwrap());
}
