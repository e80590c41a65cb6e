use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diver_cli::{read_corpus, Manifest};
use diver_core::checkpoint::Checkpoint;
use diver_core::config::RunConfig;
use diver_core::denoiser::Denoiser;
use tempfile::TempDir;

const SMALL: [&str; 4] = ["--set", "scenes=12", "--set", "d=16"];

fn diver(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diver")).args(args).env_remove("DIVER_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = diver(args);
    assert!(out.status.success(), "diver {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene_gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["scene-gen", "-o", p(dir)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn train(scenes: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--scenes", p(scenes), "-o", p(out)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn scene_gen_is_reproducible_and_hashed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["scene-gen", "-o", p(d), "--set", "scenes=10", "--set", "seed=7"]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let (manifest, scenes) = read_corpus(&a).unwrap();
    assert_eq!((manifest.count, scenes.len(), manifest.seed), (10, 10, 7));
    assert_eq!(fs::read_dir(&a).unwrap().count(), 11);
    assert!(scenes.iter().all(|s| s.anchors.len() == 6 && s.refs.len() == 6));
}

#[test]
fn empty_corpus_and_bad_template() {
    let tmp = TempDir::new().unwrap();
    ok(&["scene-gen", "-o", p(&tmp.path().join("e")), "--set", "scenes=0"]);
    let m: Manifest = serde_json::from_str(&fs::read_to_string(tmp.path().join("e/manifest.json")).unwrap()).unwrap();
    assert!(m.scenes.is_empty());

    let out = diver(&["scene-gen", "-o", p(&tmp.path().join("x")), "--set", "templates=roundabout"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("roundabout"));
    assert_eq!(diver(&["scene-gen"]).status.code(), Some(2));
    assert_eq!(diver(&["ablate", "--axis", "speed", "-o", "x.csv"]).status.code(), Some(2));
}

#[test]
fn config_file_and_seed_env() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# tiny\nscenes = 9\nseed = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_diver"))
        .args(["scene-gen", "-c", p(&cfg), "-o", p(&tmp.path().join("s"))])
        .env("DIVER_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let (m, _) = read_corpus(&tmp.path().join("s")).unwrap();
    assert_eq!((m.count, m.seed), (9, 11));

    fs::write(&cfg, "scenes = 9\nepochz = 3\n").unwrap();
    let out = diver(&["scene-gen", "-c", p(&cfg), "-o", p(&tmp.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialisation() {
    let tmp = TempDir::new().unwrap();
    let sc = tmp.path().join("sc");
    scene_gen(&sc, &[]);
    let ck = tmp.path().join("init.ckpt");
    train(&sc, &ck, &["--set", "epochs=0"]);
    let ck = Checkpoint::load(&ck).unwrap();
    assert_eq!(ck.meta.step, 0);
    let cfg = RunConfig { scenes: 12, d: 16, epochs: 0, ..RunConfig::default() };
    let net = Denoiser::new(cfg.denoiser(), cfg.seed).unwrap();
    for (p, (name, value)) in net.store.params().iter().zip(&ck.tensors) {
        assert_eq!(&p.name, name);
        assert_eq!(&p.value, value);
    }
    assert!(ck.tensors.iter().filter(|(n, _)| n.starts_with("adam.")).all(|(_, v)| v.iter().all(|&x| x == 0.0)));
}

#[test]
fn training_is_bit_reproducible_and_resumable() {
    let tmp = TempDir::new().unwrap();
    let sc = tmp.path().join("sc");
    scene_gen(&sc, &[]);
    let epochs = ["--set", "epochs=3"];
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    train(&sc, &a, &epochs);
    train(&sc, &b, &epochs);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(a.with_extension("csv")).unwrap(), fs::read(b.with_extension("csv")).unwrap());

    // 3 epochs of 3 steps; interrupt after 4 and resume.
    let part = tmp.path().join("part.ckpt");
    train(&sc, &part, &[epochs[0], epochs[1], "--stop-after-steps", "4"]);
    assert_eq!(Checkpoint::load(&part).unwrap().meta.step, 4);
    let resumed = tmp.path().join("resumed.ckpt");
    let log = tmp.path().join("part.csv");
    train(&sc, &resumed, &[epochs[0], epochs[1], "--resume", p(&part), "--log", p(&log)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&resumed).unwrap());
    assert_eq!(fs::read(a.with_extension("csv")).unwrap(), fs::read(&log).unwrap());
}

#[test]
fn imitation_loss_falls_over_the_first_fifty_steps() {
    let tmp = TempDir::new().unwrap();
    let sc = tmp.path().join("sc");
    ok(&["scene-gen", "-o", p(&sc)]);
    let ck = tmp.path().join("m.ckpt");
    ok(&["train", "--scenes", p(&sc), "-o", p(&ck), "--set", "lambda_rl=0", "--stop-after-steps", "50"]);
    let log = fs::read_to_string(ck.with_extension("csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 50);
    // Means of consecutive 10-step blocks; per-step values vary with batch composition.
    let smoothed: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in smoothed.windows(2) {
        assert!(w[1] < w[0], "smoothed L_match rose: {smoothed:?}");
    }
}

#[test]
fn eval_and_sample_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let sc = tmp.path().join("sc");
    scene_gen(&sc, &[]);
    let ck = tmp.path().join("m.ckpt");
    train(&sc, &ck, &["--set", "epochs=1"]);
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--weights", p(&ck), "--scenes", p(&sc), "-o", p(e)]);
    }
    assert_eq!(dir_bytes(&e1), dir_bytes(&e2));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(e1.join("summary.json")).unwrap()).unwrap();
    for col in ["1s", "2s", "3s", "Avg"] {
        let v = summary["div"][col].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{col} = {v}");
    }
    let csv = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,div,collision"));
    assert_eq!(csv.lines().count(), 7);

    let (s1, s2) = (tmp.path().join("s1.jsonl"), tmp.path().join("s2.jsonl"));
    for s in [&s1, &s2] {
        ok(&["sample", "--weights", p(&ck), "--scenes", p(&sc), "-o", p(s), "--seed", "5", "--steps", "4"]);
    }
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    assert_eq!(fs::read_to_string(&s1).unwrap().lines().count(), 12 * 6);
    assert_eq!(diver(&["sample", "--weights", p(&ck), "--scenes", p(&sc), "-o", p(&s1), "--modes", "4"]).status.code(), Some(1));
}

#[test]
fn eval_refuses_a_foreign_corpus_without_force() {
    let tmp = TempDir::new().unwrap();
    let (sc, other) = (tmp.path().join("sc"), tmp.path().join("other"));
    scene_gen(&sc, &[]);
    scene_gen(&other, &["--set", "seed=9"]);
    let ck = tmp.path().join("m.ckpt");
    train(&sc, &ck, &["--set", "epochs=0"]);
    let out = diver(&["eval", "--weights", p(&ck), "--scenes", p(&other), "-o", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&["eval", "--weights", p(&ck), "--scenes", p(&other), "-o", p(&tmp.path().join("e")), "--force"]);
    let bad = diver(&["eval", "--weights", p(&ck), "--scenes", p(&sc), "-o", p(&tmp.path().join("e")), "--set", "d=8"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn plot_outputs() {
    let tmp = TempDir::new().unwrap();
    let sc = tmp.path().join("sc");
    scene_gen(&sc, &[]);
    let scene = sc.join("scene_00000.json");
    let ck = tmp.path().join("m.ckpt");
    train(&sc, &ck, &["--set", "epochs=0"]);
    let traj = tmp.path().join("t.jsonl");
    ok(&["sample", "--weights", p(&ck), "--scenes", p(&sc), "-o", p(&traj)]);

    let (a, b) = (tmp.path().join("a.svg"), tmp.path().join("b.svg"));
    for out in [&a, &b] {
        ok(&["plot", "--scene", p(&scene), "--traj", p(&traj), "-o", p(out)]);
    }
    let svg = fs::read_to_string(&a).unwrap();
    assert_eq!(svg, fs::read_to_string(&b).unwrap());
    assert_eq!(svg.matches("data-mode=").count(), 6);

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    ok(&["plot", "--scene", p(&scene), "--traj", p(&empty), "-o", p(&b)]);
    let bare = fs::read_to_string(&b).unwrap();
    assert_eq!(bare.matches("data-mode=").count(), 0);
    assert!(bare.contains("id=\"agents\""));

    let lines = fs::read_to_string(&traj).unwrap();
    let first = lines.lines().next().unwrap();
    let broken = tmp.path().join("broken.jsonl");
    fs::write(&broken, format!("{first}\n{first}\n{{\"scene_id\": 3}}\n")).unwrap();
    let out = diver(&["plot", "--scene", p(&scene), "--traj", p(&broken), "-o", p(&b)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}
