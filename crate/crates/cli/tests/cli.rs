use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn uwsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwsplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = uwsplat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, seed: u64, gaussians: usize, views: usize) {
    ok(&[
        "--threads",
        "1",
        "simulate",
        "--seed",
        &seed.to_string(),
        "--gaussians",
        &gaussians.to_string(),
        "--views",
        &views.to_string(),
        "--out",
        path(dir),
    ]);
}

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_2() {
    for args in [&["frobnicate"][..], &["simulate"], &["simulate", "--out", "x", "--beta-d", "1,2"], &[]] {
        let out = uwsplat(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty());
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(uwsplat(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_1() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nothing");
    let out = uwsplat(&["info", "--scene", path(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(out.stdout.is_empty());

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "lambda_r = 2.0\n").unwrap();
    let out = uwsplat(&["train", "--config", path(&bad), "--scene", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, 7, 150, 4);
    simulate(&b, 7, 150, 4);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() >= 4 * 3 + 5);
    assert_eq!(ta, tb);

    let c = tmp.path().join("c");
    simulate(&c, 8, 150, 4);
    assert_ne!(ta, tree(&c));
}

#[test]
fn info_echoes_counts_from_disk() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("s");
    simulate(&scene, 1, 17_635, 20);
    let info = key_values(&ok(&["info", "--scene", path(&scene)]));
    assert_eq!(info["views"], "20");
    assert_eq!(info["points"], "17635");
    assert_eq!(info["interpolated_frames"], "0");
}

#[test]
fn interp_writes_one_frame_per_adjacent_pair() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("s");
    simulate(&scene, 2, 200, 6);
    for mode in ["blend", "flow"] {
        let out = tmp.path().join(mode);
        ok(&["interp", "--scene", path(&scene), "--mode", mode, "--split-modulus", "3", "--out", path(&out)]);
        // views 0 and 3 are held out, leaving 1,2,4,5
        let names: Vec<String> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.len(), 3, "{names:?}");
    }
    // importing the flow frames back reproduces them byte for byte
    let imported = scene.join("interp");
    fs::create_dir_all(&imported).unwrap();
    for (name, bytes) in tree(&tmp.path().join("flow")) {
        fs::write(imported.join(name), bytes).unwrap();
    }
    let again = tmp.path().join("again");
    ok(&["interp", "--scene", path(&scene), "--mode", "imported", "--split-modulus", "3", "--out", path(&again)]);
    assert_eq!(tree(&again), tree(&tmp.path().join("flow")));
    let info = key_values(&ok(&["info", "--scene", path(&scene)]));
    assert_eq!(info["interpolated_frames"], "3");

    let out = uwsplat(&["interp", "--scene", path(&scene), "--mode", "warp"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_without_ifi_reports_it() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("s");
    simulate(&scene, 3, 150, 5);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# short run\nsplit_modulus = 4\ndensify = false\n").unwrap();
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["--threads", "1", "train", "--scene", path(&scene), "--config", path(&cfg)];
        args.extend_from_slice(&["--out", path(out), "--iterations", "20"]);
        args.extend_from_slice(extra);
        key_values(&ok(&args))
    };

    let off = run(&tmp.path().join("off"), &["--no-ifi"]);
    assert_eq!(off["ifi"], "off");
    assert_eq!(off["interpolated_frames"], "0");
    assert_eq!(off["points_initial"], off["points_enriched"]);

    let on = run(&tmp.path().join("on"), &[]);
    assert_eq!(on["ifi"], "on");
    assert_eq!(on["interpolated_frames"], "2");
    assert!(on["points_enriched"].parse::<usize>().unwrap() > on["points_initial"].parse().unwrap());
    assert_ne!(on["config_hash"], off["config_hash"]);

    let dir = tmp.path().join("off");
    for f in ["report.txt", "config.txt", "train_log.csv", "ckpt_20.aqs", "eval/metrics.csv"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    let saved = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(saved.contains("ifi = false"));
}

#[test]
fn ablation_flags_each_change_the_hash() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("s");
    simulate(&scene, 4, 60, 3);
    let flags = ["--no-ifi", "--no-afw", "--no-esl", "--no-decouple", "--shallow-mlp"];
    let mut hashes = std::collections::BTreeSet::new();
    // every subset of size <= 2 is accepted and distinguishable
    let mut subsets: Vec<Vec<&str>> = vec![vec![]];
    for (i, a) in flags.iter().enumerate() {
        subsets.push(vec![a]);
        for b in &flags[i + 1..] {
            subsets.push(vec![a, b]);
        }
    }
    for (k, subset) in subsets.iter().enumerate() {
        let out = tmp.path().join(format!("o{k}"));
        let mut args = vec!["--threads", "1", "train", "--scene", path(&scene), "--out", path(&out)];
        args.extend_from_slice(&["--iterations", "1"]);
        args.extend(subset.iter().copied());
        let r = key_values(&ok(&args));
        for (flag, key, on) in [
            ("--no-ifi", "ifi", "off"),
            ("--no-afw", "afw", "off"),
            ("--no-esl", "esl", "off"),
            ("--no-decouple", "decouple", "off"),
            ("--shallow-mlp", "shallow_mlp", "on"),
        ] {
            let expect = if subset.contains(&flag) { on } else if on == "on" { "off" } else { "on" };
            assert_eq!(r[key], expect, "{subset:?}");
        }
        hashes.insert(r["config_hash"].clone());
    }
    assert_eq!(hashes.len(), subsets.len());
}

#[test]
fn render_and_eval_from_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("s");
    simulate(&scene, 5, 150, 4);
    let out = tmp.path().join("t");
    ok(&["--threads", "1", "train", "--scene", path(&scene), "--out", path(&out), "--iterations", "5", "--no-ifi"]);
    let ckpt = out.join("ckpt_5.aqs");

    let by_index = tmp.path().join("a.png");
    ok(&["render", "--ckpt", path(&ckpt), "--camera", "2", "--scene", path(&scene), "--out", path(&by_index)]);
    let restored = tmp.path().join("r.png");
    ok(&["render", "--ckpt", path(&ckpt), "--camera", "2", "--scene", path(&scene), "--out", path(&restored), "--restored"]);
    assert_ne!(fs::read(&by_index).unwrap(), fs::read(&restored).unwrap());

    // the same camera given as a pose file
    let sparse = fs::read_to_string(scene.join("sparse/0/images.txt")).unwrap();
    let line = sparse
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .step_by(2)
        .find(|l| l.ends_with("view_002.png"))
        .unwrap();
    let f: Vec<&str> = line.split_whitespace().collect();
    let cams = fs::read_to_string(scene.join("sparse/0/cameras.txt")).unwrap();
    let cam = cams.lines().find(|l| !l.starts_with('#')).unwrap();
    let c: Vec<&str> = cam.split_whitespace().collect();
    let pose = tmp.path().join("pose.txt");
    fs::write(&pose, format!("# camera\n{}\n{}\n", c[2..8].join(" "), f[1..8].join(" "))).unwrap();
    let by_pose = tmp.path().join("p.png");
    ok(&["render", "--ckpt", path(&ckpt), "--camera", path(&pose), "--out", path(&by_pose)]);
    let (a, b) = (
        uwsplat::io::read_image(&by_index).unwrap(),
        uwsplat::io::read_image(&by_pose).unwrap(),
    );
    let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0 + 1e-9, "pose file render differs by {worst}");

    let missing = uwsplat(&["render", "--ckpt", path(&ckpt), "--camera", "9", "--scene", path(&scene), "--out", "x.png"]);
    assert_eq!(missing.status.code(), Some(1));

    let csv = ok(&["eval", "--ckpt", path(&ckpt), "--scene", path(&scene)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "view,psnr,ssim");
    assert!(lines[1].starts_with("view_000,"));
    assert!(lines.last().unwrap().starts_with("mean,"));
    let from_train = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert_eq!(csv, from_train);
}
