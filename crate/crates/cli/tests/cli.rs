use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "image_size=32",
    "sprite_size_min=8",
    "sprite_size_max=14",
    "max_disp=4",
    "radius=4",
    "coarse_radius=2",
    "upscale=2",
    "channels=8",
    "pairs=2",
    "label=dirac",
];

fn pixcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixcorr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pixcorr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    args.extend_from_slice(TINY);
    args
}

fn train_tiny(out: &Path) {
    let o = out.to_str().unwrap();
    ok(&with_tiny(vec!["--deterministic", "--seed", "3", "train", "--out", o]));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut v = Vec::new();
    walk(dir, dir, &mut v);
    v.sort();
    v
}

#[test]
fn gen_data_writes_pairs_and_clips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["gen-data", "--out", out.to_str().unwrap(), "count=3", "clips=1", "clip_len=4", "points=5", "image_size=32", "sprite_size_min=8", "sprite_size_max=14", "max_disp=4"]);
    for i in 0..3 {
        let p = out.join(format!("pair_{i:05}"));
        for f in ["frame1.ppm", "frame2.ppm", "flow.cpxf", "covered.pgm"] {
            assert!(p.join(f).is_file(), "missing {f}");
        }
        let flow = std::fs::read(p.join("flow.cpxf")).unwrap();
        assert_eq!(&flow[..4], b"CPXF");
        assert_eq!(flow.len(), 12 + 32 * 32 * 2 * 4);
    }
    let clip = out.join("clip_00000");
    assert_eq!(std::fs::read_dir(clip.join("frames")).unwrap().count(), 4);
    let gt = std::fs::read_to_string(clip.join("gt_tracks.txt")).unwrap();
    assert_eq!(gt.lines().count(), 1 + 4 * 5);
    let real = dir.path().join("real");
    ok(&["gen-data", "--out", real.to_str().unwrap(), "count=1", "domain=real"]);
    assert!(!real.join("pair_00000/flow.cpxf").exists());
}

#[test]
fn train_is_byte_reproducible_in_deterministic_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&a);
    train_tiny(&b);
    assert_eq!(files(&a), files(&b));
    let log = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert!(log.starts_with("step,kl,rec,adv,total,valid\n"));
}

#[test]
fn errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = pixcorr(&["train", "--out", o, "radiusx=3"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config message="), "{err}");

    let out = pixcorr(&["track", "--ckpt", "/nonexistent", "--clip", "/nonexistent", "--points", "/nonexistent"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=io"), "{err}");

    let out = pixcorr(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=usage"), "{err}");

    let out = pixcorr(&["distill", "--out", o, "image_size=32"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error kind=missing-prerequisite"), "{err}");
}

#[test]
fn track_mask_eval_and_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["gen-data", "--out", data.to_str().unwrap(), "count=0", "clips=1", "clip_len=3", "points=4", "image_size=32", "sprite_size_min=8", "sprite_size_max=14", "max_disp=4"]);
    let model = d.join("model");
    train_tiny(&model);
    let ckpt = model.join("final");
    let clip = data.join("clip_00000");
    let tracks = d.join("tracks.txt");
    ok(&[
        "track",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--clip",
        clip.join("frames").to_str().unwrap(),
        "--points",
        clip.join("queries.txt").to_str().unwrap(),
        "--out",
        tracks.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&tracks).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame,point_id,u,v,visible"));
    assert_eq!(lines.count(), 3 * 4);

    let report = ok(&[
        "eval",
        "--pred-tracks",
        tracks.to_str().unwrap(),
        "--gt-tracks",
        clip.join("gt_tracks.txt").to_str().unwrap(),
    ]);
    assert!(report.contains("delta_avg.all-points="), "{report}");
    let perfect = ok(&[
        "eval",
        "--pred-tracks",
        clip.join("gt_tracks.txt").to_str().unwrap(),
        "--gt-tracks",
        clip.join("gt_tracks.txt").to_str().unwrap(),
    ]);
    assert!(perfect.contains("delta_avg.all-points=1\n"), "{perfect}");

    let masks = d.join("masks");
    ok(&[
        "propagate-mask",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--clip",
        clip.join("frames").to_str().unwrap(),
        "--mask",
        clip.join("masks/mask_00000.pgm").to_str().unwrap(),
        "--classes",
        "2",
        "--out",
        masks.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read_dir(&masks).unwrap().count(), 3);
    let jf = ok(&[
        "eval",
        "--pred-masks",
        masks.to_str().unwrap(),
        "--gt-masks",
        clip.join("masks").to_str().unwrap(),
    ]);
    assert!(jf.contains("J.all-points=") && jf.contains("F.all-points="), "{jf}");

    let held_out = ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "eval_pairs=2", "eval_clips=1", "clip_len=3", "points=3", "image_size=32", "sprite_size_min=8", "sprite_size_max=14", "max_disp=4"]);
    assert!(held_out.contains("epe.all-points="), "{held_out}");

    let feats = d.join("feats");
    ok(&[
        "export-features",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--clip",
        clip.join("frames").to_str().unwrap(),
        "--prob-maps",
        "--out",
        feats.to_str().unwrap(),
    ]);
    assert!(feats.join("features_00002.cpxt").is_file());
    assert!(feats.join("probmap_00000_00001.cpxt").is_file());
    assert!(feats.join("probmap_00000_00001.cpxt.txt").is_file());
}

#[test]
fn distill_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = dir.path().join("teacher");
    train_tiny(&teacher);
    let student = dir.path().join("student");
    ok(&with_tiny(vec![
        "distill",
        "--teacher",
        teacher.join("final").to_str().unwrap(),
        "--out",
        student.to_str().unwrap(),
    ]));
    assert!(student.join("final/manifest.txt").is_file());
    let bench = ok(&with_tiny(vec![
        "bench",
        "--ckpt",
        teacher.join("final").to_str().unwrap(),
        "--student",
        student.join("final").to_str().unwrap(),
        "--reps",
        "2",
    ]));
    assert!(bench.contains("match_speed_ratio="), "{bench}");
    assert!(bench.contains("end_to_end_speed_ratio="), "{bench}");
}
