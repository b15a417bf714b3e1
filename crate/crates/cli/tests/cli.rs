use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::Vector3;
use regloc_core::geometry::{EulerZyx, RigidTransform};
use regloc_core::io::{read_manifest, read_pose, write_pose};

fn regloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regloc"))
        .args(args)
        .env_remove("REGLOC_THREADS")
        .output()
        .expect("spawn regloc")
}

fn ok(args: &[&str]) -> Output {
    let out = regloc(args);
    assert!(
        out.status.success(),
        "regloc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn traverse(dir: &Path, envs: &str) {
    ok(&[
        "synthgen", "--out", s(dir), "--envs", envs, "--route-length", "120", "--points", "384", "--seed", "5",
    ]);
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "synthgen", "features", "register", "icp", "train", "index", "query", "eval-pr", "eval-reg", "bench-lam",
    ] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(regloc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(regloc(&["register", "--source", "a.vpc"]).status.code(), Some(2));
    assert_eq!(regloc(&["eval-pr", "--index", "x", "--queries", "q.csv", "--variant", "top5"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let out = regloc(&["register", "--source", "/does/not/exist.vpc", "--target", "/does/not/exist.vpc"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}

#[test]
fn zero_threads_is_a_usage_error() {
    assert_eq!(regloc(&["--threads", "0", "bench-lam", "--n", "16"]).status.code(), Some(2));
}

#[test]
fn degenerate_registration_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("flat.xyz");
    // collinear points: the rotation about the line is unobservable
    let text: String = (0..64).map(|i| format!("{} 0 0\n", i as f64 * 0.01)).collect();
    fs::write(&p, text).unwrap();
    let out = regloc(&["register", "--source", s(&p), "--target", s(&p), "--knn", "8"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_lam_emits_csv() {
    let out = ok(&["bench-lam", "--n", "64", "--n", "128", "--dim", "8", "--repeats", "1", "--reference"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,n,dim,median_seconds");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 4);
        assert!(f[3].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn retrieval_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    traverse(&d.join("db"), "Sunny,Overcast");
    let m = read_manifest(&d.join("db/manifest.csv")).unwrap();
    assert_eq!(m.environments(), vec!["Overcast".to_string(), "Sunny".to_string()]);
    ok(&["features", "--manifest", s(&d.join("db/manifest.csv")), "--out", s(&d.join("desc"))]);
    ok(&["index", "--descs", s(&d.join("desc.vdsc")), "--meta", s(&d.join("desc.csv")), "--out", s(&d.join("idx"))]);

    let first = m.cloud_path(&m.rows[0]);
    ok(&["features", "--manifest", s(&d.join("db/manifest.csv")), "--out", s(&d.join("again"))]);
    assert_eq!(fs::read(d.join("desc.vdsc")).unwrap(), fs::read(d.join("again.vdsc")).unwrap());
    ok(&["features", "--cloud", s(&first), "--out", s(&d.join("q.f64"))]);
    let out = ok(&["query", "--index", s(&d.join("idx")), "--desc", s(&d.join("q.f64")), "--n", "2", "--backend", "tree"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rank,frame_id,distance");
    assert_eq!(lines.len(), 3);

    let out = ok(&[
        "eval-pr", "--index", s(&d.join("idx")), "--queries", s(&d.join("desc.csv")), "--variant", "top1percent",
        "--exclude-self",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "top1percent");
    let recall: f64 = row[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&recall));

    // without exclusion every query would find itself
    let out = regloc(&["eval-pr", "--index", s(&d.join("idx")), "--queries", s(&d.join("desc.csv"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn icp_and_eval_reg() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    traverse(&d.join("db"), "Sunny");
    let m = read_manifest(&d.join("db/manifest.csv")).unwrap();
    let src = m.cloud_path(&m.rows[2]);
    let out = d.join("est.txt");
    ok(&["icp", "--source", s(&src), "--target", s(&src), "--out", s(&out)]);
    let est = read_pose(&out).unwrap();
    assert!(est.difference(&RigidTransform::identity()).0 < 1e-9);

    let gt = d.join("gt.txt");
    write_pose(&gt, &RigidTransform::from_euler(EulerZyx::new(2.0, 0.0, 0.0), Vector3::zeros())).unwrap();
    let text = String::from_utf8(ok(&["eval-reg", "--est", s(&out), "--gt", s(&gt)]).stdout).unwrap();
    let v: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((v[1] - 2.0 / 3.0).abs() < 1e-6, "{v:?}");
    assert!((v[0] - 4.0 / 3.0).abs() < 1e-6, "{v:?}");
}

#[test]
fn train_writes_checkpoints_usable_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    traverse(&d.join("virt"), "Sunny,Snow");
    ok(&[
        "synthgen", "--out", s(&d.join("real")), "--envs", "Cloudy", "--route-length", "60", "--points", "384",
        "--seed", "9", "--scene-seed", "40",
    ]);
    let cfg = d.join("cfg.txt");
    fs::write(&cfg, "epochs = 1\nbatch = 4\nnegatives = 2\nreg_points = 64\nknn = 8\n").unwrap();
    let run = d.join("run");
    ok(&[
        "train", "--virtual", s(&d.join("virt/manifest.csv")), "--real", s(&d.join("real/manifest.csv")), "--config",
        s(&cfg), "--out-dir", s(&run),
    ]);
    for f in ["epoch_001.vprm", "final.vprm", "metrics.csv", "config.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,L_triplet,L_reg,L_Gen,L_Dis,total"));
    ok(&[
        "features", "--manifest", s(&d.join("real/manifest.csv")), "--checkpoint", s(&run.join("final.vprm")),
        "--knn", "8", "--out", s(&d.join("real_desc")),
    ]);
}

#[test]
fn outputs_repeat_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        traverse(&d.join("db"), "Sunny,Rain");
        ok(&["features", "--manifest", s(&d.join("db/manifest.csv")), "--out", s(&d.join("desc"))]);
        let m = read_manifest(&d.join("db/manifest.csv")).unwrap();
        let (p, q) = (m.cloud_path(&m.rows[0]), m.cloud_path(&m.rows[7]));
        ok(&[
            "register", "--source", s(&p), "--target", s(&q), "--out", s(&d.join("pose.txt")),
            "--dump-correspondences", s(&d.join("corr.csv")),
        ]);
    }
    for f in ["db/manifest.csv", "db/clouds/000003.vpc", "db/poses/000003.txt", "desc.vdsc", "desc.csv", "pose.txt", "corr.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    traverse(&d.join("db"), "Sunny");
    let man = d.join("db/manifest.csv");
    ok(&["--threads", "1", "features", "--manifest", s(&man), "--out", s(&d.join("one"))]);
    ok(&["--threads", "3", "features", "--manifest", s(&man), "--out", s(&d.join("three"))]);
    assert_eq!(fs::read(d.join("one.vdsc")).unwrap(), fs::read(d.join("three.vdsc")).unwrap());
}
