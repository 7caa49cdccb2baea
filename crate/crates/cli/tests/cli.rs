use std::path::Path;
use std::process::{Command, Output};

use catagg::tensor::read_tensor_file;

const TINY: &[&str] = &[
    "--set", "grid.h=8", "--set", "grid.w=8", "--set", "cats.p=8", "--set", "cats.n_heads=2",
    "--set", "train.lr_aggregator=3e-4", "--set", "train.lr_backbone=3e-5",
];

fn catagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catagg")).args(args).output().expect("spawn catagg")
}

fn ok(args: &[&str]) -> String {
    let o = catagg(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    catagg(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, pairs: usize, seed: u64) -> String {
    ok(&[&["gen-data", "--out", s(dir), "--pairs", &pairs.to_string(), "--seed", &seed.to_string()], TINY].concat());
    s(&dir.join("manifest.txt")).to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["gradcheck", "--ops", "foo"]), 2);
    assert_eq!(code(&["gradcheck", "--ops", "softmax", "--dtype", "f32"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["bench", "--set", "nope=1"]), 2);
    assert_eq!(code(&["bench", "--model", "vgg"]), 2);
    assert_eq!(code(&["bench", "--mode", "sideways"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let m = gen(dir.path(), 1, 0);
    assert_eq!(code(&["eval", "--data", &m]), 2);
    assert_eq!(code(&["eval", "--data", &m, "--checkpoint", s(&dir.path().join("missing.ckpt"))]), 2);
    assert_eq!(code(&["infer", "--data", &m, "--out", s(dir.path())]), 2);
    // a corrupt checkpoint is a load failure, not a usage error
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"junk").unwrap();
    assert_eq!(code(&["eval", "--data", &m, "--checkpoint", s(&bad)]), 1);
    // unwritable output location
    assert_eq!(code(&["gen-data", "--out", "/proc/catagg-test/x", "--pairs", "1"]), 1);
}

#[test]
fn gradcheck_single_op_passes() {
    let out = ok(&["gradcheck", "--ops", "softmax"]);
    assert!(out.contains("softmax") && out.contains("pass"));
    assert!(out.contains("gradcheck: 0 failed"));
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), 2, 5);
    gen(b.path(), 2, 5);
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
    let cfg = std::fs::read_to_string(a.path().join("config.txt")).unwrap();
    assert!(cfg.contains("grid.h = 8") && cfg.contains("seed = 5"));
}

#[test]
fn bench_reports_counts_and_echoes_config() {
    let out = ok(&[&["bench", "--model", "cats", "--mode", "serial"], TINY].concat());
    assert!(out.contains("# model = cats\n# mode = serial\n"));
    let get = |key: &str| -> usize {
        out.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
    };
    let modules: usize = out
        .lines()
        .filter_map(|l| l.strip_prefix("params "))
        .filter(|l| !l.starts_with("total") && !l.starts_with("aggregator"))
        .map(|l| l.rsplit(' ').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(modules, get("params_total"));
    assert!(get("params_aggregator") < get("params_total"));
    assert!(out.contains("forward_peak_bytes") && out.contains("backward_seconds"));
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(&dir.path().join("data"), 2, 11);
    let ck = dir.path().join("m.ckpt");
    let log = ok(&[&["train", "--data", &data, "--out", s(&ck), "--set", "train.steps=3", "--log-every", "1"], TINY].concat());
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 3);

    let report_path = dir.path().join("report.txt");
    let report = ok(&["eval", "--checkpoint", s(&ck), "--data", &data, "--out", s(&report_path)]);
    assert_eq!(std::fs::read_to_string(&report_path).unwrap(), report);
    assert!(report.contains("# train.steps = 3"));
    assert_eq!(report, ok(&["eval", "--checkpoint", s(&ck), "--data", &data, "--threads", "2"]).replace("# threads = 2", "# threads = 1"));
    let summary = report.lines().find(|l| l.starts_with("summary")).unwrap();
    assert!(summary.contains("wta_pck@0.1=") && summary.contains("wta_aepe="));

    let out = dir.path().join("pred");
    ok(&["infer", "--checkpoint", s(&ck), "--data", &data, "--out", s(&out), "--keypoints"]);
    let field = |line: &str, key: &str| -> f64 {
        line.split_whitespace().find_map(|t| t.strip_prefix(key)).unwrap().parse().unwrap()
    };
    for i in 0..2 {
        let row = report.lines().find(|l| l.starts_with(&format!("pair={i} "))).unwrap();
        let pred = read_tensor_file(out.join(format!("pair{i:04}_flow.catt"))).unwrap().into_f64();
        let gt = read_tensor_file(dir.path().join(format!("data/pair{i:04}_flow.catt"))).unwrap().into_f64();
        // masked AEPE: cells whose GT target lies on the grid
        let (mut sum, mut n) = (0.0, 0);
        for c in 0..64 {
            let (u, v) = ((c % 8) as f64, (c / 8) as f64);
            let (gx, gy) = (gt.data()[2 * c], gt.data()[2 * c + 1]);
            if (0.0..=7.0).contains(&(u + gx)) && (0.0..=7.0).contains(&(v + gy)) {
                sum += ((pred.data()[2 * c] - gx).powi(2) + (pred.data()[2 * c + 1] - gy).powi(2)).sqrt();
                n += 1;
            }
        }
        assert!((sum / n as f64 - field(row, "aepe=")).abs() < 1e-6);
        let pts = |tag: &str| -> Vec<(f64, f64)> {
            let text = std::fs::read_to_string(out.join(format!("pair{i:04}_kp_{tag}.txt"))).unwrap();
            text.lines().skip(1).map(|l| {
                let v: Vec<f64> = l.split_whitespace().map(|x| x.parse().unwrap()).collect();
                (v[0], v[1])
            }).collect()
        };
        let gt_pts = pts("gt");
        for (tag, prefix) in [("pred", "pck@"), ("wta", "wta_pck@")] {
            let p = pts(tag);
            let mut last = 0.0;
            for a in [0.05, 0.1, 0.15] {
                let hits = p.iter().zip(&gt_pts).filter(|(x, y)| ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt() <= a * 128.0).count();
                let pck = hits as f64 / gt_pts.len() as f64;
                assert!((pck - field(row, &format!("{prefix}{a}="))).abs() < 1e-6);
                assert!(pck >= last);
                last = pck;
            }
        }
    }
}

#[test]
fn resume_matches_straight_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(&dir.path().join("data"), 2, 21);
    let (a, b, c) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"), dir.path().join("c.ckpt"));
    let base = [&["train", "--data", &data, "--set", "train.steps=4", "--set", "train.batch_size=2"], TINY].concat();
    ok(&[&base[..], &["--out", s(&a), "--save-every", "2"]].concat());
    ok(&[&base[..], &["--out", s(&b)]].concat());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let mid = dir.path().join("a.step2.ckpt");
    ok(&["train", "--data", &data, "--resume", s(&mid), "--out", s(&c)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    // anything but the step count is fixed by the checkpoint
    assert_eq!(code(&["train", "--data", &data, "--resume", s(&mid), "--out", s(&c), "--set", "seed=3"]), 2);
}
