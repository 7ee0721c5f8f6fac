use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sfg_swinsr::degrade::synthetic_scene;
use sfg_swinsr::io::{read_image, write_ppm};
use sfg_swinsr::numerics::Tensor;

fn sfgsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfgsr")).args(args).env("SFG_THREADS", "2").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn hr_dir(root: &Path) -> std::path::PathBuf {
    let dir = root.join("hr");
    fs::create_dir_all(&dir).unwrap();
    for i in 0..2 {
        write_ppm(&dir.join(format!("img{i}.ppm")), &synthetic_scene::<f64>(3, 16, 16, i)).unwrap();
    }
    dir
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&sfgsr(&["frobnicate"])), 1);
    assert_eq!(code(&sfgsr(&["degrade", "--input", "x"])), 1);
    assert_eq!(code(&sfgsr(&["--help"])), 0);
    assert_eq!(code(&sfgsr(&["report", "--preset", "huge"])), 1);
    assert_eq!(code(&sfgsr(&["gradcheck", "--scope", "nothing"])), 1);
}

#[test]
fn degrade_is_deterministic_and_reports_bad_files() {
    let root = tempfile::tempdir().unwrap();
    let hr = hr_dir(root.path());
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for out in [&a, &b] {
        let o = sfgsr(&["degrade", "--input", p(&hr), "--output", p(out), "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for i in 0..2 {
        let name = format!("img{i}.ppm");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        let lr: Tensor<f64> = read_image(&a.join(&name)).unwrap();
        assert_eq!(lr.dims(), &[3, 8, 8]);
        let meta = fs::read_to_string(a.join(format!("img{i}.meta"))).unwrap();
        assert!(meta.contains(&format!("index = {i}")) && meta.contains("seed = 7"), "{meta}");
    }

    fs::write(hr.join("broken.ppm"), b"P6\n16 16\n255\n\x00\x01").unwrap();
    let o = sfgsr(&["degrade", "--input", p(&hr), "--output", p(&root.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.ppm"));
}

#[test]
fn init_sr_metrics_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let hr = hr_dir(root.path());
    let lr = root.path().join("lr");
    assert_eq!(code(&sfgsr(&["degrade", "--input", p(&hr), "--output", p(&lr)])), 0);
    let ck = root.path().join("tiny.sfgc");
    assert_eq!(code(&sfgsr(&["init", "--output", p(&ck)])), 0);

    let (s1, s2) = (root.path().join("sr1"), root.path().join("sr2"));
    for out in [&s1, &s2] {
        let o = sfgsr(&["sr", "--checkpoint", p(&ck), "--input", p(&lr), "--output", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let up: Tensor<f64> = read_image(&s1.join("img0.ppm")).unwrap();
    assert_eq!(up.dims(), &[3, 16, 16]);
    assert_eq!(fs::read(s1.join("img1.ppm")).unwrap(), fs::read(s2.join("img1.ppm")).unwrap());

    let csv = root.path().join("m.csv");
    let o = sfgsr(&["metrics", "--sr", p(&s1), "--reference", p(&s2), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().any(|l| l.starts_with("mean") && l.contains("inf")));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("img0.ppm,inf,1.0,0.0"), "{text}");

    let o = sfgsr(&["metrics", "--sr", p(&s1), "--reference", p(&hr)]);
    assert_eq!(code(&o), 0);
    fs::remove_file(s2.join("img1.ppm")).unwrap();
    assert_eq!(code(&sfgsr(&["metrics", "--sr", p(&s1), "--reference", p(&s2)])), 2);
}

#[test]
fn sr_rejects_missing_checkpoint_and_band_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let hr = hr_dir(root.path());
    let out = root.path().join("out");
    assert_eq!(code(&sfgsr(&["sr", "--checkpoint", "/nonexistent.sfgc", "--input", p(&hr), "--output", p(&out)])), 1);

    let ck = root.path().join("gray.sfgc");
    let cfg = root.path().join("gray.conf");
    let mut text = sfg_swinsr::model::ModelConfig::tiny(sfg_swinsr::model::FfnKind::Sfg).to_text();
    text = text.replace("bands = 3", "bands = 1");
    fs::write(&cfg, text).unwrap();
    assert_eq!(code(&sfgsr(&["init", "--config", p(&cfg), "--output", p(&ck)])), 0);
    assert_eq!(code(&sfgsr(&["sr", "--checkpoint", p(&ck), "--input", p(&hr), "--output", p(&out)])), 1);
}

#[test]
fn report_prints_counts() {
    let o = sfgsr(&["report", "--preset", "full"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("parameters: 13504571"), "{s}");
    let o = sfgsr(&["report", "--preset", "full", "--ffn", "baseline"]);
    assert!(stdout(&o).contains("parameters: 11869991"));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = sfgsr(&["gradcheck", "--scope", "ops", "--seeds", "1"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let bad = sfgsr(&["gradcheck", "--scope", "ops", "--seeds", "1", "--fault", "gelu"]);
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).lines().any(|l| l.starts_with("FAIL") && l.contains("gelu")));
}

#[test]
fn train_and_resume_reproduce_history() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let base = ["--steps", "6", "--batch-size", "2", "--checkpoint-every", "3"];
    let mut args = vec!["train", "--output", p(&a)];
    args.extend(base);
    assert_eq!(code(&sfgsr(&args)), 0);
    let full = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(full.lines().count(), 7);
    assert!(a.join("checkpoint_000003.sfgc").is_file());

    let ck = a.join("checkpoint_000003.sfgc");
    let o = sfgsr(&["train", "--output", p(&b), "--resume", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tail = fs::read_to_string(b.join("history.csv")).unwrap();
    let full_lines: Vec<&str> = full.lines().collect();
    let tail_lines: Vec<&str> = tail.lines().collect();
    assert_eq!(tail_lines[0], full_lines[0]);
    assert_eq!(&tail_lines[1..], &full_lines[4..]);
    assert_eq!(fs::read(a.join("model.sfgc")).unwrap(), fs::read(b.join("model.sfgc")).unwrap());
}

#[test]
fn ablation_writes_five_rows() {
    let root = tempfile::tempdir().unwrap();
    let o = sfgsr(&["ablation", "--output", p(root.path()), "--steps", "3"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(root.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.contains("SFG+l1/ssim,"));
}
