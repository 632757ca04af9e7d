use std::path::Path;
use std::process::{Command, Output};

fn csal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csal")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = csal(&["gen-data", "--count", "10", "--seed", "7", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 10);
    assert_eq!(std::fs::read_dir(out.join("masks")).unwrap().count(), 10);
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 11);
    // the resolved configuration is printed before anything else
    assert!(stdout(&o).starts_with("# csal gen-data"));
    assert!(stdout(&o).contains("seed=7\n"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let args = ["gen-data", "--count", "3", "--out", p(&out)];
    assert!(csal(&args).status.success());
    assert_eq!(csal(&args).status.code(), Some(1));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(csal(&forced).status.success());
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(csal(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(csal(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(csal(&["gen-data", "--count", "0", "--out", "/tmp/unused-csal"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = csal(&["weightmap", "--mask", p(&dir.path().join("missing.pgm")), "--out", p(&dir.path().join("w"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn version_reports_checkpoint_format() {
    let o = csal(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("checkpoint format 1"));
}

#[test]
fn weightmap_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mask = dir.path().join("m.pgm");
    let mut bytes = b"P5\n12 10\n255\n".to_vec();
    bytes.extend((0..120).map(|i| if (i % 12) < 5 { 255u8 } else { 0 }));
    std::fs::write(&mask, bytes).unwrap();
    let out = dir.path().join("w");
    let o = csal(&["weightmap", "--mask", p(&mask), "--k", "5", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("weight.csv")).unwrap();
    let values: Vec<f64> = csv.lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap())).collect();
    assert_eq!(values.len(), 120);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(0.0, f64::max);
    assert_eq!(min, 1.0);
    assert!(max > 1.0 && max <= 6.0);
    let img = std::fs::read(out.join("weight.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n12 10\n255\n"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = csal(&["grad-check", "--seed", "3", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# dataset\ncount = 4\nseed=11\ntest_count=2\n").unwrap();
    let out = dir.path().join("d");
    let o = csal(&["gen-data", "--config", p(&cfg), "--seed", "12", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("count=4\n") && s.contains("seed=12\n") && s.contains("test-count=2\n"), "{s}");
    // the printed configuration reproduces the run on its own
    let resolved = std::fs::read_to_string(out.join("config.txt")).unwrap();
    let replay_cfg = dir.path().join("replay.cfg");
    std::fs::write(&replay_cfg, resolved.replace(p(&out), p(&dir.path().join("e")))).unwrap();
    let o = csal(&["gen-data", "--config", p(&replay_cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for id in ["000000", "000003"] {
        let a = std::fs::read(out.join(format!("images/{id}.ppm"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("e/images/{id}.ppm"))).unwrap();
        assert_eq!(a, b);
    }
    std::fs::write(&cfg, "nonsense-key=1\n").unwrap();
    assert_eq!(csal(&["gen-data", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(1));
}

#[test]
fn tiny_train_infer_eval_attn() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let run = dir.path().join("r");
    let gen = ["gen-data", "--count", "12", "--test-count", "4", "--base-size", "18", "--crop-size", "16"];
    let mut args = gen.to_vec();
    args.extend(["--out", p(&data)]);
    assert!(csal(&args).status.success());
    let o = csal(&[
        "train", "--data", p(&data), "--model", "tiny", "--epochs", "2", "--batch-size", "4",
        "--base-size", "18", "--lr", "1e-4", "--ablation", "B+C+H", "--out", p(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["history.csv", "losses.csv", "best.cskt", "last.cskt", "config.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let preds = dir.path().join("p");
    let o = csal(&["infer", "--checkpoint", p(&run.join("last.cskt")), "--data", p(&data), "--out", p(&preds)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ev = dir.path().join("e");
    let o = csal(&["eval", "--pred", p(&preds), "--data", p(&data), "--out", p(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(ev.join("report.txt")).unwrap();
    assert!(report.contains("samples=4"));
    // the last epoch's metrics are those of the last checkpoint
    let last = history.lines().last().unwrap().split(',').collect::<Vec<_>>();
    assert!(report.contains(&format!("max_fbeta={}\n", last[2])), "{report} vs {last:?}");
    assert!(report.contains(&format!("mae={}\n", last[3])));

    let att = dir.path().join("a");
    let o = csal(&["attn", "--checkpoint", p(&run.join("best.cskt")), "--data", p(&data), "--count", "2", "--out", p(&att)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(att.join("000008_att1.pgm").exists() && att.join("000008_att3.pgm").exists());

    // attention maps need a network trained with attention
    let plain = dir.path().join("r2");
    let o = csal(&[
        "train", "--data", p(&data), "--model", "tiny", "--epochs", "1", "--base-size", "18",
        "--ablation", "B", "--lr", "0", "--out", p(&plain),
    ]);
    assert!(o.status.success());
    let o = csal(&["attn", "--checkpoint", p(&plain.join("last.cskt")), "--data", p(&data), "--out", p(&dir.path().join("a2"))]);
    assert_eq!(o.status.code(), Some(1));
}
