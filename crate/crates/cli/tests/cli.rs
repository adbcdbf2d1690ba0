use std::path::Path;
use std::process::{Command, Output};

fn expnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expnet")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_then_base_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let hist = dir.path().join("h.csv");
    let o = expnet(&["generate", "--count", "100", "--seed", "7", "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = expnet(&["hist", "--data", p(&data), "--attr", "base", "--out", p(&hist)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut rdr = csv::Reader::from_path(&hist).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["bucket", "count"]);
    let rows: Vec<(u8, usize)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), (2..=9).collect::<Vec<_>>());
    assert_eq!(rows.iter().map(|r| r.1).sum::<usize>(), 100);
}

#[test]
fn continuous_histogram_has_requested_bins() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let hist = dir.path().join("h.csv");
    assert!(expnet(&["generate", "--count", "50", "--seed", "1", "--out", p(&data)]).status.success());
    let o = expnet(&["hist", "--data", p(&data), "--attr", "noise", "--bins", "5", "--out", p(&hist)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&hist).unwrap();
    assert_eq!(text.lines().count(), 6);
    let total: usize = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 50);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let o = expnet(&["gradcheck", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("parameter,max_rel_err,status\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")));
}

#[test]
fn train_without_data_prints_usage() {
    let o = expnet(&["train", "--out", "m.ckpt"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("--data") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_and_subcommand_fail() {
    for args in [&["generate", "--count", "1", "--seed", "1", "--out", "x", "--bogus"][..], &["frobnicate"]] {
        let o = expnet(args);
        assert!(!o.status.success());
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }
}

#[test]
fn missing_file_is_named() {
    let o = expnet(&["hist", "--data", "/no/such/dir/d.bin", "--attr", "base", "--out", "/tmp/unused.csv"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/dir/d.bin"), "{}", stderr(&o));
}

#[test]
fn foreign_file_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"XXXXjunkjunkjunkjunk").unwrap();
    let o = expnet(&["hist", "--data", p(&junk), "--attr", "base", "--out", p(&dir.path().join("h.csv"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn train_eval_predict_sweep_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let model = dir.path().join("m.ckpt");
    let history = dir.path().join("h.csv");
    let report = dir.path().join("r.csv");
    let confusion = dir.path().join("c.csv");
    let sweep = dir.path().join("s.csv");
    let gen = expnet(&[
        "generate", "--count", "40", "--seed", "3", "--out", p(&data), "--image-size", "24", "--font-min", "1.0",
        "--font-max", "1.3",
    ]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let o = expnet(&[
        "train", "--data", p(&data), "--out", p(&model), "--epochs", "2", "--batch", "8", "--seed", "5", "--history",
        p(&history),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let h = std::fs::read_to_string(&history).unwrap();
    assert!(h.starts_with("epoch,train_total,train_base,train_exp,val_total,val_base_acc,val_exp_acc\n"));
    assert_eq!(h.lines().count(), 3);

    let o = expnet(&["eval", "--model", p(&model), "--data", p(&data), "--report", p(&report), "--confusion", p(&confusion)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&report).unwrap().contains("\nall,40,"));
    let c = std::fs::read_to_string(&confusion).unwrap();
    assert_eq!(c.lines().count(), 1 + 64 + 100);

    let o = expnet(&["predict", "--model", p(&model), "--data", p(&data), "--index", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("predicted ") && out.contains("base") && out.contains("exponent"), "{out}");
    assert!(!expnet(&["predict", "--model", p(&model), "--data", p(&data), "--index", "40"]).status.success());

    let o = expnet(&[
        "sweep", "--model", p(&model), "--attr", "blur", "--levels", "0,0.5,1", "--count-per-level", "20", "--seed",
        "9", "--out", p(&sweep),
    ]);
    // 24-pixel canvases cannot host default font scales
    assert!(!o.status.success());
    assert!(stderr(&o).contains("layout"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let model = dir.path().join("m.ckpt");
    let sweep = dir.path().join("s.csv");
    assert!(expnet(&["generate", "--count", "20", "--seed", "3", "--out", p(&data)]).status.success());
    let o = expnet(&["train", "--data", p(&data), "--out", p(&model), "--epochs", "1", "--batch", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = expnet(&[
        "sweep", "--model", p(&model), "--attr", "noise", "--levels", "0,0.1,0.2", "--count-per-level", "10",
        "--seed", "9", "--out", p(&sweep),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = std::fs::read_to_string(&sweep).unwrap();
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "attr,level,base_acc,exp_acc,joint_acc,mean_loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("noise,0.1,"));
}

#[test]
fn resume_requires_optimiser_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    let args = |out: &Path, epochs: &str| {
        vec![
            "train".to_string(), "--data".into(), p(&data).into(), "--out".into(), p(out).into(), "--epochs".into(),
            epochs.into(), "--batch".into(), "8".into(), "--patience".into(), "10".into(),
        ]
    };
    assert!(expnet(&["generate", "--count", "30", "--seed", "2", "--out", p(&data), "--image-size", "32", "--font-min", "1.2", "--font-max", "1.5"]).status.success());
    let a: Vec<String> = args(&first, "1");
    let o = expnet(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut b = args(&second, "2");
    b.extend(["--resume".to_string(), p(&first).to_string()]);
    let o = expnet(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch   2"), "{}", stderr(&o));
}
