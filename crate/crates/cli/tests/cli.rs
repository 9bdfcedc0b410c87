use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn medpt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medpt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

const SMALL_MODEL: &[&str] = &[
    "--set", "k=4", "--set", "sample_sizes=16,8", "--set", "c_k=4", "--set", "c_v=4", "--set", "c_h=4", "--set",
    "heads=2", "--set", "head_widths=8",
];

#[test]
fn gen_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "# tiny set\nper_class = 3\nn_points = 32\nformat = text\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = medpt(tmp.path(), &["gen", "--config", cfg, "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let files = entries(&tmp.path().join("a"));
    assert_eq!(files.len(), 7);
    assert!(files.contains(&"manifest.csv".to_string()));
    for f in files {
        assert_eq!(fs::read(tmp.path().join("a").join(&f)).unwrap(), fs::read(tmp.path().join("b").join(&f)).unwrap());
    }
    let o = medpt(tmp.path(), &["gen", "--config", cfg, "--seed", "8", "--out", "c"]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(tmp.path().join("a/sample_00000.txt")).unwrap(),
        fs::read(tmp.path().join("c/sample_00000.txt")).unwrap()
    );
}

fn bench_flops(dir: &Path, mode: &str) -> Vec<(usize, u64)> {
    let o = medpt(dir, &["bench", "--n-list", "256,512", "--mode", mode, "--set", "runs=1", "--out", "bench"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,mode,flops,wall_ms"));
    let rows: Vec<(usize, u64)> = lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            assert_eq!(c[1], mode);
            assert!(c[3].parse::<f64>().unwrap() >= 0.0);
            (c[0].parse().unwrap(), c[2].parse().unwrap())
        })
        .collect();
    assert_eq!(fs::read_to_string(dir.join("bench/bench.csv")).unwrap(), text);
    rows
}

#[test]
fn bench_counts_scale_linearly_for_lambda_and_quadratically_for_softmax() {
    let tmp = tempfile::tempdir().unwrap();
    let lambda = bench_flops(tmp.path(), "lambda");
    assert_eq!(lambda.iter().map(|r| r.0).collect::<Vec<_>>(), vec![256, 512]);
    assert_eq!(lambda[1].1 as f64 / lambda[0].1 as f64, 2.0);
    let naive = bench_flops(tmp.path(), "naive");
    assert_eq!(naive[1].1 as f64 / naive[0].1 as f64, 4.0);
}

#[test]
fn gradcheck_on_the_tiny_model_passes() {
    let tmp = tempfile::tempdir().unwrap();
    for task in ["classify", "segment"] {
        let out = format!("gc-{task}");
        let o = medpt(tmp.path(), &["gradcheck", "--set", &format!("task={task}"), "--out", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
        let report = fs::read_to_string(tmp.path().join(&out).join("gradcheck.txt")).unwrap();
        let err: f64 = report
            .lines()
            .find_map(|l| l.strip_prefix("max_rel_error = "))
            .unwrap()
            .parse()
            .unwrap();
        assert!(err < 1e-5, "{report}");
    }
}

#[test]
fn train_then_eval_stays_inside_out() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path().join("work");
    fs::create_dir(&work).unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "per_class = 4\nn_points = 32\nepochs = 2\nbatch_size = 4\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    let mut args = vec!["train", "--config", cfg, "--seed", "3", "--out", "run"];
    args.extend_from_slice(SMALL_MODEL);
    let o = medpt(&work, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(entries(&work), vec!["run"]);
    assert_eq!(entries(&work.join("run")), vec!["log.csv", "model.ckpt", "run.cfg"]);
    let log = fs::read_to_string(work.join("run/log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,lr,train_loss,test_acc,test_f1"));
    assert_eq!(log.lines().count(), 3);

    // same seed, same log
    let o = medpt(&work, &args.iter().map(|a| if *a == "run" { "again" } else { a }).collect::<Vec<_>>());
    assert!(o.status.success());
    assert_eq!(fs::read(work.join("run/log.csv")).unwrap(), fs::read(work.join("again/log.csv")).unwrap());

    let o = medpt(
        &work,
        &[
            "eval", "--config", "run/run.cfg", "--checkpoint", "run/model.ckpt", "--set", "per_class=4", "--set",
            "n_points=32", "--seed", "3", "--out", "ev",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(work.join("ev/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("split,samples,accuracy,f1,iou,dsc"));
    assert!(lines.next().unwrap().starts_with("test,2,"));
    assert!(lines.next().unwrap().starts_with("train,6,"));
}

#[test]
fn segmentation_train_logs_iou_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train", "--set", "task=segment", "--set", "count=4", "--set", "n_points=32", "--set", "epochs=1", "--out", "seg",
    ];
    args.extend_from_slice(&SMALL_MODEL[2..]);
    let o = medpt(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(tmp.path().join("seg/log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,lr,train_loss,test_acc,test_f1,test_iou,test_dsc"));
}

fn assert_error(o: &Output, exit: i32, code: &str, needle: &str) {
    assert_eq!(o.status.code(), Some(exit), "{}", stderr(o));
    let err = stderr(o);
    let line = err.lines().find(|l| l.starts_with("ERROR:")).expect("an ERROR line");
    assert!(line.starts_with(&format!("ERROR:{code}:")), "{line}");
    assert!(line.contains(needle), "{line}");
}

#[test]
fn usage_errors_exit_1_and_name_the_token() {
    let tmp = tempfile::tempdir().unwrap();
    assert_error(&medpt(tmp.path(), &["train", "--bogus-flag"]), 1, "usage", "--bogus-flag");
    assert_error(&medpt(tmp.path(), &["frobnicate"]), 1, "usage", "frobnicate");
    assert_error(&medpt(tmp.path(), &["gen", "--set", "colour=red", "--out", "o"]), 1, "config", "colour");
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nepocs = 3\n").unwrap();
    assert_error(&medpt(tmp.path(), &["gen", "--config", cfg.to_str().unwrap(), "--out", "o"]), 1, "config", "epocs");
    assert_error(&medpt(tmp.path(), &["bench", "--mode", "quadratic"]), 1, "usage", "quadratic");
    assert_error(&medpt(tmp.path(), &["gen"]), 1, "usage", "--out");
    assert_eq!(entries(tmp.path()), vec!["bad.cfg"]);
}

#[test]
fn runtime_failures_exit_2_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    assert_error(&medpt(tmp.path(), &["gen", "--config", "nowhere.cfg", "--out", "o"]), 2, "io", "nowhere.cfg");
    assert_error(
        &medpt(tmp.path(), &["eval", "--checkpoint", "absent.ckpt", "--set", "per_class=2", "--set", "n_points=32", "--out", "o"]),
        2,
        "io",
        "absent.ckpt",
    );
    fs::write(tmp.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_error(
        &medpt(tmp.path(), &["eval", "--checkpoint", "junk.ckpt", "--set", "per_class=2", "--set", "n_points=32", "--out", "o"]),
        2,
        "format",
        "magic",
    );
}

#[test]
fn help_exits_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = medpt(tmp.path(), &["--help"]);
    assert!(o.status.success());
    for sub in ["gen", "train", "eval", "bench", "gradcheck"] {
        assert!(stdout(&o).contains(sub));
    }
}
