use std::path::Path;
use std::process::{Command, Output};

fn modfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = modfuse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "gen.n_samples = 600\ngen.labels = 4\ngen.vocab_size = 60\ngen.image_dim = 8\nmodel.embed_dim = 6\nmodel.hidden_dims = 8\nmodel.output_dim = 6\ntrain.epochs = 2\ntrain.batch_size = 32\n";

#[test]
fn generate_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ds"), dir.path().join("b.ds"));
    ok(&["generate", "--n", "1000", "--seed", "7", "--out", s(&a)]);
    ok(&["generate", "--n", "1000", "--seed", "7", "--out", s(&b)]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 1001);
    let c = dir.path().join("c.ds");
    ok(&["generate", "--n", "1000", "--seed", "8", "--out", s(&c)]);
    assert_ne!(bytes, std::fs::read(&c).unwrap());
}

#[test]
fn usage_errors_exit_nonzero() {
    for args in [
        &["frobnicate"][..],
        &["generate", "--out", "x.ds", "--bogus"],
        &["train", "--data", "x.ds"],
        &[],
    ] {
        let out = modfuse(args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage"), "{args:?}: {err}");
    }
}

#[test]
fn file_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.ds");
    let out = modfuse(&[
        "evaluate",
        "--checkpoint",
        s(&missing),
        "--data",
        s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.ds"));
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "gen.n_samples = 10\ngen.flavour = sour\n").unwrap();
    let out = modfuse(&["generate", "--config", s(&cfg), "--out", s(&missing)]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("bad.conf:2") && err.contains("gen.flavour"),
        "{err}"
    );
}

#[test]
fn pipeline_with_concat_and_attention() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("small.conf"), SMALL).unwrap();
    let cfg = p("small.conf");
    ok(&["generate", "--config", s(&cfg), "--out", s(&p("d.ds"))]);
    let split = ok(&[
        "split",
        "--config",
        s(&cfg),
        "--data",
        s(&p("d.ds")),
        "--out-prefix",
        s(&p("d")),
    ]);
    assert_eq!(split.lines().count(), 3);
    let total: usize = split
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 600);

    let train = |merger: &str, out: &str, extra: &[&str]| {
        let data = p("d.train.ds");
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data)];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--merger", merger, "--lambda", "0", "--out"]);
        let out_path = p(out);
        args.push(s(&out_path));
        ok(&args)
    };
    let log = train("concat", "concat.ckpt", &["--val", s(&p("d.val.ds"))]);
    assert!(log.starts_with("epoch=1 step=15 "), "{log}");
    assert!(p("concat.ckpt.log").exists());
    let report = ok(&[
        "evaluate",
        "--checkpoint",
        s(&p("concat.ckpt")),
        "--data",
        s(&p("d.test.ds")),
    ]);
    let line = report.lines().last().unwrap();
    assert!(line.starts_with("eval micro_f1="), "{line}");
    assert!(!report.contains("p_txt") && !report.contains("collapse_fraction"));

    // no --val: a stratified 10% holdout of the training file
    train("attention", "attn.ckpt", &["--log", s(&p("attn.log"))]);
    let report = ok(&[
        "evaluate",
        "--checkpoint",
        s(&p("attn.ckpt")),
        "--data",
        s(&p("d.test.ds")),
    ]);
    assert!(report.contains("collapse_fraction=") && report.contains("p_txt_median="));
    let analysis = ok(&[
        "report",
        "--checkpoint",
        s(&p("attn.ckpt")),
        "--data",
        s(&p("d.test.ds")),
        "--bins",
        "4",
    ]);
    assert!(analysis.starts_with("attention n="));
    assert!(analysis.contains("bin_lo\tbin_hi\tcount"));

    let out = modfuse(&[
        "report",
        "--checkpoint",
        s(&p("concat.ckpt")),
        "--data",
        s(&p("d.test.ds")),
    ]);
    assert!(!out.status.success());

    let out = modfuse(&[
        "evaluate",
        "--checkpoint",
        s(&p("attn.ckpt")),
        "--data",
        s(&p("d.test.ds")),
        "--threshold",
        "1.5",
    ]);
    assert!(!out.status.success());
}

#[test]
fn single_value_grid_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.conf");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("d.ds");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let table = ok(&[
        "sweep",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--grid",
        "0",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].starts_with("lambda\tmicro_f1"));
    assert!(lines[1].starts_with("0.0\t"));
    assert_eq!(lines[2], "selected lambda=0.0");
}
