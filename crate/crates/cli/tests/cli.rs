use std::path::Path;
use std::process::{Command, Output};

fn nids(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nids")).args(args).output().expect("spawn nids")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .parse()
        .unwrap()
}

#[test]
fn noiseless_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, "sigma = 0\nnum_instances = 6\ntemplates_per_instance = 3\ndim = 16\nscenes = 4\ninstances_per_scene = 3\nepochs = 5\nseed = 4\n").unwrap();
    let data = d.join("data");
    let o = nids(&["gen-synth", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let params = d.join("wa.nids");
    let o = nids(&[
        "train-adapter",
        "--kind",
        "weight",
        "--templates",
        s(&data.join("templates.nids")),
        "--config",
        s(&cfg),
        "--out",
        s(&params),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("wa.nids.loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,loss"));
    assert_eq!(csv.lines().count(), 6);

    let preds = d.join("pred.tsv");
    let o = nids(&[
        "match",
        "--templates",
        s(&data.join("templates.nids")),
        "--queries",
        s(&data.join("queries.nids")),
        "--params",
        s(&params),
        "--config",
        s(&cfg),
        "--out",
        s(&preds),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for (mode, extra) in
        [("box", vec![]), ("mask", vec!["--pred-masks", "queries.nids", "--gt-masks", "gt_masks.nids"])]
    {
        let report = d.join(format!("{mode}.txt"));
        let extra: Vec<String> = extra
            .iter()
            .map(|e| if e.ends_with(".nids") { s(&data.join(e)).to_string() } else { e.to_string() })
            .collect();
        let gt = data.join("gt.tsv");
        let mut args = vec!["eval", "--pred", s(&preds), "--gt", s(&gt), "--mode", mode, "--out", s(&report)];
        args.extend(extra.iter().map(String::as_str));
        let o = nids(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(&report).unwrap();
        assert_eq!(report_value(&text, "ap"), 1.0, "{text}");
    }
}

#[test]
fn refine_and_manifest_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.cfg");
    std::fs::write(&cfg, "dim = 8\nnum_instances = 3\ntemplates_per_instance = 2\nscenes = 2\nepochs = 2\n").unwrap();
    assert!(nids(&["gen-synth", "--config", s(&cfg), "--out", s(d)]).status.success());
    let params = d.join("ca.nids");
    assert!(nids(&[
        "train-adapter",
        "--kind",
        "clip",
        "--templates",
        s(&d.join("templates.nids")),
        "--config",
        s(&cfg),
        "--out",
        s(&params)
    ])
    .status
    .success());
    let refined = d.join("refined.nids");
    let o = nids(&["refine", "--params", s(&params), "--in", s(&d.join("queries.nids")), "--out", s(&refined)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(refined.is_file());

    let manifest = d.join("run.manifest");
    std::fs::write(
        &manifest,
        "templates = templates.nids\nqueries = queries.nids\nparams = ca.nids\nassignment = argmax\n",
    )
    .unwrap();
    let out = d.join("pred.tsv");
    let o = nids(&["run", "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(&out).unwrap();
    assert!(nids(&["run", "--manifest", s(&manifest), "--out", s(&out)]).status.success());
    assert_eq!(std::fs::read(&out).unwrap(), a, "runs are reproducible");
}

#[test]
fn missing_template_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = nids(&[
        "match",
        "--templates",
        s(&d.join("nope.nids")),
        "--queries",
        s(&d.join("q.nids")),
        "--out",
        s(&d.join("o.tsv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_container_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.nids");
    std::fs::write(&bad, b"XXXX\x01\x00\x00\x00").unwrap();
    let o = nids(&["refine", "--params", s(&bad), "--in", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn grad_check_passes() {
    let o = nids(&["grad-check", "--kind", "weight", "--dim", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    let err: f64 = out.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err <= 1e-4, "{out}");
    assert_eq!(nids(&["grad-check", "--kind", "clip", "--dim", "16", "--zero-params"]).status.code(), Some(0));
}

#[test]
fn grad_check_failure_exit_code() {
    // a huge step makes finite differences disagree with the analytic gradient
    let o = nids(&["grad-check", "--kind", "weight", "--dim", "8", "--step", "0.5"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn usage_errors() {
    assert_eq!(nids(&[]).status.code(), Some(1));
    assert_eq!(nids(&["grad-check", "--kind", "bogus"]).status.code(), Some(1));
    assert_eq!(nids(&["--help"]).status.code(), Some(0));
    assert_eq!(nids(&["grad-check", "--kind", "weight", "--dim", "64"]).status.code(), Some(2));
}
