use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_CASE: &str = "nx = 60\nny = 24\n";
const SMALL_EXP: &str = r#"
case_dir = "case"
truth_dir = "truth"
obs_dir = "obs"
experiment = "FDA"

[event]
duration_h = 6.0
spinup_h = 1.0
hydrograph = [[0.0, 150.0], [3.0, 600.0], [6.0, 300.0]]

[plan]
s1_times_h = [2.5, 4.0]
eval_times_h = [4.0, 5.0]
swot_first_h = 1.5
swot_interval_h = 2.0

[enkf]
members = 6
cycle_h = 2.0
"#;

fn osse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osse")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Build case, truth and observations for the small scenario.
fn prepare(root: &Path) -> PathBuf {
    fs::write(root.join("case.toml"), SMALL_CASE).unwrap();
    fs::write(root.join("exp.toml"), SMALL_EXP).unwrap();
    let cfg = root.join("exp.toml");
    ok(osse(&["case", "build", "--spec", s(&root.join("case.toml")), "--out", s(&root.join("case"))]));
    ok(osse(&["truth", "run", "--config", s(&cfg)]));
    ok(osse(&["obs", "generate", "--config", s(&cfg)]));
    cfg
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap());
    }
    out
}

#[test]
fn experiment_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = prepare(root);
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    ok(osse(&["exp", "run", "--config", s(&cfg), "--threads", "1", "--out", s(&a)]));
    ok(osse(&["exp", "run", "--config", s(&cfg), "--threads", "1", "--out", s(&b)]));
    ok(osse(&["exp", "run", "--config", s(&cfg), "--threads", "3", "--out", s(&c)]));
    let ta = tree(&a);
    assert!(ta.contains_key("controls.csv") && ta.contains_key("analysis_0.csv"));
    assert!(ta.contains_key("extent_14400.asc"));
    assert_eq!(ta, tree(&b));
    assert_eq!(ta, tree(&c));
}

#[test]
fn report_scores_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = prepare(root);
    let runs = root.join("runs");
    for name in ["OL", "IDA"] {
        ok(osse(&["exp", "run", "--config", s(&cfg), "--name", name, "--out", s(&runs.join(name))]));
    }
    // the truth directory doubles as a perfect experiment; copy its extents
    // under the run names so it is scored at the same times
    let perfect = root.join("perfect");
    fs::create_dir_all(&perfect).unwrap();
    fs::copy(root.join("truth/stations_wse.csv"), perfect.join("stations_wse.csv")).unwrap();
    for t in ["14400", "18000"] {
        fs::copy(root.join(format!("truth/h_{t}.asc")), perfect.join(format!("h_{t}.asc"))).unwrap();
    }
    let out = root.join("report");
    ok(osse(&[
        "eval", "report", "--runs", s(&runs.join("OL")), s(&runs.join("IDA")), s(&perfect),
        "--truth", s(&root.join("truth")), "--out", s(&out),
    ]));
    let rmse = fs::read_to_string(out.join("scores_rmse.csv")).unwrap();
    let lines: Vec<&str> = rmse.lines().collect();
    assert_eq!(lines.len(), 4, "{rmse}");
    let perfect_row = lines.iter().find(|l| l.starts_with("perfect,")).unwrap();
    assert!(perfect_row.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{perfect_row}");
    let csi = fs::read_to_string(out.join("scores_csi.csv")).unwrap();
    assert_eq!(csi.lines().count(), 1 + 3 * 2, "{csi}");
    for l in csi.lines().filter(|l| l.starts_with("perfect,")) {
        assert!(l.ends_with(",1"), "{l}");
    }
    assert!(out.join("contingency_IDA_14400.asc").exists());
    let plot = fs::read_to_string(out.join("plotdata_stations_upstream.csv"));
    let plot = plot.or_else(|_| {
        let f = fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .find(|e| e.file_name().to_string_lossy().starts_with("plotdata_stations_"))
            .unwrap();
        fs::read_to_string(f.path())
    });
    assert!(plot.unwrap().starts_with("t,experiment,wse,truth,anomaly"));

    // a missing run is listed and the exit status is nonzero
    let res = osse(&[
        "eval", "report", "--runs", s(&runs.join("OL")), s(&runs.join("RSDA")),
        "--truth", s(&root.join("truth")), "--out", s(&out),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("RSDA"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[enkf]\nmembrs = 3\n").unwrap();
    let out = osse(&["exp", "run", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("membrs"));
    let out = osse(&["exp", "run", "--config", s(&dir.path().join("none.toml")), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(&cfg, "experiment = \"XDA\"\n").unwrap();
    let out = osse(&["truth", "run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let out = ok(osse(&["selftest", "oracle"]));
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{out}");
}
