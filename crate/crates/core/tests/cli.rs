use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
m = 2

[data]
source = "simulate"
n = 200
effect = { form = "subgroup", tau = 3.0, moderator = 1 }

[data.missingness]
column = "y"
rate = 0.2
mechanism = "mcar"

[treatment]
column = "z"
mode = "binary_median"

[mice]
n_iter = 3
forest = { n_trees = 20 }

[bart]
n_trees = 20
n_burn = 50
n_keep = 100

[propensity]
n_trees = 30

[[effects.cate]]
moderator = "x1"
binning = { binning = "threshold", threshold = 0.0 }
"#;

fn bartcause(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bartcause")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().to_string()
}

fn ok(o: Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stages_reproduce_the_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let staged = tmp.path().join("staged");
    let s = staged.to_str().unwrap();
    for stage in ["simulate", "impute", "fit", "support", "report"] {
        ok(bartcause(&[stage, "--config", &cfg, "--out", s]));
    }
    ok(bartcause(&["effects", "ate", "--config", &cfg, "--out", s]));
    ok(bartcause(&["effects", "cate", "--config", &cfg, "--out", s]));
    assert!(staged.join("effects/ate_y.csv").exists());
    let cate = fs::read_to_string(staged.join("effects/cate_y.csv")).unwrap();
    assert!(cate.lines().skip(1).all(|l| l.contains("cate")));

    let full = tmp.path().join("full");
    ok(bartcause(&["run", "--config", &cfg, "--out", full.to_str().unwrap()]));
    for f in ["report.json", "effect_draws_y.csv", "support_y.csv", "data.csv", "truth.json"] {
        assert_eq!(fs::read(staged.join(f)).unwrap(), fs::read(full.join(f)).unwrap(), "{f}");
    }
    assert!(full.join("timings.json").exists());
    assert!(!full.join("curves_y.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &CONFIG.replace("seed = 5\n", ""));
    let out = tmp.path().join("o");
    let o = bartcause(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    ok(bartcause(&["simulate", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();

    let cfg = write_config(tmp.path(), &CONFIG.replace("m = 2", "m = 1"));
    assert_eq!(bartcause(&["run", "--config", &cfg, "--out", o]).status.code(), Some(2));
    assert!(!out.exists());

    let cfg = write_config(tmp.path(), CONFIG);
    assert_eq!(bartcause(&["effects", "adrf", "--config", &cfg, "--out", o]).status.code(), Some(2));
    // fits have not been written yet
    let r = bartcause(&["effects", "ate", "--config", &cfg, "--out", o]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("impute"));

    let file_cfg = r#"
seed = 1
m = 2
[data]
source = "file"
path = "table.csv"
columns = [
  { name = "a", kind = "continuous" },
  { name = "t", kind = "count", role = "treatment" },
  { name = "y", kind = "continuous", role = "outcome" },
]
[treatment]
column = "t"
mode = "binary_median"
"#;
    let cfg = write_config(tmp.path(), file_cfg);
    fs::write(tmp.path().join("table.csv"), "a,t,y\n1,oops,2\n").unwrap();
    let r = bartcause(&["run", "--config", &cfg, "--out", o]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("data"));
    assert!(!out.exists());

    assert_eq!(bartcause(&["run", "--config", "/nonexistent.toml", "--out", o]).status.code(), Some(3));
}
