//! Acceptance suite. Runs every criterion, prints one verdict line each and
//! exits non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 3 5`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use bartcause::bart::{fit_bart, posterior_summary, predict_posterior, BartParams};
use bartcause::causal::{
    ate_from, binary_design, dose_design, estimate_cate, recombine, BinaryCounterfactuals, DoseCounterfactuals,
    TreatmentMode, TreatmentSpec, ATE,
};
use bartcause::config::RunConfig;
use bartcause::design::Design;
use bartcause::forest::ForestParams;
use bartcause::pipeline::run_pipeline;
use bartcause::pooling::{fmi_from_riv, pool_rubin};
use bartcause::stats::{self, rng_for};
use bartcause::support::{support_binary, SupportRule};
use bartcause::synth::{gen_binary_dgp, gen_dose_dgp, oracle_adrf, DgpSpec, DoseShape, EffectForm};

type Verdict = (bool, String);

fn config(body: &str, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_toml(body).unwrap();
    cfg.seed = Some(seed);
    cfg.validate().unwrap();
    cfg
}

// 1
fn published_fmi() -> Verdict {
    let rows = [(0.432, 0.304), (0.120, 0.109), (0.154, 0.135), (0.331, 0.251)];
    let worst = rows
        .iter()
        .map(|&(riv, fmi)| (fmi_from_riv(riv, 100) - fmi).abs())
        .fold(0.0, f64::max);
    (worst <= 0.003, format!("largest |fmi - printed| = {worst:.5} over 4 rows"))
}

// 2
fn rubin_identities() -> Verdict {
    let mut rng = rng_for(2, &[]);
    let mut failures = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
    for trial in 0..1000 {
        let m = rng.gen_range(2..30);
        let q: Vec<f64> = (0..m).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..5.0)).collect();
        let p = pool_rubin(&q, &u, 0.95).unwrap();
        let mf = m as f64;
        let w = stats::mean(&u);
        let b = stats::variance(&q);
        let riv = (1.0 + 1.0 / mf) * b / w;
        let df = (mf - 1.0) * (1.0 + 1.0 / riv).powi(2);
        let fmi = (riv + 2.0 / (df + 3.0)) / (1.0 + riv);
        let mut ok = p.total == p.within + (1.0 + 1.0 / mf) * p.between
            && close(p.within, w)
            && close(p.between, b)
            && close(p.riv, riv)
            && close(p.fmi, fmi)
            && close(p.fmi, fmi_from_riv(p.riv, m));

        let c = rng.gen_range(0.1..10.0);
        let qs: Vec<f64> = q.iter().map(|v| c * v).collect();
        let us: Vec<f64> = u.iter().map(|v| c * c * v).collect();
        let s = pool_rubin(&qs, &us, 0.95).unwrap();
        ok &= close(s.qbar, c * p.qbar) && close(s.se, c * p.se) && close(s.riv, p.riv) && close(s.fmi, p.fmi);
        ok &= close(s.ci.0, c * p.ci.0) && close(s.ci.1, c * p.ci.1);

        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let qp: Vec<f64> = order.iter().map(|&i| q[i]).collect();
        let up: Vec<f64> = order.iter().map(|&i| u[i]).collect();
        ok &= pool_rubin(&qp, &up, 0.95).unwrap() == p;
        if !ok {
            failures.push(trial);
        }
    }
    (failures.is_empty(), format!("{} of 1000 tuples violate an identity", failures.len()))
}

// 3
fn friedman(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

fn friedman_design(n: usize, rng: &mut impl Rng) -> (Design, Vec<f64>, Vec<f64>) {
    let p = 10;
    let x = Array2::from_shape_fn((n, p), |_| rng.gen::<f64>());
    let f: Vec<f64> = x.rows().into_iter().map(|r| friedman(&r.to_vec())).collect();
    let y = f
        .iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + e
        })
        .collect();
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    (Design::new(names, x).unwrap(), f, y)
}

fn bart_recovery() -> Verdict {
    let (mut rmse, mut cover) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let mut rng = rng_for(seed, &[3]);
        let (xtr, _, ytr) = friedman_design(200, &mut rng);
        let (xte, fte, yte) = friedman_design(200, &mut rng);
        let fit = fit_bart(&xtr, &ytr, &BartParams::default().with_seed(seed)).unwrap();
        let s = posterior_summary(&predict_posterior(&fit, &xte).unwrap(), 0.90).unwrap();
        let se: f64 = s.iter().zip(&yte).map(|(p, y)| (p.mean - y).powi(2)).sum();
        rmse.push((se / 200.0).sqrt());
        let hit = s.iter().zip(&fte).filter(|(p, &f)| p.lo <= f && f <= p.hi).count();
        cover.push(hit as f64 / 200.0);
    }
    let (r, c) = (stats::mean(&rmse), stats::mean(&cover));
    (
        r <= 2.0 && c >= 0.80,
        format!("mean test RMSE {r:.3}, mean 90% interval coverage of f {c:.3} over 5 seeds"),
    )
}

// 4
const ATE_RUN: &str = r#"
m = 5
[data]
source = "simulate"
n = 1000
confounding = 1.0
[treatment]
column = "z"
mode = "binary_median"
[bart]
n_trees = 100
n_burn = 200
n_keep = 500
[propensity]
n_trees = 100
"#;

fn ate_recovery() -> Verdict {
    let (mut close, mut covered, mut null_covered) = (0, 0, 0);
    for seed in 1..=20 {
        let cfg = config(&ATE_RUN.replace("confounding", "effect = { form = \"constant\", tau = 3.0 }\nconfounding"), seed);
        let row = run_pipeline(&cfg).unwrap().report.effects[0].clone();
        close += ((row.estimate - 3.0).abs() <= 0.5) as usize;
        covered += (row.ci_low <= 3.0 && 3.0 <= row.ci_high) as usize;

        let cfg = config(&ATE_RUN.replace("confounding", "effect = { form = \"null\" }\nconfounding"), seed);
        let row = run_pipeline(&cfg).unwrap().report.effects[0].clone();
        null_covered += (row.ci_low <= 0.0 && 0.0 <= row.ci_high) as usize;
    }
    (
        close >= 18 && covered >= 17 && null_covered >= 18,
        format!("within 0.5 of 3: {close}/20, CI covers 3: {covered}/20, null CI covers 0: {null_covered}/20"),
    )
}

// 5
const PLATEAU_RUN: &str = r#"
m = 2
[data]
source = "simulate"
n = 1000
effect = { form = "dose", shape = "plateau", rise = 4.0 }
[treatment]
column = "dose"
mode = "continuous"
[bart]
n_trees = 100
n_burn = 200
n_keep = 500
"#;

fn adrf_shape() -> Verdict {
    let (mut shape_ok, mut leap_ok) = (0, 0);
    for seed in 1..=10 {
        let cfg = config(PLATEAU_RUN, seed);
        let out = run_pipeline(&cfg).unwrap();
        let sim = out.truth.as_ref().unwrap();
        let curve = &out.report.curves[0];
        let grid: Vec<f64> = curve.points.iter().map(|p| p.dose).collect();
        let est: Vec<f64> = curve.points.iter().map(|p| p.estimate).collect();
        let at = |a: f64| est[grid.iter().position(|&g| g == a).unwrap()];
        let total = at(80.0) - at(0.0);
        let after = at(80.0) - at(40.0);
        let r = stats::pearson(&est, &oracle_adrf(&sim.spec, &grid));
        shape_ok += (after <= 0.25 * total && r >= 0.9) as usize;

        let leap = |label: &str| {
            out.report
                .contrasts
                .iter()
                .find(|c| c.contrast == label)
                .map(|c| (c.row.ci_low, c.row.ci_high))
                .unwrap()
        };
        let (hi_lo, hi_hi) = leap("leap:37->80");
        let (lo_lo, lo_hi) = leap("leap:0->37");
        leap_ok += (hi_lo <= 0.0 && 0.0 <= hi_hi && !(lo_lo <= 0.0 && 0.0 <= lo_hi)) as usize;
    }
    (
        shape_ok >= 8 && leap_ok >= 8,
        format!("plateau shape recovered: {shape_ok}/10, leap pattern: {leap_ok}/10"),
    )
}

// 6
const MICE_RUN: &str = r#"
m = 20
support = ["relaxed"]
[data]
source = "simulate"
n = 500
[treatment]
column = "z"
mode = "binary_median"
[mice]
n_iter = 5
forest = { n_trees = 50 }
[bart]
n_trees = 50
n_burn = 100
n_keep = 300
[propensity]
n_trees = 50
"#;

const MCAR: &str = r#"
[data.missingness]
column = "y"
rate = 0.3
mechanism = "mcar"
"#;

fn mice_correctness() -> Verdict {
    let (mut mi_err, mut cc_err) = (Vec::new(), Vec::new());
    let (mut covered, mut preserved) = (0, 0);
    for seed in 1..=20 {
        let out = run_pipeline(&config(&format!("{MICE_RUN}{MCAR}"), seed)).unwrap();
        let truth = out.truth.as_ref().unwrap();
        let full = truth.data.require("y").unwrap();
        let masked = out.data.require("y").unwrap();
        let kept = out.stack.datasets.iter().all(|d| {
            let y = d.require("y").unwrap();
            masked
                .observed_rows()
                .iter()
                .all(|&i| y.values[i].to_bits() == full.values[i].to_bits())
        });
        preserved += kept as usize;
        let row = &out.report.effects[0];
        mi_err.push(row.estimate - 3.0);
        covered += (row.ci_low <= 3.0 && 3.0 <= row.ci_high) as usize;

        let complete = run_pipeline(&config(&MICE_RUN.replace("m = 20", "m = 2"), seed)).unwrap();
        cc_err.push(complete.report.effects[0].estimate - 3.0);
    }
    let (mi_bias, cc_bias) = (stats::mean(&mi_err).abs(), stats::mean(&cc_err).abs());
    (
        mi_bias <= 1.5 * cc_bias && covered >= 17 && preserved == 20,
        format!(
            "|bias| MI {mi_bias:.4} vs complete data {cc_bias:.4}, coverage {covered}/20, observed cells kept in {preserved}/20 runs"
        ),
    )
}

// 7
fn support_fit(seed: u64, inject: bool) -> (bartcause::support::SupportReport, bartcause::support::SupportReport, usize) {
    let spec = DgpSpec {
        n: 500,
        confounding: 0.0,
        seed,
        ..Default::default()
    };
    let sim = gen_binary_dgp(&spec).unwrap();
    let mut d = sim.data;
    let z = d.require("z").unwrap().values.clone();
    let target = z.iter().position(|&v| v > 0.5).unwrap();
    if inject {
        let x1 = d.require("x1").unwrap().values.clone();
        let control: Vec<f64> = x1.iter().zip(&z).filter(|p| *p.1 < 0.5).map(|p| *p.0).collect();
        let far = control.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 10.0 * stats::sd(&control);
        let mut row: Vec<f64> = d.roles.covariates.iter().map(|c| d.require(c).unwrap().values[target]).collect();
        row[0] = far;
        let shift = spec.baseline_at(&row) - sim.baseline[target];
        d.column_mut("x1").unwrap().values[target] = far;
        d.column_mut("y").unwrap().values[target] += shift;
    }
    let ts = TreatmentSpec::new("z", TreatmentMode::BinaryMedian);
    let fp = ForestParams {
        n_trees: 100,
        seed,
        ..Default::default()
    };
    let bd = binary_design(&d, &d.roles.covariates, &ts, &fp).unwrap();
    let y = d.require("y").unwrap().values.clone();
    let p = BartParams {
        n_trees: 50,
        n_burn: 150,
        n_keep: 300,
        seed,
        ..Default::default()
    };
    let fit = fit_bart(&bd.design, &y, &p).unwrap();
    let relaxed = support_binary(&fit, &bd, SupportRule::Relaxed).unwrap();
    let conservative = support_binary(&fit, &bd, SupportRule::Conservative).unwrap();
    (relaxed, conservative, target)
}

fn nested(relaxed: &bartcause::support::SupportReport, conservative: &bartcause::support::SupportReport) -> bool {
    conservative.kept().iter().zip(relaxed.kept()).all(|(&c, r)| !c || r)
}

fn common_support() -> Verdict {
    let (mut flagged, mut overlap_ok, mut subset_ok) = (0, 0, 0);
    let mut worst = 0.0f64;
    for seed in 1..=10 {
        let (r, c, target) = support_fit(100 + seed, true);
        flagged += !r.units[target].kept_all() as usize;
        subset_ok += nested(&r, &c) as usize;

        let (r, c, _) = support_fit(200 + seed, false);
        let dropped = 1.0 - r.kept_fraction;
        worst = worst.max(dropped);
        overlap_ok += (dropped <= 0.02) as usize;
        subset_ok += nested(&r, &c) as usize;
    }
    (
        flagged >= 8 && overlap_ok == 10 && subset_ok == 20,
        format!(
            "injected unit flagged {flagged}/10, overlap runs within 2%: {overlap_ok}/10 (worst {:.1}%), conservative within relaxed: {subset_ok}/20",
            100.0 * worst
        ),
    )
}

// 8
const DETERMINISM_RUN: &str = r#"
seed = 11
m = 3
[data]
source = "simulate"
n = 300
effect = { form = "subgroup", tau = 3.0, moderator = 1 }
[data.missingness]
column = "y"
rate = 0.25
mechanism = "mcar"
[treatment]
column = "z"
mode = "binary_median"
[mice]
n_iter = 4
forest = { n_trees = 30 }
[bart]
n_trees = 30
n_burn = 100
n_keep = 200
[propensity]
n_trees = 40
[effects]
supported_ate = "relaxed"
[[effects.cate]]
moderator = "x1"
"#;

fn read_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "timings.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, DETERMINISM_RUN).unwrap();
    let run = |name: &str, threads: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_bartcause"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--threads", threads, "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        read_outputs(&out)
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "8");
    let has_report = a.contains_key("report.json");
    (
        has_report && a == b && a == c,
        format!(
            "{} output files; repeat run identical: {}, 1 vs 8 threads identical: {}",
            a.len(),
            a == b,
            a == c
        ),
    )
}

// 9
fn exact_identities() -> Verdict {
    let mut rng = rng_for(9, &[]);

    let mut telescoping = 0;
    for fit_seed in 0..4u64 {
        let sim = gen_dose_dgp(&DgpSpec {
            n: 150,
            effect: EffectForm::Dose {
                shape: DoseShape::Plateau,
                rise: 4.0,
            },
            seed: fit_seed,
            ..Default::default()
        })
        .unwrap();
        let d = sim.data;
        let (x, col) = dose_design(&d, &d.roles.covariates, "dose").unwrap();
        let p = BartParams {
            n_trees: 20,
            n_burn: 50,
            n_keep: 100,
            seed: fit_seed,
            ..Default::default()
        };
        let fit = fit_bart(&x, &d.require("y").unwrap().values, &p).unwrap();
        let doses: Vec<f64> = (0..=80).map(f64::from).collect();
        let cf = DoseCounterfactuals::compute(&fit, &x, col, &doses).unwrap();
        for _ in 0..250 {
            let mut abc: Vec<f64> = (0..3).map(|_| doses[rng.gen_range(0..doses.len())]).collect();
            abc.shuffle(&mut rng);
            let (ab, bc, ac) = (
                cf.leap(abc[0], abc[1]).unwrap(),
                cf.leap(abc[1], abc[2]).unwrap(),
                cf.leap(abc[0], abc[2]).unwrap(),
            );
            telescoping += (0..ac.draws.len()).all(|t| ab.draws[t] + bc.draws[t] == ac.draws[t]) as usize;
        }
    }

    let sim = gen_binary_dgp(&DgpSpec {
        n: 200,
        effect: EffectForm::Subgroup { tau: 3.0, moderator: 1 },
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let d = sim.data;
    let ts = TreatmentSpec::new("z", TreatmentMode::BinaryMedian);
    let fp = ForestParams {
        n_trees: 50,
        seed: 9,
        ..Default::default()
    };
    let bd = binary_design(&d, &d.roles.covariates, &ts, &fp).unwrap();
    let p = BartParams {
        n_trees: 30,
        n_burn: 50,
        n_keep: 100,
        seed: 9,
        ..Default::default()
    };
    let fit = fit_bart(&bd.design, &d.require("y").unwrap().values, &p).unwrap();

    let probe = Array2::from_shape_fn((1000, bd.design.n_features()), |_| rng.sample::<f64, _>(StandardNormal));
    let probe = Design::new(bd.design.names.clone(), probe).unwrap();
    let post = predict_posterior(&fit, &probe).unwrap();
    let mut sums = 0;
    for i in 0..1000 {
        let t = rng.gen_range(0..fit.n_keep());
        let row = probe.x.row(i).to_vec();
        let mut s = 0.0;
        for tree in &fit.draws[t].trees {
            s += tree.predict(&row);
        }
        sums += (post[[t, i]] == fit.y_center + fit.y_scale * s) as usize;
    }

    let cf = BinaryCounterfactuals::compute(&fit, &bd).unwrap();
    let ue = cf.unit_effects();
    let ate = ate_from(&cf, None).unwrap();
    let n = d.n();
    let mut recombined = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..8);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.gen_range(1..n)).collect();
        cuts.extend([0, n]);
        cuts.sort();
        cuts.dedup();
        let groups: Vec<(String, Vec<usize>)> = cuts
            .windows(2)
            .map(|w| (format!("g{}", w[0]), order[w[0]..w[1]].to_vec()))
            .collect();
        let parts = estimate_cate(&ue, &groups).unwrap().subgroups;
        recombined += (recombine(&parts, ATE).unwrap().draws == ate.draws) as usize;
    }

    (
        telescoping == 1000 && sums == 1000 && recombined == 1000,
        format!("exact in leap telescoping {telescoping}/1000, sum of trees {sums}/1000, subgroup recombination {recombined}/1000"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "published fmi from riv", published_fmi),
        (2, "pooling identities", rubin_identities),
        (3, "function recovery", bart_recovery),
        (4, "ATE recovery", ate_recovery),
        (5, "dose-response shape", adrf_shape),
        (6, "imputation correctness", mice_correctness),
        (7, "common support", common_support),
        (8, "determinism", determinism),
        (9, "exact identities", exact_identities),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failed += !ok as usize;
        println!(
            "criterion {k} ({name}): {} - {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
