use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bartcause::causal::{write_effect_draws, EffectDraws, TreatmentMode, ATE};
use bartcause::config::RunConfig;
use bartcause::error::{Error, Result};
use bartcause::pipeline::{self, Analysis, FITS_DIR, IMPUTATIONS_DIR};
use bartcause::report::{build_report, emit_report};
use bartcause::support::write_support_csv;

#[derive(Parser)]
#[command(name = "bartcause", version, about = "Causal effects with BART and multiple imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EffectKind {
    Ate,
    Adrf,
    Leap,
    Cate,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate(Common),
    /// Impute missing cells; writes `imputations/`.
    Impute(Common),
    /// Fit one model per imputation and outcome; writes `fits/`.
    Fit(Common),
    /// Posterior effect draws from saved fits.
    Effects {
        kind: EffectKind,
        #[command(flatten)]
        common: Common,
    },
    /// Common-support fractions from saved fits.
    Support(Common),
    /// Pooled report from saved fits.
    Report(Common),
    /// The whole pipeline, published atomically.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also keep the fitted models.
        #[arg(long)]
        save_fits: bool,
    },
}

fn setup(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    cfg.validate()?;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::config("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn saved(cfg: &RunConfig, out: &Path) -> Result<Vec<Analysis>> {
    let stack = pipeline::read_imputations(out).map_err(|e| e.in_stage("impute"))?;
    let fits = pipeline::read_fits(&out.join(FITS_DIR)).map_err(|e| e.in_stage("fit"))?;
    pipeline::analyze(cfg, &stack, &fits).map_err(|e| e.in_stage("effects"))
}

fn curve_draws(a: &Analysis) -> Vec<EffectDraws> {
    a.curve
        .iter()
        .flat_map(|c| {
            c.grid.iter().enumerate().map(move |(k, g)| {
                EffectDraws::new(format!("adrf:{g}"), a.imputation, c.draws.column(k).to_vec())
            })
        })
        .collect()
}

fn select(kind: EffectKind, a: &Analysis) -> Vec<EffectDraws> {
    let keep = |e: &&EffectDraws| match kind {
        EffectKind::Ate => e.estimand == ATE || e.estimand.starts_with("ate_supported:"),
        EffectKind::Leap => e.estimand.starts_with("leap:"),
        EffectKind::Cate => e.estimand.starts_with("cate"),
        EffectKind::Adrf => false,
    };
    match kind {
        EffectKind::Adrf => curve_draws(a),
        _ => a.effects.iter().filter(keep).cloned().collect(),
    }
}

fn kind_name(kind: EffectKind) -> &'static str {
    match kind {
        EffectKind::Ate => "ate",
        EffectKind::Adrf => "adrf",
        EffectKind::Leap => "leap",
        EffectKind::Cate => "cate",
    }
}

fn outcomes(analyses: &[Analysis]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for a in analyses {
        if !seen.contains(&a.outcome) {
            seen.push(a.outcome.clone());
        }
    }
    seen
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(c) => {
            let cfg = setup(&c)?;
            let (d, sim) = pipeline::load_data(&cfg).map_err(|e| e.in_stage("data"))?;
            if sim.is_none() {
                return Err(Error::config("simulate needs a `simulate` data source"));
            }
            pipeline::write_data(&c.out, &d, sim.as_ref())
        }
        Command::Impute(c) => {
            let cfg = setup(&c)?;
            let (d, sim) = pipeline::load_data(&cfg).map_err(|e| e.in_stage("data"))?;
            let stack = pipeline::impute(&cfg, &d).map_err(|e| e.in_stage("impute"))?;
            pipeline::write_data(&c.out, &d, sim.as_ref())?;
            bartcause::mice::write_stack(&stack, &c.out.join(IMPUTATIONS_DIR))
        }
        Command::Fit(c) => {
            let cfg = setup(&c)?;
            let stack = pipeline::read_imputations(&c.out).map_err(|e| e.in_stage("impute"))?;
            let fits = pipeline::fit_models(&cfg, &stack).map_err(|e| e.in_stage("fit"))?;
            pipeline::write_fits(&fits, &c.out.join(FITS_DIR))
        }
        Command::Effects { kind, common: c } => {
            let cfg = setup(&c)?;
            let binary = cfg.treatment.mode == TreatmentMode::BinaryMedian;
            let fits_mode = matches!(kind, EffectKind::Ate | EffectKind::Cate) == binary;
            if !fits_mode {
                return Err(Error::config(format!(
                    "`{}` effects are not available in this treatment mode",
                    kind_name(kind)
                )));
            }
            let analyses = saved(&cfg, &c.out)?;
            let dir = c.out.join("effects");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for o in outcomes(&analyses) {
                let draws: Vec<EffectDraws> = analyses
                    .iter()
                    .filter(|a| a.outcome == o)
                    .flat_map(|a| select(kind, a))
                    .collect();
                let path = dir.join(format!("{}_{o}.csv", kind_name(kind)));
                write_effect_draws(std::io::BufWriter::new(create(&path)?), &draws)?;
            }
            Ok(())
        }
        Command::Support(c) => {
            let cfg = setup(&c)?;
            let analyses = saved(&cfg, &c.out)?;
            for o in outcomes(&analyses) {
                let rows: Vec<_> = analyses
                    .iter()
                    .filter(|a| a.outcome == o)
                    .flat_map(|a| a.support.iter().map(move |s| (a.imputation, s)))
                    .collect();
                let path = c.out.join(format!("support_{o}.csv"));
                write_support_csv(std::io::BufWriter::new(create(&path)?), &rows)?;
            }
            Ok(())
        }
        Command::Report(c) => {
            let cfg = setup(&c)?;
            let (d, _) = pipeline::load_data(&cfg).map_err(|e| e.in_stage("data"))?;
            let stack = pipeline::read_imputations(&c.out).map_err(|e| e.in_stage("impute"))?;
            let analyses = saved(&cfg, &c.out)?;
            let report = build_report(&cfg, &d, &stack, &analyses).map_err(|e| e.in_stage("pool"))?;
            emit_report(&report, &analyses, &c.out).map_err(|e| e.in_stage("report"))
        }
        Command::Run { common: c, save_fits } => {
            let cfg = setup(&c)?;
            let out = pipeline::run_to_dir(&cfg, &c.out, save_fits)?;
            for row in &out.report.effects {
                println!(
                    "{}: estimate {:.4} se {:.4} ci [{:.4}, {:.4}]",
                    row.outcome, row.estimate, row.se, row.ci_low, row.ci_high
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
