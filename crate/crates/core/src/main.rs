use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osse_core::case::{build_synthetic_reach, CaseSpec, DomainCase};
use osse_core::metrics;
use osse_core::osse::{self, Config, Experiment, ObsArchive, PassPlan, TruthOutput};
use osse_core::{OsseError, Result};

/// Twin experiments for multi-source flood data assimilation.
#[derive(Parser)]
#[command(name = "osse", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic reach generation.
    #[command(subcommand)]
    Case(CaseCmd),
    /// Reference run.
    #[command(subcommand)]
    Truth(TruthCmd),
    /// Synthetic observations from a truth run.
    #[command(subcommand)]
    Obs(ObsCmd),
    /// Open loop and assimilation experiments.
    #[command(subcommand)]
    Exp(ExpCmd),
    /// Scores and plot data.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Case, truth, observations, all five experiments and the report.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output root for case, truth, obs, runs and report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Quick numerical self-checks.
    #[command(subcommand)]
    Selftest(SelftestCmd),
}

#[derive(Subcommand)]
enum CaseCmd {
    Build {
        /// Case parameters (TOML); built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set enkf.members=40`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        Config::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum TruthCmd {
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        case: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ObsCmd {
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Noise seed; overrides `noise.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ExpCmd {
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// OL, IDA, IGDA, RSDA or FDA; overrides `experiment`.
        #[arg(long)]
        name: Option<String>,
        /// Member propagation threads; overrides `enkf.threads`.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        /// Case directory; defaults to the one recorded by the truth run.
        #[arg(long)]
        case: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SelftestCmd {
    Oracle,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Case(CaseCmd::Build { spec, out }) => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| OsseError::io(&p, e))?;
                    CaseSpec::from_toml(&text).map_err(|m| OsseError::parse(&p, m))?
                }
                None => CaseSpec::default(),
            };
            let case = build_synthetic_reach(&spec)?;
            case.write(&out)?;
            println!("case: {}x{} cells, {} nodes -> {}", case.grid.nx, case.grid.ny, case.nodes.len(), out.display());
        }
        Cmd::Truth(TruthCmd::Run { cfg, case, out }) => {
            let cfg = cfg.load()?;
            let case_dir = case.unwrap_or_else(|| cfg.case_dir.clone());
            let out = out.unwrap_or_else(|| cfg.truth_dir.clone());
            truth_run(&cfg, &case_dir, &out)?;
        }
        Cmd::Obs(ObsCmd::Generate { cfg, truth, seed, out }) => {
            let mut cfg = cfg.load()?;
            if let Some(s) = seed {
                cfg.noise.seed = s;
            }
            let truth = truth.unwrap_or_else(|| cfg.truth_dir.clone());
            let out = out.unwrap_or_else(|| cfg.obs_dir.clone());
            obs_generate(&cfg, &truth, &out)?;
        }
        Cmd::Exp(ExpCmd::Run { cfg, name, threads, out }) => {
            let mut cfg = cfg.load()?;
            if let Some(n) = name {
                cfg.experiment = n;
            }
            if let Some(t) = threads {
                cfg.enkf.threads = t;
            }
            cfg.validate()?;
            exp_run(&cfg, &out)?;
        }
        Cmd::Eval(EvalCmd::Report { runs, truth, case, out }) => {
            let case = match case {
                Some(c) => DomainCase::read(&c)?,
                None => DomainCase::read(&TruthOutput::read_case_dir(&truth)?)?,
            };
            let table = metrics::report(&runs, &truth, &case, &out)?;
            print_table(&table);
            if !table.missing.is_empty() {
                for m in &table.missing {
                    eprintln!("missing run: {}", m.display());
                }
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Pipeline { cfg, out } => {
            let cfg = cfg.load()?;
            let root = out;
            let (case_dir, truth_dir, obs_dir) = (root.join("case"), root.join("truth"), root.join("obs"));
            build_case_if_missing(&case_dir)?;
            truth_run(&cfg, &case_dir, &truth_dir)?;
            obs_generate(&cfg, &truth_dir, &obs_dir)?;
            let mut runs = Vec::new();
            for e in Experiment::ALL {
                let mut c = cfg.clone();
                c.experiment = e.name().to_string();
                c.case_dir = case_dir.clone();
                c.truth_dir = truth_dir.clone();
                c.obs_dir = obs_dir.clone();
                let dir = root.join("runs").join(e.name());
                exp_run(&c, &dir)?;
                runs.push(dir);
            }
            let case = DomainCase::read(&case_dir)?;
            let table = metrics::report(&runs, &truth_dir, &case, &root.join("report"))?;
            print_table(&table);
        }
        Cmd::Selftest(SelftestCmd::Oracle) => {
            let results = osse_core::selftest::run_all();
            let mut ok = true;
            for (name, res) in &results {
                match res {
                    Ok(detail) => println!("PASS {name}: {detail}"),
                    Err(detail) => {
                        ok = false;
                        println!("FAIL {name}: {detail}");
                    }
                }
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn build_case_if_missing(dir: &Path) -> Result<()> {
    if dir.join("grid.txt").exists() {
        return Ok(());
    }
    build_synthetic_reach(&CaseSpec::default())?.write(dir)
}

fn truth_run(cfg: &Config, case_dir: &Path, out: &Path) -> Result<()> {
    let case = DomainCase::read(case_dir)?;
    let truth = osse::run_truth(cfg, &case)?;
    truth.write(out, &case, case_dir)?;
    let (t, frac) = truth.peak_flooded_fraction(&case);
    println!(
        "truth: {} snapshots, peak floodplain wet fraction {:.3} at {:.1} h -> {}",
        truth.times.len(),
        frac,
        t / 3600.0,
        out.display()
    );
    Ok(())
}

fn obs_generate(cfg: &Config, truth_dir: &Path, out: &Path) -> Result<()> {
    let case_dir = TruthOutput::read_case_dir(truth_dir)?;
    let case = DomainCase::read(&case_dir)?;
    let (truth, _) = TruthOutput::read(truth_dir)?;
    let plan = PassPlan::new(cfg, &case)?;
    let obs = osse::generate_observations(cfg, &case, &truth, &plan)?;
    obs.write(out, &case)?;
    println!(
        "obs: {} gauge, {} WSR, {} SWOT node values ({:.0}% good) -> {}",
        obs.gauges.len(),
        obs.wsr.len(),
        obs.nodes.iter().map(Vec::len).sum::<usize>(),
        100.0 * obs.good_node_fraction(),
        out.display()
    );
    Ok(())
}

fn exp_run(cfg: &Config, out: &Path) -> Result<()> {
    let (truth, case_dir) = TruthOutput::read(&cfg.truth_dir)?;
    let case = DomainCase::read(&case_dir)?;
    let obs = ObsArchive::read(&cfg.obs_dir)?;
    let res = osse::run_experiment(cfg, &case, &obs, &truth)?;
    res.write(out, &case)?;
    println!("{}: {} analyses -> {}", res.experiment.name(), res.analyses.len(), out.display());
    Ok(())
}

fn print_table(t: &metrics::ScoreTable) {
    println!("experiment {} mean_rmse", t.stations.join(" "));
    for (name, row) in &t.rmse {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("{name} {} {:.3}", cells.join(" "), t.station_mean_rmse(name).unwrap_or(f64::NAN));
    }
    for (name, row) in &t.csi {
        let cells: Vec<String> = row
            .iter()
            .map(|(time, c)| format!("{:.0}h={}", time / 3600.0, c.map_or("-".to_string(), |v| format!("{v:.3}"))))
            .collect();
        println!("csi {name} {}", cells.join(" "));
    }
}
