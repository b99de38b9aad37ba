use clap::{Args, Parser, Subcommand};
use fedma::config::{ConfigError, DiagnoseSpec, EnvOverrides, ExperimentSpec, RunConfig};
use fedma::diagnose::{delay_table, diagnose_config, diagnose_matrix, DelayTableRow};
use fedma::engine::{run, RunSummary};
use fedma::staleness::{parse_triplets_csv, triplets_csv};
use fedma::sweep::{self, SweepOptions};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Buffered asynchronous federated learning with momentum approximation.
#[derive(Parser)]
#[command(name = "fedma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics.jsonl and summary.json.
    Run(Common),
    /// Run a grid of simulations and write sweep.csv.
    Sweep(Common),
    /// Analyse a staleness matrix without training.
    Diagnose(Common),
    /// Summarise an output directory from `run` or `sweep`.
    Report {
        /// Directory holding sweep.csv or summary.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides FEDMA_OUT and the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and tables.
    #[arg(long)]
    jobs: Option<usize>,
    /// Seed (overrides FEDMA_SEED and the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Allow sweeps above 100000 runs.
    #[arg(long)]
    force_large_sweep: bool,
}

enum Failure {
    Config(ConfigError),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl Common {
    /// Environment first, then explicit flags on top.
    fn overrides(&self) -> Result<EnvOverrides, ConfigError> {
        let mut env = EnvOverrides::from_env()?;
        if self.seed.is_some() {
            env.seed = self.seed;
        }
        if self.out.is_some() {
            env.out = self.out.clone();
        }
        Ok(env)
    }

    fn jobs(&self, from_file: Option<usize>) -> usize {
        self.jobs
            .or(from_file)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

fn out_dir(dir: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = dir.unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes") + "\n"
}

fn cmd_run(args: &Common) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(&args.overrides()?);
    let dir = out_dir(cfg.out_dir.clone())?;
    let result = run(&cfg.sim).map_err(runtime)?;
    write(&dir.join("config.json"), &(cfg.to_json() + "\n"))?;
    write(&dir.join("metrics.jsonl"), &result.metrics_jsonl())?;
    write(&dir.join("summary.json"), &to_json(&result.summary))?;
    if let Some(d) = &result.diagnostics {
        let lines: String = d.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect();
        write(&dir.join("diagnostics.jsonl"), &lines)?;
    }
    if cfg.dump_matrices {
        write(&dir.join("W.csv"), &triplets_csv(&result.staleness))?;
        if let Some(a) = &result.weights {
            write(&dir.join("A.csv"), &triplets_csv(a))?;
        }
    }
    print_summary(&result.summary);
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_summary(s: &RunSummary) {
    println!("method            {}", s.method.name());
    println!("iterations        {} ({} ticks)", s.iterations, s.ticks);
    println!("final loss        {:.6e}", s.final_loss);
    println!("final subopt      {:.6e}", s.final_suboptimality);
    println!("best subopt       {:.6e} at iteration {}", s.best_suboptimality, s.best_iteration);
    println!(
        "updates           {} accepted, {} dropped, {} pending",
        s.counters.accepted, s.counters.dropped, s.counters.pending_at_end
    );
    if let Some(e) = s.cumulative_relative_error {
        println!("MA LS error       {:.4}%", 100.0 * e);
    }
    if let Some(d) = &s.diverged {
        println!("diverged          {d}");
    }
}

fn cmd_sweep(args: &Common) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::load(&args.config)?;
    spec.apply(&args.overrides()?);
    let runs = sweep::check_size(&spec, args.force_large_sweep).map_err(runtime)?;
    let jobs = args.jobs(spec.jobs);
    println!("sweep: {runs} runs on {jobs} workers");
    let dir = out_dir(spec.out_dir.clone())?;
    let opts = SweepOptions { jobs, force_large: args.force_large_sweep, out_dir: Some(dir.clone()) };
    let outcome = sweep::run_sweep(&spec, &opts).map_err(runtime)?;
    let failed = outcome.rows.iter().filter(|r| r.status == "failed").count();
    println!(
        "executed {}, reused {}, failed {failed}; wrote {}",
        outcome.executed,
        outcome.reused,
        dir.join("sweep.csv").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TableLine {
    kind: &'static str,
    scale: f64,
    cutoff: usize,
    p: f64,
    full_error_pct: f64,
    light_error_pct: f64,
}

fn table_csv(rows: &[DelayTableRow], path: &Path) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in rows {
        w.serialize(TableLine {
            kind: r.kind.name(),
            scale: r.delay.scale,
            cutoff: r.delay.cutoff,
            p: r.p,
            full_error_pct: 100.0 * r.full_error,
            light_error_pct: 100.0 * r.light_error,
        })
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn cmd_diagnose(args: &Common) -> Result<(), Failure> {
    let mut spec = DiagnoseSpec::load(&args.config)?;
    spec.apply(&args.overrides()?);
    let dir = out_dir(spec.out_dir.clone())?;
    let diagnosis = match (&spec.sim, &spec.matrix) {
        (Some(sim), _) => diagnose_config(sim).map_err(runtime)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let w = parse_triplets_csv(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            diagnose_matrix(&w, spec.beta, spec.cohort.unwrap_or(1)).map_err(runtime)?
        }
        (None, None) => unreachable!("validated on load"),
    };
    write(&dir.join("diagnostics.jsonl"), &diagnosis.jsonl())?;
    write(&dir.join("diagnose_summary.json"), &to_json(&diagnosis.summary))?;
    let s = &diagnosis.summary;
    println!("horizon {}  max nullity {}  final nullity {}", s.horizon, s.max_nullity, s.final_nullity);
    println!("LS error: full {:.3}%  light {:.3}%", 100.0 * s.full_error, 100.0 * s.light_error);
    if let (Some(table), Some(sim)) = (&spec.delay_table, &spec.sim) {
        let rows = delay_table(sim, table, args.jobs(None)).map_err(runtime)?;
        table_csv(&rows, &dir.join("delay_table.csv"))?;
        write(&dir.join("delay_table.json"), &to_json(&rows))?;
        println!("{:<12} {:>5} {:>10} {:>10}", "delay", "p", "full %", "light %");
        for r in &rows {
            println!("{:<12} {:>5} {:>10.3} {:>10.3}", r.kind.name(), r.p, 100.0 * r.full_error, 100.0 * r.light_error);
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let sweep_csv = dir.join("sweep.csv");
    let summary = dir.join("summary.json");
    if sweep_csv.exists() {
        let rows = sweep::read_csv(&sweep_csv).map_err(runtime)?;
        let report = sweep::report(&rows);
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(runtime)?;
        for r in &report {
            w.serialize(r).map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
        let fmt = |x: Option<f64>, f: &dyn Fn(f64) -> String| x.map_or("-".to_string(), f);
        println!(
            "{:<18} {:>6} {:>5} {:>5} {:<12} {:>6} {:>12} {:>12} {:>8}",
            "method", "beta", "p", "C", "delay", "ok", "final", "best", "speedup"
        );
        for r in &report {
            println!(
                "{:<18} {:>6} {:>5} {:>5} {:<12} {:>3}/{:<2} {:>12} {:>12} {:>8}",
                r.method,
                r.beta,
                r.p,
                r.cohort,
                r.delay_kind,
                r.ok,
                r.runs,
                fmt(r.median_final_suboptimality, &|x| format!("{x:.4e}")),
                fmt(r.median_best_suboptimality, &|x| format!("{x:.4e}")),
                fmt(r.median_speedup, &|x| format!("{x:.2}x")),
            );
        }
        println!("wrote {}", path.display());
        Ok(())
    } else if summary.exists() {
        let text = std::fs::read_to_string(&summary).map_err(runtime)?;
        let s: RunSummary = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", summary.display())))?;
        print_summary(&s);
        Ok(())
    } else {
        Err(runtime(format!("{}: no sweep.csv or summary.json", dir.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Report { out } => cmd_report(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
