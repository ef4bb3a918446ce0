use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use topw::harness::{self, NamedRule};
use topw::trace::{load_trace, save_trace, synth_trace, Generator};
use topw::{Error, TopWConfig};

#[derive(Parser)]
#[command(name = "topw", version, about = "Geometry-aware truncation sampling over recorded logit traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply rules to every step of a trace and write per-step statistics as CSV.
    Run {
        #[arg(long)]
        trace: PathBuf,
        /// Rule such as `topw`, `topw:lambda=2.2,beta=2.8`, `top_k:40`, `top_p:0.9`, `min_p:0.1`, `top_h:0.8`.
        #[arg(long = "rule", required = true)]
        rules: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        sel_temperature: f64,
        /// Zero the timing column for reproducible output.
        #[arg(long)]
        golden: bool,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep lambda and beta for the Top-W rule and write aggregates as CSV.
    Sweep {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long = "lambda-grid", value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long = "beta-grid", value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        /// Extra Top-W settings as key=value (for example alt_iters=1).
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure per-step latency of each rule.
    Bench {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long = "rule", required = true)]
        rules: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 1.0)]
        sel_temperature: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic trace bundle.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = GeneratorArg::Gaussian)]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a trace bundle and print its dimensions.
    ValidateTrace {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Gaussian,
    Clustered,
}

fn parse_rules(rules: &[String], temperature: f64) -> topw::Result<Vec<NamedRule>> {
    rules.iter().map(|r| NamedRule::parse(r, temperature)).collect()
}

fn emit<R: serde::Serialize>(rows: &[R], out: Option<&PathBuf>) -> topw::Result<()> {
    match out {
        Some(path) => harness::write_csv_file(rows, path),
        None => harness::write_csv(rows, std::io::stdout().lock()),
    }
}

fn execute(command: Command) -> topw::Result<()> {
    match command {
        Command::Run {
            trace,
            rules,
            sel_temperature,
            golden,
            out,
        } => {
            let rules = parse_rules(&rules, sel_temperature)?;
            let bundle = load_trace(&trace)?;
            emit(&harness::run(&bundle, &rules, golden)?, out.as_ref())
        }
        Command::Sweep {
            trace,
            lambdas,
            betas,
            overrides,
            out,
        } => {
            let mut base = TopWConfig::default();
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidParameter(format!("--set expects key=value, got `{kv}`")))?;
                base.set(k.trim(), v.trim())?;
            }
            base.validate()?;
            let bundle = load_trace(&trace)?;
            emit(&harness::sweep(&bundle, &base, &lambdas, &betas)?, out.as_ref())
        }
        Command::Bench {
            trace,
            rules,
            repeats,
            warmup,
            sel_temperature,
            out,
        } => {
            let rules = parse_rules(&rules, sel_temperature)?;
            let bundle = load_trace(&trace)?;
            emit(&harness::bench(&bundle, &rules, repeats, warmup)?, out.as_ref())
        }
        Command::Synth {
            n,
            m,
            steps,
            seed,
            generator,
            clusters,
            out,
        } => {
            let generator = match generator {
                GeneratorArg::Gaussian => Generator::GaussianDirichlet,
                GeneratorArg::Clustered => Generator::Clustered { clusters },
            };
            save_trace(&synth_trace(n, m, steps, seed, generator)?, &out)
        }
        Command::ValidateTrace { trace } => {
            let b = load_trace(&trace)?;
            topw::build_metric(&b.embeddings, topw::DEFAULT_EPSILON)?;
            println!("ok: n={} m={} steps={}", b.meta.n, b.meta.m, b.meta.steps);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidParameter(_) | Error::UnknownConfigKey { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
