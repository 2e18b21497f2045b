//! `ndpp`: generate kernels, draw samples, validate, benchmark and measure
//! total variation against the exact distribution.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 validation failure or bad
//! arguments, 3 IO or kernel-format error, 4 budget exceeded.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ndpp_core::experiments::{self, stream_rng, SizeMode};
use ndpp_core::kernel::{load_kernel, save_kernel};
use ndpp_core::oracle::subset_label;
use ndpp_core::samplers::{self, ChainConfig, NdppConfig, Prepared};
use ndpp_core::validate::validate_kernel;
use ndpp_core::{nonzero_eigvals, synth_kernel, LowRankKernel, NdppError, NdppSpectrum};

#[derive(Parser, Debug)]
#[command(
    name = "ndpp",
    version,
    about = "Sampling for low-rank nonsymmetric DPPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic kernel file and print its eigenvalue summary.
    Gen(GenArgs),
    /// Draw samples; one CSV row per sample.
    Sample(SampleArgs),
    /// Run the invariant suites against a kernel.
    Validate(ValidateArgs),
    /// Preprocessing and per-sample wall time over a list of n.
    Bench(BenchArgs),
    /// Total variation to the exact distribution as samples accumulate.
    Tv(TvArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Synth {
    n: usize,
    d: usize,
    seed: u64,
}

impl FromStr for Synth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [n, d, seed] = parts[..] else {
            return Err(format!("expected n,d,seed, got {s:?}"));
        };
        let num = |x: &str| x.parse::<u64>().map_err(|e| format!("{x:?}: {e}"));
        Ok(Synth {
            n: num(n)? as usize,
            d: num(d)? as usize,
            seed: num(seed)?,
        })
    }
}

#[derive(Args, Debug)]
#[group(multiple = false)]
struct KernelArgs {
    /// Kernel file; `*.txt` names are read as text, anything else as binary.
    #[arg(long, value_name = "PATH")]
    kernel: Option<PathBuf>,
    /// Synthetic kernel with entries drawn from N(0, 2/d).
    #[arg(long, value_name = "N,D,SEED")]
    synth: Option<Synth>,
}

impl KernelArgs {
    fn load(&self, default: Option<Synth>) -> Result<LowRankKernel, Failure> {
        match (&self.kernel, self.synth.or(default)) {
            (Some(path), _) => load_kernel(path).map_err(|e| Failure::load(path, e)),
            (None, Some(s)) => Ok(synth_kernel(s.n, s.d, s.seed)?),
            (None, None) => Err(Failure::usage("one of --kernel or --synth is required")),
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_name = "N,D,SEED")]
    synth: Synth,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    /// Subset size; omit for the unconstrained NDPP.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Chain iterations per sample (default k²). Needs --k.
    #[arg(long)]
    t_iter: Option<usize>,
    #[arg(long)]
    leaf_block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination (stdout if omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Defaults to --synth 8,4,1.
    #[command(flatten)]
    kernel: KernelArgs,
    /// Samples for the statistical checks; 0 runs only the exact ones.
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as CSV (check, passed, detail).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long)]
    leaf_block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TvArgs {
    /// Defaults to --synth 10,8,1.
    #[command(flatten)]
    kernel: KernelArgs,
    /// Subset size; omit for the unconstrained NDPP.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t_iter: Option<usize>,
    /// Largest sample count; checkpoints are 1, 2, 5 × 10^j below it.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    // Anything wrong with a kernel file is a format problem, even if the
    // numbers parse.
    fn load(path: &Path, e: NdppError) -> Self {
        let code = match e {
            NdppError::BudgetExceeded { .. } => 4,
            _ => 3,
        };
        Failure {
            code,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<NdppError> for Failure {
    fn from(e: NdppError) -> Self {
        let code = match e {
            NdppError::Io(_) | NdppError::Format(_) => 3,
            NdppError::BudgetExceeded { .. } | NdppError::TooManyRejections { .. } => 4,
            NdppError::InvalidArgument(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: 3,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        io::Error::from(e).into()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_out(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>, Failure> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn cmd_gen(args: &GenArgs) -> Result<(), Failure> {
    let Synth { n, d, seed } = args.synth;
    let kernel = synth_kernel(n, d, seed)?;
    save_kernel(&kernel, &args.out)?;
    let lambdas = nonzero_eigvals(&kernel)?;
    let mods: Vec<f64> = lambdas.iter().map(|l| l.norm()).collect();
    let largest = mods.iter().copied().fold(0.0, f64::max);
    let smallest = mods.iter().copied().fold(f64::INFINITY, f64::min);
    let complex = lambdas.iter().filter(|l| l.im > 0.0).count();
    println!("n = {n}, d = {d}, seed = {seed}");
    println!("rank = {}", lambdas.len());
    if !lambdas.is_empty() {
        println!("|lambda| in [{smallest:.6e}, {largest:.6e}], complex pairs = {complex}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<(), Failure> {
    if args.k.is_none() && args.t_iter.is_some() {
        return Err(Failure::usage("--t-iter needs --k"));
    }
    let kernel = args.kernel.load(None)?;
    let prep = Prepared::new(&kernel, args.leaf_block)?;
    let mut rng = stream_rng(args.seed, 0);
    let mut draw: Box<dyn FnMut() -> ndpp_core::Result<samplers::SampleReport>> = match args.k {
        Some(k) => {
            let mut cfg = ChainConfig::new(k);
            if let Some(t) = args.t_iter {
                cfg = cfg.with_t_iter(t);
            }
            let (kernel, prep, rng) = (&kernel, &prep, &mut rng);
            Box::new(move || samplers::mcmc_kndpp(kernel, prep, &cfg, rng))
        }
        None => {
            let spectrum = NdppSpectrum::from_kernel(&kernel)?;
            let (kernel, prep, rng) = (&kernel, &prep, &mut rng);
            Box::new(move || {
                samplers::mcmc_ndpp(kernel, prep, &spectrum, &NdppConfig::default(), rng)
            })
        }
    };
    let mut w = csv_out(args.out.as_deref())?;
    w.write_record(["index", "subset", "rejections", "microseconds"])?;
    for i in 0..args.samples {
        let report = draw()?;
        w.write_record([
            i.to_string(),
            subset_label(&report.subset),
            report.rejections.to_string(),
            num(report.elapsed.as_secs_f64() * 1e6),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), Failure> {
    let kernel = args.kernel.load(Some(Synth {
        n: 8,
        d: 4,
        seed: 1,
    }))?;
    let report = validate_kernel(&kernel, args.budget, args.seed);
    print!("{report}");
    if let Some(path) = &args.out {
        let mut w = csv_out(Some(path))?;
        w.write_record(["check", "passed", "detail"])?;
        for c in &report.checks {
            w.write_record([c.name, if c.passed { "true" } else { "false" }, &c.detail])?;
        }
        w.flush()?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(Failure {
            code: 2,
            message: format!("failed checks: {}", names.join(", ")),
        })
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    let mut w = csv_out(args.out.as_deref())?;
    w.write_record([
        "n",
        "build_seconds",
        "mean_sample_seconds",
        "mean_rejections",
    ])?;
    let mut first_error = None;
    for &n in &args.n_list {
        match experiments::bench_row(n, args.d, args.k, args.samples, args.seed, args.leaf_block) {
            Ok(row) => w.write_record([
                n.to_string(),
                num(row.build_seconds),
                num(row.mean_sample_seconds),
                num(row.mean_rejections),
            ])?,
            Err(e) => {
                eprintln!("ndpp: n = {n}: {e}");
                w.write_record([n.to_string(), "NaN".into(), "NaN".into(), "NaN".into()])?;
                first_error.get_or_insert(e);
            }
        }
        w.flush()?;
    }
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_tv(args: &TvArgs) -> Result<(), Failure> {
    let kernel = args.kernel.load(Some(Synth {
        n: 10,
        d: 8,
        seed: 1,
    }))?;
    let mode = match (args.k, args.t_iter) {
        (Some(k), t) => SizeMode::Fixed {
            k,
            t_iter: t.unwrap_or_else(|| samplers::default_t_iter(k)),
        },
        (None, None) => SizeMode::Unconstrained,
        (None, Some(_)) => return Err(Failure::usage("--t-iter needs --k")),
    };
    let marks = experiments::default_checkpoints(args.samples);
    let curve = experiments::tv_curve(&kernel, mode, args.samples, &marks, args.seed)?;
    let mut w = csv_out(args.out.as_deref())?;
    w.write_record(["samples", "tv_mcmc", "tv_exact_resample"])?;
    for row in &curve.rows {
        w.write_record([row.samples.to_string(), num(row.tv_mcmc), num(row.tv_exact)])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Tv(a) => cmd_tv(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ndpp: {f}");
            ExitCode::from(f.code)
        }
    }
}
