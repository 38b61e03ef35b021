use std::path::PathBuf;
use std::io::Write as _;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use samerge_cli::commands::{self, AnalyzeArgs, ApplyArgs, FixtureOverrides};
use samerge_cli::merge_recipe_file;
use samerge_cli::recipe::Sweep;
use samerge_cli::report::{exit_code, JobReport};
use samerge_core::{Dtype, Error, OutDtype, Result};

#[derive(Parser)]
#[command(name = "samerge", version, about = "Merge model checkpoints from recipes")]
struct Cli {
    /// Worker threads for per-tensor parallelism (default: all cores).
    #[arg(long, global = true, env = "SAMERGE_THREADS")]
    threads: Option<usize>,

    /// Log level for the human-readable log on stderr.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a merge recipe (TOML, or JSON by extension).
    Merge {
        recipe: PathBuf,
        /// Grid over one hyperparameter, `key=v1,v2,...`; repeat for a product.
        /// Outputs get a `.key=value` suffix before the extension.
        #[arg(long)]
        sweep: Vec<String>,
    },
    /// Task-vector extraction, difference and transfer.
    #[command(subcommand)]
    Tv(TvCommand),
    /// Pairwise cosine similarity of task vectors.
    Analyze(AnalyzeCli),
    /// Accumulate Gram matrices from activation dumps.
    Gram {
        #[arg(long, num_args = 1.., required = true)]
        activations: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that checkpoints share names, shapes and dtypes.
    Validate {
        #[arg(num_args = 2.., required = true)]
        paths: Vec<PathBuf>,
    },
    /// Write a synthetic checkpoint, optionally with perturbed children.
    GenFixture(GenFixtureCli),
    /// Summarize a checkpoint.
    Info {
        path: PathBuf,
        /// Include every tensor's name, dtype and shape.
        #[arg(long)]
        tensors: bool,
    },
}

#[derive(Subcommand)]
enum TvCommand {
    /// `model − base`.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
    },
    /// `m − m′` between a model and its counterpart trained on altered data.
    Diff {
        #[arg(long)]
        m: PathBuf,
        #[arg(long = "m-prime")]
        m_prime: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
    },
    /// `target + sign·scale·τ`.
    Apply {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        tv: PathBuf,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        scale: f64,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        sign: i32,
        #[arg(long)]
        allow_cross_base: bool,
        #[arg(long, default_value = "keep")]
        out_dtype: OutDtype,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AnalyzeCli {
    #[arg(long, num_args = 2.., required = true)]
    tvs: Vec<PathBuf>,
    /// Only tensors matching one of these globs (`*`, `<i>`).
    #[arg(long)]
    filter: Vec<String>,
    /// Only tensors with one of these roles (attn_q, attn_k, attn_v, attn_out, other).
    #[arg(long, value_delimiter = ',')]
    roles: Vec<String>,
    /// Naming scheme for --roles.
    #[arg(long, default_value = "auto")]
    scheme: String,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct GenFixtureCli {
    /// Fixture spec as TOML; flags override its fields.
    spec: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    encoder_blocks: Option<usize>,
    #[arg(long)]
    decoder_blocks: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    extra_tensors: Option<usize>,
    /// f32, f16 or bf16.
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<Dtype>,
    /// Perturbed copies written next to the output as `<stem>-child<k>`.
    #[arg(long, default_value_t = 0)]
    children: usize,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_dtype(s: &str) -> Result<Dtype> {
    s.to_ascii_uppercase().parse()
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run_single(name: &str, f: impl FnOnce(&mut JobReport) -> Result<()>) -> (Vec<JobReport>, Option<Error>) {
    let started = Instant::now();
    let mut report = JobReport::new(name);
    let outcome = f(&mut report);
    report.wall_time_s = started.elapsed().as_secs_f64();
    let err = outcome.err();
    if let Some(e) = &err {
        report.fail(e);
    }
    (vec![report], err)
}

fn dispatch(command: Command) -> (Vec<JobReport>, Option<Error>) {
    match command {
        Command::Merge { recipe, sweep } => {
            let sweeps = match sweep.iter().map(|s| s.parse::<Sweep>()).collect::<Result<Vec<_>>>() {
                Ok(s) => s,
                Err(e) => return run_single("merge", |_| Err(e)),
            };
            let outcome = merge_recipe_file(&recipe, &sweeps);
            (outcome.reports, outcome.error)
        }
        Command::Tv(TvCommand::Extract { model, base, out, label }) => {
            run_single("tv extract", |r| commands::tv_extract(&model, &base, &out, label.as_deref(), r))
        }
        Command::Tv(TvCommand::Diff { m, m_prime, out, label }) => {
            run_single("tv diff", |r| commands::tv_diff(&m, &m_prime, &out, label.as_deref(), r))
        }
        Command::Tv(TvCommand::Apply { target, tv, scale, sign, allow_cross_base, out_dtype, out }) => {
            let args = ApplyArgs { target: &target, tv: &tv, scale, sign, allow_cross_base, out_dtype, out: &out };
            run_single("tv apply", |r| commands::tv_apply(&args, r))
        }
        Command::Analyze(a) => {
            let args = AnalyzeArgs {
                tvs: &a.tvs,
                filter: &a.filter,
                roles: &a.roles,
                scheme: &a.scheme,
                csv: a.csv.as_deref(),
                json: a.json.as_deref(),
                svg: a.svg.as_deref(),
            };
            run_single("analyze", |r| commands::analyze(&args, r))
        }
        Command::Gram { activations, out } => run_single("gram", |r| commands::gram(&activations, &out, r)),
        Command::Validate { paths } => run_single("validate", |r| commands::validate(&paths, r)),
        Command::GenFixture(g) => run_single("gen-fixture", |r| {
            let overrides = FixtureOverrides {
                scheme: g.scheme.clone(),
                encoder_blocks: g.encoder_blocks,
                decoder_blocks: g.decoder_blocks,
                d_model: g.d_model,
                seed: g.seed,
                extra_tensors: g.extra_tensors,
                dtype: g.dtype,
            };
            let spec = commands::fixture_spec(g.spec.as_deref(), &overrides)?;
            commands::gen_fixture(&spec, &g.out, g.children, g.sigma, r)
        }),
        Command::Info { path, tensors } => run_single("info", |r| commands::info(&path, tensors, r)),
    }
}

fn print_reports(reports: &[JobReport]) {
    let text = match reports {
        [one] => one.to_json(),
        many => serde_json::to_string_pretty(many).expect("reports serialize"),
    };
    // A closed pipe (e.g. `| head`) is not worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).parse_default_env().init();

    let (reports, err) = match configure_threads(cli.threads) {
        Ok(()) => dispatch(cli.command),
        Err(e) => run_single("setup", |_| Err(e)),
    };
    print_reports(&reports);
    match err {
        None => ExitCode::SUCCESS,
        Some(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
