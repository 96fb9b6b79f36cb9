//! `moelab`: generate data, train, sweep, verify, and emit plot data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_core::experiment::{
    generate_seed_data, run_on_data, run_sweep, verify_suite, ExperimentConfig, VerifyOptions,
    VerifySuite,
};
use moe_core::io;
use moe_core::verification::{reports_to_csv, reports_to_table};
use moe_core::{Activation, MoeError};

#[derive(Parser)]
#[command(name = "moelab", version, about = "Mixture-of-experts experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset, used when no config is given (setting1..setting4, with optional -fast).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    deterministic: Option<bool>,
    /// Worker threads for data generation and gradients.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and test datasets.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Also write CSV copies.
        #[arg(long)]
        csv: bool,
    },
    /// Train one model and write metrics, checkpoint and report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        activation: Option<Activation>,
    },
    /// Train over consecutive seeds and summarize.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        activation: Option<Activation>,
    },
    /// Run numerical checks: smoothing, gap, gradcheck, zerosum, symmetry, theorem4.1, all.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Monte Carlo draws per routing check.
        #[arg(long)]
        samples: Option<usize>,
        /// Random trials per routing check and expert count.
        #[arg(long)]
        trials: Option<usize>,
        /// Use the n = 4,000 presets for the training-based checks.
        #[arg(long)]
        fast: bool,
    },
    /// Merge training-log CSVs into long-format entropy curves.
    Plotdata {
        /// Training logs, as PATH or LABEL=PATH.
        inputs: Vec<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Verification(String),
    Io(String),
}

impl From<MoeError> for Failure {
    fn from(e: MoeError) -> Self {
        match e {
            MoeError::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match (&common.config, &common.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset("setting1")?,
    };
    if let Some(d) = common.deterministic {
        config.train.deterministic = d;
    }
    if let Some(out) = &common.out {
        config.run.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn set_threads(threads: Option<usize>) -> CliResult {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    io::atomic_write(path, text.as_bytes()).map_err(Failure::from)
}

fn cmd_generate(common: &Common, csv: bool) -> CliResult {
    set_threads(common.threads)?;
    let config = load_config(common)?;
    let seed = common.seed.unwrap_or(0);
    let data = generate_seed_data(&config, seed)?;
    let out = &config.run.out_dir;
    for (name, ds) in [("train", &data.train), ("test", &data.test)] {
        io::write_dataset(&out.join(format!("{name}.bin")), ds)?;
        if csv {
            write_text(&out.join(format!("{name}.csv")), &io::dataset_to_csv(ds))?;
        }
        let positives = ds.iter().filter(|e| e.meta.y > 0).count();
        let mut per_cluster = vec![0usize; ds.clusters];
        ds.iter().for_each(|e| per_cluster[e.meta.k] += 1);
        println!(
            "{name}: n={} d={} P={} K={} sigma_p={} positives={positives} clusters={per_cluster:?}",
            ds.len(),
            ds.d,
            ds.patches,
            ds.clusters,
            ds.sigma_p
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(common: &Common, activation: Option<Activation>) -> CliResult {
    set_threads(common.threads)?;
    let mut config = load_config(common)?;
    if let Some(a) = activation {
        config.arch.activation = a;
    }
    let seed = common.seed.unwrap_or(config.train.seed);
    let data = generate_seed_data(&config, seed)?;
    let art = run_on_data(&config, &data, seed, &mut |log, _| {
        eprintln!(
            "t={:>5} loss={:.4} train={:.4} test={:.4} entropy={:.3}",
            log.t, log.perturbed_loss, log.train_accuracy, log.test_accuracy, log.dispatch_entropy
        );
    })?;
    let out = &config.run.out_dir;
    write_text(&out.join("metrics.csv"), &io::training_log_csv(&art.outcome.logs))?;
    io::write_checkpoint(&out.join("checkpoint.bin"), &art.outcome.model, art.outcome.iterations)?;
    write_text(&out.join("report.txt"), &art.report.to_kv_text())?;
    write_text(&out.join("config.toml"), &config.to_toml()?)?;
    println!("{}", art.report.dispatch);
    println!(
        "iterations={} train_accuracy={:.4} test_accuracy={:.4} dispatch_entropy={:.4} router_correctness={:.4}",
        art.record.iterations,
        art.record.train_accuracy,
        art.record.test_accuracy,
        art.record.dispatch_entropy,
        art.record.router_correctness
    );
    Ok(())
}

fn cmd_sweep(common: &Common, seeds: Option<usize>, activation: Option<Activation>) -> CliResult {
    set_threads(common.threads)?;
    let mut config = load_config(common)?;
    if let Some(a) = activation {
        config.arch.activation = a;
    }
    let num = seeds.unwrap_or(config.run.num_seeds);
    let base = common.seed.unwrap_or(0);
    let out = config.run.out_dir.clone();
    let summary = run_sweep(&config, base, num, &mut |art| {
        let r = &art.record;
        eprintln!(
            "seed={} iterations={} test_accuracy={:.4} dispatch_entropy={:.4}",
            r.seed, r.iterations, r.test_accuracy, r.dispatch_entropy
        );
        io::atomic_write(
            &out.join(format!("metrics_seed{}.csv", r.seed)),
            io::training_log_csv(&art.outcome.logs).as_bytes(),
        )
    })?;
    write_text(&out.join("summary.csv"), &summary.to_csv())?;
    write_text(&out.join("summary.txt"), &summary.to_text())?;
    print!("{}", summary.to_text());
    Ok(())
}

fn cmd_verify(
    suite: &str,
    seed: Option<u64>,
    out: Option<&Path>,
    samples: Option<usize>,
    trials: Option<usize>,
    fast: bool,
) -> CliResult {
    let suite: VerifySuite = suite.parse()?;
    let mut opts = VerifyOptions {
        seed: seed.unwrap_or(0),
        ..VerifyOptions::default()
    };
    if let Some(s) = samples {
        opts.samples = s;
    }
    if let Some(t) = trials {
        opts.trials = t;
    }
    if fast {
        opts.zerosum_preset = "setting1-fast".into();
        opts.ceiling_preset = "setting3-fast".into();
    }
    let reports = verify_suite(suite, &opts)?;
    print!("{}", reports_to_table(&reports));
    if let Some(dir) = out {
        write_text(&dir.join("verify_report.csv"), &reports_to_csv(&reports))?;
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.lemma.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("failed checks: {}", failed.join(", "))))
    }
}

fn cmd_plotdata(inputs: &[String], out: Option<&Path>) -> CliResult {
    if inputs.is_empty() {
        return Err(Failure::Usage("plotdata needs at least one training log".into()));
    }
    let mut text = String::from("label,t,entropy\n");
    for input in inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(input);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| input.clone());
                (stem, p)
            }
        };
        let body = fs::read_to_string(&path)?;
        let rows = io::read_entropy_column(&body)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        for (t, h) in rows {
            text.push_str(&format!("{label},{t},{h:.9e}\n"));
        }
    }
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Generate { common, csv } => cmd_generate(common, *csv),
        Command::Train { common, activation } => cmd_train(common, *activation),
        Command::Sweep {
            common,
            seeds,
            activation,
        } => cmd_sweep(common, *seeds, *activation),
        Command::Verify {
            suite,
            seed,
            out,
            threads,
            samples,
            trials,
            fast,
        } => set_threads(*threads)
            .and_then(|_| cmd_verify(suite, *seed, out.as_deref(), *samples, *trials, *fast)),
        Command::Plotdata { inputs, out } => cmd_plotdata(inputs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("I/O error: {msg}");
            ExitCode::from(3)
        }
    }
}
