//! Command-line front end: `train`, `heatmap` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 gradcheck failure or internal error, 2 config
//! error, 3 numeric abort.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use specgan::config::{parse_kv_file, RunConfig};
use specgan::data::Corpus;
use specgan::error::Result;
use specgan::gradcheck;
use specgan::heatmap::write_heatmaps;
use specgan::trainer::{load_models, TrainSession};

#[derive(Parser)]
#[command(
    name = "specgan",
    about = "Adversarial training testbed for spectrogram generation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop; writes losses.csv and checkpoints.
    Train {
        /// Config file (key = value lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Discriminator variant: s-t, m-t or m-tf. Also selects the
        /// matching adversarial loss weights unless set explicitly.
        #[arg(long)]
        variant: Option<String>,
        /// Overrides the training and corpus seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for losses.csv and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render input/fine/coarse discriminating maps for a corpus sample.
    Heatmap {
        /// Checkpoint stem (without the .manifest/.bin extension).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus sample index.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Output directory for the PGM files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite over every operation.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_run_config(
    config: Option<&PathBuf>,
    variant: Option<&String>,
    seed: Option<u64>,
    out: Option<&PathBuf>,
) -> Result<RunConfig> {
    let mut raw: BTreeMap<String, String> = match config {
        Some(path) => parse_kv_file(path)?,
        None => BTreeMap::new(),
    };
    if let Some(v) = variant {
        raw.insert("disc.variant".to_string(), v.clone());
    }
    if let Some(s) = seed {
        raw.insert("train.seed".to_string(), s.to_string());
        raw.insert("corpus.seed".to_string(), s.to_string());
    }
    if let Some(dir) = out {
        raw.insert("out.dir".to_string(), dir.to_string_lossy().into_owned());
    }
    RunConfig::from_kv(&raw)
}

fn cmd_train(
    config: Option<PathBuf>,
    variant: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let run_config = load_run_config(config.as_ref(), variant.as_ref(), seed, out.as_ref())?;
    let out_dir = PathBuf::from(&run_config.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut session = TrainSession::new(run_config)?;
    let csv_path = out_dir.join("losses.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    let total = session.run_config.train.total_iters;
    let progress_every = (total / 20).max(1);
    eprintln!(
        "training {} for {} iterations (batch {}, {} samples, N={})",
        session.run_config.discriminator.variant.as_str(),
        total,
        session.run_config.train.batch_size,
        session.run_config.corpus.samples,
        session.run_config.corpus.mel_bins,
    );
    session.run(Some(&out_dir), |report| {
        writeln!(csv, "{}", report.csv_line())?;
        if report.iter % progress_every == 0 || report.iter == total {
            eprintln!(
                "iter {:6}  L_d {:.4}  L_a {:.4}  L_f {:.4}  L_tts {:.4}  L_g {:.4}",
                report.iter, report.l_d, report.l_a, report.l_f, report.l_tts, report.l_g
            );
        }
        Ok(())
    })?;
    csv.flush()?;
    eprintln!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_heatmap(checkpoint: PathBuf, sample: usize, out: Option<PathBuf>) -> Result<()> {
    let loaded = load_models(&checkpoint)?;
    let corpus = Corpus::build(loaded.run_config.corpus.clone())?;
    let sample_data = corpus.get(sample)?;
    let output = loaded.discriminator.discriminate(&sample_data.target)?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from("."));
    let prefix = out_dir.join(format!("heatmap_s{sample:05}"));
    if output.fine.is_none() {
        eprintln!(
            "note: variant {} has no fine-grained map; emitting input and coarse only",
            loaded.run_config.discriminator.variant.as_str()
        );
    }
    let files = write_heatmaps(
        &prefix,
        &sample_data.target,
        &output.coarse,
        output.fine.as_ref(),
    )?;
    println!("{}", files.input.display());
    if let Some(fine) = &files.fine {
        println!("{}", fine.display());
    }
    println!("{}", files.coarse.display());
    Ok(())
}

fn cmd_gradcheck(config: Option<PathBuf>, seed: Option<u64>) -> Result<i32> {
    let run_config = load_run_config(config.as_ref(), None, seed, None)?;
    let reports = gradcheck::run_all(run_config.train.seed);
    let mut all_passed = true;
    for r in &reports {
        println!(
            "{:24} max_rel_err {:12.5e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    if all_passed {
        println!("all {} checks passed", reports.len());
        Ok(0)
    } else {
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        println!("FAILED ops: {}", failing.join(", "));
        Ok(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<i32> = match cli.command {
        Command::Train {
            config,
            variant,
            seed,
            out,
        } => cmd_train(config, variant, seed, out).map(|()| 0),
        Command::Heatmap {
            checkpoint,
            sample,
            out,
        } => cmd_heatmap(checkpoint, sample, out).map(|()| 0),
        Command::Gradcheck { config, seed } => cmd_gradcheck(config, seed),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
