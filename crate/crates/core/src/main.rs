use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rstc::io::{
    atomic_write, format_matrix, load_emb1, parse_matrix, read_file, read_labels, read_train_config,
    save_emb1, save_heads, synth_generate, write_labels, SynthConfig,
};
use rstc::metrics::{accuracy, nmi};
use rstc::numerics::ProbVector;
use rstc::trainer::{solve_labeler, train, Labeler, TrainConfig, TrainReport};
use rstc::transport::{Penalty, SaotConfig};
use rstc::Result;

#[derive(Parser)]
#[command(name = "rstc", version, about = "Clustering of frozen text embeddings with self-adaptive pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded Gaussian mixture as an EMB1 file.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 800)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Largest-to-smallest cluster size ratio.
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        noise_dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the heads on an EMB1 dataset and write assignments and a report.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classes: usize,
        /// key=value training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_assignments: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
        /// Also write the trained head parameters.
        #[arg(long)]
        out_heads: Option<PathBuf>,
    },
    /// Solve one pseudo-labelling transport problem on a stored prediction matrix.
    SolveOt {
        /// Text matrix, one row per sample, rows summing to one.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Saot)]
        mode: Mode,
        #[arg(long, default_value_t = 0.1)]
        epsilon1: f64,
        #[arg(long, default_value_t = 0.1)]
        epsilon2: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print clustering accuracy and NMI of predicted against true labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Validate a training report and write its per-refresh curves as CSV.
    Curves {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Saot,
    Fixed,
    Ma,
    Kl,
}

impl From<Mode> for Labeler {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Saot => Labeler::Saot,
            Mode::Fixed => Labeler::Fixed,
            Mode::Ma => Labeler::MovingAverage,
            Mode::Kl => Labeler::Kl,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            classes,
            n,
            dim,
            ratio,
            separation,
            noise_dims,
            seed,
            out,
        } => {
            let ds = synth_generate(&SynthConfig {
                classes,
                n,
                dim,
                ratio,
                separation,
                noise_dims,
                seed,
            })?;
            save_emb1(&ds, &out)?;
            println!("wrote {} samples of dimension {} to {}", ds.len(), ds.dim(), out.display());
        }
        Command::Cluster {
            data,
            classes,
            config,
            seed,
            out_assignments,
            out_report,
            out_heads,
        } => {
            let mut cfg = match &config {
                Some(path) => read_train_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = load_emb1(&data)?;
            let outcome = train(&ds, classes, &cfg)?;
            write_labels(&out_assignments, &outcome.assignments)?;
            atomic_write(&out_report, outcome.report.to_csv().as_bytes())?;
            if let Some(path) = out_heads {
                save_heads(&outcome.heads, &path)?;
            }
            let last = outcome.report.records.last().expect("report starts with the k-means record");
            println!(
                "{} refreshes, last at step {}, {} clusters{}",
                outcome.report.records.len() - 1,
                last.step,
                last.clusters,
                if outcome.report.stopped_early { ", stopped early" } else { "" }
            );
            if let Some(truth) = &ds.labels {
                println!("ACC {:.6}", accuracy(truth, &outcome.assignments)?);
                println!("NMI {:.6}", nmi(truth, &outcome.assignments)?);
            }
        }
        Command::SolveOt {
            predictions,
            mode,
            epsilon1,
            epsilon2,
            out,
        } => {
            let text = String::from_utf8_lossy(&read_file(&predictions)?).into_owned();
            let p = parse_matrix(&text)?;
            let labeler = Labeler::from(mode);
            let saot = SaotConfig {
                epsilon1,
                epsilon2,
                penalty: match labeler {
                    Labeler::Kl => Penalty::KlToPrevious,
                    _ => Penalty::LogBarrier,
                },
                ..SaotConfig::default()
            };
            saot.validate(p.cols())?;
            let previous = ProbVector::uniform(p.cols());
            let solution = solve_labeler(&p, labeler, &saot, &previous, TrainConfig::default().mu)?;
            let mut body = format!("# objective {}\n# b", solution.objective);
            for v in solution.marginal.as_slice() {
                let _ = write!(body, " {v}");
            }
            body.push('\n');
            body.push_str(&format_matrix(&solution.plan));
            atomic_write(&out, body.as_bytes())?;
            println!("objective {}", solution.objective);
        }
        Command::Eval { pred, truth } => {
            let pred = read_labels(&pred)?;
            let truth = read_labels(&truth)?;
            println!("ACC {:.6}", accuracy(&truth, &pred)?);
            println!("NMI {:.6}", nmi(&truth, &pred)?);
        }
        Command::Curves { report, out } => {
            let text = String::from_utf8_lossy(&read_file(&report)?).into_owned();
            let parsed = TrainReport::from_csv(&text)?;
            atomic_write(&out, parsed.to_csv().as_bytes())?;
            println!("{} records", parsed.records.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
