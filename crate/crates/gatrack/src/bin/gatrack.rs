//! Command-line front end. All behavior lives in the library; this file
//! only parses arguments, loads the run configuration, and prints results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use gatrack::cli::{
    cmd_eval, cmd_gradcheck, cmd_synth, cmd_track, cmd_train, dump_run_config,
    format_gradcheck_table, load_run_config,
};
use gatrack::evaluation::SynthSpec;
use gatrack::Error;

#[derive(Parser)]
#[command(name = "gatrack", version, about = "Train, run, and score a graph-attention tracker")]
struct Cli {
    /// Run configuration file (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set train.lr_peak=0.02. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Print the fully resolved configuration (every default spelled out) and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on every sequence under the data directory.
    Train {
        /// Sequence data root (overrides paths.data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint output directory (overrides paths.checkpoints).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Track one sequence from its first ground-truth box.
    Track {
        /// Sequence directory holding numbered frames and groundtruth.txt.
        sequence: PathBuf,
        /// Checkpoint to load (default: <paths.checkpoints>/final.ckpt).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output file for predicted boxes (default: <paths.results>/<name>.txt).
        #[arg(long, value_name = "FILE")]
        results: Option<PathBuf>,
        /// Also write frames with the predicted box drawn in, into this directory.
        #[arg(long, value_name = "DIR")]
        overlay: Option<PathBuf>,
    },
    /// Score results files against ground truth.
    Eval {
        /// Data root holding <name>/groundtruth.txt (overrides paths.data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Results file or directory of .txt files (overrides paths.results).
        #[arg(long, value_name = "PATH")]
        results: Option<PathBuf>,
        /// Worker threads for scoring.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also print the full success and precision curves.
        #[arg(long)]
        curves: bool,
    },
    /// Compare every analytic gradient against finite differences.
    Gradcheck,
    /// Render a synthetic sequence into a directory tree usable by track and train.
    Synth {
        /// Directory to create the sequence under.
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
        #[arg(long, default_value_t = 64.0)]
        init_w: f64,
        #[arg(long, default_value_t = 48.0)]
        init_h: f64,
        /// Target speed in pixels per frame.
        #[arg(long, default_value_t = 3.0)]
        motion: f64,
        /// Multiplier on both box sides reached by the final frame.
        #[arg(long, default_value_t = 1.0)]
        scale_drift: f64,
        /// Aspect skew reached by the final frame (final ratio = skew^2 x initial).
        #[arg(long, default_value_t = 1.0)]
        aspect_drift: f64,
        /// Number of similar-texture decoy rectangles.
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        /// Per-pixel uniform noise amplitude, in 0..255 units.
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        /// Sequence seed (default: the run config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> gatrack::Result<ExitCode> {
    let mut cfg = load_run_config(cli.config.as_deref(), &cli.set)?;
    if cli.dump_config {
        print!("{}", dump_run_config(&cfg)?);
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        return Err(Error::InvalidArgument("missing subcommand".into()));
    };

    match command {
        Command::Train { data, out } => {
            if let Some(d) = data {
                cfg.paths.data = d;
            }
            if let Some(o) = out {
                cfg.paths.checkpoints = o;
            }
            let report = cmd_train(&cfg)?;
            println!("trained: loss {} -> {}", report.first_loss, report.last_loss);
            println!("metrics: {}", report.metrics_path.display());
            println!("checkpoint: {}", report.final_checkpoint.display());
        }
        Command::Track {
            sequence,
            checkpoint,
            results,
            overlay,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoints.join("final.ckpt"));
            let path = cmd_track(
                &cfg,
                &sequence,
                &ckpt,
                results.as_deref(),
                overlay.as_deref(),
            )?;
            println!("results: {}", path.display());
        }
        Command::Eval {
            data,
            results,
            workers,
            curves,
        } => {
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let results = results.unwrap_or_else(|| cfg.paths.results.clone());
            let report = cmd_eval(&data, &results, workers.max(1))?;
            print!("{}", report.render(curves));
        }
        Command::Gradcheck => {
            let reports = cmd_gradcheck(cfg.seed)?;
            print!("{}", format_gradcheck_table(&reports));
            if reports.iter().any(|r| !r.pass) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Synth {
            out,
            frames,
            width,
            height,
            init_w,
            init_h,
            motion,
            scale_drift,
            aspect_drift,
            distractors,
            noise,
            seed,
        } => {
            let spec = SynthSpec {
                n_frames: frames,
                width,
                height,
                init_w,
                init_h,
                motion,
                scale_drift,
                aspect_drift,
                distractors,
                noise,
                seed: seed.unwrap_or(cfg.seed),
            };
            let (dir, clipped) = cmd_synth(&spec, &out)?;
            println!("sequence: {}", dir.display());
            if clipped {
                println!("note: trajectory clipped at a canvas edge");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
