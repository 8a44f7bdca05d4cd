use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtnet::commands::{
    cmd_bench, cmd_export_weights, cmd_stylize, cmd_train, exit_code, BenchArgs, ExportArgs, StylizeArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "mtnet", version, about = "Hierarchical multimodal style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a directory of content images.
    Train {
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        style: Option<PathBuf>,
        /// Second style image, used by levels 2 and 3 unless style_levels is set.
        #[arg(long)]
        style2: Option<PathBuf>,
        #[arg(long)]
        content_dir: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Comma-separated level weights.
        #[arg(long)]
        lambdas: Option<String>,
        /// Width and scale divisor.
        #[arg(long)]
        tiny: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to resume from.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "mtnet-run")]
        output: PathBuf,
    },
    /// Stylize one image with a trained checkpoint.
    Stylize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Shorter side of the final output.
        #[arg(long)]
        size: Option<usize>,
        /// Also write the outputs of earlier levels.
        #[arg(long)]
        emit_intermediate: bool,
    },
    /// Time repeated stylizations of a fixed random input.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the JSON report.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Convert torchvision VGG-19 safetensors (or the built-in tiny network) to a weights container.
    ExportWeights {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> mtnet::Result<()> {
    match cli.command {
        Command::Train { config, style, style2, content_dir, iters, lr, beta, lambdas, tiny, seed, model, output } => {
            let mut overrides = Vec::new();
            let mut push = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    overrides.push((k.to_string(), v));
                }
            };
            push("iterations", iters.map(|v| v.to_string()));
            push("lr", lr.map(|v| v.to_string()));
            push("beta", beta.map(|v| v.to_string()));
            push("lambdas", lambdas);
            push("tiny", tiny.map(|v| v.to_string()));
            push("seed", seed.map(|v| v.to_string()));
            let args = TrainArgs { config, style, style2, content_dir, output, resume: model, overrides };
            let m = cmd_train(&args)?;
            for a in &m.artifacts {
                println!("wrote {a}");
            }
        }
        Command::Stylize { model, input, output, levels, size, emit_intermediate } => {
            let m = cmd_stylize(&StylizeArgs { model, input, output, levels, size, emit_intermediate })?;
            for a in &m.artifacts {
                println!("wrote {a}");
            }
        }
        Command::Bench { model, size, reps, seed, output } => {
            let (report, manifest) = cmd_bench(&BenchArgs { model, size, reps, seed })?;
            println!("reps {} size {}x{}", report.reps, report.size, report.size);
            println!("load {:.3} ms (excluded)", report.load_ms);
            println!("mean {:.3} ms  std {:.3} ms", report.mean_ms, report.std_ms);
            for (k, s) in report.stage_mean_ms.iter().enumerate() {
                println!("level {} {:.3} ms", k + 1, s);
            }
            println!("split error {:.4}%", report.split_error * 100.0);
            match report.peak_rss_kb {
                Some(kb) => println!("peak rss {kb} kB"),
                None => println!("peak rss unavailable"),
            }
            if let Some(p) = output {
                std::fs::write(&p, report.to_json(&manifest)).map_err(|e| mtnet::Error::io(&p, e))?;
            }
        }
        Command::ExportWeights { input, output } => {
            let m = cmd_export_weights(&ExportArgs { input, output })?;
            for a in &m.artifacts {
                println!("wrote {a}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
