use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use asfseg::autodiff::BackwardFault;
use asfseg::harness::{
    cmd_ablation, cmd_edge_gt, cmd_evaluate, cmd_gradcheck, cmd_predict, cmd_prepare, cmd_train,
    AblationSpec, GradcheckConfig, RunConfig,
};
use asfseg::imaging::EdgeGtParams;
use asfseg::metrics::DEFAULT_THRESHOLD;
use asfseg::Error;

/// 2.5D adjacent-slice-fusion segmentation of lung nodules.
#[derive(Parser)]
#[command(name = "asfseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest volumes and write the tiled dataset and manifest.
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train on the prepared dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint, restoring the optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Do not echo log records to stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Segment an image volume with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Volume name (path without the .json/.raw extension).
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
    },
    /// Score a prediction volume against a ground-truth mask volume.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
    },
    /// Build edge-band ground truth and overlay images for a mask volume.
    EdgeGt {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        sigma: f64,
        #[arg(long, default_value_t = 25)]
        kernel: usize,
        #[arg(long, default_value_t = 0.1)]
        canny_low: f64,
        #[arg(long, default_value_t = 0.3)]
        canny_high: f64,
        #[arg(long, default_value_t = 1e-3)]
        band_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the component and fusion variants.
    Ablation {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Run config; only its [gradcheck] table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write gradcheck.json and gradcheck.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Deliberately break a backward rule, to see the check fail.
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    ConvWeightGrad,
}

enum Outcome {
    Ok,
    Failed,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Prepare { config } => {
            let cfg = RunConfig::load(&config)?;
            let m = cmd_prepare(&cfg)?;
            println!(
                "prepared {} volume(s), {} triplets, {} tile-triples of {}x{} in {}",
                m.volumes.len(),
                m.triplets,
                m.samples.len(),
                m.tile,
                m.tile,
                cfg.paths.data_dir.display()
            );
        }
        Command::Train {
            config,
            resume,
            quiet,
        } => {
            let cfg = RunConfig::load(&config)?;
            let s = cmd_train(&cfg, resume.as_deref(), &mut |r| {
                if !quiet {
                    eprintln!("{}", serde_json::to_string(r).expect("record serializes"));
                }
            })?;
            println!(
                "trained steps {}..{}; checkpoint {}",
                s.start_step,
                s.end_step,
                s.checkpoint.display()
            );
        }
        Command::Predict {
            ckpt,
            volume,
            out,
            threshold,
        } => {
            let p = cmd_predict(&ckpt, &volume, &out, threshold)?;
            println!(
                "wrote {} and {} ({} positive voxels)",
                out.join("prob").display(),
                out.join("mask").display(),
                p.mask.positive_count()
            );
        }
        Command::Evaluate {
            pred,
            gt,
            out,
            threshold,
        } => {
            let r = cmd_evaluate(&pred, &gt, &out, threshold)?;
            print!("{}", r.to_table());
        }
        Command::EdgeGt {
            mask,
            sigma,
            kernel,
            canny_low,
            canny_high,
            band_threshold,
            out,
        } => {
            let params = EdgeGtParams {
                sigma,
                kernel,
                canny_low,
                canny_high,
                band_threshold,
            };
            let e = cmd_edge_gt(&mask, &params, &out)?;
            println!(
                "wrote {} ({} band voxels) and {} overlays",
                out.join("edge").display(),
                e.positive_count(),
                e.depth()
            );
        }
        Command::Ablation { spec } => {
            let spec = AblationSpec::load(&spec)?;
            let r = cmd_ablation(&spec, &mut |msg| eprintln!("training {msg}"))?;
            print!("{}", r.to_table());
        }
        Command::Gradcheck {
            config,
            out,
            inject_fault,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?.gradcheck,
                None => GradcheckConfig::default(),
            };
            let fault = inject_fault.map(|Fault::ConvWeightGrad| BackwardFault::NegateConvWeightGrad);
            let r = cmd_gradcheck(&cfg, fault)?;
            print!("{}", r.to_table());
            if let Some(dir) = out {
                let mut files = asfseg::harness::Outputs::new();
                let json = serde_json::to_string_pretty(&r).expect("report serializes");
                files.write(&dir.join("gradcheck.json"), json.as_bytes())?;
                files.write(&dir.join("gradcheck.txt"), r.to_table().as_bytes())?;
                files.commit();
            }
            if !r.passed {
                return Ok(Outcome::Failed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
