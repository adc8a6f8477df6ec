//! Thin command-line front end; all behavior lives in the library's
//! harness module. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure, 3 failed gradient check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kernelfit::harness::{
    cmd_deblur, cmd_denoise, cmd_eval, cmd_gradcheck, cmd_train, cmd_upsample, RunConfig,
};
use kernelfit::Error;

#[derive(Parser)]
#[command(
    name = "kernelfit",
    version,
    about = "Procedural image-filter kernels with per-pixel parameters",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Values given here override the
/// config file.
#[derive(Args)]
struct Common {
    /// Line-oriented key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kernel family
    #[arg(long, value_parser = ["nlm", "iso", "aniso", "polyblur"])]
    spec: Option<String>,
    /// Master random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (default: one per core)
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::new(),
        };
        if let Some(s) = &self.spec {
            cfg.set("spec", s.clone());
        }
        if let Some(s) = self.seed {
            cfg.set("seed", s.to_string());
        }
        if let Some(t) = self.threads {
            cfg.set("threads", t.to_string());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct IoArgs {
    /// Input image (PNG, PPM/PGM or PFM)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output image path
    #[arg(long)]
    output: Option<PathBuf>,
    /// Clean reference image (required by the oracle method)
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Trained network checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Noise standard deviation of the input, in [0,1] signal units
    #[arg(long)]
    sigma: Option<f64>,
    /// Parameter source: global, oracle or checkpoint
    #[arg(long)]
    method: Option<String>,
    /// Also write the parameter map (PFM + sidecar) and a false-color PNG
    #[arg(long)]
    export_params: bool,
}

impl IoArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.input {
            cfg.set("input", p.display().to_string());
        }
        if let Some(p) = &self.output {
            cfg.set("output", p.display().to_string());
        }
        if let Some(p) = &self.reference {
            cfg.set("reference", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            cfg.set("checkpoint", p.display().to_string());
        }
        if let Some(s) = self.sigma {
            cfg.set("sigma", s.to_string());
        }
        if let Some(m) = &self.method {
            cfg.set("method", m.clone());
        }
        if self.export_params {
            cfg.set("export_params", "true");
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Remove noise with a spatially varying kernel
    Denoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: IoArgs,
    },
    /// Shorthand for denoise --method oracle
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: IoArgs,
    },
    /// Sharpen with polynomial reblurring coefficients
    Deblur {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: IoArgs,
        /// Sigma of the fixed base blur
        #[arg(long)]
        base_blur_sigma: Option<f64>,
    },
    /// Fractionally upsample with continuous kernel sampling
    Upsample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: IoArgs,
        /// Single scale factor
        #[arg(long)]
        factor: Option<f64>,
        /// Comma-separated scale factors (one output file each)
        #[arg(long)]
        factors: Option<String>,
    },
    /// Train the parameter-map predictor on a directory of clean images
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of clean training images
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        crops_per_epoch: Option<usize>,
        #[arg(long)]
        crop_size: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Training noise sigma range, low end
        #[arg(long)]
        noise_low: Option<f64>,
        /// Training noise sigma range, high end
        #[arg(long)]
        noise_high: Option<f64>,
    },
    /// Compare global / network / oracle PSNR over a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of clean evaluation images
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// CSV output path (table always prints to stdout)
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated noise sigmas
        #[arg(long)]
        sigmas: Option<String>,
        /// Single noise sigma
        #[arg(long)]
        sigma: Option<f64>,
        /// Trained network checkpoint (adds the network column)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate only the first N images
        #[arg(long)]
        limit: Option<usize>,
        /// Oracle gradient steps per image
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Finite-difference validation of all analytic gradients
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random trials per kernel family
        #[arg(long)]
        trials: Option<usize>,
        /// Random trials for the network backward check
        #[arg(long)]
        net_trials: Option<usize>,
        /// Deliberately corrupt the analytic gradients (negative control)
        #[arg(long, hide = true)]
        corrupt_gradients: bool,
    },
}

fn build_thread_pool(cfg: &RunConfig) -> Result<(), Error> {
    if let Some(n) = cfg.get_usize("threads")? {
        if n == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Denoise { common, io } => {
            let mut cfg = common.resolve()?;
            io.apply(&mut cfg);
            build_thread_pool(&cfg)?;
            cmd_denoise(&cfg)?;
            Ok(0)
        }
        Command::Oracle { common, io } => {
            let mut cfg = common.resolve()?;
            io.apply(&mut cfg);
            cfg.set("method", "oracle");
            build_thread_pool(&cfg)?;
            cmd_denoise(&cfg)?;
            Ok(0)
        }
        Command::Deblur {
            common,
            io,
            base_blur_sigma,
        } => {
            let mut cfg = common.resolve()?;
            io.apply(&mut cfg);
            if let Some(s) = base_blur_sigma {
                cfg.set("base_blur_sigma", s.to_string());
            }
            build_thread_pool(&cfg)?;
            cmd_deblur(&cfg)?;
            Ok(0)
        }
        Command::Upsample {
            common,
            io,
            factor,
            factors,
        } => {
            let mut cfg = common.resolve()?;
            io.apply(&mut cfg);
            if let Some(f) = factor {
                cfg.set("factor", f.to_string());
            }
            if let Some(f) = factors {
                cfg.set("factors", f);
            }
            build_thread_pool(&cfg)?;
            cmd_upsample(&cfg)?;
            Ok(0)
        }
        Command::Train {
            common,
            dataset,
            output,
            epochs,
            crops_per_epoch,
            crop_size,
            batch,
            learning_rate,
            noise_low,
            noise_high,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = dataset {
                cfg.set("dataset", p.display().to_string());
            }
            if let Some(p) = output {
                cfg.set("output", p.display().to_string());
            }
            for (key, v) in [
                ("epochs", epochs),
                ("crops_per_epoch", crops_per_epoch),
                ("crop_size", crop_size),
                ("batch", batch),
            ] {
                if let Some(v) = v {
                    cfg.set(key, v.to_string());
                }
            }
            for (key, v) in [
                ("learning_rate", learning_rate),
                ("noise_low", noise_low),
                ("noise_high", noise_high),
            ] {
                if let Some(v) = v {
                    cfg.set(key, v.to_string());
                }
            }
            build_thread_pool(&cfg)?;
            cmd_train(&cfg)?;
            Ok(0)
        }
        Command::Eval {
            common,
            dataset,
            output,
            sigmas,
            sigma,
            checkpoint,
            limit,
            steps,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = dataset {
                cfg.set("dataset", p.display().to_string());
            }
            if let Some(p) = output {
                cfg.set("output", p.display().to_string());
            }
            if let Some(s) = sigmas {
                cfg.set("sigmas", s);
            }
            if let Some(s) = sigma {
                cfg.set("sigma", s.to_string());
            }
            if let Some(p) = checkpoint {
                cfg.set("checkpoint", p.display().to_string());
            }
            if let Some(l) = limit {
                cfg.set("limit", l.to_string());
            }
            if let Some(s) = steps {
                cfg.set("steps", s.to_string());
            }
            build_thread_pool(&cfg)?;
            cmd_eval(&cfg)?;
            Ok(0)
        }
        Command::Gradcheck {
            common,
            trials,
            net_trials,
            corrupt_gradients,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = trials {
                cfg.set("trials", t.to_string());
            }
            if let Some(t) = net_trials {
                cfg.set("net_trials", t.to_string());
            }
            if corrupt_gradients {
                cfg.set("corrupt_gradients", "true");
            }
            build_thread_pool(&cfg)?;
            let passed = cmd_gradcheck(&cfg)?;
            Ok(if passed { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    // classify clap's own exits: help/version are success, parse errors
    // are usage errors (exit 1)
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
