use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use partial_coherence::pipeline::{
    cmd_calibrate, cmd_entropy, cmd_generate, cmd_speckle, cmd_verify_manifest, ExperimentConfig, GenerateOptions,
    Preset, DEFAULT_SPECKLE_WINDOW, VISIBILITY_CSV,
};
use partial_coherence::plot::cmd_plot;
use partial_coherence::{Error, Result};

/// Partially coherent imaging simulations: coherence calibration, dataset
/// generation and image metrics.
#[derive(Parser)]
#[command(name = "pcoh", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Double-pinhole fringe visibility over the l_c sweep.
    Calibrate(ExperimentArgs),
    /// Generate a labeled intensity dataset with a manifest.
    Generate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Keep records from an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Generate at most N missing items, then write an incomplete manifest.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
    },
    /// Mean two-dimensional entropy per l_c.
    Entropy {
        manifest: PathBuf,
        /// Second manifest; one of the pair must include a diffuser.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Mean speckle size per depth with a linear fit.
    Speckle {
        manifest: PathBuf,
        /// Side of the centered analysis window, pixels.
        #[arg(long, default_value_t = DEFAULT_SPECKLE_WINDOW)]
        window: usize,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Render metric CSVs as SVG curves.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Check every record of a manifest against its content hash.
    VerifyManifest { manifest: PathBuf },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML; preset defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated coherence lengths, meters.
    #[arg(long, value_delimiter = ',')]
    l_c: Option<Vec<f64>>,
    /// Comma-separated detector depths, meters.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<f64>>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// 5000 objects; prints a runtime estimate first.
    #[arg(long)]
    full_scale: bool,
    /// 25 mm hole-to-detector distance (fringes below two pixels).
    #[arg(long)]
    short_distance: bool,
    #[arg(long)]
    no_bandlimit: bool,
    #[arg(long)]
    pad_factor: Option<usize>,
    #[arg(long)]
    no_previews: bool,
}

impl ExperimentArgs {
    fn resolve(&self, default_preset: Preset) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::for_preset(self.preset.unwrap_or(default_preset)),
        };
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(l) = &self.l_c {
            cfg.l_c = l.clone();
        }
        if let Some(d) = &self.depths {
            cfg.depths = d.clone();
        }
        if let Some(m) = self.realizations {
            cfg.realizations = m;
        }
        if let Some(n) = self.objects {
            cfg.objects.count = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        if let Some(p) = self.pad_factor {
            cfg.propagation.pad_factor = Some(p);
        }
        cfg.objects.full_scale |= self.full_scale;
        cfg.metrology.short_distance |= self.short_distance;
        cfg.propagation.bandlimit &= !self.no_bandlimit;
        cfg.previews &= !self.no_previews;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate(args) => {
            let cfg = args.resolve(Preset::Pinhole)?;
            for p in cmd_calibrate(&cfg)? {
                println!("l_c = {:.4e} m  V = {:.6}", p.l_c, p.report.v);
            }
            println!("wrote {}", cfg.output_dir.join(VISIBILITY_CSV).display());
        }
        Command::Generate {
            exp,
            resume,
            stop_after,
        } => {
            let cfg = exp.resolve(Preset::Direct)?;
            let m = cmd_generate(&cfg, &GenerateOptions { resume, stop_after })?;
            let state = if m.header.complete { "complete" } else { "incomplete" };
            println!(
                "{} records ({state}) in {}",
                m.records.len(),
                cfg.output_dir.join(partial_coherence::dataset::MANIFEST_FILE).display()
            );
        }
        Command::Entropy {
            manifest,
            compare,
            output,
        } => {
            let csv = cmd_entropy(&manifest, compare.as_deref(), output.as_deref())?;
            if output.is_none() {
                print!("{csv}");
            }
        }
        Command::Speckle {
            manifest,
            window,
            output,
        } => {
            let s = cmd_speckle(&manifest, window, output.as_deref())?;
            if output.is_none() {
                print!("{}", s.csv);
            }
            println!(
                "fit: slope = {:.6e} m/m, intercept = {:.6e} m, R^2 = {:.5}",
                s.fit.slope, s.fit.intercept, s.fit.r2
            );
        }
        Command::Plot { csv, output_dir } => {
            for p in cmd_plot(&csv, &output_dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::VerifyManifest { manifest } => {
            let m = cmd_verify_manifest(&manifest)?;
            println!("{}: {} records verified", manifest.display(), m.records.len());
            if !m.header.complete {
                return Err(Error::data(format!(
                    "manifest incomplete, resume cursor {:?}",
                    m.header.resume_cursor
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pcoh: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
