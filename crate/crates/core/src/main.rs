use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use mobilepipe::augment::GeneratorId;
use mobilepipe::pipeline::{self, PipelineError, RunConfig, OUT_ENV};

#[derive(Parser)]
#[command(name = "mobilepipe", version, about = "Train, shrink, package and field-test small image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest the dataset, write resized copies and the fold layout.
    Prepare,
    /// Cross-validate every size x generator x architecture.
    Search,
    /// Scan filters x neurons of the best configuration and train the final model.
    Reduce,
    /// Write the float (and uint8) containers, labels.txt and metadata.json.
    Package,
    /// Compare computer, gallery and real-time accuracy on the probe images.
    Simulate,
    /// Summarize the run into report.md and report.json.
    Report,
    /// Every stage in order.
    Run,
}

#[derive(Args)]
struct Overrides {
    /// Run configuration (JSON). Flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root with one sub-directory per class.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the search and simulate stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Comma-separated image sizes, e.g. 50,100.
    #[arg(long, global = true, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Comma-separated generator ids, e.g. G1,G3.
    #[arg(long, global = true, value_delimiter = ',')]
    generators: Option<Vec<GeneratorId>>,
    /// Comma-separated architecture presets, e.g. d1m1,d2m1@16x64.
    #[arg(long, global = true, value_delimiter = ',')]
    archs: Option<Vec<String>>,
    /// Also write a uint8-quantized container.
    #[arg(long, global = true)]
    quantize: Option<bool>,
    #[arg(long, global = true)]
    skip_reduction: bool,
    #[arg(long, global = true)]
    skip_generators: bool,
    #[arg(long, global = true)]
    skip_augmentation: bool,
    /// Minimum gallery and real-time accuracy (0-1) for `simulate` to exit 0.
    #[arg(long, global = true)]
    deploy_threshold: Option<f64>,
    /// Full cross-validation for every reduction cell.
    #[arg(long, global = true)]
    cv: bool,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset_root = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = Some(v);
        }
        if let Some(v) = &self.sizes {
            cfg.sizes = v.clone();
        }
        if let Some(v) = &self.generators {
            cfg.generators = v.clone();
        }
        if let Some(v) = &self.archs {
            cfg.archs = v.clone();
        }
        if let Some(v) = self.quantize {
            cfg.quantize = v;
        }
        cfg.skip_reduction |= self.skip_reduction;
        cfg.skip_generators |= self.skip_generators;
        cfg.skip_augmentation |= self.skip_augmentation;
        cfg.reduction.cv |= self.cv;
        if let Some(v) = self.deploy_threshold {
            cfg.deploy_threshold = v;
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = cli.overrides.resolve()?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Prepare => {
            let s = pipeline::cmd_prepare(&cfg)?;
            println!("prepared {} images, {} classes, sizes {:?}, k={}", s.items, s.classes.len(), s.sizes, s.k);
        }
        Command::Search => {
            let b = pipeline::cmd_search(&cfg)?;
            println!("best: size {} {} {} {}", b.key.size, b.key.generator, b.key.arch, b.summary);
        }
        Command::Reduce => {
            let r = pipeline::cmd_reduce(&cfg)?;
            println!("final model {}: {} parameters (base {})", r.arch, r.params, r.base_params);
        }
        Command::Package => {
            let p = pipeline::cmd_package(&cfg)?;
            match p.quantized_bytes {
                Some(q) => println!("packaged: float {} bytes, uint8 {} bytes", p.float_bytes, q),
                None => println!("packaged: float {} bytes", p.float_bytes),
            }
        }
        Command::Simulate => {
            let g = pipeline::cmd_simulate(&cfg)?;
            println!("computer {:.4} gallery {:.4} realtime {:.4}", g.computer, g.gallery, g.realtime);
        }
        Command::Report => {
            println!("{}", pipeline::cmd_report(&cfg)?.display());
        }
        Command::Run => pipeline::run_all(&cfg)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
