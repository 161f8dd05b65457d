use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use forestnet::forestnet::Variant;
use forestnet::pipeline::{run_all, ExperimentConfig, PipelineError, Stage};

/// Scene-coordinate regression forests, ForestNet fine-tuning and RANSAC
/// relocalization, one subcommand per pipeline stage.
#[derive(Parser)]
#[command(name = "forestnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/test sequences.
    Synth(Common),
    /// Train the regression forest on the training sequence.
    TrainForest(Common),
    /// Map the forest onto one network per variant.
    Map(Common),
    /// Fine-tune every mapped network.
    Finetune(Common),
    /// Turn a fine-tuned network back into a forest.
    Mapback(Common),
    /// Localize every test frame with every method.
    Localize(Common),
    /// Write the method x averaging matrix (JSON and text).
    Report(Common),
    /// Run all stages in order.
    Run(Common),
    /// Print the effective configuration as TOML.
    ShowConfig(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Seed for forest training, fine-tuning and RANSAC.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    gm_weiszfeld_iters: Option<usize>,
    #[arg(long)]
    gm_meanshift_iters: Option<usize>,
    /// Mean-shift bandwidth of the geometric-median module, meters.
    #[arg(long)]
    gm_sigma: Option<f64>,
    #[arg(long)]
    subtree_depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    inlier_px: Option<f64>,
    /// Pixels sampled per test frame.
    #[arg(long)]
    samples: Option<usize>,
    /// Variant to map back (L, LS or LST).
    #[arg(long)]
    variant: Option<Variant>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(s) = self.seed {
            c.forest.seed = s;
            c.finetune.seed = s;
            c.ransac.seed = s;
        }
        if let Some(v) = self.trees {
            c.forest.n_trees = v;
        }
        if let Some(v) = self.depth {
            c.forest.max_depth = v;
        }
        if let Some(v) = self.features {
            c.features.count = v;
        }
        if let Some(v) = self.gm_weiszfeld_iters {
            c.gm.weiszfeld_iters = v;
        }
        if let Some(v) = self.gm_meanshift_iters {
            c.gm.meanshift_iters = v;
        }
        if let Some(v) = self.gm_sigma {
            c.gm.sigma = v;
        }
        if let Some(v) = self.subtree_depth {
            c.mapping.subtree_depth = Some(v);
        }
        if let Some(v) = self.epochs {
            c.finetune.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.finetune.learning_rate = v;
        }
        if let Some(v) = self.hypotheses {
            c.ransac.hypotheses = v;
        }
        if let Some(v) = self.inlier_px {
            c.ransac.inlier_px = v;
        }
        if let Some(v) = self.samples {
            c.localize.samples = v;
        }
        if let Some(v) = self.variant {
            c.mapback.variant = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    let (stage, common) = match cmd {
        Command::Synth(c) => (Some(Stage::Synth), c),
        Command::TrainForest(c) => (Some(Stage::TrainForest), c),
        Command::Map(c) => (Some(Stage::Map), c),
        Command::Finetune(c) => (Some(Stage::Finetune), c),
        Command::Mapback(c) => (Some(Stage::Mapback), c),
        Command::Localize(c) => (Some(Stage::Localize), c),
        Command::Report(c) => (Some(Stage::Report), c),
        Command::Run(c) => (None, c),
        Command::ShowConfig(c) => {
            print!("{}", c.config()?.to_toml());
            return Ok(());
        }
    };
    let cfg = common.config()?;
    match stage {
        Some(s) => {
            let log = s.run(&cfg)?;
            println!("{}", serde_json::to_string(&log).expect("log serializes"));
            if s == Stage::Report {
                let table = cfg.output_dir.join("report.txt");
                if let Ok(t) = std::fs::read_to_string(table) {
                    print!("{t}");
                }
            }
        }
        None => run_all(&cfg)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
