//! `rst`: search scratch tickets, train baselines, fine-tune, evaluate,
//! build transfer matrices, run the random-switch defense, probe feature
//! distances, and plot results. Every subcommand takes `--config <file>`
//! plus targeted overrides; runs land in a content-addressed directory
//! under the config's `out_dir`.

use clap::{Args, Parser, Subcommand};

use rst_workbench::{run, Overrides, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "rst",
    version,
    about = "Scratch-ticket search and randomized-switch defense workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: std::path::PathBuf,
    /// Replace the config's search ratios (repeatable).
    #[arg(long = "ratio")]
    ratios: Vec<f64>,
    /// Override the attack epsilon.
    #[arg(long)]
    eps: Option<f64>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the evaluation attack: fgsm, fgsm_rs, pgdN, l2pgdN.
    #[arg(long)]
    attack: Option<String>,
    /// Dataset root (falls back to the config, then $RST_DATA_DIR, then
    /// ./data).
    #[arg(long)]
    data_root: Option<String>,
    /// Parent directory for run outputs.
    #[arg(long)]
    out_dir: Option<String>,
    /// Worker threads for independent sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Search tickets (scratch, or trained when [search].source is set).
    Search(Common),
    /// Train a dense baseline, naturally or adversarially.
    Train(Common),
    /// Adversarially fine-tune a ticket's surviving weights.
    Finetune(Common),
    /// Natural and robust accuracy of stored checkpoints.
    Eval(Common),
    /// Cross-ticket attack transferability matrix.
    Transfer(Common),
    /// Random-switch defense over a candidate ticket set.
    R2s(Common),
    /// Feature-map distance under input noise.
    Distance(Common),
    /// Render an SVG from a results CSV.
    Plot(Common),
}

fn main() {
    let cli = Cli::parse();
    let (stage, common) = match &cli.command {
        Command::Search(c) => (Stage::Search, c),
        Command::Train(c) => (Stage::Train, c),
        Command::Finetune(c) => (Stage::Finetune, c),
        Command::Eval(c) => (Stage::Eval, c),
        Command::Transfer(c) => (Stage::Transfer, c),
        Command::R2s(c) => (Stage::R2s, c),
        Command::Distance(c) => (Stage::Distance, c),
        Command::Plot(c) => (Stage::Plot, c),
    };

    let overrides = Overrides {
        ratios: common.ratios.clone(),
        eps: common.eps,
        seed: common.seed,
        attack: common.attack.clone(),
        data_root: common.data_root.clone(),
        out_dir: common.out_dir.clone(),
        jobs: common.jobs,
    };

    let outcome = RunConfig::load(&common.config).and_then(|config| run(config, stage, &overrides));
    match outcome {
        Ok(summary) => {
            println!(
                "{}: {} rows -> {}",
                stage.name(),
                summary.rows,
                summary.dir.display()
            );
        }
        Err(err) => {
            eprintln!("error [{}]: {err}", stage.name());
            std::process::exit(1);
        }
    }
}
