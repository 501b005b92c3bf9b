//! `tavat` command line: train, evaluate, ablate and export-vocab.

mod export;
mod overrides;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tavat::data::Tokenizer;
use tavat::train::{self, AblationGrid, Split, TrainConfig};
use tavat::vocab::PerturbationVocabulary;

use export::Format;
use overrides::ConfigArgs;

#[derive(Parser, Debug)]
#[command(
    name = "tavat",
    version,
    about = "Token-aware virtual adversarial training for small text models",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its checkpoint, tokenizer, config and metrics
    Train(TrainArgs),
    /// Score a saved run on its dev (or train) split
    Evaluate(EvaluateArgs),
    /// Run an ablation grid over several seed replicates
    Ablate(AblateArgs),
    /// Dump a perturbation vocabulary file as JSON or CSV
    ExportVocab(ExportArgs),
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output directory (default: <TAVAT_OUT_DIR>/<run name>)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Root for default output directories
    #[arg(long, env = "TAVAT_OUT_DIR", default_value = "runs")]
    out_root: PathBuf,
    /// Run name used under the output root (default derived from task, mode and seed)
    #[arg(long)]
    name: Option<String>,
}

impl OutputArgs {
    fn resolve(&self, config: &TrainConfig, kind: &str) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        if let Some(d) = &config.output_dir {
            return d.clone();
        }
        let name = self.name.clone().unwrap_or_else(|| {
            let mode = serde_json::to_value(config.adv.mode)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned));
            format!(
                "{}-{kind}-{}-s{}",
                config.task_name,
                mode.unwrap_or_default(),
                config.seeds.init
            )
        });
        self.out_root.join(name)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Also copy the trained perturbation vocabulary to this path
    #[arg(long)]
    save_ptb_vocab: Option<PathBuf>,
    /// Add a saved perturbation vocabulary onto the initial token embeddings
    #[arg(long)]
    init_embedding_from_vocab: Option<PathBuf>,
    /// Print the resolved config and exit
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Dev,
    Train,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run directory written by `train`
    run: PathBuf,
    /// Checkpoint to score instead of the run's own
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dev")]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GridArg {
    /// Perturbation vocabulary x token normalization (4 rows)
    VocabTokenNorm,
    /// Which token kinds update the vocabulary (3 rows)
    SpecialTokens,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, value_enum, default_value = "vocab-token-norm")]
    grid: GridArg,
    /// Number of seed replicates per row
    #[arg(long, default_value_t = 5)]
    replicates: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Vocabulary file (.tavv)
    vocab: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Tokenizer file used to label rows with their tokens
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Destination file (default: stdout)
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::ExportVocab(a) => run_export(a),
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut config = a.config.resolve()?;
    config.output_dir = Some(a.output.resolve(&config, "train"));
    if a.save_ptb_vocab.is_some() {
        config.save_ptb_vocab = a.save_ptb_vocab;
    }
    if a.init_embedding_from_vocab.is_some() {
        config.init_embedding_from_vocab = a.init_embedding_from_vocab;
    }
    config.validate()?;
    if a.dry_run {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let out = train::train(&config)?;
    eprintln!(
        "wrote {}",
        config
            .output_dir
            .as_deref()
            .unwrap_or(Path::new("."))
            .display()
    );
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let config_path = a.run.join(train::CONFIG_FILE);
    let text = fs::read_to_string(&config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let config = TrainConfig::from_toml(&text)?;
    let checkpoint = a
        .checkpoint
        .unwrap_or_else(|| a.run.join(train::CHECKPOINT_FILE));
    let tokenizer = a.run.join(train::TOKENIZER_FILE);
    let split = match a.split {
        SplitArg::Dev => Split::Dev,
        SplitArg::Train => Split::Train,
    };
    let metrics = train::evaluate_checkpoint(
        &config,
        &checkpoint,
        tokenizer.exists().then_some(tokenizer.as_path()),
        split,
    )
    .with_context(|| format!("evaluating {}", checkpoint.display()))?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    if a.replicates == 0 {
        bail!("--replicates must be at least 1");
    }
    let base = a.config.resolve()?;
    base.validate()?;
    let grid = match a.grid {
        GridArg::VocabTokenNorm => AblationGrid::VocabTokenNorm,
        GridArg::SpecialTokens => AblationGrid::SpecialTokens,
    };
    let replicates: Vec<u64> = (0..a.replicates).collect();
    let table = train::run_ablation(&base, grid, &replicates)?;
    let dir = a.output.resolve(&base, "ablate");
    fs::create_dir_all(&dir)?;
    let markdown = table.to_markdown();
    fs::write(dir.join("ablation.md"), &markdown)?;
    fs::write(
        dir.join("ablation.json"),
        serde_json::to_string_pretty(&table)?,
    )?;
    fs::write(dir.join(train::CONFIG_FILE), base.to_toml()?)?;
    eprintln!("wrote {}", dir.display());
    print!("{markdown}");
    Ok(())
}

fn run_export(a: ExportArgs) -> Result<()> {
    let vocab = PerturbationVocabulary::load(&a.vocab)?;
    let tokenizer = match &a.tokenizer {
        Some(p) => Some(Tokenizer::from_json(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    match &a.output {
        Some(path) => export::write_vocab(
            &vocab,
            tokenizer.as_ref(),
            a.format,
            fs::File::create(path)?,
        ),
        None => export::write_vocab(&vocab, tokenizer.as_ref(), a.format, io::stdout().lock()),
    }
}
