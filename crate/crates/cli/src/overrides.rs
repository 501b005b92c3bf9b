//! Config assembly: built-in defaults, then the TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{ArgAction, Args, ValueEnum};
use tavat::data::{ClassificationTask, DataSource, SampleSize, TaggingTask};
use tavat::optim::OptimizerKind;
use tavat::train::TrainConfig;
use tavat::vat::{AdvMode, ScalingSource};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Clean,
    Pgd,
    Freelb,
    Tavat,
}

impl From<ModeArg> for AdvMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Clean => AdvMode::Clean,
            ModeArg::Pgd => AdvMode::Pgd,
            ModeArg::Freelb => AdvMode::FreeLb,
            ModeArg::Tavat => AdvMode::TaVat,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScalingArg {
    PreStep,
    PostAscent,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    SyntheticClassification,
    SyntheticTagging,
}

/// Flags mirroring `TrainConfig` fields. Any flag given wins over the config file.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML config file; flags override its values
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    #[arg(long, value_enum, help_heading = "Adversarial")]
    pub mode: Option<ModeArg>,
    #[arg(long, help_heading = "Adversarial")]
    pub epsilon: Option<f64>,
    /// Separate radius for the token-level channel
    #[arg(long, help_heading = "Adversarial")]
    pub eta_epsilon: Option<f64>,
    #[arg(long, help_heading = "Adversarial")]
    pub sigma: Option<f64>,
    #[arg(long, help_heading = "Adversarial")]
    pub alpha: Option<f64>,
    #[arg(long, help_heading = "Adversarial")]
    pub steps: Option<usize>,
    #[arg(long, action = ArgAction::Set, help_heading = "Adversarial")]
    pub use_vocab: Option<bool>,
    #[arg(long, action = ArgAction::Set, help_heading = "Adversarial")]
    pub use_token_norm: Option<bool>,
    #[arg(long, action = ArgAction::Set, help_heading = "Adversarial")]
    pub use_instance_delta: Option<bool>,
    #[arg(long, value_enum, help_heading = "Adversarial")]
    pub scaling_source: Option<ScalingArg>,
    /// Write [CLS]/[SEP]/[UNK] perturbations back to the vocabulary
    #[arg(long, action = ArgAction::Set, help_heading = "Adversarial")]
    pub include_special: Option<bool>,
    #[arg(long, action = ArgAction::Set, help_heading = "Adversarial")]
    pub include_normal: Option<bool>,

    #[arg(long, value_enum, help_heading = "Optimizer")]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long, help_heading = "Optimizer")]
    pub lr: Option<f64>,
    #[arg(long, help_heading = "Optimizer")]
    pub weight_decay: Option<f64>,

    #[arg(long, help_heading = "Training")]
    pub epochs: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub batch_size: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub eval_batch_size: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub seed_init: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub seed_corpus: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub seed_split: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub seed_shuffle: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub seed_adversarial: Option<u64>,
    /// Also emit wall-clock time per step (makes metrics non-reproducible)
    #[arg(long, help_heading = "Training")]
    pub wall_time: bool,

    #[arg(long, help_heading = "Model")]
    pub dim: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub layers: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub heads: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub ffn_hidden: Option<usize>,
    #[arg(long, action = ArgAction::Set, help_heading = "Model")]
    pub positional: Option<bool>,
    #[arg(long, help_heading = "Model")]
    pub dropout: Option<f64>,
    /// Maximum sequence length, for both the model and the data
    #[arg(long, help_heading = "Model")]
    pub max_len: Option<usize>,

    #[arg(long, value_enum, help_heading = "Data")]
    pub task: Option<TaskArg>,
    #[arg(long, help_heading = "Data")]
    pub train_size: Option<usize>,
    #[arg(long, help_heading = "Data")]
    pub dev_size: Option<usize>,
    /// Train on a seeded subsample of this many examples
    #[arg(long, help_heading = "Data")]
    pub subsample: Option<usize>,
    /// Label noise for synthetic classification
    #[arg(long, help_heading = "Data")]
    pub noise: Option<f64>,
    #[arg(long, help_heading = "Data")]
    pub task_name: Option<String>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then every flag that was given.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let (mut c, file_sets_sigma) = match &self.config {
            Some(path) => load_file(path)?,
            None => (TrainConfig::default(), false),
        };
        if let Some(d) = self.dim {
            c.model.dim = d;
            // The default sigma scales with the embedding width.
            if self.sigma.is_none() && !file_sets_sigma {
                c.adv.sigma = tavat::vat::AdvConfig::for_dim(d).sigma;
            }
        }
        set(&mut c.model.layers, self.layers);
        set(&mut c.model.heads, self.heads);
        set(&mut c.model.ffn_hidden, self.ffn_hidden);
        set(&mut c.model.positional, self.positional);
        set(&mut c.model.dropout, self.dropout);
        if let Some(l) = self.max_len {
            c.model.max_len = l;
            c.data.max_len = l;
        }

        if let Some(m) = self.mode {
            c.adv.mode = m.into();
        }
        set(&mut c.adv.epsilon, self.epsilon);
        if self.eta_epsilon.is_some() {
            c.adv.eta_epsilon = self.eta_epsilon;
        }
        set(&mut c.adv.sigma, self.sigma);
        set(&mut c.adv.alpha, self.alpha);
        set(&mut c.adv.steps, self.steps);
        set(&mut c.adv.use_vocab, self.use_vocab);
        set(&mut c.adv.use_token_norm, self.use_token_norm);
        set(&mut c.adv.use_instance_delta, self.use_instance_delta);
        if let Some(s) = self.scaling_source {
            c.adv.scaling_source = match s {
                ScalingArg::PreStep => ScalingSource::PreStep,
                ScalingArg::PostAscent => ScalingSource::PostAscent,
            };
        }
        set(
            &mut c.adv.vocab_policy.include_special,
            self.include_special,
        );
        set(&mut c.adv.vocab_policy.include_normal, self.include_normal);
        // Baselines have no token channel to configure.
        if matches!(c.adv.mode, AdvMode::FreeLb | AdvMode::Pgd | AdvMode::Clean)
            && self.mode.is_some()
        {
            c.adv.use_vocab = false;
            c.adv.use_token_norm = false;
        }

        if let Some(k) = self.optimizer {
            c.optimizer.kind = match k {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            };
        }
        set(&mut c.optimizer.lr, self.lr);
        set(&mut c.optimizer.weight_decay, self.weight_decay);

        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.eval_batch_size, self.eval_batch_size);
        set(&mut c.seeds.init, self.seed_init);
        set(&mut c.seeds.corpus, self.seed_corpus);
        set(&mut c.seeds.split, self.seed_split);
        set(&mut c.seeds.shuffle, self.seed_shuffle);
        set(&mut c.seeds.adversarial, self.seed_adversarial);
        c.emit.wall_time |= self.wall_time;

        match self.task {
            Some(TaskArg::SyntheticClassification)
                if !matches!(c.data.source, DataSource::SyntheticClassification { .. }) =>
            {
                c.data.source = DataSource::SyntheticClassification {
                    task: ClassificationTask::default(),
                };
            }
            Some(TaskArg::SyntheticTagging)
                if !matches!(c.data.source, DataSource::SyntheticTagging { .. }) =>
            {
                c.data.source = DataSource::SyntheticTagging {
                    task: TaggingTask::default(),
                };
            }
            _ => {}
        }
        if let Some(noise) = self.noise {
            match &mut c.data.source {
                DataSource::SyntheticClassification { task } => task.noise = noise,
                _ => anyhow::bail!("--noise applies only to synthetic classification"),
            }
        }
        set(&mut c.data.train_size, self.train_size);
        set(&mut c.data.dev_size, self.dev_size);
        if let Some(n) = self.subsample {
            c.data.subsample = Some(SampleSize::Count(n));
        }
        set(&mut c.task_name, self.task_name.clone());
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses a config file and reports whether it pins `adv.sigma` itself.
fn load_file(path: &Path) -> Result<(TrainConfig, bool)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing {}", path.display()))?;
    let sets_sigma = table
        .get("adv")
        .and_then(|a| a.as_table())
        .is_some_and(|a| a.contains_key("sigma"));
    let mut config =
        TrainConfig::from_toml(&text).with_context(|| format!("loading {}", path.display()))?;
    if !sets_sigma {
        config.adv.sigma = tavat::vat::AdvConfig::for_dim(config.model.dim).sigma;
    }
    Ok((config, sets_sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epochs = 7\nbatch_size = 8\n[adv]\nsteps = 5\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            epochs: Some(2),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!((c.epochs, c.batch_size, c.adv.steps), (2, 8, 5));
    }

    #[test]
    fn sigma_follows_dim_unless_pinned() {
        let c = ConfigArgs {
            dim: Some(16),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert!((c.adv.sigma - 0.04).abs() < 1e-15);
        let c = ConfigArgs {
            dim: Some(16),
            sigma: Some(0.5),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.adv.sigma, 0.5);
    }

    #[test]
    fn baseline_mode_clears_token_features() {
        let c = ConfigArgs {
            mode: Some(ModeArg::Freelb),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert!(!c.adv.use_vocab && !c.adv.use_token_norm);
        c.validate().unwrap();
    }
}
