//! Training runs: epochs over batches, evaluation, artifacts and ablation grids.

mod ablation;
mod record;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationGrid, AblationRow, AblationTable};
pub use record::{
    read_metrics, EvalMetrics, MetricsRecord, MetricsWriter, NormSummary, SpanScores, Summary,
    SCHEMA_VERSION,
};

use crate::data::{
    build_dataset, make_batches, Batch, DataSeeds, Dataset, DatasetSpec, Example, Labels, TaskKind,
    Tokenizer, CLS_ID, SEP_ID,
};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, SpanCounts};
use crate::model::{
    load_checkpoint, save_checkpoint, HeadKind, ModelConfig, ModelHyper, ModelParams,
};
use crate::optim::OptimizerConfig;
use crate::vat::{tavat_batch_step, AdvConfig};
use crate::vocab::{apply_to_embedding, PerturbationVocabulary, VocabMeta};

pub const CHECKPOINT_FILE: &str = "model.tavm";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VOCAB_FILE: &str = "ptb_vocab.tavv";
pub const CONFIG_FILE: &str = "config.toml";

/// TOML integers are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// Seeds split by role so ablations can share data order while varying
/// adversarial randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub init: u64,
    pub corpus: u64,
    pub split: u64,
    pub shuffle: u64,
    pub adversarial: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            corpus: 2,
            split: 3,
            shuffle: 4,
            adversarial: 5,
        }
    }
}

impl Seeds {
    pub fn to_vec(self) -> Vec<u64> {
        vec![
            self.init,
            self.corpus,
            self.split,
            self.shuffle,
            self.adversarial,
        ]
    }

    /// Seeds for the `r`-th replicate of a multi-seed experiment. The corpus
    /// stays fixed; everything else moves. Results stay below 2^63 so they
    /// survive a TOML round trip.
    pub fn replicate(self, r: u64) -> Self {
        let bump = |s: u64| s.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15)) & MAX_SEED;
        Self {
            init: bump(self.init),
            corpus: self.corpus,
            split: bump(self.split),
            shuffle: bump(self.shuffle),
            adversarial: bump(self.adversarial),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmitOptions {
    /// Write checkpoint, tokenizer, metrics and vocabulary when an output directory is set.
    pub artifacts: bool,
    /// Evaluate on the dev split after every epoch, not just at the end.
    pub eval_every_epoch: bool,
    /// Include wall-clock time in step records. Off by default so streams are reproducible.
    pub wall_time: bool,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            artifacts: true,
            eval_every_epoch: true,
            wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adv: AdvConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seeds: Seeds,
    pub data: DatasetSpec,
    pub output_dir: Option<PathBuf>,
    pub emit: EmitOptions,
    /// Extra location for the trained perturbation vocabulary.
    pub save_ptb_vocab: Option<PathBuf>,
    /// Vocabulary file added onto the initial token embeddings.
    pub init_embedding_from_vocab: Option<PathBuf>,
    /// Task name stored in vocabulary metadata.
    pub task_name: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            adv: AdvConfig::for_dim(model.dim),
            model,
            optimizer: OptimizerConfig::default(),
            epochs: 3,
            batch_size: 32,
            eval_batch_size: 128,
            seeds: Seeds::default(),
            data: DatasetSpec::default(),
            output_dir: None,
            emit: EmitOptions::default(),
            save_ptb_vocab: None,
            init_embedding_from_vocab: None,
            task_name: "synthetic".into(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    /// Checks everything that can be checked before any data is built.
    pub fn validate(&self) -> Result<()> {
        self.adv.validate()?;
        if self.seeds.to_vec().iter().any(|&s| s > MAX_SEED) {
            return Err(Error::InvalidConfig("seeds must be below 2^63".into()));
        }
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.data.max_len > self.model.max_len && self.model.positional {
            return Err(Error::InvalidConfig(format!(
                "data max_len {} exceeds the model's positional table of {}",
                self.data.max_len, self.model.max_len
            )));
        }
        if let Some(p) = &self.init_embedding_from_vocab {
            if !p.is_file() {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Seeds that determine the corpus and its train/dev split.
    pub fn data_seeds(&self) -> DataSeeds {
        DataSeeds {
            corpus: self.seeds.corpus,
            split: self.seeds.split,
        }
    }
}

pub fn model_hyper(config: &ModelConfig, dataset: &Dataset) -> ModelHyper {
    ModelHyper {
        vocab_size: dataset.tokenizer.len(),
        num_outputs: dataset.task.num_outputs(),
        head: match dataset.task {
            TaskKind::Classification { .. } => HeadKind::Sequence,
            TaskKind::Tagging { .. } => HeadKind::Token,
        },
        config: config.clone(),
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub vocab: Option<PerturbationVocabulary>,
    pub dataset: Dataset,
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

fn stable_seed(base: u64, salt: u64) -> u64 {
    // SplitMix64 finalizer, so nearby seeds give unrelated streams.
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs a full training job. With `epochs = 0` only the initial model is evaluated.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = build_dataset(&config.data, config.data_seeds())?;
    train_on(config, dataset)
}

/// As [`train`], on an already built dataset.
pub fn train_on(config: &TrainConfig, dataset: Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let hyper = model_hyper(&config.model, &dataset);
    let mut params = ModelParams::init(hyper, config.seeds.init)?;
    let fingerprint = dataset.tokenizer.fingerprint();
    if let Some(path) = &config.init_embedding_from_vocab {
        let v = PerturbationVocabulary::load(path)?;
        v.ensure_matches(dataset.tokenizer.len(), params.dim(), &fingerprint)?;
        *params.embedding_mut() = apply_to_embedding(params.embedding(), &v)?;
    }
    let seeds = config.seeds.to_vec();
    let mut adv_rng = ChaCha8Rng::seed_from_u64(config.seeds.adversarial);
    let mut vocab = if config.adv.needs_vocab() {
        let meta = VocabMeta {
            source_task: config.task_name.clone(),
            sigma: config.adv.sigma,
            epsilon: config.adv.eta_bound(),
            steps_seen: 0,
            tokenizer_fingerprint: fingerprint,
            seeds: seeds.clone(),
        };
        Some(PerturbationVocabulary::init(
            dataset.tokenizer.len(),
            params.dim(),
            config.adv.sigma,
            meta,
            &mut adv_rng,
        )?)
    } else {
        None
    };

    let out_dir = artifact_dir(config)?;
    let mut writer =
        MetricsWriter::create(out_dir.as_ref().map(|d| d.join(METRICS_FILE)).as_deref())?;
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        writer.write(&r)?;
        records.push(r);
        Ok(())
    };
    let mut optimizer = config.optimizer.build()?;
    let mut last_dev = None;
    for epoch in 0..config.epochs {
        let batches = make_batches(
            &dataset.train,
            config.batch_size,
            Some(stable_seed(config.seeds.shuffle, epoch as u64)),
        )?;
        for (bi, batch) in batches.iter().enumerate() {
            let started = std::time::Instant::now();
            let report = match tavat_batch_step(
                &mut params,
                batch,
                vocab.as_mut(),
                &config.adv,
                optimizer.as_mut(),
                &mut adv_rng,
                false,
            ) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = &out_dir {
                        save_checkpoint(&params, &seeds, &dir.join(CHECKPOINT_FILE))?;
                    }
                    return Err(e);
                }
            };
            let step = MetricsRecord::Step {
                schema: SCHEMA_VERSION,
                epoch,
                batch: bi,
                inner_losses: report.inner_losses,
                final_loss: report.final_loss,
                delta_norm: NormSummary::of(&report.delta_norms),
                eta_norm: NormSummary::of(&report.eta_norms),
                wall_ms: config
                    .emit
                    .wall_time
                    .then(|| started.elapsed().as_secs_f64() * 1e3),
            };
            emit(step, &mut records)?;
        }
        if config.emit.eval_every_epoch || epoch + 1 == config.epochs {
            let metrics = evaluate(&params, &dataset.dev, &dataset.task, config.eval_batch_size)?;
            last_dev = Some(metrics.clone());
            emit(
                MetricsRecord::Eval {
                    schema: SCHEMA_VERSION,
                    epoch,
                    batch: batches.len(),
                    split: "dev".into(),
                    metrics,
                },
                &mut records,
            )?;
        }
    }
    let dev = match last_dev {
        Some(d) => d,
        None => evaluate(&params, &dataset.dev, &dataset.task, config.eval_batch_size)?,
    };
    let summary = Summary::from_records(&records, seeds.clone(), config.epochs, Some(&dev))?;
    emit(MetricsRecord::Summary(summary.clone()), &mut records)?;

    if let Some(dir) = &out_dir {
        save_checkpoint(&params, &seeds, &dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(TOKENIZER_FILE), dataset.tokenizer.to_json()?)?;
        fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
        if let Some(v) = &vocab {
            v.save(dir.join(VOCAB_FILE))?;
        }
    }
    if let (Some(path), Some(v)) = (&config.save_ptb_vocab, &vocab) {
        v.save(path)?;
    }
    Ok(TrainOutcome {
        params,
        vocab,
        dataset,
        records,
        summary,
    })
}

fn artifact_dir(config: &TrainConfig) -> Result<Option<PathBuf>> {
    match (&config.output_dir, config.emit.artifacts) {
        (Some(dir), true) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir.clone()))
        }
        _ => Ok(None),
    }
}

/// Scores `params` on `examples`. Batches are scored in parallel and merged in order.
pub fn evaluate(
    params: &ModelParams,
    examples: &[Example],
    task: &TaskKind,
    batch_size: usize,
) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to evaluate"));
    }
    let expected = task.num_outputs();
    if params.hyper.num_outputs != expected {
        return Err(Error::DimensionMismatch {
            expected: format!("{expected} outputs"),
            found: format!("{} outputs", params.hyper.num_outputs),
        });
    }
    let batches = make_batches(examples, batch_size.max(1), None)?;
    let parts = crate::parallel::map_ordered(&batches, |b| score_batch(params, b, task));
    let mut confusion = Confusion::new(expected);
    let mut spans = SpanCounts::default();
    let (mut loss_sum, mut rows) = (0.0, 0usize);
    for part in parts {
        let part = part?;
        confusion.merge(&part.confusion);
        spans.gold += part.spans.gold;
        spans.predicted += part.spans.predicted;
        spans.matched += part.spans.matched;
        loss_sum += part.loss_sum;
        rows += part.rows;
    }
    Ok(EvalMetrics {
        examples: examples.len(),
        loss: loss_sum / rows.max(1) as f64,
        accuracy: confusion.accuracy(),
        spans: matches!(task, TaskKind::Tagging { .. }).then(|| SpanScores {
            precision: spans.precision(),
            recall: spans.recall(),
            f1: spans.f1(),
        }),
    })
}

struct BatchScore {
    confusion: Confusion,
    spans: SpanCounts,
    loss_sum: f64,
    rows: usize,
}

fn score_batch(params: &ModelParams, batch: &Batch, task: &TaskKind) -> Result<BatchScore> {
    let logits = params.logits(batch)?;
    let c = params.hyper.num_outputs;
    let rows: Vec<&[f64]> = logits.data().chunks(c).collect();
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    };
    let nll = |row: &[f64], y: usize| {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - row[y]
    };
    let mut score = BatchScore {
        confusion: Confusion::new(c),
        spans: SpanCounts::default(),
        loss_sum: 0.0,
        rows: 0,
    };
    match (&batch.labels, task) {
        (Labels::Class(ys), _) => {
            for (row, &y) in rows.iter().zip(ys) {
                score.confusion.record(y, argmax(row))?;
                score.loss_sum += nll(row, y);
                score.rows += 1;
            }
        }
        (Labels::Tags(tags), TaskKind::Tagging { tags: names }) => {
            let l = batch.seq_len;
            for b in 0..batch.batch_size {
                let (mut gold, mut pred) = (Vec::new(), Vec::new());
                for j in 0..l {
                    let i = b * l + j;
                    let Some(y) = tags[i] else { continue };
                    let p = argmax(rows[i]);
                    score.confusion.record(y, p)?;
                    score.loss_sum += nll(rows[i], y);
                    score.rows += 1;
                    if batch.token_ids[i] != CLS_ID && batch.token_ids[i] != SEP_ID {
                        gold.push(names[y].as_str());
                        pred.push(names[p].as_str());
                    }
                }
                score.spans.add(&gold, &pred);
            }
        }
        (Labels::Tags(_), TaskKind::Classification { .. }) => {
            return Err(Error::InvalidConfig(
                "tag labels given for a classification task".into(),
            ));
        }
    }
    Ok(score)
}

/// Which split of a rebuilt dataset to score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Dev,
}

/// Scores a saved checkpoint on the dataset its config describes.
///
/// The model shape stored in the checkpoint must equal the one the config
/// and rebuilt dataset imply, and a saved tokenizer (when given) must have the
/// same fingerprint as the rebuilt one.
pub fn evaluate_checkpoint(
    config: &TrainConfig,
    checkpoint: &Path,
    tokenizer: Option<&Path>,
    split: Split,
) -> Result<EvalMetrics> {
    let dataset = build_dataset(&config.data, config.data_seeds())?;
    if let Some(path) = tokenizer {
        let saved = Tokenizer::from_json(&fs::read_to_string(path)?)?;
        let (expected, found) = (saved.fingerprint(), dataset.tokenizer.fingerprint());
        if expected != found {
            return Err(Error::FingerprintMismatch { expected, found });
        }
    }
    let params = load_checkpoint(checkpoint)?.params;
    let expected = model_hyper(&config.model, &dataset);
    if params.hyper != expected {
        return Err(Error::DimensionMismatch {
            expected: format!("{expected:?}"),
            found: format!("{:?}", params.hyper),
        });
    }
    let examples = match split {
        Split::Train => &dataset.train,
        Split::Dev => &dataset.dev,
    };
    evaluate(&params, examples, &dataset.task, config.eval_batch_size)
}

/// Loads an embedding-compatible vocabulary and checks it against a run's tokenizer.
pub fn load_vocab_for(
    path: &Path,
    params: &ModelParams,
    fingerprint: &str,
) -> Result<PerturbationVocabulary> {
    let v = PerturbationVocabulary::load(path)?;
    v.ensure_matches(params.hyper.vocab_size, params.dim(), fingerprint)?;
    Ok(v)
}
