//! One optimizer step on a batch under the configured adversarial mode.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::perturb::{batch_instance_step, batch_token_step, example_norms, init_delta};
use super::{AdvConfig, AdvMode};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::Optimizer;
use crate::tensor::Tensor;
use crate::vocab::PerturbationVocabulary;

/// Running sum of `scale * grad` over inner steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatedGradient {
    sum: Vec<Vec<f64>>,
    steps: usize,
}

impl AccumulatedGradient {
    pub fn zeros(params: &ModelParams) -> Self {
        Self {
            sum: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
            steps: 0,
        }
    }

    pub fn add(&mut self, grads: &[Vec<f64>], scale: f64) {
        for (s, g) in self.sum.iter_mut().zip(grads) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.sum
    }

    pub fn into_grads(self) -> Vec<Vec<f64>> {
        self.sum
    }
}

/// How often each code path ran. Used to check that ablation switches are orthogonal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounters {
    pub vocab_gathers: u64,
    pub vocab_scatters: u64,
    pub random_eta_inits: u64,
    pub delta_inits: u64,
    pub token_norm_steps: u64,
    pub sequence_norm_token_steps: u64,
    pub instance_steps: u64,
    pub forward_backward: u64,
}

/// Perturbations at which one gradient was taken, plus the loss there.
#[derive(Clone, Debug)]
pub struct InnerStep {
    pub loss: f64,
    pub delta: Option<Tensor>,
    pub eta: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct StepReport {
    /// Loss at each of the `K` ascent points.
    pub inner_losses: Vec<f64>,
    /// PGD only: loss at the final perturbation, where the parameter gradient is taken.
    pub final_loss: Option<f64>,
    /// Per-example norms of the final delta and eta (empty when unused).
    pub delta_norms: Vec<f64>,
    pub eta_norms: Vec<f64>,
    pub counters: PathCounters,
    /// Recorded when requested: perturbations behind every parameter gradient.
    pub trace: Option<Vec<InnerStep>>,
}

#[derive(Clone, Debug)]
pub struct AdversarialGradient {
    /// Gradient handed to the optimizer, aligned with the parameter list.
    pub grads: Vec<Vec<f64>>,
    /// Final token perturbation, destined for the vocabulary.
    pub final_eta: Option<Tensor>,
    pub report: StepReport,
}

#[derive(Clone, Copy)]
struct Channels {
    instance: bool,
    token: bool,
    from_vocab: bool,
    token_norm: bool,
}

fn channels(cfg: &AdvConfig) -> Channels {
    let instance_only = Channels {
        instance: true,
        token: false,
        from_vocab: false,
        token_norm: false,
    };
    match cfg.mode {
        AdvMode::Clean => Channels {
            instance: false,
            ..instance_only
        },
        AdvMode::Pgd | AdvMode::FreeLb => instance_only,
        // Without either token feature, eta is just a second FreeLB
        // perturbation; both collapse to one so the run equals FreeLB.
        AdvMode::TaVat if !cfg.use_vocab && !cfg.use_token_norm => instance_only,
        AdvMode::TaVat => Channels {
            instance: cfg.use_instance_delta,
            token: true,
            from_vocab: cfg.use_vocab,
            token_norm: cfg.use_token_norm,
        },
    }
}

fn zero_padded(grad: &mut [f64], mask: &[bool], dim: usize) {
    for (row, &m) in grad.chunks_mut(dim).zip(mask) {
        if !m {
            row.fill(0.0);
        }
    }
}

/// Runs the inner loop for `batch` and returns the gradient the optimizer
/// should see, without touching parameters or vocabulary.
pub fn adversarial_gradient<R: RngCore>(
    params: &ModelParams,
    batch: &Batch,
    vocab: Option<&PerturbationVocabulary>,
    cfg: &AdvConfig,
    rng: &mut R,
    record_trace: bool,
) -> Result<AdversarialGradient> {
    cfg.validate()?;
    if batch.batch_size == 0 || !batch.mask.iter().any(|&m| m) {
        return Err(Error::Empty("batch has no tokens"));
    }
    let dim = params.dim();
    let shape = [batch.batch_size, batch.seq_len, dim];
    let ch = channels(cfg);
    let mut report = StepReport {
        trace: record_trace.then(Vec::new),
        ..Default::default()
    };

    if cfg.mode == AdvMode::Clean {
        let out = params.loss_and_grads(batch, &[], Some(rng as &mut dyn RngCore))?;
        report.counters.forward_backward += 1;
        report.inner_losses.push(out.loss);
        if let Some(t) = report.trace.as_mut() {
            t.push(InnerStep {
                loss: out.loss,
                delta: None,
                eta: None,
            });
        }
        return Ok(AdversarialGradient {
            grads: out.param_grads,
            final_eta: None,
            report,
        });
    }

    let mut delta = if ch.instance {
        report.counters.delta_inits += 1;
        Some(init_delta(&shape, cfg.sigma, &batch.mask, rng)?)
    } else {
        None
    };
    let mut eta = if !ch.token {
        None
    } else if ch.from_vocab {
        let v = vocab.ok_or_else(|| {
            Error::InvalidConfig("use_vocab is set but no perturbation vocabulary was given".into())
        })?;
        report.counters.vocab_gathers += 1;
        Some(v.gather(
            &batch.token_ids,
            &batch.mask,
            batch.batch_size,
            batch.seq_len,
        )?)
    } else {
        report.counters.random_eta_inits += 1;
        Some(init_delta(&shape, cfg.sigma, &batch.mask, rng)?)
    };

    let k = cfg.steps;
    let inv_k = 1.0 / k as f64;
    let mut acc = AccumulatedGradient::zeros(params);
    for _ in 0..k {
        let perts: Vec<&Tensor> = delta.iter().chain(eta.iter()).collect();
        let mut out = params.loss_and_grads(batch, &perts, Some(rng as &mut dyn RngCore))?;
        report.counters.forward_backward += 1;
        crate::error::ensure_all_finite("parameter gradient", &out.param_grads)?;
        if let Some(t) = report.trace.as_mut() {
            t.push(InnerStep {
                loss: out.loss,
                delta: delta.clone(),
                eta: eta.clone(),
            });
        }
        report.inner_losses.push(out.loss);
        if cfg.mode == AdvMode::FreeLb || cfg.mode == AdvMode::TaVat {
            acc.add(&out.param_grads, inv_k);
        }
        let mut inputs = out.input_grads.drain(..);
        if let Some(d) = delta.as_mut() {
            let mut g = inputs.next().unwrap_or_default();
            zero_padded(&mut g, &batch.mask, dim);
            *d = batch_instance_step(d, &g, batch, cfg.alpha, cfg.epsilon)?;
            report.counters.instance_steps += 1;
        }
        if let Some(e) = eta.as_mut() {
            let mut g = inputs.next().unwrap_or_default();
            zero_padded(&mut g, &batch.mask, dim);
            *e = batch_token_step(
                e,
                &g,
                batch,
                cfg.alpha,
                cfg.eta_bound(),
                ch.token_norm,
                cfg.scaling_source,
            )?;
            if ch.token_norm {
                report.counters.token_norm_steps += 1;
            } else {
                report.counters.sequence_norm_token_steps += 1;
            }
        }
    }

    let grads = if cfg.mode == AdvMode::Pgd {
        let perts: Vec<&Tensor> = delta.iter().collect();
        let out = params.loss_and_grads(batch, &perts, Some(rng as &mut dyn RngCore))?;
        report.counters.forward_backward += 1;
        crate::error::ensure_all_finite("parameter gradient", &out.param_grads)?;
        report.final_loss = Some(out.loss);
        if let Some(t) = report.trace.as_mut() {
            t.push(InnerStep {
                loss: out.loss,
                delta: delta.clone(),
                eta: None,
            });
        }
        out.param_grads
    } else {
        acc.into_grads()
    };
    report.delta_norms = delta.as_ref().map(example_norms).unwrap_or_default();
    report.eta_norms = eta.as_ref().map(example_norms).unwrap_or_default();
    Ok(AdversarialGradient {
        grads,
        final_eta: if ch.from_vocab { eta } else { None },
        report,
    })
}

/// Full batch step: inner loop, vocabulary write-back and one optimizer update.
/// On error neither `params` nor `vocab` is modified.
pub fn tavat_batch_step<R: RngCore>(
    params: &mut ModelParams,
    batch: &Batch,
    vocab: Option<&mut PerturbationVocabulary>,
    cfg: &AdvConfig,
    optimizer: &mut dyn Optimizer,
    rng: &mut R,
    record_trace: bool,
) -> Result<StepReport> {
    let out = adversarial_gradient(params, batch, vocab.as_deref(), cfg, rng, record_trace)?;
    let mut next = params.clone();
    optimizer.step(&mut next, &out.grads)?;
    next.ensure_finite()?;
    let mut report = out.report;
    if let (Some(v), Some(eta)) = (vocab, out.final_eta.as_ref()) {
        v.scatter(&batch.token_ids, &batch.mask, eta, &cfg.vocab_policy)?;
        report.counters.vocab_scatters += 1;
    }
    *params = next;
    Ok(report)
}
