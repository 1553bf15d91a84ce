use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_mcm_mask, CaptionVocab, MaskedExample, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::rvq::CodecGrid;
use crate::synthworld::SeqEmbedding;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Fraction of timestep columns masked per item.
    pub mcm_ratio: f64,
    /// Weight of the masked-code loss.
    pub mcm_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Training fails once the loss exceeds this multiple of the loss of a
    /// uniform predictor.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mcm_ratio: 0.15,
            mcm_weight: 1.0,
            lr: 3e-4,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mcm_ratio) {
            return Err(Error::config(format!("mcm_ratio {} outside [0, 1]", self.mcm_ratio)));
        }
        if !(self.mcm_weight >= 0.0) {
            return Err(Error::config("mcm_weight must be non-negative"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::config("divergence_factor must exceed 1"));
        }
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return Err(Error::config("learning rate must be non-negative and batch size positive"));
        }
        Ok(())
    }
}

/// An unmasked training item.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub grid: CodecGrid,
    pub seq_emb: SeqEmbedding,
    /// Caption word ids without start or end tokens.
    pub caption: Vec<usize>,
}

impl TrainExample {
    pub fn masked(&self, ratio: f64, mask_code: u32, rng: &mut impl Rng) -> MaskedExample {
        let m = apply_mcm_mask(&self.grid, ratio, mask_code, rng);
        MaskedExample {
            grid: m.grid,
            masked_cols: m.cols,
            mcm_targets: m.targets,
            seq_emb: self.seq_emb.clone(),
            caption: self.caption.clone(),
        }
    }
}

/// One stage of the schedule, e.g. pretraining on a large weakly labelled
/// set followed by finetuning on a curated one.
#[derive(Clone, Debug)]
pub struct StageData {
    pub name: String,
    pub examples: Vec<TrainExample>,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub caption_ce: f64,
    pub mcm_ce: f64,
    /// MCM term as it enters the total: weight times `mcm_ce`.
    pub mcm_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub name: String,
    pub examples: usize,
    pub first_step: usize,
    pub last_step: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<LossRow>,
    pub stages: Vec<StageLog>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

fn clip_grad(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Runs every stage in order with one Adam state carried across stages.
/// Each step draws a batch with replacement, masks it afresh and records
/// the pre-update loss.
pub fn train(mut model: Model, stages: &[StageData], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if stages.iter().all(|s| s.examples.is_empty()) {
        return Err(Error::input("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.num_params());
    let mask = model.config().mask_code();
    let mut trace = Vec::new();
    let mut logs = Vec::new();
    let mut step = 0usize;
    let mc = model.config();
    let uniform = (mc.vocab_size as f64).ln() + cfg.mcm_weight * (mc.codebook_size as f64).ln();
    let ceiling = cfg.divergence_factor * uniform;

    for stage in stages {
        if stage.steps > 0 && stage.examples.is_empty() {
            return Err(Error::input(format!("stage '{}' has no examples", stage.name)));
        }
        let first_step = step;
        log::info!(
            "stage '{}' begins at step {step} ({} examples, {} steps)",
            stage.name,
            stage.examples.len(),
            stage.steps
        );
        for _ in 0..stage.steps {
            let batch: Vec<MaskedExample> = (0..cfg.batch_size)
                .map(|_| {
                    let i = rng.random_range(0..stage.examples.len());
                    stage.examples[i].masked(cfg.mcm_ratio, mask, &mut rng)
                })
                .collect();
            let (loss, mut grad) = model.loss_and_grad(&batch, cfg.mcm_weight)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite loss {}", loss.total),
                });
            }
            if loss.total > ceiling {
                return Err(Error::Training {
                    step,
                    message: format!("loss {} above divergence ceiling {ceiling}", loss.total),
                });
            }
            trace.push(LossRow {
                step,
                total: loss.total,
                caption_ce: loss.caption_ce,
                mcm_ce: loss.mcm_ce,
                mcm_loss: cfg.mcm_weight * loss.mcm_ce,
            });
            clip_grad(&mut grad, cfg.clip_norm);
            adam.step(model.params_mut(), &grad, cfg);
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Training {
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
            if step % 50 == 0 {
                log::debug!("step {step}: total {:.4} caption {:.4} mcm {:.4}", loss.total, loss.caption_ce, loss.mcm_ce);
            }
            step += 1;
        }
        logs.push(StageLog {
            name: stage.name.clone(),
            examples: stage.examples.len(),
            first_step,
            last_step: step.saturating_sub(1),
        });
    }
    Ok(TrainOutcome {
        model,
        trace,
        stages: logs,
    })
}

/// Loss trace as CSV with a header row.
pub fn loss_trace_csv(trace: &[LossRow]) -> String {
    let mut out = String::from("step,total,caption_ce,mcm_ce,mcm_loss\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.total, r.caption_ce, r.mcm_ce, r.mcm_loss));
    }
    out
}

/// Serialized model: configuration, caption vocabulary and flat parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub vocab: CaptionVocab,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &CaptionVocab, config_hash: &str) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            model_config: model.config().clone(),
            vocab: vocab.clone(),
            params: model.params().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<(Model, CaptionVocab)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.vocab.len() != self.model_config.vocab_size {
            return Err(Error::data("checkpoint vocabulary size disagrees with model configuration"));
        }
        Ok((Model::from_params(self.model_config, self.params)?, self.vocab))
    }
}
