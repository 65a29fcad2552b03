//! Minibatch training of the transducer under any of the lattice losses.
//!
//! Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8 over shuffled
//! minibatches; bit-deterministic given (seed, config, corpus).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, Utterance};
use crate::losses::{loss_for_kind, LossError, LossKind};

use super::{Model, ModelConfig, ModelError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Append the end-of-speech label to every reference (requires a model
    /// with the end-of-speech output unit).
    pub ep_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Vanilla,
            learning_rate: 2e-3,
            epochs: 4,
            batch_size: 16,
            seed: 0,
            ep_training: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss error on utterance {utterance}: {source}")]
    Loss {
        utterance: u64,
        #[source]
        source: LossError,
    },
    #[error("non-finite loss at epoch {epoch}, utterance {utterance}")]
    NonFiniteLoss { epoch: usize, utterance: u64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub(crate) fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Reference labels for one utterance: the transcript, plus the
/// end-of-speech label when endpointer training is on.
fn target_of(utt: &Utterance, model_cfg: &ModelConfig, ep_training: bool) -> Vec<TokenId> {
    let mut target = utt.transcript.clone();
    if ep_training {
        target.push(model_cfg.eos_index().expect("validated eos unit") as TokenId);
    }
    target
}

/// Per-token ground-truth source frames for the alignment-restricted band:
/// each token's segment end frame; the end-of-speech label sits one frame
/// past the end of speech.
fn alignments_of(utt: &Utterance, ep_training: bool) -> Vec<usize> {
    let mut a: Vec<usize> = utt.alignments.iter().map(|&(_, end)| end).collect();
    if ep_training {
        a.push((utt.speech_end_frame + 1).min(utt.num_frames().saturating_sub(1)));
    }
    a
}

/// Train a fresh model on the corpus. Returns the model and the per-epoch
/// mean loss log.
pub fn train(
    model_cfg: &ModelConfig,
    corpus: &[Utterance],
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog), TrainError> {
    cfg.loss.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if cfg.ep_training && !model_cfg.has_eos {
        return Err(TrainError::InvalidConfig(
            "ep_training requires a model with the end-of-speech unit".into(),
        ));
    }
    for utt in corpus {
        if utt.frames.first().map(Vec::len).unwrap_or(model_cfg.feature_dim) != model_cfg.feature_dim {
            return Err(TrainError::InvalidConfig(format!(
                "utterance {} feature dim does not match the model",
                utt.id
            )));
        }
    }

    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(model.param_count());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5f5f));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc = vec![0.0; model.param_count()];
            for &idx in batch {
                let utt = &corpus[idx];
                let target = target_of(utt, model_cfg, cfg.ep_training);
                let (lattice, fwd) = model.logit_lattice_cached(&utt.frames, &target, true)?;
                let alignments = alignments_of(utt, cfg.ep_training);
                let res = loss_for_kind(&lattice, &target, &cfg.loss, Some(&alignments))
                    .map_err(|source| TrainError::Loss {
                        utterance: utt.id,
                        source,
                    })?;
                if !res.value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        utterance: utt.id,
                    });
                }
                epoch_loss_sum += res.value;
                let g = model.backward(&fwd.unwrap(), &res.grad)?;
                for (acc, gi) in grad_acc.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad_acc.iter_mut() {
                *g *= scale;
            }
            adam.update(&mut model.params.0, &grad_acc, cfg.learning_rate);
        }
        log.epochs.push(EpochStats {
            epoch,
            mean_loss: epoch_loss_sum / corpus.len() as f64,
        });
    }
    Ok((model, log))
}
