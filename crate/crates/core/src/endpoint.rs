//! Endpointing strategies and their first-trigger-wins composition.
//!
//! Three checkers can be configured in any subset:
//!
//! * static: closes the mic after a fixed amount of trailing silence,
//!   tracked in audio time from the last emitted non-blank token;
//! * neural: a light-weight LSTM frame classifier over acoustic features,
//!   smoothed with a trailing moving average and compared to a threshold;
//! * end-to-end: triggers when the best decoder hypothesis ends in the
//!   end-of-speech label with sufficient log-posterior.
//!
//! All checkers are consulted at chunk-completion times; the earliest
//! trigger wins, with ties broken static < neural < e2e.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Utterance;
use crate::math::{matvec_acc, matvec_t_acc, outer_acc, sigmoid};
use crate::model::lstm::{lstm_backward_sequence, lstm_step, LstmStepCache};
use crate::model::train::Adam;
use crate::model::{LstmView, MatView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndpointCause {
    Static,
    Neural,
    E2e,
    AudioExhausted,
}

impl std::fmt::Display for EndpointCause {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EndpointCause::Static => "static",
            EndpointCause::Neural => "neural",
            EndpointCause::E2e => "e2e",
            EndpointCause::AudioExhausted => "audio_exhausted",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointDecision {
    pub close_time_ms: f64,
    pub cause: EndpointCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticEpConfig {
    /// Trailing silence after the last emission before the mic closes.
    pub trailing_silence_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralEpConfig {
    pub model: NepModel,
    pub window_frames: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct E2eEpConfig {
    /// Minimum log-posterior of the end-of-speech emission in the best
    /// hypothesis.
    pub eos_logprob_threshold: f64,
}

/// Any subset of the three endpointers; the empty set never endpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EndpointerSpec {
    pub static_ep: Option<StaticEpConfig>,
    pub neural: Option<NeuralEpConfig>,
    pub e2e: Option<E2eEpConfig>,
}

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("invalid endpointer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite neural endpointer loss at epoch {epoch}, utterance {utterance}")]
    NonFiniteLoss { epoch: usize, utterance: u64 },
    #[error("neural endpointer checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("neural endpointer checkpoint parse error: {0}")]
    Parse(String),
}

impl EndpointerSpec {
    pub fn validate(&self) -> Result<(), EndpointError> {
        if let Some(s) = &self.static_ep {
            if !(s.trailing_silence_s > 0.0) {
                return Err(EndpointError::InvalidConfig(
                    "static trailing_silence_s must be > 0".into(),
                ));
            }
        }
        if let Some(n) = &self.neural {
            if !(n.threshold > 0.0 && n.threshold < 1.0) {
                return Err(EndpointError::InvalidConfig(
                    "neural threshold must be in (0, 1)".into(),
                ));
            }
            if n.window_frames == 0 {
                return Err(EndpointError::InvalidConfig(
                    "neural window_frames must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Static endpointer predicate: has the processed audio run
/// `trailing_silence_s` past the last non-blank emission? With no emission
/// yet, silence counts from audio time zero.
pub fn static_check(
    processed_audio_ms: f64,
    last_nonblank_audio_ms: Option<f64>,
    trailing_silence_s: f64,
) -> bool {
    processed_audio_ms - last_nonblank_audio_ms.unwrap_or(0.0) >= trailing_silence_s * 1000.0
}

/// End-to-end endpointer predicate over one best-hypothesis observation.
pub fn e2e_check(best_is_terminal: bool, eos_logprob: Option<f64>, threshold: f64) -> bool {
    best_is_terminal && eos_logprob.map_or(false, |lp| lp >= threshold)
}

/// First frame index whose trailing-window moving average reaches the
/// threshold, if any. The window is truncated at the start of the stream.
pub fn nep_first_trigger(probs: &[f64], window: usize, threshold: f64) -> Option<usize> {
    assert!(window >= 1);
    let mut sum = 0.0;
    for i in 0..probs.len() {
        sum += probs[i];
        if i >= window {
            sum -= probs[i - window];
        }
        let n = (i + 1).min(window);
        if sum / n as f64 >= threshold {
            return Some(i);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Neural endpointer model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NepConfig {
    pub feature_dim: usize,
    pub hidden: usize,
}

impl NepConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self { feature_dim, hidden: 16 }
    }
}

/// Single-layer recurrent binary classifier over feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NepModel {
    pub cfg: NepConfig,
    pub params: Vec<f64>,
}

struct NepViews {
    lstm: LstmView,
    w_out: MatView,
    b_out: MatView,
    total: usize,
}

fn nep_views(cfg: &NepConfig) -> NepViews {
    let h = cfg.hidden;
    let mut off = 0usize;
    let mut mat = |rows: usize, cols: usize| {
        let v = MatView { off, rows, cols };
        off += rows * cols;
        v
    };
    let lstm = LstmView {
        input: cfg.feature_dim,
        hidden: h,
        w: mat(4 * h, cfg.feature_dim),
        u: mat(4 * h, h),
        b: mat(4 * h, 1),
    };
    let w_out = mat(1, h);
    let b_out = mat(1, 1);
    NepViews { lstm, w_out, b_out, total: off }
}

/// Carried per-decode state of the neural endpointer.
#[derive(Debug, Clone)]
pub struct NepState {
    h: Vec<f64>,
    c: Vec<f64>,
}

impl NepModel {
    pub fn init(cfg: NepConfig, seed: u64) -> Self {
        let views = nep_views(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..views.total).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        Self { cfg, params }
    }

    pub fn start_state(&self) -> NepState {
        NepState {
            h: vec![0.0; self.cfg.hidden],
            c: vec![0.0; self.cfg.hidden],
        }
    }

    /// Advance one frame and return the end-of-speech probability.
    pub fn frame_prob(&self, state: &mut NepState, frame: &[f64]) -> f64 {
        let views = nep_views(&self.cfg);
        lstm_step(&self.params, &views.lstm, frame, &mut state.h, &mut state.c, None);
        let mut out = self.params[views.b_out.off];
        for (w, h) in views.w_out.of(&self.params).iter().zip(&state.h) {
            out += w * h;
        }
        sigmoid(out)
    }

    /// Per-frame probabilities over a whole prefix of frames.
    pub fn frame_probs(&self, frames: &[Vec<f64>]) -> Vec<f64> {
        let mut state = self.start_state();
        frames.iter().map(|f| self.frame_prob(&mut state, f)).collect()
    }

    /// Smoothed-threshold decision over all frames seen so far.
    pub fn check(&self, frames: &[Vec<f64>], window: usize, threshold: f64) -> bool {
        nep_first_trigger(&self.frame_probs(frames), window, threshold).is_some()
    }

    /// Fraction of frames classified correctly at a 0.5 decision threshold,
    /// with labels 1 strictly after the end of speech.
    pub fn frame_accuracy(&self, corpus: &[Utterance]) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for utt in corpus {
            for (i, p) in self.frame_probs(&utt.frames).iter().enumerate() {
                let label = i > utt.speech_end_frame;
                if (*p >= 0.5) == label {
                    correct += 1;
                }
                total += 1;
            }
        }
        correct as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NepTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NepTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 30,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Train the neural endpointer with per-frame binary cross-entropy;
/// label(frame i) = 1 iff i lies strictly after the utterance's end of
/// speech. Deterministic in the seed.
pub fn nep_train(corpus: &[Utterance], cfg: &NepTrainConfig) -> Result<NepModel, EndpointError> {
    let feature_dim = corpus
        .first()
        .and_then(|u| u.frames.first())
        .map(Vec::len)
        .ok_or_else(|| EndpointError::InvalidConfig("corpus has no frames".into()))?;
    if cfg.hidden == 0 {
        return Err(EndpointError::InvalidConfig("hidden must be >= 1".into()));
    }
    let mut model = NepModel::init(NepConfig { feature_dim, hidden: cfg.hidden }, cfg.seed);
    let views = nep_views(&model.cfg);
    let mut adam = Adam::new(views.total);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xa11));

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for &idx in &order {
            let utt = &corpus[idx];
            let n = utt.frames.len();
            if n == 0 {
                continue;
            }
            // Forward with caches.
            let mut caches: Vec<LstmStepCache> = Vec::with_capacity(n);
            let mut h = vec![0.0; cfg.hidden];
            let mut c = vec![0.0; cfg.hidden];
            let mut probs = Vec::with_capacity(n);
            for frame in &utt.frames {
                lstm_step(&model.params, &views.lstm, frame, &mut h, &mut c, Some(&mut caches));
                let mut out = model.params[views.b_out.off];
                matvec_acc(
                    views.w_out.of(&model.params),
                    1,
                    cfg.hidden,
                    &h,
                    std::slice::from_mut(&mut out),
                );
                probs.push(sigmoid(out));
            }
            let mut loss = 0.0;
            let mut grad = vec![0.0; views.total];
            let mut d_h_rows = vec![vec![0.0; cfg.hidden]; n];
            for i in 0..n {
                let y = f64::from(i > utt.speech_end_frame);
                let p = probs[i].clamp(1e-12, 1.0 - 1e-12);
                loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                let dpre = (probs[i] - y) / n as f64;
                let h_row = caches[i].h();
                outer_acc(
                    views.w_out.of_mut(&mut grad),
                    1,
                    cfg.hidden,
                    std::slice::from_ref(&dpre),
                    &h_row,
                );
                grad[views.b_out.off] += dpre;
                matvec_t_acc(
                    views.w_out.of(&model.params),
                    1,
                    cfg.hidden,
                    std::slice::from_ref(&dpre),
                    &mut d_h_rows[i],
                );
            }
            if !loss.is_finite() {
                return Err(EndpointError::NonFiniteLoss {
                    epoch,
                    utterance: utt.id,
                });
            }
            lstm_backward_sequence(&model.params, &views.lstm, &caches, &d_h_rows, &mut grad);
            adam.update(&mut model.params, &grad, cfg.learning_rate);
        }
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct NepCheckpoint {
    nep: NepConfig,
    params: Vec<f64>,
}

/// Same container format as model checkpoints: config echo + flat params.
pub fn save_nep_checkpoint(model: &NepModel, path: &Path) -> Result<(), EndpointError> {
    let w = BufWriter::new(File::create(path)?);
    let ckpt = NepCheckpoint {
        nep: model.cfg,
        params: model.params.clone(),
    };
    serde_json::to_writer(w, &ckpt).map_err(|e| EndpointError::Parse(e.to_string()))?;
    Ok(())
}

pub fn load_nep_checkpoint(path: &Path) -> Result<NepModel, EndpointError> {
    let r = BufReader::new(File::open(path)?);
    let ckpt: NepCheckpoint = serde_json::from_reader(r).map_err(|e| EndpointError::Parse(e.to_string()))?;
    let views = nep_views(&ckpt.nep);
    if ckpt.params.len() != views.total {
        return Err(EndpointError::Parse(format!(
            "checkpoint has {} params, config requires {}",
            ckpt.params.len(),
            views.total
        )));
    }
    Ok(NepModel {
        cfg: ckpt.nep,
        params: ckpt.params,
    })
}

// ---------------------------------------------------------------------------
// Composition

/// What the decoder shows the endpointers at every chunk completion.
pub struct ChunkObservation<'a> {
    pub done_time_ms: f64,
    /// Audio time of the last frame the decoder has processed.
    pub processed_audio_ms: f64,
    /// All frames arrived by `done_time_ms` (a prefix of the utterance).
    pub arrived_frames: &'a [Vec<f64>],
    /// Audio time of the best hypothesis' last non-blank emission.
    pub best_last_label_audio_ms: Option<f64>,
    pub best_is_terminal: bool,
    pub best_eos_logprob: Option<f64>,
}

/// Unified first-trigger-wins checker built from an [`EndpointerSpec`].
/// One instance per decode; the neural checker carries recurrent state.
pub struct Endpointer<'a> {
    spec: &'a EndpointerSpec,
    nep_state: Option<NepState>,
    nep_frames_seen: usize,
    nep_probs: Vec<f64>,
}

/// Build the unified checker (the composition of all configured
/// endpointers).
pub fn compose(spec: &EndpointerSpec) -> Endpointer<'_> {
    Endpointer {
        spec,
        nep_state: spec.neural.as_ref().map(|n| n.model.start_state()),
        nep_frames_seen: 0,
        nep_probs: Vec::new(),
    }
}

impl Endpointer<'_> {
    /// Evaluate every configured checker at one chunk completion. Ties at
    /// the same completion resolve static < neural < e2e.
    pub fn check(&mut self, obs: &ChunkObservation<'_>) -> Option<EndpointCause> {
        if let Some(s) = &self.spec.static_ep {
            if static_check(obs.processed_audio_ms, obs.best_last_label_audio_ms, s.trailing_silence_s) {
                return Some(EndpointCause::Static);
            }
        }
        if let Some(n) = &self.spec.neural {
            let state = self.nep_state.as_mut().expect("state built in compose");
            while self.nep_frames_seen < obs.arrived_frames.len() {
                let p = n.model.frame_prob(state, &obs.arrived_frames[self.nep_frames_seen]);
                self.nep_probs.push(p);
                self.nep_frames_seen += 1;
            }
            if nep_first_trigger(&self.nep_probs, n.window_frames, n.threshold).is_some() {
                return Some(EndpointCause::Neural);
            }
        }
        if let Some(e) = &self.spec.e2e {
            if e2e_check(obs.best_is_terminal, obs.best_eos_logprob, e.eos_logprob_threshold) {
                return Some(EndpointCause::E2e);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_threshold_arithmetic_with_chunk_granularity() {
        // Last non-blank at 1000ms, N = 0.9s, chunk boundaries every 40ms:
        // first boundary where the condition holds is 1920ms.
        let n = 0.9;
        let mut first = None;
        let mut boundary = 0.0;
        while boundary <= 2500.0 {
            if static_check(boundary, Some(1000.0), n) && first.is_none() {
                first = Some(boundary);
            }
            boundary += 40.0;
        }
        assert_eq!(first, Some(1920.0));
    }

    #[test]
    fn static_counts_from_audio_start_without_emissions() {
        assert!(!static_check(400.0, None, 0.5));
        assert!(static_check(500.0, None, 0.5));
    }

    #[test]
    fn static_trigger_time_monotone_in_threshold() {
        let boundaries: Vec<f64> = (1..60).map(|i| i as f64 * 40.0).collect();
        let trigger = |n: f64| {
            boundaries
                .iter()
                .find(|&&b| static_check(b, Some(300.0), n))
                .copied()
        };
        let mut last = f64::INFINITY;
        for n in [1.5, 1.2, 0.9, 0.6, 0.3] {
            let t = trigger(n).unwrap();
            assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn nep_trigger_with_constant_probabilities() {
        let probs = vec![0.8; 20];
        assert_eq!(nep_first_trigger(&probs, 5, 0.7), Some(0));
    }

    #[test]
    fn nep_never_triggers_at_threshold_one() {
        let probs = vec![0.999; 50];
        assert_eq!(nep_first_trigger(&probs, 5, 1.0), None);
    }

    #[test]
    fn nep_trigger_monotone_in_threshold() {
        let probs: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let mut last = usize::MAX;
        for th in [0.9, 0.7, 0.5, 0.3] {
            let t = nep_first_trigger(&probs, 5, th).unwrap();
            assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn e2e_threshold_edge_cases() {
        // Vacuous threshold triggers on the first terminal best.
        assert!(e2e_check(true, Some(-3.2), f64::NEG_INFINITY));
        // Log-probabilities never reach a threshold of 0.
        assert!(!e2e_check(true, Some(-1e-9), 0.0));
        assert!(!e2e_check(false, Some(-0.1), f64::NEG_INFINITY));
    }

    #[test]
    fn e2e_scripted_posterior_stream() {
        // Two-step stream: the eos posterior crosses ln 0.6 at step 2 with a
        // ln 0.5 threshold; step 1 is below.
        let steps = [(true, Some(0.4f64.ln())), (true, Some(0.6f64.ln()))];
        let th = 0.5f64.ln();
        let fired: Vec<bool> = steps.iter().map(|(t, lp)| e2e_check(*t, *lp, th)).collect();
        assert_eq!(fired, vec![false, true]);
    }

    #[test]
    fn empty_spec_never_triggers() {
        let spec = EndpointerSpec::default();
        let mut ep = compose(&spec);
        let obs = ChunkObservation {
            done_time_ms: 1e9,
            processed_audio_ms: 1e9,
            arrived_frames: &[],
            best_last_label_audio_ms: None,
            best_is_terminal: true,
            best_eos_logprob: Some(0.0),
        };
        assert_eq!(ep.check(&obs), None);
    }

    #[test]
    fn spec_validation() {
        let bad = EndpointerSpec {
            static_ep: Some(StaticEpConfig { trailing_silence_s: 0.0 }),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EndpointerSpec {
            neural: Some(NeuralEpConfig {
                model: NepModel::init(NepConfig::new(4), 0),
                window_frames: 5,
                threshold: 1.0,
            }),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nep_training_is_deterministic_and_lr_zero_is_identity() {
        use crate::corpus::{synth_corpus, CorpusConfig};
        let ccfg = CorpusConfig {
            num_utterances: 4,
            trailing_silence_s: 0.2,
            seed: 5,
            ..CorpusConfig::default()
        };
        let corpus = synth_corpus(&ccfg).unwrap();
        let cfg = NepTrainConfig {
            epochs: 2,
            ..NepTrainConfig::default()
        };
        let a = nep_train(&corpus, &cfg).unwrap();
        let b = nep_train(&corpus, &cfg).unwrap();
        assert_eq!(a, b);

        let frozen = nep_train(
            &corpus,
            &NepTrainConfig {
                learning_rate: 0.0,
                epochs: 3,
                ..NepTrainConfig::default()
            },
        )
        .unwrap();
        let init = NepModel::init(NepConfig { feature_dim: 8, hidden: 16 }, 0);
        assert_eq!(frozen.params, init.params);
    }

    #[test]
    fn nep_checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("uplsim-nep-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("nep.json");
        let model = NepModel::init(NepConfig::new(8), 3);
        save_nep_checkpoint(&model, &path).unwrap();
        let loaded = load_nep_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
    }
}
