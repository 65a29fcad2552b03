//! A tiny trainable sequence transducer.
//!
//! Streaming LSTM encoder with time-reduction striding between layers, a
//! single-layer LSTM predictor over previously emitted tokens, and a
//! feed-forward joiner producing a logit lattice over all (encoder frame,
//! emitted prefix length) pairs. All parameters live in one flat `f64`
//! vector with named views; backpropagation is exact reverse-mode
//! arithmetic written out by hand.

mod encoder;
pub(crate) mod lstm;
pub(crate) mod train;
mod transducer;

pub use encoder::{time_reduce, EncoderState};
pub use train::{train, EpochStats, TrainConfig, TrainError, TrainLog};
pub use transducer::{ForwardCache, PredictorState};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;

pub const BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    /// Per-gap time-reduction factors between consecutive encoder layers;
    /// unlisted gaps reduce by 1 (pass-through). Overall stride is the
    /// product, e.g. factors 2 and 3 give stride 6.
    pub stride_schedule: Vec<usize>,
    pub predictor_embed: usize,
    pub predictor_hidden: usize,
    pub joiner_hidden: usize,
    pub vocab_size: u32,
    /// Adds an end-of-speech output unit (and reference label) for
    /// endpointer-aware training.
    pub has_eos: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            encoder_layers: 2,
            encoder_hidden: 32,
            stride_schedule: vec![2],
            predictor_embed: 16,
            predictor_hidden: 32,
            joiner_hidden: 32,
            vocab_size: 16,
            has_eos: false,
        }
    }
}

impl ModelConfig {
    /// Output units: vocab tokens + blank + optional end-of-speech.
    pub fn output_count(&self) -> usize {
        self.vocab_size as usize + 1 + usize::from(self.has_eos)
    }

    /// Logit index of the end-of-speech unit, when configured.
    pub fn eos_index(&self) -> Option<usize> {
        self.has_eos.then(|| self.output_count() - 1)
    }

    /// Overall temporal stride of the encoder.
    pub fn stride(&self) -> usize {
        self.stride_schedule.iter().product()
    }

    /// Reduction factor applied after encoder layer `gap` (0-based).
    fn gap_factor(&self, gap: usize) -> usize {
        self.stride_schedule.get(gap).copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0
            || self.encoder_layers == 0
            || self.encoder_hidden == 0
            || self.predictor_embed == 0
            || self.predictor_hidden == 0
            || self.joiner_hidden == 0
        {
            return Err(ModelError::InvalidConfig("all layer sizes must be >= 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig("vocab_size must be >= 1".into()));
        }
        if self.stride_schedule.iter().any(|&s| s == 0) {
            return Err(ModelError::InvalidConfig("stride factors must be >= 1".into()));
        }
        if self.stride_schedule.len() > self.encoder_layers.saturating_sub(1) {
            return Err(ModelError::InvalidConfig(format!(
                "stride_schedule has {} factors but only {} encoder-layer gaps exist",
                self.stride_schedule.len(),
                self.encoder_layers - 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has {got} entries, config requires {want}")]
    ParameterCount { got: usize, want: usize },
    #[error("chunk length {len} is not a multiple of the overall stride {stride}")]
    InvalidChunk { len: usize, stride: usize },
    #[error("token id {0} out of range for this model")]
    TokenOutOfRange(TokenId),
    #[error("gradient lattice dims {got:?} do not match logit lattice dims {want:?}")]
    GradDims {
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
}

/// Row-major matrix view into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl MatView {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len()]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len()]
    }
}

/// Views of one LSTM layer: input weights `w` (4H x in), recurrent weights
/// `u` (4H x H), bias `b` (4H). Gate order within the 4H axis is
/// input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmView {
    pub input: usize,
    pub hidden: usize,
    pub w: MatView,
    pub u: MatView,
    pub b: MatView,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc: Vec<LstmView>,
    /// One entry per encoder-layer gap; `None` when the gap factor is 1.
    pub reduce: Vec<Option<MatView>>,
    pub embed: MatView,
    pub pred: LstmView,
    pub join_enc: MatView,
    pub join_pred: MatView,
    pub join_bh: MatView,
    pub join_out: MatView,
    pub join_bo: MatView,
    pub total: usize,
}

fn lstm_view(off: &mut usize, input: usize, hidden: usize) -> LstmView {
    let mut mat = |rows: usize, cols: usize| {
        let v = MatView { off: *off, rows, cols };
        *off += v.len();
        v
    };
    LstmView {
        input,
        hidden,
        w: mat(4 * hidden, input),
        u: mat(4 * hidden, hidden),
        b: mat(4 * hidden, 1),
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut off = 0usize;
        let h = cfg.encoder_hidden;
        let mut enc = Vec::with_capacity(cfg.encoder_layers);
        let mut reduce = Vec::new();
        for layer in 0..cfg.encoder_layers {
            let input = if layer == 0 { cfg.feature_dim } else { h };
            enc.push(lstm_view(&mut off, input, h));
            if layer + 1 < cfg.encoder_layers {
                let factor = cfg.gap_factor(layer);
                if factor > 1 {
                    let v = MatView { off, rows: h, cols: factor * h };
                    off += v.len();
                    reduce.push(Some(v));
                } else {
                    reduce.push(None);
                }
            }
        }
        let k = cfg.output_count();
        let embed = MatView { off, rows: k, cols: cfg.predictor_embed };
        let mut off = off + embed.len();
        let pred = lstm_view(&mut off, cfg.predictor_embed, cfg.predictor_hidden);
        let mut mat = |rows: usize, cols: usize| {
            let v = MatView { off, rows, cols };
            off += v.len();
            v
        };
        let join_enc = mat(cfg.joiner_hidden, h);
        let join_pred = mat(cfg.joiner_hidden, cfg.predictor_hidden);
        let join_bh = mat(cfg.joiner_hidden, 1);
        let join_out = mat(k, cfg.joiner_hidden);
        let join_bo = mat(k, 1);
        Layout {
            enc,
            reduce,
            embed,
            pred,
            join_enc,
            join_pred,
            join_bh,
            join_out,
            join_bo,
            total: off,
        }
    }
}

/// Flat trainable parameter vector; views are defined by the model layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters(pub Vec<f64>);

/// Total parameter count implied by a config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    Layout::new(cfg).total
}

/// Entries i.i.d. uniform in [-0.1, 0.1], deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters, ModelError> {
    cfg.validate()?;
    let n = param_count(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Parameters((0..n).map(|_| rng.gen_range(-0.1..=0.1)).collect()))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
    pub(crate) layout: Layout,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: Parameters) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.0.len() != layout.total {
            return Err(ModelError::ParameterCount {
                got: params.0.len(),
                want: layout.total,
            });
        }
        Ok(Self { cfg, params, layout })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn stride(&self) -> usize {
        self.cfg.stride()
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub(crate) fn p(&self) -> &[f64] {
        &self.params.0
    }

    /// Valid target/emission label ids: vocab tokens, plus end-of-speech
    /// when configured.
    pub fn valid_label(&self, tok: TokenId) -> bool {
        let k = tok as usize;
        k >= 1 && k < self.cfg.output_count() && (k <= self.cfg.vocab_size as usize || self.cfg.has_eos)
    }
}

/// Joiner output grid over (encoder frame, emitted prefix length, output
/// unit). Also reused as the gradient container of the lattice losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLattice {
    pub t_len: usize,
    /// U + 1 rows: prefix lengths 0..=U.
    pub u_len: usize,
    pub k_len: usize,
    /// Overall encoder stride, kept for alignment mapping.
    pub stride: usize,
    /// Source frame count before striding/padding.
    pub source_frames: usize,
    pub values: Vec<f64>,
}

impl LogitLattice {
    pub fn zeros(t_len: usize, u_len: usize, k_len: usize, stride: usize, source_frames: usize) -> Self {
        Self {
            t_len,
            u_len,
            k_len,
            stride,
            source_frames,
            values: vec![0.0; t_len * u_len * k_len],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t_len, self.u_len, self.k_len)
    }

    #[inline]
    pub fn idx(&self, t: usize, u: usize, k: usize) -> usize {
        (t * self.u_len + u) * self.k_len + k
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.values[self.idx(t, u, k)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, u: usize, k: usize, v: f64) {
        let i = self.idx(t, u, k);
        self.values[i] = v;
    }

    pub fn row(&self, t: usize, u: usize) -> &[f64] {
        let i = self.idx(t, u, 0);
        &self.values[i..i + self.k_len]
    }

    pub fn row_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let i = self.idx(t, u, 0);
        &mut self.values[i..i + self.k_len]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    model: ModelConfig,
    params: Vec<f64>,
}

/// Write a model checkpoint (config echo + flat parameter array) as JSON.
/// The round-trip is bit-exact.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let ckpt = Checkpoint {
        model: model.cfg.clone(),
        params: model.params.0.clone(),
    };
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, &ckpt).map_err(|e| ModelError::Parse(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let r = BufReader::new(File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(r).map_err(|e| ModelError::Parse(e.to_string()))?;
    Model::new(ckpt.model, Parameters(ckpt.params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        let c = init_params(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().zip(&c.0).any(|(x, y)| x != y));
        assert!(a.0.iter().all(|&x| (-0.1..=0.1).contains(&x)));
    }

    #[test]
    fn stride_is_product_of_schedule() {
        let cfg = ModelConfig {
            encoder_layers: 3,
            stride_schedule: vec![2, 3],
            ..ModelConfig::default()
        };
        assert_eq!(cfg.stride(), 6);
        assert_eq!(
            ModelConfig { stride_schedule: vec![], encoder_layers: 1, ..ModelConfig::default() }.stride(),
            1
        );
    }

    #[test]
    fn schedule_longer_than_gaps_is_rejected() {
        let cfg = ModelConfig {
            encoder_layers: 2,
            stride_schedule: vec![2, 2],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("uplsim-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        let model = Model::init(ModelConfig::default(), 11).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.params, model.params);
    }

    #[test]
    fn eos_adds_an_output_unit() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.output_count(), 17);
        assert_eq!(cfg.eos_index(), None);
        cfg.has_eos = true;
        assert_eq!(cfg.output_count(), 18);
        assert_eq!(cfg.eos_index(), Some(17));
    }
}
