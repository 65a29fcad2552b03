//! Deterministic synthetic voice-command corpus.
//!
//! Each utterance is a sequence of feature frames plus the exact token
//! alignments and ground-truth speech start/end used later for latency
//! accounting. Token `t` is rendered from a fixed unit-norm base pattern
//! derived from `t` alone (not from the corpus seed), so trained models
//! transfer across regenerated corpora. Silence frames are zero-mean noise
//! with the same standard deviation as the token noise.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// Inclusive integer range used for frame and token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.lo..=self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: u32,
    pub feature_dim: usize,
    pub frames_per_token: IntRange,
    /// Silence frames inserted between consecutive tokens.
    pub inter_token_silence: IntRange,
    pub leading_silence: IntRange,
    /// Trailing silence appended after the last token, in seconds.
    pub trailing_silence_s: f64,
    /// Frame cadence used to convert `trailing_silence_s` into frames.
    pub frame_shift_ms: f64,
    pub noise_std: f64,
    /// Token count per utterance.
    pub utterance_len: IntRange,
    pub num_utterances: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feature_dim: 8,
            frames_per_token: IntRange::new(4, 8),
            inter_token_silence: IntRange::new(0, 3),
            leading_silence: IntRange::new(2, 10),
            trailing_silence_s: 2.0,
            frame_shift_ms: 10.0,
            noise_std: 0.1,
            utterance_len: IntRange::new(2, 6),
            num_utterances: 100,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.vocab_size < 2 {
            return Err(CorpusError::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(CorpusError::InvalidConfig("feature_dim must be >= 1".into()));
        }
        for (name, r) in [
            ("frames_per_token", &self.frames_per_token),
            ("inter_token_silence", &self.inter_token_silence),
            ("leading_silence", &self.leading_silence),
            ("utterance_len", &self.utterance_len),
        ] {
            if r.is_empty() {
                return Err(CorpusError::InvalidConfig(format!("{name} range is empty")));
            }
        }
        if self.frames_per_token.lo == 0 {
            return Err(CorpusError::InvalidConfig(
                "frames_per_token lower bound must be >= 1".into(),
            ));
        }
        if self.utterance_len.lo == 0 {
            return Err(CorpusError::InvalidConfig(
                "utterance_len lower bound must be >= 1".into(),
            ));
        }
        if !(self.frame_shift_ms > 0.0) {
            return Err(CorpusError::InvalidConfig("frame_shift_ms must be > 0".into()));
        }
        if self.trailing_silence_s < 0.0 || !self.trailing_silence_s.is_finite() {
            return Err(CorpusError::InvalidConfig(
                "trailing_silence_s must be a finite non-negative number".into(),
            ));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(CorpusError::InvalidConfig(
                "noise_std must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }

    /// Frames of appended trailing silence.
    pub fn trailing_frames(&self) -> usize {
        (self.trailing_silence_s * 1000.0 / self.frame_shift_ms).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: u64,
    pub transcript: Vec<TokenId>,
    /// Per token `(start_frame, end_frame)`, inclusive on both ends.
    pub alignments: Vec<(usize, usize)>,
    pub speech_start_frame: usize,
    pub speech_end_frame: usize,
    pub frames: Vec<Vec<f64>>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corpus i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
}

/// Fixed base pattern for token `token`: a unit-norm pseudo-random vector
/// seeded by the token id only, stable across corpora and seeds.
pub fn token_pattern(token: TokenId, feature_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x746f_6b5f_7061_7400 ^ u64::from(token));
    let mut v: Vec<f64> = (0..feature_dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

fn noise_frame(dim: usize, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| noise.sample(rng)).collect()
}

/// Render one utterance: leading silence, per-token segments with optional
/// inter-token silence, then the configured trailing silence.
pub fn render_utterance(
    transcript: &[TokenId],
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance, CorpusError> {
    cfg.validate()?;
    if transcript.is_empty() {
        return Err(CorpusError::InvalidInput("empty transcript".into()));
    }
    for &t in transcript {
        if t < 1 || t > cfg.vocab_size {
            return Err(CorpusError::InvalidInput(format!(
                "token id {t} out of range [1, {}]",
                cfg.vocab_size
            )));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let mut frames: Vec<Vec<f64>> = Vec::new();
    let mut alignments: Vec<(usize, usize)> = Vec::with_capacity(transcript.len());

    let leading = cfg.leading_silence.sample(rng);
    for _ in 0..leading {
        frames.push(noise_frame(cfg.feature_dim, &noise, rng));
    }

    for (i, &tok) in transcript.iter().enumerate() {
        if i > 0 {
            let gap = cfg.inter_token_silence.sample(rng);
            for _ in 0..gap {
                frames.push(noise_frame(cfg.feature_dim, &noise, rng));
            }
        }
        let len = cfg.frames_per_token.sample(rng);
        let start = frames.len();
        let pattern = token_pattern(tok, cfg.feature_dim);
        for _ in 0..len {
            let mut f = noise_frame(cfg.feature_dim, &noise, rng);
            for (x, p) in f.iter_mut().zip(&pattern) {
                *x += p;
            }
            frames.push(f);
        }
        alignments.push((start, frames.len() - 1));
    }

    let speech_start_frame = alignments[0].0;
    let speech_end_frame = alignments.last().unwrap().1;
    for _ in 0..cfg.trailing_frames() {
        frames.push(noise_frame(cfg.feature_dim, &noise, rng));
    }

    Ok(Utterance {
        id: 0,
        transcript: transcript.to_vec(),
        alignments,
        speech_start_frame,
        speech_end_frame,
        frames,
    })
}

/// Generate `cfg.num_utterances` utterances with uniformly drawn transcripts.
/// A pure function of the config: repeated calls agree bit-exactly.
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = Vec::with_capacity(cfg.num_utterances);
    for id in 0..cfg.num_utterances {
        let len = cfg.utterance_len.sample(&mut rng);
        let transcript: Vec<TokenId> =
            (0..len).map(|_| rng.gen_range(1..=cfg.vocab_size)).collect();
        let mut utt = render_utterance(&transcript, cfg, &mut rng)?;
        utt.id = id as u64;
        corpus.push(utt);
    }
    Ok(corpus)
}

/// Write a corpus as JSON lines: line 1 echoes the config, every following
/// line is one utterance record. Frames are decimal arrays; `f64` values
/// round-trip exactly.
pub fn save_corpus(corpus: &[Utterance], cfg: &CorpusConfig, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, cfg)
        .map_err(|e| CorpusError::InvalidInput(format!("config serialization: {e}")))?;
    w.write_all(b"\n")?;
    for utt in corpus {
        serde_json::to_writer(&mut w, utt)
            .map_err(|e| CorpusError::InvalidInput(format!("utterance serialization: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a corpus written by [`save_corpus`]. Malformed or truncated input
/// fails with the offending record index; no partial corpus is returned.
pub fn load_corpus(path: &Path) -> Result<(Vec<Utterance>, CorpusConfig), CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| CorpusError::Parse {
            record: 0,
            message: "missing config header line".into(),
        })??;
    let cfg: CorpusConfig = serde_json::from_str(&header).map_err(|e| CorpusError::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    let mut corpus = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            record: i + 1,
            message: e.to_string(),
        })?;
        corpus.push(utt);
    }
    Ok((corpus, cfg))
}
