//! Streaming beam-search decoding under a discrete-event virtual clock.
//!
//! Audio arrives in chunks on a real-time cadence; each chunk is charged a
//! compute cost from the configured cost model and processed as soon as the
//! previous chunk finishes (`start = max(arrive, done_prev)`). After every
//! chunk completion the beam has advanced over the chunk's encoder rows,
//! the best hypothesis is snapshotted, and the endpointer is consulted. On
//! a trigger the mic closes at that completion time and the remaining audio
//! is discarded.
//!
//! The virtual clock (not wall time) is the normative time base; the
//! `Measured` cost model exists for realism but is excluded from
//! deterministic tests.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, Utterance};
use crate::endpoint::{compose, ChunkObservation, EndpointCause, EndpointError, EndpointerSpec};
use crate::math::log_softmax_inplace;
use crate::model::{Model, ModelError, PredictorState, BLANK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostModel {
    /// Flat virtual cost per chunk, including a padded final chunk.
    Fixed { ms_per_chunk: f64 },
    /// `base_ms + ms_per_frame * frames` over the frames actually run
    /// through the encoder (padding included).
    Linear { base_ms: f64, ms_per_frame: f64 },
    /// Wall-clock time of the actual forward pass. Not deterministic.
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub frame_shift_ms: f64,
    /// Frames per chunk; must be a positive multiple of the model stride.
    pub chunk_frames: usize,
    pub cost_model: CostModel,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            frame_shift_ms: 10.0,
            chunk_frames: 4,
            cost_model: CostModel::Fixed { ms_per_chunk: 20.0 },
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, stride: usize) -> Result<(), DecodeError> {
        if !(self.frame_shift_ms > 0.0) {
            return Err(DecodeError::Config("frame_shift_ms must be > 0".into()));
        }
        if self.chunk_frames < stride || self.chunk_frames % stride != 0 {
            return Err(DecodeError::Config(format!(
                "chunk_frames {} must be a positive multiple of the model stride {}",
                self.chunk_frames, stride
            )));
        }
        let ok = match self.cost_model {
            CostModel::Fixed { ms_per_chunk } => ms_per_chunk >= 0.0 && ms_per_chunk.is_finite(),
            CostModel::Linear { base_ms, ms_per_frame } => {
                base_ms >= 0.0 && ms_per_frame >= 0.0 && base_ms.is_finite() && ms_per_frame.is_finite()
            }
            CostModel::Measured => true,
        };
        if !ok {
            return Err(DecodeError::Config("compute costs must be non-negative".into()));
        }
        Ok(())
    }

    pub fn chunk_audio_ms(&self) -> f64 {
        self.chunk_frames as f64 * self.frame_shift_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Cap on label emissions per source hypothesis per encoder frame.
    pub max_symbols_per_frame: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_symbols_per_frame: 10,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 || self.max_symbols_per_frame == 0 {
            return Err(DecodeError::Config(
                "beam_size and max_symbols_per_frame must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One beam entry. Terminal hypotheses (those that emitted end-of-speech)
/// are never expanded; their end-of-speech log-posterior is kept for the
/// end-to-end endpointer.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
    pub pred: PredictorState,
    pub terminal: bool,
    pub eos_logprob: Option<f64>,
    /// Global encoder row of the most recent label emission.
    pub last_label_row: Option<usize>,
}

impl Hypothesis {
    fn start(model: &Model) -> Self {
        Self {
            tokens: Vec::new(),
            log_score: 0.0,
            pred: PredictorState::start(model),
            terminal: false,
            eos_logprob: None,
            last_label_row: None,
        }
    }
}

/// Score-descending order with deterministic ties: shorter token sequence
/// first, then lexicographically smaller tokens, then non-terminal first.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_score
        .partial_cmp(&a.log_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.terminal.cmp(&b.terminal))
}

/// Merge hypotheses with identical (tokens, terminal) by log-adding their
/// scores; bookkeeping fields come from the higher-scoring component.
fn merge_by_tokens(hyps: Vec<Hypothesis>) -> Vec<Hypothesis> {
    let mut merged: Vec<Hypothesis> = Vec::with_capacity(hyps.len());
    for h in hyps {
        match merged
            .iter_mut()
            .find(|m| m.terminal == h.terminal && m.tokens == h.tokens)
        {
            Some(m) => {
                let combined = crate::math::log_add(m.log_score, h.log_score);
                if h.log_score > m.log_score {
                    *m = h;
                }
                m.log_score = combined;
            }
            None => merged.push(h),
        }
    }
    merged
}

fn top_k(mut hyps: Vec<Hypothesis>, k: usize) -> Vec<Hypothesis> {
    hyps.sort_by(rank);
    hyps.truncate(k);
    hyps
}

/// Advance the beam over one encoder row: frame-synchronous transducer beam
/// search with label chains capped per source hypothesis and the combined
/// candidate set pruned to the beam size at every chain depth.
pub fn beam_step(
    model: &Model,
    hyps: Vec<Hypothesis>,
    enc_row: &[f64],
    row_index: usize,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, ModelError> {
    let k_len = model.cfg.output_count();
    let eos = model.cfg.eos_index();

    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut frontier: Vec<Hypothesis> = Vec::new();
    for h in hyps {
        if h.terminal {
            pool.push(h);
        } else {
            frontier.push(h);
        }
    }

    for depth in 0..=cfg.max_symbols_per_frame {
        if frontier.is_empty() {
            break;
        }
        let mut next_frontier: Vec<Hypothesis> = Vec::new();
        for h in frontier {
            let mut lp = model.joiner_logits(enc_row, &h.pred.out);
            log_softmax_inplace(&mut lp);
            let mut blanked = h.clone();
            blanked.log_score += lp[BLANK];
            pool.push(blanked);
            if depth == cfg.max_symbols_per_frame {
                continue;
            }
            for k in 1..k_len {
                if Some(k) == eos {
                    let mut done = h.clone();
                    done.log_score += lp[k];
                    done.terminal = true;
                    done.eos_logprob = Some(lp[k]);
                    pool.push(done);
                } else {
                    let mut ext = h.clone();
                    ext.log_score += lp[k];
                    ext.tokens.push(k as TokenId);
                    ext.last_label_row = Some(row_index);
                    model.predictor_step(&mut ext.pred, k as TokenId)?;
                    next_frontier.push(ext);
                }
            }
        }
        pool = merge_by_tokens(pool);
        next_frontier = merge_by_tokens(next_frontier);

        // Joint prune: consumed and still-expandable candidates compete for
        // the same beam slots.
        let mut tagged: Vec<(bool, Hypothesis)> = pool
            .into_iter()
            .map(|h| (false, h))
            .chain(next_frontier.into_iter().map(|h| (true, h)))
            .collect();
        tagged.sort_by(|(_, a), (_, b)| rank(a, b));
        tagged.truncate(cfg.beam_size);
        pool = Vec::new();
        frontier = Vec::new();
        for (expandable, h) in tagged {
            if expandable {
                frontier.push(h);
            } else {
                pool.push(h);
            }
        }
    }

    Ok(top_k(pool, cfg.beam_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEvent {
    pub chunk_index: usize,
    pub arrive_time_ms: f64,
    pub start_time_ms: f64,
    pub done_time_ms: f64,
    /// Audio time of the last source frame this chunk covers.
    pub audio_end_ms: f64,
    pub best_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub events: Vec<ChunkEvent>,
    pub final_tokens: Vec<TokenId>,
    /// Virtual time at which each final-token position first appeared in a
    /// best-hypothesis snapshot (prefix match).
    pub emission_times_ms: Vec<f64>,
    pub mic_close_time_ms: f64,
    pub close_cause: EndpointCause,
    pub source_frames: usize,
    pub frame_shift_ms: f64,
    pub total_compute_ms: f64,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub trace: DecodeTrace,
    pub final_score: f64,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("decode config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("non-finite hypothesis score at chunk {chunk}")]
    NonFiniteScore { chunk: usize },
}

/// Real-time factor of a completed trace: total compute time over total
/// audio time decoded. Zero for an empty trace.
pub fn rtf(trace: &DecodeTrace) -> f64 {
    match trace.events.last() {
        Some(last) if last.audio_end_ms > 0.0 => trace.total_compute_ms / last.audio_end_ms,
        _ => 0.0,
    }
}

/// Stream one utterance through the decoder under the virtual clock.
pub fn stream_decode(
    model: &Model,
    utt: &Utterance,
    beam_cfg: &BeamConfig,
    stream_cfg: &StreamConfig,
    spec: &EndpointerSpec,
) -> Result<DecodeResult, DecodeError> {
    beam_cfg.validate()?;
    stream_cfg.validate(model.stride())?;
    spec.validate()?;
    if spec.e2e.is_some() && !model.cfg.has_eos {
        return Err(DecodeError::Config(
            "e2e endpointer requires a model with the end-of-speech unit".into(),
        ));
    }
    if utt.frames.iter().any(|f| f.len() != model.cfg.feature_dim) {
        return Err(DecodeError::Config(format!(
            "utterance {} feature dim does not match the model",
            utt.id
        )));
    }

    let stride = model.stride();
    let shift = stream_cfg.frame_shift_ms;
    let cf = stream_cfg.chunk_frames;
    let total_frames = utt.frames.len();
    let num_chunks = total_frames.div_ceil(cf);

    let mut enc_state = crate::model::EncoderState::new(model);
    let mut beam = vec![Hypothesis::start(model)];
    let mut endpointer = compose(spec);

    let mut events: Vec<ChunkEvent> = Vec::with_capacity(num_chunks);
    let mut best_snapshot = beam[0].clone();
    let mut done_prev = 0.0f64;
    let mut total_compute = 0.0f64;
    let mut mic_close = 0.0f64;
    let mut cause = EndpointCause::AudioExhausted;

    for c in 0..num_chunks {
        let first = c * cf;
        let last = ((c + 1) * cf).min(total_frames);
        let real_len = last - first;
        let padded_len = real_len.div_ceil(stride) * stride;
        let mut chunk: Vec<Vec<f64>> = utt.frames[first..last].to_vec();
        chunk.resize(padded_len, vec![0.0; model.cfg.feature_dim]);

        let arrive = last as f64 * shift;
        let start = arrive.max(done_prev);

        let wall = std::time::Instant::now();
        let rows = model.encoder_stream_step(&mut enc_state, &chunk)?;
        for (i, row) in rows.iter().enumerate() {
            let row_index = first / stride + i;
            beam = beam_step(model, beam, row, row_index, beam_cfg)?;
        }
        let cost = match stream_cfg.cost_model {
            CostModel::Fixed { ms_per_chunk } => ms_per_chunk,
            CostModel::Linear { base_ms, ms_per_frame } => base_ms + ms_per_frame * padded_len as f64,
            CostModel::Measured => wall.elapsed().as_secs_f64() * 1000.0,
        };
        let done = start + cost;
        total_compute += cost;
        done_prev = done;
        mic_close = done;

        let best = beam.iter().min_by(|a, b| rank(a, b)).expect("beam non-empty");
        if !best.log_score.is_finite() {
            return Err(DecodeError::NonFiniteScore { chunk: c });
        }
        best_snapshot = best.clone();

        let audio_end = last as f64 * shift;
        events.push(ChunkEvent {
            chunk_index: c,
            arrive_time_ms: arrive,
            start_time_ms: start,
            done_time_ms: done,
            audio_end_ms: audio_end,
            best_tokens: best.tokens.clone(),
        });

        let arrived = ((done / shift).floor() as usize).min(total_frames);
        let obs = ChunkObservation {
            done_time_ms: done,
            processed_audio_ms: audio_end,
            arrived_frames: &utt.frames[..arrived],
            best_last_label_audio_ms: best
                .last_label_row
                .map(|r| (((r + 1) * stride).min(total_frames)) as f64 * shift),
            best_is_terminal: best.terminal,
            best_eos_logprob: best.eos_logprob,
        };
        if let Some(trigger) = endpointer.check(&obs) {
            cause = trigger;
            break;
        }
    }

    let final_tokens = best_snapshot.tokens.clone();
    let emission_times = emission_times(&events, &final_tokens);

    Ok(DecodeResult {
        trace: DecodeTrace {
            events,
            final_tokens,
            emission_times_ms: emission_times,
            mic_close_time_ms: mic_close,
            close_cause: cause,
            source_frames: total_frames,
            frame_shift_ms: shift,
            total_compute_ms: total_compute,
        },
        final_score: best_snapshot.log_score,
    })
}

/// Emission time of final-token position `i`: the earliest chunk completion
/// whose best-hypothesis snapshot already starts with the final sequence's
/// first `i + 1` tokens. Non-decreasing in `i` by construction.
fn emission_times(events: &[ChunkEvent], final_tokens: &[TokenId]) -> Vec<f64> {
    let mut times = Vec::with_capacity(final_tokens.len());
    for i in 0..final_tokens.len() {
        let prefix = &final_tokens[..=i];
        let t = events
            .iter()
            .find(|e| e.best_tokens.len() > i && e.best_tokens[..=i] == *prefix)
            .map(|e| e.done_time_ms);
        // The closing snapshot equals the final tokens, so a match exists.
        times.push(t.expect("final tokens come from the last snapshot"));
    }
    times
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, CorpusConfig};
    use crate::endpoint::StaticEpConfig;
    use crate::model::ModelConfig;

    fn small_model(seed: u64) -> Model {
        Model::init(
            ModelConfig {
                encoder_hidden: 8,
                predictor_embed: 4,
                predictor_hidden: 8,
                joiner_hidden: 8,
                vocab_size: 6,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn small_corpus(n: usize, seed: u64) -> Vec<crate::corpus::Utterance> {
        synth_corpus(&CorpusConfig {
            num_utterances: n,
            vocab_size: 6,
            trailing_silence_s: 0.3,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn utt_with_frames(n: usize, dim: usize) -> crate::corpus::Utterance {
        crate::corpus::Utterance {
            id: 0,
            transcript: vec![1],
            alignments: vec![(0, 3)],
            speech_start_frame: 0,
            speech_end_frame: 3,
            frames: vec![vec![0.1; dim]; n],
        }
    }

    #[test]
    fn rtf_definition() {
        let model = small_model(1);
        // 40 frames split exactly into ten 4-frame chunks of 40ms audio.
        let utt = &utt_with_frames(40, model.cfg.feature_dim);
        let stream = StreamConfig {
            chunk_frames: 4,
            cost_model: CostModel::Fixed { ms_per_chunk: 20.0 },
            ..StreamConfig::default()
        };
        let res = stream_decode(&model, utt, &BeamConfig::default(), &stream, &EndpointerSpec::default())
            .unwrap();
        assert!((rtf(&res.trace) - 0.5).abs() < 1e-9);

        let stream = StreamConfig {
            cost_model: CostModel::Fixed { ms_per_chunk: 60.0 },
            ..stream
        };
        let res = stream_decode(&model, utt, &BeamConfig::default(), &stream, &EndpointerSpec::default())
            .unwrap();
        assert!((rtf(&res.trace) - 1.5).abs() < 1e-9);

        let stream = StreamConfig {
            cost_model: CostModel::Linear { base_ms: 5.0, ms_per_frame: 5.0 },
            ..stream
        };
        let res = stream_decode(&model, utt, &BeamConfig::default(), &stream, &EndpointerSpec::default())
            .unwrap();
        assert!((rtf(&res.trace) - 0.625).abs() < 1e-9);
    }

    #[test]
    fn zero_cost_means_done_equals_arrive() {
        let model = small_model(3);
        let utt = &small_corpus(1, 4)[0];
        let stream = StreamConfig {
            cost_model: CostModel::Fixed { ms_per_chunk: 0.0 },
            ..StreamConfig::default()
        };
        let res = stream_decode(&model, utt, &BeamConfig::default(), &stream, &EndpointerSpec::default())
            .unwrap();
        for e in &res.trace.events {
            assert_eq!(e.done_time_ms, e.arrive_time_ms);
        }
        let last = res.trace.events.last().unwrap();
        assert_eq!(res.trace.mic_close_time_ms, last.arrive_time_ms);
        assert_eq!(res.trace.close_cause, EndpointCause::AudioExhausted);
    }

    #[test]
    fn pipeline_causality_holds() {
        let model = small_model(5);
        let stream = StreamConfig {
            cost_model: CostModel::Fixed { ms_per_chunk: 70.0 },
            ..StreamConfig::default()
        };
        for utt in &small_corpus(4, 9) {
            let res =
                stream_decode(&model, utt, &BeamConfig::default(), &stream, &EndpointerSpec::default())
                    .unwrap();
            let mut prev_done = 0.0;
            for e in &res.trace.events {
                assert!(e.arrive_time_ms <= e.start_time_ms);
                assert!(e.start_time_ms <= e.done_time_ms);
                assert!(e.start_time_ms >= prev_done);
                assert!(e.done_time_ms > prev_done);
                assert_eq!(e.start_time_ms, e.arrive_time_ms.max(prev_done));
                prev_done = e.done_time_ms;
            }
        }
    }

    #[test]
    fn merge_log_adds_identical_token_sequences() {
        let model = small_model(7);
        let mk = |score: f64, tokens: Vec<TokenId>| Hypothesis {
            tokens,
            log_score: score,
            pred: PredictorState::start(&model),
            terminal: false,
            eos_logprob: None,
            last_label_row: None,
        };
        let merged = merge_by_tokens(vec![mk(0.3f64.ln(), vec![1]), mk(0.2f64.ln(), vec![1])]);
        assert_eq!(merged.len(), 1);
        assert!((merged[0].log_score - 0.5f64.ln()).abs() < 1e-12);

        // Distinct sequences stay separate and top-k keeps the best two.
        let pruned = top_k(
            vec![mk(-1.0, vec![1]), mk(-2.0, vec![2]), mk(-3.0, vec![3])],
            2,
        );
        assert_eq!(pruned.len(), 2);
        assert!(pruned.iter().all(|h| h.tokens != vec![3]));
    }

    #[test]
    fn later_static_threshold_only_truncates_the_trace() {
        let model = small_model(11);
        let stream = StreamConfig::default();
        for utt in &small_corpus(5, 21) {
            let spec_early = EndpointerSpec {
                static_ep: Some(StaticEpConfig { trailing_silence_s: 0.1 }),
                ..Default::default()
            };
            let spec_late = EndpointerSpec {
                static_ep: Some(StaticEpConfig { trailing_silence_s: 0.25 }),
                ..Default::default()
            };
            let early =
                stream_decode(&model, utt, &BeamConfig::default(), &stream, &spec_early).unwrap();
            let late = stream_decode(&model, utt, &BeamConfig::default(), &stream, &spec_late).unwrap();
            assert!(early.trace.mic_close_time_ms <= late.trace.mic_close_time_ms);
            let n = early.trace.events.len();
            assert_eq!(&late.trace.events[..n], &early.trace.events[..]);
        }
    }

    #[test]
    fn emission_times_are_monotone() {
        let model = small_model(13);
        let stream = StreamConfig::default();
        for utt in &small_corpus(6, 33) {
            let res =
                stream_decode(&model, utt, &BeamConfig::default(), &stream, &EndpointerSpec::default())
                    .unwrap();
            let times = &res.trace.emission_times_ms;
            for w in times.windows(2) {
                assert!(w[0] <= w[1]);
            }
            assert_eq!(times.len(), res.trace.final_tokens.len());
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let model = small_model(17);
        let utt = &small_corpus(1, 40)[0];
        let stream = StreamConfig::default();
        let spec = EndpointerSpec {
            static_ep: Some(StaticEpConfig { trailing_silence_s: 0.2 }),
            ..Default::default()
        };
        let a = stream_decode(&model, utt, &BeamConfig::default(), &stream, &spec).unwrap();
        let b = stream_decode(&model, utt, &BeamConfig::default(), &stream, &spec).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn e2e_without_eos_unit_is_a_config_error() {
        let model = small_model(19);
        let utt = &small_corpus(1, 50)[0];
        let spec = EndpointerSpec {
            e2e: Some(crate::endpoint::E2eEpConfig { eos_logprob_threshold: -1.0 }),
            ..Default::default()
        };
        assert!(matches!(
            stream_decode(&model, utt, &BeamConfig::default(), &StreamConfig::default(), &spec),
            Err(DecodeError::Config(_))
        ));
    }

    #[test]
    fn invalid_chunking_is_rejected() {
        let model = small_model(23);
        let utt = &small_corpus(1, 60)[0];
        let stream = StreamConfig {
            chunk_frames: 3,
            ..StreamConfig::default()
        };
        assert!(matches!(
            stream_decode(&model, utt, &BeamConfig::default(), &stream, &EndpointerSpec::default()),
            Err(DecodeError::Config(_))
        ));
    }
}
