//! Latency decomposition, WER, percentile aggregation, and report files.
//!
//! Per utterance, with `eos_time` the audio time just after the last
//! ground-truth token:
//!
//! * first-token delay = first emission - true speech start (initial
//!   silence ignored);
//! * decoder catchup = last emission - eos_time (may be negative, never
//!   clamped);
//! * endpointer lag = mic close - last emission;
//! * UPL = mic close - eos_time = catchup + endpointer lag, exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, Utterance};
use crate::decoder::DecodeTrace;
use crate::endpoint::EndpointCause;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    /// Absent when the decoder never emitted a token.
    pub first_token_delay_ms: Option<f64>,
    /// Absent when the decoder never emitted a token; may be negative.
    pub decoder_catchup_ms: Option<f64>,
    pub endpointer_lag_ms: f64,
    pub upl_ms: f64,
    pub cause: EndpointCause,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty reference: WER undefined")]
    EmptyReference,
    #[error("percentile input is empty")]
    EmptyValues,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(f64),
    #[error("report i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization error: {0}")]
    Serde(String),
}

/// Latency decomposition of one completed decode.
pub fn latency_from_trace(trace: &DecodeTrace, utt: &Utterance) -> LatencyRecord {
    let shift = trace.frame_shift_ms;
    let speech_start = utt.speech_start_frame as f64 * shift;
    let eos_time = (utt.speech_end_frame + 1) as f64 * shift;
    let close = trace.mic_close_time_ms;
    let upl = close - eos_time;
    match (trace.emission_times_ms.first(), trace.emission_times_ms.last()) {
        (Some(&first), Some(&last)) => LatencyRecord {
            first_token_delay_ms: Some(first - speech_start),
            decoder_catchup_ms: Some(last - eos_time),
            endpointer_lag_ms: close - last,
            upl_ms: upl,
            cause: trace.close_cause,
        },
        _ => LatencyRecord {
            first_token_delay_ms: None,
            decoder_catchup_ms: None,
            // With no emission, silence counts from audio time zero.
            endpointer_lag_ms: close,
            upl_ms: upl,
            cause: trace.close_cause,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_tokens as f64
    }
}

/// Levenshtein alignment with unit costs. Among minimal-cost alignments the
/// tie-break prefers fewer insertions, then fewer deletions.
pub fn wer(reference: &[TokenId], hypothesis: &[TokenId]) -> Result<WerBreakdown, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let n = reference.len();
    let m = hypothesis.len();
    // DP over (cost, insertions, deletions), minimized lexicographically.
    let mut prev: Vec<(usize, usize, usize)> = (0..=m).map(|j| (j, j, 0)).collect();
    let mut curr = vec![(0usize, 0usize, 0usize); m + 1];
    for i in 1..=n {
        curr[0] = (i, 0, i);
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let diag = (prev[j - 1].0 + sub_cost, prev[j - 1].1, prev[j - 1].2);
            let del = (prev[j].0 + 1, prev[j].1, prev[j].2 + 1);
            let ins = (curr[j - 1].0 + 1, curr[j - 1].1 + 1, curr[j - 1].2);
            curr[j] = diag.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let (cost, insertions, deletions) = prev[m];
    Ok(WerBreakdown {
        substitutions: cost - insertions - deletions,
        deletions,
        insertions,
        ref_tokens: n,
    })
}

/// Nearest-rank percentile: sorted ascending, index `ceil(p/100 * n) - 1`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyValues);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::BadPercentile(p));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// One utterance row of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub utt_id: u64,
    pub first_token_delay_ms: Option<f64>,
    pub catchup_ms: Option<f64>,
    pub ep_lag_ms: f64,
    pub upl_ms: f64,
    pub cause: EndpointCause,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub utterances: usize,
    pub p50_upl_ms: f64,
    pub p90_upl_ms: f64,
    pub p50_first_token_delay_ms: Option<f64>,
    pub p90_first_token_delay_ms: Option<f64>,
    pub p50_catchup_ms: Option<f64>,
    pub p90_catchup_ms: Option<f64>,
    pub p50_ep_lag_ms: f64,
    pub p90_ep_lag_ms: f64,
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
    pub deletion_rate: f64,
    pub mean_rtf: f64,
    /// Rows whose decoder never emitted a token (excluded from the delay
    /// and catchup pools).
    pub missing_first_token: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_echo: serde_json::Value,
    pub aggregates: Aggregates,
    pub rows: Vec<UtteranceRow>,
}

/// Fold id-sorted rows into a report. Aggregates are recomputable from the
/// rows.
pub fn aggregate(mut rows: Vec<UtteranceRow>, config_echo: serde_json::Value) -> RunReport {
    rows.sort_by_key(|r| r.utt_id);
    let upl: Vec<f64> = rows.iter().map(|r| r.upl_ms).collect();
    let ep_lag: Vec<f64> = rows.iter().map(|r| r.ep_lag_ms).collect();
    let ftd: Vec<f64> = rows.iter().filter_map(|r| r.first_token_delay_ms).collect();
    let catchup: Vec<f64> = rows.iter().filter_map(|r| r.catchup_ms).collect();
    let subs: usize = rows.iter().map(|r| r.substitutions).sum();
    let dels: usize = rows.iter().map(|r| r.deletions).sum();
    let ins: usize = rows.iter().map(|r| r.insertions).sum();
    let refs: usize = rows.iter().map(|r| r.ref_len).sum();
    let pct = |v: &[f64], p: f64| percentile(v, p).ok();
    let aggregates = Aggregates {
        utterances: rows.len(),
        p50_upl_ms: pct(&upl, 50.0).unwrap_or(f64::NAN),
        p90_upl_ms: pct(&upl, 90.0).unwrap_or(f64::NAN),
        p50_first_token_delay_ms: pct(&ftd, 50.0),
        p90_first_token_delay_ms: pct(&ftd, 90.0),
        p50_catchup_ms: pct(&catchup, 50.0),
        p90_catchup_ms: pct(&catchup, 90.0),
        p50_ep_lag_ms: pct(&ep_lag, 50.0).unwrap_or(f64::NAN),
        p90_ep_lag_ms: pct(&ep_lag, 90.0).unwrap_or(f64::NAN),
        wer: (subs + dels + ins) as f64 / refs.max(1) as f64,
        substitutions: subs,
        deletions: dels,
        insertions: ins,
        ref_tokens: refs,
        deletion_rate: dels as f64 / refs.max(1) as f64,
        mean_rtf: rows.iter().map(|r| r.rtf).sum::<f64>() / rows.len().max(1) as f64,
        missing_first_token: rows.iter().filter(|r| r.first_token_delay_ms.is_none()).count(),
    };
    RunReport {
        config_echo,
        aggregates,
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Fixed per-utterance CSV contract, one header plus one row per utterance:
/// `utt_id,first_token_delay_ms,catchup_ms,ep_lag_ms,upl_ms,cause,S,D,I,ref_len`.
pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from("utt_id,first_token_delay_ms,catchup_ms,ep_lag_ms,upl_ms,cause,S,D,I,ref_len\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.utt_id,
            fmt_opt(r.first_token_delay_ms),
            fmt_opt(r.catchup_ms),
            r.ep_lag_ms,
            r.upl_ms,
            r.cause,
            r.substitutions,
            r.deletions,
            r.insertions,
            r.ref_len
        ));
    }
    out
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, report).map_err(|e| MetricsError::Serde(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            w.write_all(report_csv(report).as_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<RunReport, MetricsError> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| MetricsError::Serde(e.to_string()))
}
