//! A desk-scale lab for dissecting user-perceived latency of streaming
//! transducer speech recognizers.
//!
//! The pieces fit together as a pipeline:
//!
//! 1. [`corpus`] generates deterministic synthetic voice-command utterances
//!    with exact per-token alignments and ground-truth endpoints.
//! 2. [`model`] is a tiny trainable sequence transducer (streaming LSTM
//!    encoder with time-reduction striding, LSTM predictor, feed-forward
//!    joiner) with exact manual backpropagation.
//! 3. [`losses`] implements the three lattice training losses (vanilla
//!    transducer, FastEmit gradient scaling, alignment-restricted) plus a
//!    brute-force path-enumeration oracle.
//! 4. [`decoder`] runs streaming beam search under a simulated real-time
//!    clock and records time-stamped traces.
//! 5. [`endpoint`] hosts the three endpointers (static trailing silence,
//!    neural frame classifier, end-of-speech label) and their composition.
//! 6. [`metrics`] turns traces into the latency decomposition (first-token
//!    delay, decoder catchup, endpointer lag, UPL), WER, and reports.

pub mod corpus;
pub mod decoder;
pub mod endpoint;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
