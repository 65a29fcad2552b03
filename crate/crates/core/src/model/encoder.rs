//! Streaming encoder: stacked LSTM layers with time-reduction striding in
//! the gaps. Chunks must arrive in multiples of the overall stride, which
//! keeps every reduction group aligned to chunk boundaries, so streaming and
//! offline passes produce identical rows.

use crate::math::{matvec_acc, matvec_t_acc, outer_acc};

use super::lstm::{lstm_backward_sequence, lstm_step, LstmStepCache};
use super::{MatView, Model, ModelError};

/// Concatenate groups of `factor` consecutive rows (zero-padded tail) and
/// apply a linear projection. `projection` is row-major
/// `out_dim x (factor * row_dim)`.
pub fn time_reduce(rows: &[Vec<f64>], factor: usize, projection: &[f64], out_dim: usize) -> Vec<Vec<f64>> {
    assert!(factor >= 1, "reduction factor must be >= 1");
    if rows.is_empty() {
        return Vec::new();
    }
    let row_dim = rows[0].len();
    let in_dim = factor * row_dim;
    assert_eq!(projection.len(), out_dim * in_dim, "projection shape mismatch");
    let groups = rows.len().div_ceil(factor);
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut cat = vec![0.0; in_dim];
        for j in 0..factor {
            let idx = g * factor + j;
            if idx < rows.len() {
                cat[j * row_dim..(j + 1) * row_dim].copy_from_slice(&rows[idx]);
            }
        }
        let mut projected = vec![0.0; out_dim];
        matvec_acc(projection, out_dim, in_dim, &cat, &mut projected);
        out.push(projected);
    }
    out
}

/// Carried LSTM state of every encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderState {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EncoderState {
    pub fn new(model: &Model) -> Self {
        let h = model.cfg.encoder_hidden;
        Self {
            layers: (0..model.cfg.encoder_layers)
                .map(|_| (vec![0.0; h], vec![0.0; h]))
                .collect(),
        }
    }
}

/// Per-layer forward activations of a full-utterance encoder pass.
pub(crate) struct EncoderCache {
    /// LSTM step caches per layer.
    pub layer_caches: Vec<Vec<LstmStepCache>>,
    /// Output rows per layer (inputs to the next reduction/layer).
    pub layer_outputs: Vec<Vec<Vec<f64>>>,
}

impl Model {
    /// Feed one chunk of frames through the streaming encoder. The chunk
    /// length must be a multiple of the overall stride; an empty chunk
    /// leaves the state untouched and yields no rows.
    pub fn encoder_stream_step(
        &self,
        state: &mut EncoderState,
        chunk: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let stride = self.stride();
        if chunk.len() % stride != 0 {
            return Err(ModelError::InvalidChunk {
                len: chunk.len(),
                stride,
            });
        }
        if chunk.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.p();
        let mut rows: Vec<Vec<f64>> = chunk.to_vec();
        for (l, view) in self.layout.enc.iter().enumerate() {
            let (h, c) = &mut state.layers[l];
            let mut outputs = Vec::with_capacity(rows.len());
            for x in &rows {
                lstm_step(p, view, x, h, c, None);
                outputs.push(h.clone());
            }
            rows = outputs;
            if l < self.layout.reduce.len() {
                if let Some(proj) = &self.layout.reduce[l] {
                    let factor = proj.cols / view.hidden;
                    debug_assert_eq!(rows.len() % factor, 0);
                    rows = time_reduce(&rows, factor, proj.of(p), proj.rows);
                }
            }
        }
        Ok(rows)
    }

    /// Offline encoder pass over a whole utterance. Frames are zero-padded
    /// to a multiple of the overall stride so no tail audio is dropped;
    /// output length is ceil(frames / stride).
    pub fn encoder_full(&self, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let (rows, _) = self.encoder_full_cached(frames, false)?;
        Ok(rows)
    }

    pub(crate) fn encoder_full_cached(
        &self,
        frames: &[Vec<f64>],
        keep_cache: bool,
    ) -> Result<(Vec<Vec<f64>>, Option<EncoderCache>), ModelError> {
        let stride = self.stride();
        let padded_len = frames.len().div_ceil(stride) * stride;
        let p = self.p();
        let mut state = EncoderState::new(self);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(padded_len);
        rows.extend(frames.iter().cloned());
        rows.resize(padded_len, vec![0.0; self.cfg.feature_dim]);

        let mut layer_caches = Vec::new();
        let mut layer_outputs = Vec::new();
        for (l, view) in self.layout.enc.iter().enumerate() {
            let (h, c) = &mut state.layers[l];
            let mut caches = keep_cache.then(Vec::new);
            let mut outputs = Vec::with_capacity(rows.len());
            for x in &rows {
                lstm_step(p, view, x, h, c, caches.as_mut());
                outputs.push(h.clone());
            }
            if let Some(caches) = caches {
                layer_caches.push(caches);
            }
            if keep_cache {
                layer_outputs.push(outputs.clone());
            }
            rows = outputs;
            if l < self.layout.reduce.len() {
                if let Some(proj) = &self.layout.reduce[l] {
                    let factor = proj.cols / view.hidden;
                    rows = time_reduce(&rows, factor, proj.of(p), proj.rows);
                }
            }
        }
        let cache = keep_cache.then(|| EncoderCache {
            layer_caches,
            layer_outputs,
        });
        Ok((rows, cache))
    }

    /// Reverse pass through the encoder stack. `d_rows` holds gradients of
    /// the final encoder rows; parameter gradients accumulate into `grad`.
    pub(crate) fn encoder_backward(&self, cache: &EncoderCache, d_rows: Vec<Vec<f64>>, grad: &mut [f64]) {
        let p = self.p();
        let mut d_rows = d_rows;
        for l in (0..self.layout.enc.len()).rev() {
            let view = &self.layout.enc[l];
            if l < self.layout.reduce.len() {
                if let Some(proj) = &self.layout.reduce[l] {
                    let factor = proj.cols / view.hidden;
                    d_rows = reduce_backward(
                        p,
                        proj,
                        factor,
                        view.hidden,
                        &cache.layer_outputs[l],
                        &d_rows,
                        grad,
                    );
                }
            }
            let dx = lstm_backward_sequence(p, view, &cache.layer_caches[l], &d_rows, grad);
            d_rows = dx;
        }
        // d_rows now holds input-frame gradients; inputs are data, so they
        // are dropped.
    }
}

/// Backward of [`time_reduce`]: split the projected gradient back onto the
/// concatenated source rows and accumulate the projection gradient.
fn reduce_backward(
    p: &[f64],
    proj: &MatView,
    factor: usize,
    row_dim: usize,
    src_rows: &[Vec<f64>],
    d_out: &[Vec<f64>],
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    let in_dim = factor * row_dim;
    let mut d_src = vec![vec![0.0; row_dim]; src_rows.len()];
    for (g, dout) in d_out.iter().enumerate() {
        let mut cat = vec![0.0; in_dim];
        for j in 0..factor {
            let idx = g * factor + j;
            if idx < src_rows.len() {
                cat[j * row_dim..(j + 1) * row_dim].copy_from_slice(&src_rows[idx]);
            }
        }
        outer_acc(proj.of_mut(grad), proj.rows, in_dim, dout, &cat);
        let mut dcat = vec![0.0; in_dim];
        matvec_t_acc(proj.of(p), proj.rows, in_dim, dout, &mut dcat);
        for j in 0..factor {
            let idx = g * factor + j;
            if idx < src_rows.len() {
                d_src[idx].copy_from_slice(&dcat[j * row_dim..(j + 1) * row_dim]);
            }
        }
    }
    d_src
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn identity(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m
    }

    #[test]
    fn factor_one_identity_projection_is_identity() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, 0.5]];
        let out = time_reduce(&rows, 1, &identity(2), 2);
        assert_eq!(out, rows);
    }

    #[test]
    fn five_rows_factor_two_yields_three_groups() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        // projection sums the two concatenated entries
        let out = time_reduce(&rows, 2, &[1.0, 1.0], 1);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], vec![1.0]);
        assert_eq!(out[1], vec![5.0]);
        // last group zero-padded: 4 + 0
        assert_eq!(out[2], vec![4.0]);
    }

    #[test]
    fn matches_straight_line_concat_project() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let proj: Vec<f64> = (0..2 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = time_reduce(&rows, 2, &proj, 2);

        // Oracle: form each concatenation and multiply by hand.
        for g in 0..2 {
            let cat: Vec<f64> = rows[2 * g].iter().chain(rows[2 * g + 1].iter()).cloned().collect();
            for r in 0..2 {
                let mut want = 0.0;
                for c in 0..6 {
                    want += proj[r * 6 + c] * cat[c];
                }
                assert!((out[g][r] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_chunk_leaves_state_unchanged() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let mut state = EncoderState::new(&model);
        let before = state.clone();
        let rows = model.encoder_stream_step(&mut state, &[]).unwrap();
        assert!(rows.is_empty());
        for (a, b) in state.layers.iter().zip(&before.layers) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn misaligned_chunk_is_rejected() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let mut state = EncoderState::new(&model);
        let chunk = vec![vec![0.0; model.cfg.feature_dim]; 3];
        assert!(matches!(
            model.encoder_stream_step(&mut state, &chunk),
            Err(ModelError::InvalidChunk { .. })
        ));
    }
}
