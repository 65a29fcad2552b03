//! Transducer composition: predictor over emitted tokens, feed-forward
//! joiner, full logit lattice, and the exact reverse pass used in training.

use crate::corpus::TokenId;
use crate::math::{matvec_acc, matvec_t_acc, outer_acc};

use super::encoder::EncoderCache;
use super::lstm::{lstm_backward_sequence, lstm_step, LstmStepCache};
use super::{LogitLattice, Model, ModelError};

/// Predictor LSTM state plus its current output row. The prefix-length-0
/// row is the all-zero start state; each consumed token advances the LSTM.
#[derive(Debug, Clone)]
pub struct PredictorState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// Row fed to the joiner for the current prefix.
    pub out: Vec<f64>,
}

impl PredictorState {
    pub fn start(model: &Model) -> Self {
        let hp = model.cfg.predictor_hidden;
        Self {
            h: vec![0.0; hp],
            c: vec![0.0; hp],
            out: vec![0.0; hp],
        }
    }
}

pub(crate) struct PredictorCache {
    pub tokens: Vec<usize>,
    pub caches: Vec<LstmStepCache>,
}

/// Everything the backward pass needs from one full forward evaluation.
pub struct ForwardCache {
    pub(crate) enc: EncoderCache,
    pub(crate) enc_rows: Vec<Vec<f64>>,
    pub(crate) pred: PredictorCache,
    pub(crate) pred_rows: Vec<Vec<f64>>,
    /// tanh-activated joiner hidden per (t, u).
    pub(crate) joiner_z: Vec<f64>,
    pub(crate) dims: (usize, usize, usize),
}

impl Model {
    fn embed_row(&self, tok: usize) -> &[f64] {
        let e = self.cfg.predictor_embed;
        let base = self.layout.embed.off + tok * e;
        &self.p()[base..base + e]
    }

    /// Advance the predictor with one emitted token.
    pub fn predictor_step(&self, state: &mut PredictorState, token: TokenId) -> Result<(), ModelError> {
        if !self.valid_label(token) {
            return Err(ModelError::TokenOutOfRange(token));
        }
        let x = self.embed_row(token as usize).to_vec();
        lstm_step(self.p(), &self.layout.pred, &x, &mut state.h, &mut state.c, None);
        state.out = state.h.clone();
        Ok(())
    }

    fn predictor_forward(
        &self,
        target: &[TokenId],
        keep_cache: bool,
    ) -> Result<(Vec<Vec<f64>>, Option<PredictorCache>), ModelError> {
        let hp = self.cfg.predictor_hidden;
        let p = self.p();
        let mut rows = Vec::with_capacity(target.len() + 1);
        rows.push(vec![0.0; hp]);
        let mut h = vec![0.0; hp];
        let mut c = vec![0.0; hp];
        let mut caches = keep_cache.then(Vec::new);
        let mut tokens = Vec::with_capacity(target.len());
        for &tok in target {
            if !self.valid_label(tok) {
                return Err(ModelError::TokenOutOfRange(tok));
            }
            let x = self.embed_row(tok as usize).to_vec();
            lstm_step(p, &self.layout.pred, &x, &mut h, &mut c, caches.as_mut());
            rows.push(h.clone());
            tokens.push(tok as usize);
        }
        let cache = caches.map(|caches| PredictorCache { tokens, caches });
        Ok((rows, cache))
    }

    /// Raw joiner logits for one (encoder row, predictor row) pair.
    pub fn joiner_logits(&self, enc_row: &[f64], pred_row: &[f64]) -> Vec<f64> {
        let (logits, _) = self.joiner_logits_z(enc_row, pred_row);
        logits
    }

    fn joiner_logits_z(&self, enc_row: &[f64], pred_row: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.p();
        let j = self.cfg.joiner_hidden;
        let k = self.cfg.output_count();
        let mut pre = self.layout.join_bh.of(p).to_vec();
        matvec_acc(self.layout.join_enc.of(p), j, self.cfg.encoder_hidden, enc_row, &mut pre);
        matvec_acc(
            self.layout.join_pred.of(p),
            j,
            self.cfg.predictor_hidden,
            pred_row,
            &mut pre,
        );
        let z: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let mut logits = self.layout.join_bo.of(p).to_vec();
        matvec_acc(self.layout.join_out.of(p), k, j, &z, &mut logits);
        (logits, z)
    }

    /// Full logit lattice over every (encoder frame, prefix length) pair.
    pub fn logit_lattice(&self, frames: &[Vec<f64>], target: &[TokenId]) -> Result<LogitLattice, ModelError> {
        let (lattice, _) = self.logit_lattice_cached(frames, target, false)?;
        Ok(lattice)
    }

    /// Like [`Model::logit_lattice`] but optionally retains the forward
    /// activations for [`Model::backward`].
    pub fn logit_lattice_cached(
        &self,
        frames: &[Vec<f64>],
        target: &[TokenId],
        keep_cache: bool,
    ) -> Result<(LogitLattice, Option<ForwardCache>), ModelError> {
        let (enc_rows, enc_cache) = self.encoder_full_cached(frames, keep_cache)?;
        let (pred_rows, pred_cache) = self.predictor_forward(target, keep_cache)?;
        let t_len = enc_rows.len();
        let u_len = pred_rows.len();
        let k = self.cfg.output_count();
        let mut lattice = LogitLattice::zeros(t_len, u_len, k, self.stride(), frames.len());
        let j = self.cfg.joiner_hidden;
        let mut joiner_z = keep_cache.then(|| vec![0.0; t_len * u_len * j]);
        for (t, enc_row) in enc_rows.iter().enumerate() {
            for (u, pred_row) in pred_rows.iter().enumerate() {
                let (logits, z) = self.joiner_logits_z(enc_row, pred_row);
                lattice.row_mut(t, u).copy_from_slice(&logits);
                if let Some(zs) = joiner_z.as_mut() {
                    zs[(t * u_len + u) * j..(t * u_len + u + 1) * j].copy_from_slice(&z);
                }
            }
        }
        let cache = keep_cache.then(|| ForwardCache {
            enc: enc_cache.unwrap(),
            enc_rows,
            pred: pred_cache.unwrap(),
            pred_rows,
            joiner_z: joiner_z.unwrap(),
            dims: (t_len, u_len, k),
        });
        Ok((lattice, cache))
    }

    /// Gradient of `<grad_lattice, logits>` with respect to every parameter,
    /// given the forward activations.
    pub fn backward(&self, cache: &ForwardCache, grad_lattice: &LogitLattice) -> Result<Vec<f64>, ModelError> {
        if grad_lattice.dims() != cache.dims {
            return Err(ModelError::GradDims {
                got: grad_lattice.dims(),
                want: cache.dims,
            });
        }
        let (t_len, u_len, k) = cache.dims;
        let j = self.cfg.joiner_hidden;
        let p = self.p();
        let mut grad = vec![0.0; self.layout.total];

        let mut d_enc = vec![vec![0.0; self.cfg.encoder_hidden]; t_len];
        let mut d_pred = vec![vec![0.0; self.cfg.predictor_hidden]; u_len];

        for t in 0..t_len {
            for u in 0..u_len {
                let dlogits = grad_lattice.row(t, u);
                if dlogits.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let z = &cache.joiner_z[(t * u_len + u) * j..(t * u_len + u + 1) * j];
                outer_acc(self.layout.join_out.of_mut(&mut grad), k, j, dlogits, z);
                for (slot, d) in self.layout.join_bo.of_mut(&mut grad).iter_mut().zip(dlogits) {
                    *slot += d;
                }
                let mut dz = vec![0.0; j];
                matvec_t_acc(self.layout.join_out.of(p), k, j, dlogits, &mut dz);
                let dpre: Vec<f64> = dz.iter().zip(z).map(|(d, z)| d * (1.0 - z * z)).collect();
                outer_acc(
                    self.layout.join_enc.of_mut(&mut grad),
                    j,
                    self.cfg.encoder_hidden,
                    &dpre,
                    &cache.enc_rows[t],
                );
                outer_acc(
                    self.layout.join_pred.of_mut(&mut grad),
                    j,
                    self.cfg.predictor_hidden,
                    &dpre,
                    &cache.pred_rows[u],
                );
                for (slot, d) in self.layout.join_bh.of_mut(&mut grad).iter_mut().zip(&dpre) {
                    *slot += d;
                }
                matvec_t_acc(
                    self.layout.join_enc.of(p),
                    j,
                    self.cfg.encoder_hidden,
                    &dpre,
                    &mut d_enc[t],
                );
                matvec_t_acc(
                    self.layout.join_pred.of(p),
                    j,
                    self.cfg.predictor_hidden,
                    &dpre,
                    &mut d_pred[u],
                );
            }
        }

        self.encoder_backward(&cache.enc, d_enc, &mut grad);

        // Predictor: row u >= 1 is the output of step u-1; row 0 is the
        // constant start state and takes no gradient.
        if !cache.pred.caches.is_empty() {
            let d_out: Vec<Vec<f64>> = d_pred[1..].to_vec();
            let dx = lstm_backward_sequence(p, &self.layout.pred, &cache.pred.caches, &d_out, &mut grad);
            let e = self.cfg.predictor_embed;
            for (step, dxe) in dx.iter().enumerate() {
                let tok = cache.pred.tokens[step];
                let base = self.layout.embed.off + tok * e;
                for (slot, d) in grad[base..base + e].iter_mut().zip(dxe) {
                    *slot += d;
                }
            }
        }

        Ok(grad)
    }

    /// Forward + reverse in one call: gradient of `<grad_lattice, logits>`
    /// for the network evaluated on (`frames`, `target`).
    pub fn backprop(
        &self,
        frames: &[Vec<f64>],
        target: &[TokenId],
        grad_lattice: &LogitLattice,
    ) -> Result<Vec<f64>, ModelError> {
        let (_, cache) = self.logit_lattice_cached(frames, target, true)?;
        self.backward(&cache.unwrap(), grad_lattice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Parameters};

    #[test]
    fn lattice_dims_follow_stride_arithmetic() {
        let cfg = ModelConfig::default();
        let model = Model::init(cfg, 1).unwrap();
        let frames = vec![vec![0.1; 8]; 208];
        let lattice = model.logit_lattice(&frames, &[1, 2, 3]).unwrap();
        assert_eq!(lattice.dims(), (104, 4, 17));
        assert_eq!(lattice.stride, 2);
        assert_eq!(lattice.source_frames, 208);
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let cfg = ModelConfig::default();
        let n = crate::model::param_count(&cfg);
        let model = Model::new(cfg, Parameters(vec![0.0; n])).unwrap();
        let frames = vec![vec![0.3; 8]; 6];
        let lattice = model.logit_lattice(&frames, &[2]).unwrap();
        assert!(lattice.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let frames = vec![vec![0.0; 8]; 4];
        assert!(matches!(
            model.logit_lattice(&frames, &[0]),
            Err(ModelError::TokenOutOfRange(0))
        ));
        assert!(matches!(
            model.logit_lattice(&frames, &[17]),
            Err(ModelError::TokenOutOfRange(17))
        ));
    }

    #[test]
    fn zero_grad_lattice_gives_zero_gradient() {
        let model = Model::init(ModelConfig::default(), 2).unwrap();
        let frames = vec![vec![0.1; 8]; 6];
        let lattice = model.logit_lattice(&frames, &[1, 2]).unwrap();
        let zeros = LogitLattice::zeros(lattice.t_len, lattice.u_len, lattice.k_len, 2, 6);
        let grad = model.backprop(&frames, &[1, 2], &zeros).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_dims_mismatch_is_rejected() {
        let model = Model::init(ModelConfig::default(), 2).unwrap();
        let frames = vec![vec![0.1; 8]; 6];
        let bad = LogitLattice::zeros(1, 1, 17, 2, 6);
        assert!(matches!(
            model.backprop(&frames, &[1], &bad),
            Err(ModelError::GradDims { .. })
        ));
    }
}
