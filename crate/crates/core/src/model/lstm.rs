//! Plain LSTM cell arithmetic on flat parameter slices, with the cached
//! activations needed for exact backpropagation through time.

use crate::math::{matvec_acc, matvec_t_acc, outer_acc, sigmoid};

use super::LstmView;

/// Activations of one timestep, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LstmStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub tc: Vec<f64>,
}

impl LstmStepCache {
    pub fn h(&self) -> Vec<f64> {
        self.o.iter().zip(&self.tc).map(|(o, tc)| o * tc).collect()
    }
}

/// One LSTM step. Updates `h` and `c` in place; optionally records the
/// activations needed for the backward pass.
pub(crate) fn lstm_step(
    p: &[f64],
    v: &LstmView,
    x: &[f64],
    h: &mut Vec<f64>,
    c: &mut Vec<f64>,
    caches: Option<&mut Vec<LstmStepCache>>,
) {
    let hn = v.hidden;
    debug_assert_eq!(x.len(), v.input);
    debug_assert_eq!(h.len(), hn);

    let mut pre = v.b.of(p).to_vec();
    matvec_acc(v.w.of(p), 4 * hn, v.input, x, &mut pre);
    matvec_acc(v.u.of(p), 4 * hn, hn, h, &mut pre);

    let mut gi = vec![0.0; hn];
    let mut gf = vec![0.0; hn];
    let mut gg = vec![0.0; hn];
    let mut go = vec![0.0; hn];
    let mut c_new = vec![0.0; hn];
    let mut tc = vec![0.0; hn];
    for j in 0..hn {
        gi[j] = sigmoid(pre[j]);
        gf[j] = sigmoid(pre[hn + j]);
        gg[j] = pre[2 * hn + j].tanh();
        go[j] = sigmoid(pre[3 * hn + j]);
        c_new[j] = gf[j] * c[j] + gi[j] * gg[j];
        tc[j] = c_new[j].tanh();
    }

    if let Some(caches) = caches {
        caches.push(LstmStepCache {
            x: x.to_vec(),
            h_prev: h.clone(),
            c_prev: c.clone(),
            i: gi.clone(),
            f: gf.clone(),
            g: gg.clone(),
            o: go.clone(),
            tc: tc.clone(),
        });
    }

    for j in 0..hn {
        c[j] = c_new[j];
        h[j] = go[j] * tc[j];
    }
}

/// Reverse one LSTM step. `dh` is the total gradient of this step's output;
/// `dc` carries the running cell gradient and is replaced by the previous
/// step's. Returns (dx, dh_prev); parameter gradients accumulate into `grad`.
pub(crate) fn lstm_backward_step(
    p: &[f64],
    v: &LstmView,
    cache: &LstmStepCache,
    dh: &[f64],
    dc: &mut Vec<f64>,
    grad: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let hn = v.hidden;
    let mut dpre = vec![0.0; 4 * hn];
    let mut dc_prev = vec![0.0; hn];
    for j in 0..hn {
        let d_o = dh[j] * cache.tc[j];
        let d_tc = dh[j] * cache.o[j];
        let dcj = dc[j] + d_tc * (1.0 - cache.tc[j] * cache.tc[j]);
        let d_i = dcj * cache.g[j];
        let d_g = dcj * cache.i[j];
        let d_f = dcj * cache.c_prev[j];
        dc_prev[j] = dcj * cache.f[j];
        dpre[j] = d_i * cache.i[j] * (1.0 - cache.i[j]);
        dpre[hn + j] = d_f * cache.f[j] * (1.0 - cache.f[j]);
        dpre[2 * hn + j] = d_g * (1.0 - cache.g[j] * cache.g[j]);
        dpre[3 * hn + j] = d_o * cache.o[j] * (1.0 - cache.o[j]);
    }

    for (slot, d) in v.b.of_mut(grad).iter_mut().zip(&dpre) {
        *slot += d;
    }
    outer_acc(v.w.of_mut(grad), 4 * hn, v.input, &dpre, &cache.x);
    outer_acc(v.u.of_mut(grad), 4 * hn, hn, &dpre, &cache.h_prev);

    let mut dx = vec![0.0; v.input];
    matvec_t_acc(v.w.of(p), 4 * hn, v.input, &dpre, &mut dx);
    let mut dh_prev = vec![0.0; hn];
    matvec_t_acc(v.u.of(p), 4 * hn, hn, &dpre, &mut dh_prev);

    *dc = dc_prev;
    (dx, dh_prev)
}

/// Run a full sequence backward through one LSTM layer. `d_out[t]` is the
/// gradient of the layer's output row at `t`; returns per-step input
/// gradients.
pub(crate) fn lstm_backward_sequence(
    p: &[f64],
    v: &LstmView,
    caches: &[LstmStepCache],
    d_out: &[Vec<f64>],
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    debug_assert_eq!(caches.len(), d_out.len());
    let hn = v.hidden;
    let mut dh_carry = vec![0.0; hn];
    let mut dc = vec![0.0; hn];
    let mut dx_rows = vec![Vec::new(); caches.len()];
    for t in (0..caches.len()).rev() {
        let mut dh = d_out[t].clone();
        for j in 0..hn {
            dh[j] += dh_carry[j];
        }
        let (dx, dh_prev) = lstm_backward_step(p, v, &caches[t], &dh, &mut dc, grad);
        dx_rows[t] = dx;
        dh_carry = dh_prev;
    }
    dx_rows
}
