//! Lattice training losses for the sequence transducer.
//!
//! All dynamic programming runs in log space over the log-softmaxed lattice
//! `lp(t, u, k)`. With `phi(t, u) = lp(t, u, blank)` and
//! `sigma(t, u) = lp(t, u, y_{u+1})`, the forward recursion is
//!
//! ```text
//! alpha(0, 0) = 0
//! alpha(t, u) = logaddexp(alpha(t-1, u) + phi(t-1, u),
//!               alpha(t, u-1) + sigma(t, u-1))
//! log_like    = alpha(T'-1, U) + phi(T'-1, U)
//! ```
//!
//! with out-of-range terms `-inf`, and symmetrically for `beta`. Three
//! variants share this machinery:
//!
//! * vanilla: the plain negative log-likelihood;
//! * fast-emit: same value, label-transition gradients scaled by `1 + lambda`
//!   before chaining through the log-softmax (a gradient-space modification,
//!   so finite differences only apply to the other two);
//! * alignment-restricted: label transitions masked to `-inf` outside the
//!   band `[a_{u+1} - b_left, a_{u+1} + b_right]` around the token's
//!   ground-truth encoder frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::math::{log_add, log_sum_exp};
use crate::model::{LogitLattice, BLANK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Vanilla,
    FastEmit { lambda: f64 },
    AlignmentRestricted { b_left: usize, b_right: usize },
}

impl LossKind {
    pub fn validate(&self) -> Result<(), LossError> {
        if let LossKind::FastEmit { lambda } = self {
            if !(*lambda >= 0.0) || !lambda.is_finite() {
                return Err(LossError::InvalidInput("lambda must be a finite value >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    /// Negative log-likelihood of the target under the lattice.
    pub value: f64,
    /// dLoss/dlogit, same dims as the input lattice.
    pub grad: LogitLattice,
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no monotonic path: target length {u} exceeds encoder length {t}")]
    EmptyPathSet { t: usize, u: usize },
    #[error("lattice contains non-finite values")]
    NonFiniteInput,
    #[error("target token {0} out of lattice range")]
    TokenOutOfRange(TokenId),
    #[error("alignment band leaves no valid path; first blocked token index {token_index}")]
    DegenerateAlignment { token_index: usize },
    #[error("{got} alignments supplied for {want} target tokens")]
    AlignmentCount { got: usize, want: usize },
    #[error("instance too large for path enumeration: T'={t}, U={u} (limits 6, 4)")]
    InstanceTooLarge { t: usize, u: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Emission band of the alignment-restricted loss, in encoder frames.
#[derive(Debug, Clone)]
pub struct Band {
    /// Per-token allowed emission window `[lo, hi]`, inclusive, already
    /// clipped to the lattice.
    windows: Vec<(usize, usize)>,
}

impl Band {
    /// Map per-token source-frame alignments into encoder-frame windows
    /// `[a - b_left, a + b_right]` where `a = floor(frame / stride)`.
    pub fn from_alignments(
        alignments: &[usize],
        stride: usize,
        t_len: usize,
        b_left: usize,
        b_right: usize,
    ) -> Self {
        let windows = alignments
            .iter()
            .map(|&frame| {
                let a = frame / stride.max(1);
                let lo = a.saturating_sub(b_left);
                let hi = (a + b_right).min(t_len.saturating_sub(1));
                (lo, hi)
            })
            .collect();
        Band { windows }
    }

    /// May token `u+1` (0-based index `u` into the target) be emitted at
    /// encoder frame `t`?
    pub fn allows(&self, u: usize, t: usize) -> bool {
        let (lo, hi) = self.windows[u];
        t >= lo && t <= hi
    }

    /// Index of the first token whose window cannot be reached by any
    /// monotone assignment, if one exists.
    fn first_blocked(&self, t_len: usize) -> Option<usize> {
        let mut cursor = 0usize;
        for (u, &(lo, hi)) in self.windows.iter().enumerate() {
            cursor = cursor.max(lo);
            if cursor > hi || cursor >= t_len {
                return Some(u);
            }
        }
        None
    }
}

/// Forward/backward quantities of one loss evaluation, exposed for the cut
/// identity and oracle tests. `alpha`/`beta` are `t_len x u_len` row-major.
pub struct LatticeDp {
    pub t_len: usize,
    pub u_len: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_like: f64,
    /// Blank log-probability per node.
    pub phi: Vec<f64>,
    /// Label log-probability per node (t_len x U), `-inf` where masked.
    pub sigma: Vec<f64>,
}

/// Pre-softmax transition gradients per node: `d_phi` is `t_len x u_len`,
/// `d_sigma` is `t_len x U`. Masked transitions carry exactly zero.
pub struct TransitionGrads {
    pub d_phi: Vec<f64>,
    pub d_sigma: Vec<f64>,
}

fn validate_instance(lattice: &LogitLattice, target: &[TokenId]) -> Result<(), LossError> {
    if !lattice.is_finite() {
        return Err(LossError::NonFiniteInput);
    }
    if target.len() + 1 != lattice.u_len {
        return Err(LossError::InvalidInput(format!(
            "lattice has {} prefix rows but target has {} tokens",
            lattice.u_len,
            target.len()
        )));
    }
    for &tok in target {
        let k = tok as usize;
        if k == BLANK || k >= lattice.k_len {
            return Err(LossError::TokenOutOfRange(tok));
        }
    }
    if target.len() > lattice.t_len {
        return Err(LossError::EmptyPathSet {
            t: lattice.t_len,
            u: target.len(),
        });
    }
    Ok(())
}

/// Run the forward/backward recursions for `target` under an optional
/// emission band.
pub fn lattice_dp(
    lattice: &LogitLattice,
    target: &[TokenId],
    band: Option<&Band>,
) -> Result<LatticeDp, LossError> {
    validate_instance(lattice, target)?;
    let t_len = lattice.t_len;
    let u_len = lattice.u_len;
    let n_u = target.len();

    // Log-softmax each (t, u) row once; extract phi and (masked) sigma.
    let mut phi = vec![0.0; t_len * u_len];
    let mut sigma = vec![f64::NEG_INFINITY; t_len * n_u.max(1)];
    for t in 0..t_len {
        for u in 0..u_len {
            let row = lattice.row(t, u);
            let lse = log_sum_exp(row);
            phi[t * u_len + u] = row[BLANK] - lse;
            if u < n_u {
                let allowed = band.map_or(true, |b| b.allows(u, t));
                if allowed {
                    sigma[t * n_u + u] = row[target[u] as usize] - lse;
                }
            }
        }
    }

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * u_len];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[(t - 1) * u_len + u] + phi[(t - 1) * u_len + u]
            } else {
                neg
            };
            let from_label = if u > 0 {
                alpha[t * u_len + (u - 1)] + sigma[t * n_u + (u - 1)]
            } else {
                neg
            };
            alpha[t * u_len + u] = log_add(from_blank, from_label);
        }
    }

    let mut beta = vec![neg; t_len * u_len];
    beta[(t_len - 1) * u_len + (u_len - 1)] = phi[(t_len - 1) * u_len + (u_len - 1)];
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            if t == t_len - 1 && u == u_len - 1 {
                continue;
            }
            let via_blank = if t + 1 < t_len {
                beta[(t + 1) * u_len + u] + phi[t * u_len + u]
            } else {
                neg
            };
            let via_label = if u + 1 < u_len {
                beta[t * u_len + (u + 1)] + sigma[t * n_u + u]
            } else {
                neg
            };
            beta[t * u_len + u] = log_add(via_blank, via_label);
        }
    }

    let log_like = alpha[(t_len - 1) * u_len + (u_len - 1)] + phi[(t_len - 1) * u_len + (u_len - 1)];
    Ok(LatticeDp {
        t_len,
        u_len,
        alpha,
        beta,
        log_like,
        phi,
        sigma,
    })
}

/// Pre-softmax transition gradients of the negative log-likelihood:
/// occupancy posteriors, negated, with fast-emit's label scaling applied.
fn transition_grads_from_dp(dp: &LatticeDp, label_scale: f64) -> TransitionGrads {
    let (t_len, u_len) = (dp.t_len, dp.u_len);
    let n_u = u_len - 1;
    let ll = dp.log_like;
    let neg = f64::NEG_INFINITY;
    let mut d_phi = vec![0.0; t_len * u_len];
    let mut d_sigma = vec![0.0; t_len * n_u.max(1)];
    for t in 0..t_len {
        for u in 0..u_len {
            let a = dp.alpha[t * u_len + u];
            if a == neg {
                continue;
            }
            let beta_next_blank = if t + 1 < t_len {
                dp.beta[(t + 1) * u_len + u]
            } else if u == u_len - 1 {
                0.0
            } else {
                neg
            };
            if beta_next_blank != neg {
                let log_gamma = a + dp.phi[t * u_len + u] + beta_next_blank - ll;
                d_phi[t * u_len + u] = -log_gamma.exp();
            }
            if u < n_u {
                let s = dp.sigma[t * n_u + u];
                let b = dp.beta[t * u_len + (u + 1)];
                if s != neg && b != neg {
                    let log_gamma = a + s + b - ll;
                    d_sigma[t * n_u + u] = -label_scale * log_gamma.exp();
                }
            }
        }
    }
    TransitionGrads { d_phi, d_sigma }
}

/// Pre-softmax per-node transition gradients for any loss kind, exposed so
/// the fast-emit scaling law can be asserted directly.
pub fn transition_gradients(
    lattice: &LogitLattice,
    target: &[TokenId],
    kind: &LossKind,
    alignments: Option<&[usize]>,
) -> Result<TransitionGrads, LossError> {
    kind.validate()?;
    let (band, scale) = match kind {
        LossKind::Vanilla => (None, 1.0),
        LossKind::FastEmit { lambda } => (None, 1.0 + lambda),
        LossKind::AlignmentRestricted { b_left, b_right } => {
            let alignments = alignments.ok_or_else(|| {
                LossError::InvalidInput("alignment-restricted loss requires alignments".into())
            })?;
            if alignments.len() != target.len() {
                return Err(LossError::AlignmentCount {
                    got: alignments.len(),
                    want: target.len(),
                });
            }
            let band = Band::from_alignments(alignments, lattice.stride, lattice.t_len, *b_left, *b_right);
            (Some(band), 1.0)
        }
    };
    let dp = lattice_dp(lattice, target, band.as_ref())?;
    if dp.log_like == f64::NEG_INFINITY {
        if let Some(band) = &band {
            let token_index = band.first_blocked(lattice.t_len).unwrap_or(0);
            return Err(LossError::DegenerateAlignment { token_index });
        }
        return Err(LossError::EmptyPathSet {
            t: lattice.t_len,
            u: target.len(),
        });
    }
    Ok(transition_grads_from_dp(&dp, scale))
}

fn grad_from_transitions(
    lattice: &LogitLattice,
    target: &[TokenId],
    trans: &TransitionGrads,
) -> LogitLattice {
    let (t_len, u_len, k_len) = lattice.dims();
    let n_u = u_len - 1;
    let mut grad = LogitLattice::zeros(t_len, u_len, k_len, lattice.stride, lattice.source_frames);
    let mut softmax = vec![0.0; k_len];
    for t in 0..t_len {
        for u in 0..u_len {
            let d_phi = trans.d_phi[t * u_len + u];
            let d_sig = if u < n_u { trans.d_sigma[t * n_u + u] } else { 0.0 };
            if d_phi == 0.0 && d_sig == 0.0 {
                continue;
            }
            let row = lattice.row(t, u);
            let lse = log_sum_exp(row);
            for k in 0..k_len {
                softmax[k] = (row[k] - lse).exp();
            }
            let total = d_phi + d_sig;
            let out = grad.row_mut(t, u);
            for k in 0..k_len {
                out[k] = -softmax[k] * total;
            }
            out[BLANK] += d_phi;
            if u < n_u {
                out[target[u] as usize] += d_sig;
            }
        }
    }
    grad
}

fn loss_with(
    lattice: &LogitLattice,
    target: &[TokenId],
    band: Option<Band>,
    label_scale: f64,
) -> Result<LossResult, LossError> {
    let dp = lattice_dp(lattice, target, band.as_ref())?;
    if dp.log_like == f64::NEG_INFINITY {
        if let Some(band) = &band {
            let token_index = band.first_blocked(lattice.t_len).unwrap_or(0);
            return Err(LossError::DegenerateAlignment { token_index });
        }
        return Err(LossError::EmptyPathSet {
            t: lattice.t_len,
            u: target.len(),
        });
    }
    let trans = transition_grads_from_dp(&dp, label_scale);
    let grad = grad_from_transitions(lattice, target, &trans);
    Ok(LossResult {
        value: -dp.log_like,
        grad,
    })
}

/// Vanilla transducer negative log-likelihood with exact gradient.
pub fn rnnt_loss(lattice: &LogitLattice, target: &[TokenId]) -> Result<LossResult, LossError> {
    loss_with(lattice, target, None, 1.0)
}

/// Fast-emit variant: the reported value is the vanilla loss; the gradient
/// with respect to each label transition is scaled by `1 + lambda` before
/// chaining through the log-softmax.
pub fn fastemit_loss(lattice: &LogitLattice, target: &[TokenId], lambda: f64) -> Result<LossResult, LossError> {
    LossKind::FastEmit { lambda }.validate()?;
    loss_with(lattice, target, None, 1.0 + lambda)
}

/// Alignment-restricted variant: label transitions are masked outside
/// `[a_{u+1} - b_left, a_{u+1} + b_right]` encoder frames, where `a` is the
/// token's ground-truth source frame divided by the stride.
pub fn ar_rnnt_loss(
    lattice: &LogitLattice,
    target: &[TokenId],
    alignments: &[usize],
    b_left: usize,
    b_right: usize,
) -> Result<LossResult, LossError> {
    if alignments.len() != target.len() {
        return Err(LossError::AlignmentCount {
            got: alignments.len(),
            want: target.len(),
        });
    }
    let band = Band::from_alignments(alignments, lattice.stride, lattice.t_len, b_left, b_right);
    loss_with(lattice, target, Some(band), 1.0)
}

/// Dispatch by loss kind. Alignments are required (and used) only by the
/// alignment-restricted variant.
pub fn loss_for_kind(
    lattice: &LogitLattice,
    target: &[TokenId],
    kind: &LossKind,
    alignments: Option<&[usize]>,
) -> Result<LossResult, LossError> {
    kind.validate()?;
    match kind {
        LossKind::Vanilla => rnnt_loss(lattice, target),
        LossKind::FastEmit { lambda } => fastemit_loss(lattice, target, *lambda),
        LossKind::AlignmentRestricted { b_left, b_right } => {
            let alignments = alignments.ok_or_else(|| {
                LossError::InvalidInput("alignment-restricted loss requires alignments".into())
            })?;
            ar_rnnt_loss(lattice, target, alignments, *b_left, *b_right)
        }
    }
}

/// Brute-force oracle: enumerate every monotonic path from (0, 0) to
/// (T'-1, U) plus the terminal blank, respecting the band if given, and
/// return the negative log of the summed path probabilities. Refuses
/// instances large enough for the path count to matter.
pub fn brute_force_loss(
    lattice: &LogitLattice,
    target: &[TokenId],
    band: Option<(&[usize], usize, usize)>,
) -> Result<f64, LossError> {
    validate_instance(lattice, target)?;
    let t_len = lattice.t_len;
    let n_u = target.len();
    if t_len > 6 || n_u > 4 {
        return Err(LossError::InstanceTooLarge { t: t_len, u: n_u });
    }
    let band = band.map(|(alignments, b_left, b_right)| {
        Band::from_alignments(alignments, lattice.stride, t_len, b_left, b_right)
    });

    // Straight-line log-softmax, independent of the DP code path.
    let lp = |t: usize, u: usize, k: usize| -> f64 {
        let row = lattice.row(t, u);
        row[k] - log_sum_exp(row)
    };

    let mut path_logs: Vec<f64> = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if t == t_len - 1 && u == n_u {
            path_logs.push(acc + lp(t, u, BLANK));
            continue;
        }
        if t + 1 < t_len {
            stack.push((t + 1, u, acc + lp(t, u, BLANK)));
        }
        if u < n_u && band.as_ref().map_or(true, |b| b.allows(u, t)) {
            stack.push((t, u + 1, acc + lp(t, u, target[u] as usize)));
        }
    }

    if path_logs.is_empty() {
        if let Some(band) = &band {
            let token_index = band.first_blocked(t_len).unwrap_or(0);
            return Err(LossError::DegenerateAlignment { token_index });
        }
        return Err(LossError::EmptyPathSet { t: t_len, u: n_u });
    }
    Ok(-log_sum_exp(&path_logs))
}
