//! Small dense-vector helpers shared by the model, losses, and endpointers.
//!
//! Everything is plain `f64` on flat slices; matrices are row-major.

/// `log(exp(a) + exp(b))` with `-inf` as the absorbing empty-sum element.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - hi).exp()).sum();
    hi + sum.ln()
}

/// In-place log-softmax of one logit row.
pub fn log_softmax_inplace(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += m * x` where `m` is `rows x cols` row-major.
pub fn matvec_acc(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] += acc;
    }
}

/// `out += m^T * y` where `m` is `rows x cols` row-major and `y` has `rows` entries.
pub fn matvec_t_acc(m: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += yr * row[c];
        }
    }
}

/// Rank-1 accumulation `dm += y * x^T` into a `rows x cols` row-major gradient.
pub fn outer_acc(dm: &mut [f64], rows: usize, cols: usize, y: &[f64], x: &[f64]) {
    debug_assert_eq!(dm.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &mut dm[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += yr * x[c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.5), -1.5);
        assert_eq!(log_add(-1.5, f64::NEG_INFINITY), -1.5);
        assert_eq!(
            log_add(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_add_matches_direct() {
        let got = log_add(0.3f64.ln(), 0.2f64.ln());
        assert!((got - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_empty_is_neg_inf() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut row = vec![0.1, -2.0, 3.5, 0.0];
        log_softmax_inplace(&mut row);
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matvec_agrees_with_hand_product() {
        // [[1,2],[3,4],[5,6]] * [10, 100]
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 3];
        matvec_acc(&m, 3, 2, &[10.0, 100.0], &mut out);
        assert_eq!(out, vec![210.0, 430.0, 650.0]);

        let mut back = vec![0.0; 2];
        matvec_t_acc(&m, 3, 2, &[1.0, 1.0, 1.0], &mut back);
        assert_eq!(back, vec![9.0, 12.0]);
    }
}
