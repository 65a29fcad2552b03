//! Loss correctness against independent oracles: brute-force path
//! enumeration, the lattice cut identity, and central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uplsim_core::losses::{
    ar_rnnt_loss, brute_force_loss, fastemit_loss, lattice_dp, rnnt_loss, Band, LossResult,
};
use uplsim_core::math::log_add;
use uplsim_core::model::LogitLattice;

fn random_lattice(rng: &mut ChaCha8Rng, t: usize, u: usize, k: usize) -> LogitLattice {
    let mut lat = LogitLattice::zeros(t, u + 1, k, 1, t);
    for v in lat.values.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    lat
}

fn random_instance(rng: &mut ChaCha8Rng) -> (LogitLattice, Vec<u32>, Vec<usize>) {
    let t = rng.gen_range(1..=4);
    let u = rng.gen_range(0..=3.min(t));
    let k = rng.gen_range(2..=5);
    let lat = random_lattice(rng, t, u, k);
    let target: Vec<u32> = (0..u).map(|_| rng.gen_range(1..k as u32)).collect();
    let mut alignments: Vec<usize> = (0..u).map(|_| rng.gen_range(0..t)).collect();
    alignments.sort_unstable();
    (lat, target, alignments)
}

#[test]
fn dp_matches_brute_force_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbf);
    for i in 0..100 {
        let (lat, target, alignments) = random_instance(&mut rng);
        let brute = brute_force_loss(&lat, &target, None).unwrap();
        let dp = rnnt_loss(&lat, &target).unwrap().value;
        assert!(
            (brute - dp).abs() < 1e-9,
            "instance {i}: brute {brute} vs dp {dp}"
        );

        let b_left = rng.gen_range(0..2);
        let b_right = rng.gen_range(0..3);
        let banded = brute_force_loss(&lat, &target, Some((&alignments, b_left, b_right)));
        let ar = ar_rnnt_loss(&lat, &target, &alignments, b_left, b_right);
        match (banded, ar) {
            (Ok(b), Ok(a)) => assert!((b - a.value).abs() < 1e-9, "instance {i} banded"),
            (Err(_), Err(_)) => {}
            (b, a) => panic!("instance {i}: oracle {b:?} vs dp {a:?} disagree on feasibility"),
        }
    }
}

#[test]
fn cut_identity_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xcc);
    for _ in 0..50 {
        let (lat, target, _) = random_instance(&mut rng);
        let dp = lattice_dp(&lat, &target, None).unwrap();
        let (t_len, u_len) = (dp.t_len, dp.u_len);
        // Every path crosses each t -> t+1 boundary exactly once.
        for t in 0..t_len.saturating_sub(1) {
            let mut acc = f64::NEG_INFINITY;
            for u in 0..u_len {
                acc = log_add(
                    acc,
                    dp.alpha[t * u_len + u] + dp.phi[t * u_len + u] + dp.beta[(t + 1) * u_len + u],
                );
            }
            assert!((acc - dp.log_like).abs() < 1e-9, "cut at t={t}");
        }
        // alpha(0,0) = 0, so beta(0,0) must already be the log-likelihood.
        assert!((dp.alpha[0] + dp.beta[0] - dp.log_like).abs() < 1e-9);
    }
}

fn finite_difference_check(
    lat: &LogitLattice,
    loss: impl Fn(&LogitLattice) -> LossResult,
) {
    let eps = 1e-4;
    let base = loss(lat);
    for i in 0..lat.values.len() {
        let mut plus = lat.clone();
        plus.values[i] += eps;
        let mut minus = lat.clone();
        minus.values[i] -= eps;
        let fd = (loss(&plus).value - loss(&minus).value) / (2.0 * eps);
        let g = base.grad.values[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
        assert!(rel <= 1e-4, "entry {i}: fd {fd} vs grad {g} (rel {rel})");
    }
}

#[test]
fn vanilla_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    for _ in 0..20 {
        let (lat, target, _) = random_instance(&mut rng);
        finite_difference_check(&lat, |l| rnnt_loss(l, &target).unwrap());
    }
}

#[test]
fn alignment_restricted_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfe);
    let mut checked = 0;
    while checked < 20 {
        let (lat, target, alignments) = random_instance(&mut rng);
        if ar_rnnt_loss(&lat, &target, &alignments, 0, 1).is_err() {
            continue;
        }
        finite_difference_check(&lat, |l| ar_rnnt_loss(l, &target, &alignments, 0, 1).unwrap());
        checked += 1;
    }
}

#[test]
fn fastemit_value_is_vanilla_and_gradient_differs_only_in_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xaf);
    for _ in 0..20 {
        let (lat, target, _) = random_instance(&mut rng);
        let v = rnnt_loss(&lat, &target).unwrap();
        let f = fastemit_loss(&lat, &target, 0.004).unwrap();
        assert_eq!(v.value, f.value);
        if target.is_empty() {
            for (a, b) in v.grad.values.iter().zip(&f.grad.values) {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn ar_value_non_decreasing_as_band_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xab);
    let mut checked = 0;
    while checked < 30 {
        let (lat, target, alignments) = random_instance(&mut rng);
        if target.is_empty() {
            continue;
        }
        let widths = [(3usize, 4usize), (1, 2), (0, 1)];
        let values: Vec<Option<f64>> = widths
            .iter()
            .map(|&(bl, br)| ar_rnnt_loss(&lat, &target, &alignments, bl, br).ok().map(|r| r.value))
            .collect();
        let mut prev = f64::NEG_INFINITY;
        for v in values.into_iter().flatten() {
            assert!(v >= prev - 1e-12, "shrinking the band lowered the loss");
            prev = v;
        }
        checked += 1;
    }
}

#[test]
fn band_windows_respect_stride_mapping() {
    // Source alignments divide by the recorded stride before banding.
    let band = Band::from_alignments(&[7, 12], 2, 10, 0, 1);
    // a = floor(7/2) = 3 -> window [3, 4]
    assert!(band.allows(0, 3) && band.allows(0, 4));
    assert!(!band.allows(0, 2) && !band.allows(0, 5));
    // a = floor(12/2) = 6 -> window [6, 7]
    assert!(band.allows(1, 6) && band.allows(1, 7));
    assert!(!band.allows(1, 8));
}
