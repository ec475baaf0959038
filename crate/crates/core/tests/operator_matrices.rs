//! The formation operators against their explicit matrix forms.

mod common;

use common::*;
use proptest::prelude::*;
use pxsub::degrade::{convolve, convolve_transpose, decimate, gaussian_kernel, ScaleFactor};
use pxsub::formation::{zero_upsample, FormationOp};

const TOL: f64 = 1e-12;

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    // (s, lr width, lr height, kernel size, seed) with HR sides up to 16.
    (1usize..=4).prop_flat_map(|s| {
        let max = 16 / s;
        (Just(s), 1..=max, 1..=max, prop::sample::select(vec![1usize, 3, 5, 7]), any::<u64>())
    })
}

#[test]
fn blur_matrix_matches_on_every_size_up_to_16() {
    let mut r = rng(1);
    for w in 1..=16 {
        for h in [1, 2, 7, 16] {
            let k = random_kernel(if w.min(h) >= 3 { 5 } else { 3 }, &mut r);
            let img = random_image(w, h, 2, &mut r);
            let dense = apply_planes(&blur_matrix(w, h, &k), &img, w, h);
            assert!(max_abs_diff(convolve(&img, &k).unwrap().data(), dense.data()) < TOL, "{w}x{h}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operators_match_dense_forms((s, lw, lh, ks, seed) in dims()) {
        let scale = ScaleFactor::new(s).unwrap();
        let (w, h) = (lw * s, lh * s);
        prop_assume!(ks <= 2 * w.min(h) + 1);
        let mut r = rng(seed);
        let k = random_kernel(ks, &mut r);
        let hr = random_image(w, h, 3, &mut r);
        let lr = random_image(lw, lh, 3, &mut r);

        let kmat = blur_matrix(w, h, &k);
        let dmat = decimation_matrix(w, h, scale);
        let dt = dmat.transpose();

        prop_assert!(max_abs_diff(convolve(&hr, &k).unwrap().data(), apply_planes(&kmat, &hr, w, h).data()) < TOL);
        prop_assert!(max_abs_diff(decimate(&hr, scale).unwrap().data(), apply_planes(&dmat, &hr, lw, lh).data()) < TOL);
        prop_assert!(max_abs_diff(zero_upsample(&lr, scale).data(), apply_planes(&dt, &lr, w, h).data()) < TOL);
        prop_assert!(max_abs_diff(
            convolve_transpose(&hr, &k).unwrap().data(),
            apply_planes(&kmat.transpose(), &hr, w, h).data()
        ) < TOL);

        // A = D K and its adjoint.
        let op = FormationOp::new(k.clone(), scale);
        let a = dmat.mul(&kmat);
        prop_assert!(max_abs_diff(op.forward(&hr).unwrap().data(), apply_planes(&a, &hr, lw, lh).data()) < TOL);
        prop_assert!(max_abs_diff(op.adjoint(&lr).unwrap().data(), apply_planes(&a.transpose(), &lr, w, h).data()) < TOL);
    }

    #[test]
    fn adjoint_identities((s, lw, lh, ks, seed) in dims()) {
        let scale = ScaleFactor::new(s).unwrap();
        let (w, h) = (lw * s, lh * s);
        prop_assume!(ks <= 2 * w.min(h) + 1);
        let mut r = rng(seed);
        let k = random_kernel(ks, &mut r);
        let x = random_image(w, h, 2, &mut r);
        let y_hr = random_image(w, h, 2, &mut r);
        let y_lr = random_image(lw, lh, 2, &mut r);

        // <D X, Y> = <X, Dᵀ Y>
        let lhs = decimate(&x, scale).unwrap().dot(&y_lr).unwrap();
        let rhs = x.dot(&zero_upsample(&y_lr, scale)).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);

        // <K X, Y> = <X, Kᵀ Y>
        let lhs = convolve(&x, &k).unwrap().dot(&y_hr).unwrap();
        let rhs = x.dot(&convolve_transpose(&y_hr, &k).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);

        let op = FormationOp::new(k, scale);
        let lhs = op.forward(&x).unwrap().dot(&y_lr).unwrap();
        let rhs = x.dot(&op.adjoint(&y_lr).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn flipped_kernel_is_the_adjoint_only_in_the_interior() {
    // Reflect padding folds border taps back onto interior pixels, so near
    // the edges the adjoint differs from correlation with the flipped kernel.
    let k = gaussian_kernel(1.0, 5).unwrap();
    let mut r = rng(9);
    let y = random_image(12, 12, 1, &mut r);
    let exact = convolve_transpose(&y, &k).unwrap();
    let flipped = convolve(&y, &k.flipped()).unwrap();
    for yy in 0..12 {
        for xx in 0..12 {
            let interior = (4..8).contains(&yy) && (4..8).contains(&xx);
            let d = (exact.get(0, yy, xx) - flipped.get(0, yy, xx)).abs();
            if interior {
                assert!(d < TOL);
            }
        }
    }
    assert!(max_abs_diff(exact.data(), flipped.data()) > 1e-6);
}
