//! Property tests for the algebraic invariants of the numeric core and the
//! transfer losses.

use proptest::prelude::*;

use uda_core::losses::{
    adversarial_loss, coral_loss, covariance, cross_entropy, entropy, entropy_weight, mmd_linear,
    multilinear_map,
};
use uda_core::matrix::Matrix;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |data| Matrix::new(rows, cols, data).unwrap())
}

fn batch_pair(cols: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..8, 2usize..8)
        .prop_flat_map(move |(r1, r2)| (matrix_strategy(r1, cols), matrix_strategy(r2, cols)))
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(m, k, n, p)| (matrix_strategy(m, k), matrix_strategy(k, n), matrix_strategy(n, p))))
    {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!(close(*x, *y, 1e-9));
        }
    }

    #[test]
    fn softmax_rows_normalize_and_shift_invariant(m in (1usize..6, 2usize..6)
        .prop_flat_map(|(r, c)| matrix_strategy(r, c)), shift in -50.0..50.0f64)
    {
        let s = m.softmax_rows();
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
        }
        let shifted = m.map(|v| v + shift).softmax_rows();
        let diff = s.sub(&shifted).unwrap().max_abs();
        prop_assert!(diff <= 1e-12, "shift changed softmax by {diff}");
    }

    #[test]
    fn cross_entropy_nonnegative_on_proper_rows(m in (1usize..6, 2usize..5)
        .prop_flat_map(|(r, c)| (matrix_strategy(r, c), prop::collection::vec(0usize..c, r))))
    {
        let (logits, labels) = m;
        let probs = logits.softmax_rows();
        let pair = cross_entropy(&probs, &labels).unwrap();
        prop_assert!(pair.value > 0.0);
    }

    #[test]
    fn coral_symmetry_and_nonnegativity((s, t) in batch_pair(3)) {
        let ab = coral_loss(&s, &t).unwrap();
        let ba = coral_loss(&t, &s).unwrap();
        prop_assert_eq!(ab.value, ba.value);
        prop_assert!(ab.value >= 0.0);
    }

    #[test]
    fn coral_is_zero_iff_covariances_match((s, t) in batch_pair(2)) {
        let pair = coral_loss(&s, &t).unwrap();
        let same = covariance(&s).unwrap() == covariance(&t).unwrap();
        prop_assert_eq!(pair.value == 0.0, same);
    }

    #[test]
    fn coral_row_permutation_invariance(s in matrix_strategy(6, 3), t in matrix_strategy(5, 3), seed in 0u64..1000) {
        let mut order: Vec<usize> = (0..s.rows()).collect();
        // cheap deterministic shuffle
        for i in (1..order.len()).rev() {
            order.swap(i, (seed as usize * 31 + i * 17) % (i + 1));
        }
        let s_perm = s.select_rows(&order);
        let a = coral_loss(&s, &t).unwrap().value;
        let b = coral_loss(&s_perm, &t).unwrap().value;
        prop_assert!(close(a, b, 1e-9), "{a} vs {b}");
    }

    #[test]
    fn coral_scales_as_c_to_the_fourth((s, t) in batch_pair(3), c in 0.2..2.5f64) {
        let base = coral_loss(&s, &t).unwrap().value;
        let scaled = coral_loss(&s.scale(c), &t.scale(c)).unwrap().value;
        prop_assert!(close(scaled, c.powi(4) * base, 1e-9), "{scaled} vs {}", c.powi(4) * base);
    }

    #[test]
    fn mmd_symmetric_nonnegative_translation_invariant_scaling(
        (s, t) in batch_pair(3), v in prop::collection::vec(-5.0..5.0f64, 3), c in -2.5..2.5f64)
    {
        let fwd = mmd_linear(&s, &t).unwrap();
        let rev = mmd_linear(&t, &s).unwrap();
        prop_assert_eq!(fwd.value, rev.value);
        prop_assert!(fwd.value >= 0.0);

        let shift = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + v[j]);
        let shifted = mmd_linear(&shift(&s), &shift(&t)).unwrap();
        prop_assert!((shifted.value - fwd.value).abs() <= 1e-9);

        let scaled = mmd_linear(&s.scale(c), &t.scale(c)).unwrap();
        prop_assert!(close(scaled.value, c.abs() * fwd.value, 1e-9));
    }

    #[test]
    fn entropy_bounds_and_weight_range(logits in matrix_strategy(5, 4)) {
        let probs = logits.softmax_rows();
        let hs = entropy(&probs).unwrap();
        for h in hs {
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 4.0f64.ln() + 1e-12);
            let w = entropy_weight(h);
            prop_assert!(w > 1.0 && w <= 2.0);
        }
    }

    #[test]
    fn outer_product_norm_identity(f in matrix_strategy(4, 3), g in matrix_strategy(4, 5)) {
        let joint = multilinear_map(&f, &g).unwrap();
        for i in 0..4 {
            let nf: f64 = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let ng: f64 = g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj: f64 = joint.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(close(nj, nf * ng, 1e-12));
        }
    }

    #[test]
    fn adversarial_weight_linearity(
        probs in (2usize..6, 2usize..6).prop_flat_map(|(a, b)| {
            (prop::collection::vec(0.05..0.95f64, a), prop::collection::vec(0.05..0.95f64, b))
        }),
        factor in 0.5..3.0f64)
    {
        let (ps, pt) = probs;
        let d_s = Matrix::new(ps.len(), 1, ps.clone()).unwrap();
        let d_t = Matrix::new(pt.len(), 1, pt.clone()).unwrap();
        let unit = adversarial_loss(&d_s, &d_t, &vec![1.0; ps.len()], &vec![1.0; pt.len()]).unwrap();
        let scaled = adversarial_loss(
            &d_s,
            &d_t,
            &vec![factor; ps.len()],
            &vec![factor; pt.len()],
        )
        .unwrap();
        prop_assert!(close(scaled.value, factor * unit.value, 1e-12));
    }

    #[test]
    fn batch_iter_is_a_duplicate_free_cover(n in 2usize..40, bs in 1usize..10, seed in 0u64..100) {
        let batches = uda_core::data::batch_indices(n, bs, seed, 1);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        let emitted = seen.len();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), emitted, "duplicates within an epoch");
        prop_assert!(seen.iter().all(|&i| i < n));
        // at most one trailing row is dropped
        prop_assert!(emitted + 1 >= n);
    }
}
