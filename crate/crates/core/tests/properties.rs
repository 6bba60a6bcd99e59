use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use samga::objectives::{lambda_at, mmd_loss, retrieval_loss, ContrastiveHead, LambdaShape, MmdConfig, StageSchedule};
use samga::target::{fuse_target, route_infer, route_with_masks, routing_deviation, Router};

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n)
}

fn usable(z: &[Vec<f64>]) -> bool {
    z.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

fn rotation(seed: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| seed[(i * d + j) % seed.len()] + if i == j { 0.5 } else { 0.0 })
        .qr()
        .q()
}

fn rotate(q: &DMatrix<f64>, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    z.iter().map(|r| (q * DVector::from_column_slice(r)).iter().copied().collect()).collect()
}

fn router(q: Vec<f64>, bias: &[f64], subjects: usize, tau: f64) -> Router {
    let mut r = Router::new(q, subjects, tau, 0.0, 0.0, 1e-8).unwrap();
    r.subject_bias.data.copy_from_slice(bias);
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_loss_survives_rotation(
        (ze, zi) in (rows(5, 4), rows(5, 4)),
        seed in prop::collection::vec(-1.0..1.0f64, 16),
        log_tau in -3.0..0.5f64,
    ) {
        prop_assume!(usable(&ze) && usable(&zi));
        let head = ContrastiveHead { log_tau };
        let q = rotation(&seed, 4);
        let before = retrieval_loss(&head, &ze, &zi).unwrap();
        let after = retrieval_loss(&head, &rotate(&q, &ze), &rotate(&q, &zi)).unwrap();
        prop_assert!(before >= 0.0);
        prop_assert!((before - after).abs() <= 1e-10 * before.max(1.0));
    }

    #[test]
    fn retrieval_loss_ignores_row_scale_and_role(
        (ze, zi) in (rows(4, 3), rows(4, 3)),
        scale in 0.01..100.0f64,
    ) {
        prop_assume!(usable(&ze) && usable(&zi));
        let head = ContrastiveHead::with_tau(0.2);
        let base = retrieval_loss(&head, &ze, &zi).unwrap();
        let scaled: Vec<Vec<f64>> = ze.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        prop_assert!((retrieval_loss(&head, &scaled, &zi).unwrap() - base).abs() < 1e-9);
        prop_assert!((retrieval_loss(&head, &zi, &ze).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn mmd_is_symmetric((ze, zi) in (rows(4, 3), rows(4, 3))) {
        let cfg = MmdConfig::default();
        let a = mmd_loss(&cfg, &ze, &zi).unwrap();
        let b = mmd_loss(&cfg, &zi, &ze).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn routing_ignores_constant_shifts(
        q in prop::collection::vec(-4.0..4.0f64, 5),
        bias in prop::collection::vec(-2.0..2.0f64, 15),
        shift in -50.0..50.0f64,
        tau in 0.2..3.0f64,
        mask in prop::collection::vec(any::<bool>(), 5),
    ) {
        let r = router(q.clone(), &bias, 3, tau);
        let shifted = router(q.iter().map(|v| v + shift).collect(), &bias, 3, tau);
        let w = route_infer(&r);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in w.iter().zip(route_infer(&shifted)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for s in 0..3 {
            let a = route_with_masks(&r, s, true, &mask).weights;
            let b = route_with_masks(&shifted, s, true, &mask).weights;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            for (x, m) in a.iter().zip(&mask) {
                if !m {
                    prop_assert_eq!(*x, 0.0);
                }
            }
            prop_assert!(a.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn deviation_rows_sum_to_zero(
        q in prop::collection::vec(-4.0..4.0f64, 4),
        bias in prop::collection::vec(-3.0..3.0f64, 12),
    ) {
        let dev = routing_deviation(&router(q, &bias, 3, 1.0));
        for s in 0..3 {
            prop_assert!(dev.row(s).iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn fusion_is_linear_in_the_layer_features(
        w in prop::collection::vec(0.0..1.0f64, 3),
        a in rows(3, 4),
        b in rows(3, 4),
        c in -2.0..2.0f64,
    ) {
        let combo: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + c * v).collect()).collect();
        let fa = fuse_target(&w, &a).unwrap();
        let fb = fuse_target(&w, &b).unwrap();
        let fc = fuse_target(&w, &combo).unwrap();
        for i in 0..4 {
            prop_assert!((fc[i] - (fa[i] + c * fb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn lambda_never_increases(lambda0 in 0.0..1.0f64, t_c in 1usize..40, extra in 0usize..20, cosine in any::<bool>()) {
        let s = StageSchedule {
            epochs: t_c + extra,
            t_c,
            lambda0,
            stage2_lr_multiplier: 0.1,
            shape: if cosine { LambdaShape::Cosine } else { LambdaShape::Linear },
        };
        prop_assert_eq!(lambda_at(&s, 1), lambda0);
        for l in 1..s.epochs {
            prop_assert!(lambda_at(&s, l + 1) <= lambda_at(&s, l));
        }
        prop_assert_eq!(lambda_at(&s, t_c + 1), 0.0);
    }
}
