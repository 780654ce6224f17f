mod oracle;

use ovseg::inference::{classify, ensemble, geometric_ensemble, mase, selective_entropy, SeConf};
use ovseg::Tensor;
use proptest::prelude::*;

use oracle::gen::{ensemble_case, matrix, EnsembleCase};
use oracle::mase::{classify_row, mase_row};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn compare(case: &EnsembleCase, mode: SeConf, forced: Option<f64>) -> f64 {
    let got = ensemble(&case.dist(), &case.p_iou, mode).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..case.p_iou.len() {
        let want = mase_row(
            &case.ldp[k],
            &case.clip[k],
            &case.overlap,
            case.alpha,
            case.beta,
            case.p_iou[k],
            forced,
        );
        for (c, &w) in want.p_class.iter().enumerate() {
            worst = worst.max(rel(got.p_class.row(k)[c], w));
        }
        for (g, w) in [
            (got.se_ldp[k], want.se_ldp),
            (got.se_clip[k], want.se_clip),
            (got.se_conf[k], want.se_conf),
            (got.alpha_hat[k], want.alpha_hat),
            (got.beta_hat[k], want.beta_hat),
        ] {
            worst = worst.max(if w == 0.0 { g.abs() } else { rel(g, w) });
        }
    }
    worst
}

#[test]
fn mase_matches_scalar_oracle() {
    for seed in 0..200 {
        let e = compare(&ensemble_case(seed), SeConf::Adaptive, None);
        assert!(e <= 1e-9, "seed {seed}: {e}");
    }
}

#[test]
fn geometric_and_forced_match_scalar_oracle() {
    for seed in 0..100 {
        let case = ensemble_case(seed);
        assert!(compare(&case, SeConf::Forced(0.0), Some(0.0)) <= 1e-9);
        assert!(compare(&case, SeConf::Forced(0.3), Some(0.3)) <= 1e-9);
        let g = geometric_ensemble(&case.dist(), &case.p_iou).unwrap();
        assert_eq!(g, ensemble(&case.dist(), &case.p_iou, SeConf::Forced(0.0)).unwrap());
    }
}

#[test]
fn worked_single_mask_example() {
    let ldp = [0.7, 0.2, 0.1];
    let clip = [0.5, 0.3, 0.2];
    let m = [true, true, false];
    let case = EnsembleCase {
        ldp: vec![ldp.to_vec()],
        clip: vec![clip.to_vec()],
        overlap: m.to_vec(),
        alpha: 0.8,
        beta: 0.4,
        p_iou: vec![0.9],
    };
    let got = mase(&case.dist(), &case.p_iou).unwrap();
    // se_ldp = 1 - 0.2/0.7 = 5/7, se_clip = 1 - 0.3/0.5 = 2/5
    let se_conf = 0.4 / (0.4 + 5.0 / 7.0);
    let a = 0.8 * (1.0 + se_conf);
    let b = 0.4 * (1.0 + se_conf);
    let want = [
        (0.63f64).powf(1.0 - a) * (0.45f64).powf(a),
        (0.18f64).powf(1.0 - a) * (0.27f64).powf(a),
        (0.09f64).powf(1.0 - b) * (0.18f64).powf(b),
    ];
    for c in 0..3 {
        assert!(rel(got.p_class.row(0)[c], want[c]) < 1e-12);
    }
    assert_eq!(got.best(0).0, 0);
}

#[test]
fn identical_streams_reproduce_rows() {
    for seed in 0..200 {
        let mut case = ensemble_case(seed);
        case.clip = case.ldp.clone();
        case.p_iou = vec![1.0; case.ldp.len()];
        let got = mase(&case.dist(), &case.p_iou).unwrap();
        for (k, row) in case.ldp.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!(rel(got.p_class.row(k)[c], v.max(1e-12)) < 1e-12, "seed {seed}");
            }
        }
    }
}

#[test]
fn zero_exponents_collapse_to_weighted_ldp() {
    for seed in 0..200 {
        let mut case = ensemble_case(seed);
        case.alpha = 0.0;
        case.beta = 0.0;
        let got = mase(&case.dist(), &case.p_iou).unwrap();
        for (k, row) in case.ldp.iter().enumerate() {
            assert!(got.alpha_hat[k] == 0.0 && got.beta_hat[k] == 0.0);
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(got.p_class.row(k)[c], (v * case.p_iou[k]).max(1e-12));
            }
        }
    }
}

#[test]
fn unit_exponents_collapse_to_weighted_clip() {
    for seed in 0..100 {
        let mut case = ensemble_case(seed);
        case.alpha = 1.0;
        case.beta = 1.0;
        let got = geometric_ensemble(&case.dist(), &case.p_iou).unwrap();
        for (k, row) in case.clip.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(got.p_class.row(k)[c], (v * case.p_iou[k]).max(1e-12));
            }
        }
    }
}

#[test]
fn uniform_iou_rescaling_scales_scores() {
    for seed in 0..200 {
        let mut case = ensemble_case(seed);
        for v in case.p_iou.iter_mut() {
            *v = v.max(0.05);
        }
        let base = mase(&case.dist(), &case.p_iou).unwrap();
        let s = 0.37;
        let scaled_iou: Vec<f64> = case.p_iou.iter().map(|v| v * s).collect();
        let scaled = mase(&case.dist(), &scaled_iou).unwrap();
        for k in 0..case.p_iou.len() {
            assert_eq!(base.best(k).0, scaled.best(k).0, "seed {seed} mask {k}");
            for c in 0..case.overlap.len() {
                let (a, b) = (base.p_class.row(k)[c], scaled.p_class.row(k)[c]);
                if a * s > 1e-10 {
                    assert!(rel(a * s, b) < 1e-9);
                }
            }
        }
    }
}

#[test]
fn invalid_iou_rejected() {
    let case = ensemble_case(3);
    for bad in [-0.1, 1.5, f64::NAN] {
        let mut iou = case.p_iou.clone();
        iou[0] = bad;
        let e = mase(&case.dist(), &iou).unwrap_err().to_string();
        assert!(e.contains("invalid IoU scores"), "{e}");
    }
}

#[test]
fn selective_entropy_examples() {
    assert_eq!(selective_entropy(&[0.5, 0.5]).unwrap(), 0.0);
    assert_eq!(selective_entropy(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
    assert!((selective_entropy(&[0.7, 0.2, 0.1]).unwrap() - (1.0 - 2.0 / 7.0)).abs() < 1e-15);
    assert!(selective_entropy(&[1.0]).is_err());
    let e = selective_entropy(&[0.0, 0.0]).unwrap_err().to_string();
    assert!(e.contains("degenerate distribution"), "{e}");
}

fn unit_rows(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn f32_matrix(rows: &[Vec<f64>]) -> Tensor {
    matrix(rows).cast()
}

proptest! {
    #[test]
    fn exponent_bounds_hold(seed in 0u64..5000) {
        let case = ensemble_case(seed);
        let got = mase(&case.dist(), &case.p_iou).unwrap();
        for k in 0..case.p_iou.len() {
            prop_assert!((0.0..=1.0).contains(&got.se_conf[k]));
            prop_assert!(got.alpha_hat[k] >= case.alpha && got.alpha_hat[k] <= 2.0 * case.alpha + 1e-15);
            prop_assert!(got.beta_hat[k] >= case.beta && got.beta_hat[k] <= 2.0 * case.beta + 1e-15);
            prop_assert!(got.p_class.row(k).iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }

    #[test]
    fn classify_matches_scalar_softmax(
        g in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..5),
        t in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 2..7),
        tau in 0.05f64..2.0,
    ) {
        let (g, t) = (unit_rows(&g), unit_rows(&t));
        let gf = f32_matrix(&g);
        let tf = f32_matrix(&t);
        let valid = vec![true; g.len()];
        let got = classify(&gf, &valid, &tf, tau).unwrap();
        let g32: Vec<Vec<f64>> = (0..g.len()).map(|i| gf.row(i).iter().map(|&v| v as f64).collect()).collect();
        let t32: Vec<Vec<f64>> = (0..t.len()).map(|i| tf.row(i).iter().map(|&v| v as f64).collect()).collect();
        for (k, row) in g32.iter().enumerate() {
            let want = classify_row(row, &t32, tau);
            for (c, w) in want.iter().enumerate() {
                prop_assert!((got.row(k)[c] - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_rows_are_uniform(n in 1usize..5, c in 2usize..6) {
        let g = Tensor::zeros(&[n, 4]);
        let mut t = Tensor::zeros(&[c, 4]);
        for i in 0..c {
            t.row_mut(i)[i % 4] = 1.0;
        }
        let got = classify(&g, &vec![false; n], &t, 0.07).unwrap();
        for k in 0..n {
            for &v in got.row(k) {
                prop_assert!((v - 1.0 / c as f64).abs() < 1e-15);
            }
        }
    }
}
