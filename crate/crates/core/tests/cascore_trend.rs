use capsule_wm::metrics::{cascore_bound, null_auc_sd, CAScoreConfig};
use capsule_wm::model::gen_dataset;
use capsule_wm::triggers::SchemeId;
use capsule_wm::SchemeParams;

const Q_GRID: [usize; 4] = [50, 100, 200, 500];

/// The bound should not rise with Q. A rise counts as an inversion only when
/// it exceeds three standard deviations of the difference of two held-out
/// AUCs; each curve may have at most one.
#[test]
fn bound_declines_with_q() {
    let params = SchemeParams::default();
    let ds = gen_dataset(11, 400, &params).unwrap();
    let config = CAScoreConfig {
        q_values: Q_GRID.to_vec(),
        seed: 12,
        ..CAScoreConfig::default()
    };
    let band =
        3.0 * 2.0 * std::f64::consts::SQRT_2 * null_auc_sd(config.eval_size, config.eval_size);
    for scheme in SchemeId::ALL {
        let report = cascore_bound(scheme, &ds, &params, &config).unwrap();
        for &kind in &config.kinds {
            let curve = report.curve(kind);
            assert_eq!(curve.iter().map(|c| c.0).collect::<Vec<_>>(), Q_GRID);
            let bounds: Vec<f64> = curve.iter().map(|&(_, auc)| 2.0 * (1.0 - auc)).collect();
            let inversions = bounds.windows(2).filter(|w| w[1] - w[0] > band).count();
            assert!(inversions <= 1, "{scheme} {kind}: {bounds:?}");
        }
    }
}

#[test]
fn adding_kinds_never_raises_the_bound() {
    let params = SchemeParams::default();
    let ds = gen_dataset(13, 200, &params).unwrap();
    let base = CAScoreConfig {
        q_values: vec![100],
        eval_size: 400,
        seed: 14,
        ..CAScoreConfig::default()
    };
    for scheme in [SchemeId::Wonder, SchemeId::Reverse] {
        let full = cascore_bound(scheme, &ds, &params, &base).unwrap();
        for kind in base.kinds.clone() {
            let one = CAScoreConfig {
                kinds: vec![kind],
                ..base.clone()
            };
            let single = cascore_bound(scheme, &ds, &params, &one).unwrap();
            assert!(full.cascore_bound <= single.cascore_bound + 1e-12);
        }
    }
}
