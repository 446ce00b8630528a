//! AUC, the CAScore upper bound, the exact forgery probability, and the
//! Chernoff bound on ambiguity attacks together with its Monte-Carlo check.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{fit_classifier, AttackError, ClassifierHyper, ClassifierKind, Filter};
use crate::image::Image;
use crate::model::SyntheticDataset;
use crate::scheme::SchemeParams;
use crate::seed::{derive_seed, rng_from_seed};
use crate::triggers::{sample_scheme_triggers, SchemeId, TriggerError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("threshold tau = {tau} must lie in (1/C, 1] with C = {classes}")]
    Tau { tau: f64, classes: usize },
    #[error("C must be at least 2 and N at least 1, got C = {classes}, N = {n}")]
    Params { classes: usize, n: usize },
    #[error("not enough data: {what} needs {need}, have {have}")]
    InsufficientData {
        what: &'static str,
        need: usize,
        have: usize,
    },
    #[error("empty grid")]
    EmptyGrid,
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Mann-Whitney estimate of `Pr{pos > neg}` with ties counted as one half.
/// Returns 0.5 if either side is empty.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Twice the U statistic, kept integral so symmetry is exact.
    let mut twice_u: u128 = 0;
    for p in pos {
        let below = sorted.partition_point(|n| n.total_cmp(p).is_lt());
        let not_above = sorted.partition_point(|n| n.total_cmp(p).is_le());
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    twice_u as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64
}

/// `max(a, 1 - a)`: a classifier and its label flip are both in the family.
pub fn flip_normalize(a: f64) -> f64 {
    a.max(1.0 - a)
}

/// Standard deviation of an AUC estimate under the null of identical score
/// distributions.
pub fn null_auc_sd(n_pos: usize, n_neg: usize) -> f64 {
    let (p, n) = (n_pos as f64, n_neg as f64);
    ((p + n + 1.0) / (12.0 * p * n)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAScoreConfig {
    pub kinds: Vec<ClassifierKind>,
    pub q_values: Vec<usize>,
    pub eval_size: usize,
    pub hyper: ClassifierHyper,
    pub seed: u64,
}

impl Default for CAScoreConfig {
    fn default() -> Self {
        Self {
            kinds: ClassifierKind::ALL.to_vec(),
            q_values: vec![500],
            eval_size: 1000,
            hyper: ClassifierHyper::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucCell {
    pub kind: ClassifierKind,
    pub q: usize,
    /// Held-out AUC as measured.
    pub raw_auc: f64,
    /// `max(raw_auc, 1 - raw_auc)`.
    pub auc: f64,
}

impl AucCell {
    pub fn bound(&self) -> f64 {
        2.0 * (1.0 - self.auc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAScoreReport {
    pub scheme: SchemeId,
    pub dataset_seed: u64,
    pub cells: Vec<AucCell>,
    pub max_auc: f64,
    pub cascore_bound: f64,
}

impl CAScoreReport {
    pub fn from_cells(scheme: SchemeId, dataset_seed: u64, cells: Vec<AucCell>) -> Self {
        let max_auc = cells.iter().map(|c| c.auc).fold(0.5, f64::max);
        Self {
            scheme,
            dataset_seed,
            cells,
            max_auc,
            cascore_bound: 2.0 * (1.0 - max_auc),
        }
    }

    /// Bound for one classifier kind as a function of Q, in grid order.
    pub fn curve(&self, kind: ClassifierKind) -> Vec<(usize, f64)> {
        self.cells
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| (c.q, c.bound()))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,classifier,q,auc,raw_auc,bound\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                self.scheme,
                c.kind,
                c.q,
                c.auc,
                c.raw_auc,
                c.bound()
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Disjoint index pools drawn from the whole dataset: trigger bases for
/// fitting, normals for fitting, trigger bases for evaluation, normals for
/// evaluation.
fn cascore_pools(dataset: &SyntheticDataset, seed: u64) -> [Vec<usize>; 4] {
    let mut all: Vec<usize> = (0..dataset.len()).collect();
    all.shuffle(&mut rng_from_seed("cascore-pools", seed));
    let quarter = all.len() / 4;
    [
        all[..quarter].to_vec(),
        all[quarter..2 * quarter].to_vec(),
        all[2 * quarter..3 * quarter].to_vec(),
        all[3 * quarter..4 * quarter].to_vec(),
    ]
}

fn images(dataset: &SyntheticDataset, idx: &[usize]) -> Vec<Image> {
    idx.iter().map(|&i| dataset.images[i].clone()).collect()
}

/// Fits every `(kind, Q)` classifier on `Q` generated triggers and `Q`
/// normals, and measures its AUC on held-out triggers (from a fresh key or a
/// disjoint pool) and held-out normals. The bound is `2 (1 - max AUC)`.
pub fn cascore_bound(
    scheme: SchemeId,
    dataset: &SyntheticDataset,
    params: &SchemeParams,
    config: &CAScoreConfig,
) -> Result<CAScoreReport, MetricsError> {
    if config.kinds.is_empty() || config.q_values.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let [fit_t, fit_n, eval_t, eval_n] = cascore_pools(dataset, config.seed);
    let q_max = *config.q_values.iter().max().unwrap();
    for (what, pool, need) in [
        ("fit triggers", &fit_t, q_max),
        ("fit normals", &fit_n, q_max),
        ("held-out triggers", &eval_t, config.eval_size),
        ("held-out normals", &eval_n, config.eval_size),
    ] {
        if pool.len() < need {
            return Err(MetricsError::InsufficientData {
                what,
                need,
                have: pool.len(),
            });
        }
    }
    let fit_seed = derive_seed(config.seed, "cascore-fit-triggers", 0);
    let eval_seed = derive_seed(config.seed, "cascore-eval-triggers", 0);
    let t_eval = sample_scheme_triggers(
        scheme,
        config.eval_size,
        eval_seed,
        params,
        &dataset.images,
        &eval_t,
    )?;
    let n_eval = images(dataset, &eval_n[..config.eval_size]);
    let mut cells = Vec::new();
    for &kind in &config.kinds {
        for (qi, &q) in config.q_values.iter().enumerate() {
            let t_fit =
                sample_scheme_triggers(scheme, q, fit_seed, params, &dataset.images, &fit_t)?;
            let n_fit = images(dataset, &fit_n[..q]);
            let filter = fit_classifier(
                kind,
                &t_fit,
                &n_fit,
                &config.hyper,
                derive_seed(config.seed, kind.as_str(), qi as u64),
            )?;
            let pos: Vec<f64> = t_eval.iter().map(|x| filter.margin(x)).collect();
            let neg: Vec<f64> = n_eval.iter().map(|x| filter.margin(x)).collect();
            let raw_auc = auc(&pos, &neg);
            cells.push(AucCell {
                kind,
                q,
                raw_auc,
                auc: flip_normalize(raw_auc),
            });
        }
    }
    Ok(CAScoreReport::from_cells(scheme, dataset.seed, cells))
}

fn check_cn(classes: usize, n: usize) -> Result<(), MetricsError> {
    if classes < 2 || n < 1 {
        return Err(MetricsError::Params { classes, n });
    }
    Ok(())
}

/// `C^{-N}`, the chance that `N` independent uniform labels all match.
pub fn forgery_prob_exact(classes: usize, n: usize) -> Result<f64, MetricsError> {
    check_cn(classes, n)?;
    Ok((-(n as f64) * (classes as f64).ln()).exp())
}

/// Smallest match count that reaches accuracy `tau` over `n` triggers.
pub fn required_matches(tau: f64, n: usize) -> usize {
    ((tau * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// `Pr{Bin(n, p) >= k}`, summed in log space.
pub fn binomial_tail(n: usize, p: f64, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    // log C(n, j) built up incrementally.
    let mut log_choose = 0.0;
    let mut total = 0.0;
    for j in 0..=n {
        if j > 0 {
            log_choose += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        if j >= k {
            total += (log_choose + j as f64 * lp + (n - j) as f64 * lq).exp();
        }
    }
    total.min(1.0)
}

/// Exact probability that a service answering uniformly at random reaches
/// accuracy `tau` on `n` triggers over `classes` labels.
pub fn exact_tail(tau: f64, classes: usize, n: usize) -> Result<f64, MetricsError> {
    check_cn(classes, n)?;
    Ok(binomial_tail(
        n,
        1.0 / classes as f64,
        required_matches(tau, n),
    ))
}

fn log_g(lambda: f64, tau: f64, classes: f64) -> f64 {
    // ln(e^λ/C + 1 - 1/C) - λτ, stable for large λ.
    let a = lambda - classes.ln();
    let b = (1.0 - 1.0 / classes).ln();
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln() - lambda * tau
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    f1.min(f2)
}

const LAMBDA_CAP: f64 = 60.0;

/// `inf_{λ>0} ln g(λ)` with `g(λ) = (e^λ/C + 1 - 1/C) / e^{λτ}`.
pub fn chernoff_log_base(tau: f64, classes: usize, n: usize) -> Result<f64, MetricsError> {
    check_cn(classes, n)?;
    let c = classes as f64;
    if !(tau > 1.0 / c && tau <= 1.0) {
        return Err(MetricsError::Tau { tau, classes });
    }
    if tau < 1.0 {
        let lambda = (tau * (c - 1.0) / (1.0 - tau)).ln();
        if lambda.is_finite() && lambda > 0.0 {
            return Ok(log_g(lambda, tau, c));
        }
    }
    Ok(golden_section_min(|l| log_g(l, tau, c), 0.0, LAMBDA_CAP))
}

/// Relative widening applied to the log bound so rounding never lands it
/// below the tail it bounds (the two coincide at `tau = 1`).
const BOUND_SLACK: f64 = 1e-12;

/// `min(1, g(λ*)^N)`, an upper bound on the probability that a service with no
/// knowledge of the labels reaches accuracy `tau`.
pub fn chernoff_bound(tau: f64, classes: usize, n: usize) -> Result<f64, MetricsError> {
    let log_bound = n as f64 * chernoff_log_base(tau, classes, n)?;
    Ok((log_bound + BOUND_SLACK * (1.0 + log_bound.abs()))
        .exp()
        .min(1.0))
}

/// Fraction of `trials` in which at least `tau N` of `N` independent label
/// guesses, each correct with probability `1/C`, are correct.
pub fn ambiguity_montecarlo(
    classes: usize,
    n: usize,
    tau: f64,
    trials: u64,
    seed: u64,
) -> Result<f64, MetricsError> {
    check_cn(classes, n)?;
    if trials == 0 {
        return Err(MetricsError::InsufficientData {
            what: "Monte-Carlo trials",
            need: 1,
            have: 0,
        });
    }
    let need = required_matches(tau, n);
    let mut rng = rng_from_seed("ambiguity", seed);
    let c = classes as u32;
    let mut wins = 0u64;
    for _ in 0..trials {
        let matches = (0..n).filter(|_| rng.gen_range(0..c) == 0).count();
        if matches >= need {
            wins += 1;
        }
    }
    Ok(wins as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_dataset;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1.0, 1.0], &[0.0, 0.0]), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0.5, 0.5]), 0.5);
        assert_eq!(auc(&[0.9, 0.2], &[0.5]), 0.5);
        assert_eq!(auc(&[0.0], &[1.0]), 0.0);
        assert_eq!(auc(&[], &[1.0]), 0.5);
    }

    /// Quadratic reference: enumerate every pair.
    fn auc_pairs(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 10.0), 1..40)
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(pos in scores(), neg in scores()) {
            prop_assert!((auc(&pos, &neg) - auc_pairs(&pos, &neg)).abs() < 1e-12);
        }

        #[test]
        fn auc_symmetry(pos in scores(), neg in scores()) {
            prop_assert_eq!(auc(&pos, &neg) + auc(&neg, &pos), 1.0);
        }

        #[test]
        fn auc_monotone_invariance(pos in scores(), neg in scores()) {
            let t = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>();
            prop_assert_eq!(auc(&pos, &neg), auc(&t(&pos), &t(&neg)));
        }

        #[test]
        fn tail_below_bound_below_one(c in 2usize..20, n in 1usize..128, t in 0.0f64..1.0) {
            let tau = 1.0 / c as f64 + (1.0 - 1.0 / c as f64) * (0.01 + 0.99 * t);
            let bound = chernoff_bound(tau, c, n).unwrap();
            let exact = exact_tail(tau, c, n).unwrap();
            prop_assert!(exact <= bound, "exact {} bound {}", exact, bound);
            prop_assert!(bound <= 1.0);
        }
    }

    #[test]
    fn forgery_examples() {
        assert!((forgery_prob_exact(10, 1).unwrap() - 0.1).abs() < 1e-15);
        assert!((forgery_prob_exact(10, 2).unwrap() - 0.01).abs() < 1e-15);
        assert!((forgery_prob_exact(2, 10).unwrap() - 9.765625e-4).abs() < 1e-15);
        assert!(forgery_prob_exact(10, 1000).unwrap() == 0.0);
        assert!(forgery_prob_exact(1, 3).is_err());
    }

    #[test]
    fn binomial_tail_by_enumeration() {
        // C = 2, N = 4: outcomes with at least 3 matches are 4 + 1 of 16.
        assert!((exact_tail(0.75, 2, 4).unwrap() - 0.3125).abs() < 1e-12);
        assert!((exact_tail(1.0, 10, 2).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(binomial_tail(5, 0.3, 0), 1.0);
        assert_eq!(binomial_tail(5, 0.3, 6), 0.0);
        // Against a direct sum of pmf terms with exact integer coefficients.
        let direct: f64 = (7..=20)
            .map(|j| {
                let choose: f64 = (0..j).map(|i| (20 - i) as f64 / (i + 1) as f64).product();
                choose * 0.25f64.powi(j) * 0.75f64.powi(20 - j)
            })
            .sum();
        assert!((binomial_tail(20, 0.25, 7) - direct).abs() < 1e-12);
    }

    #[test]
    fn chernoff_examples() {
        let b = chernoff_bound(0.75, 2, 4).unwrap();
        assert!((0.3125..=1.0).contains(&b), "{b}");
        // Closed form equals exp(-N KL(tau || 1/C)).
        let (tau, c, n) = (0.5f64, 10.0f64, 64usize);
        let kl = tau * (tau * c).ln() + (1.0 - tau) * ((1.0 - tau) / (1.0 - 1.0 / c)).ln();
        let b = chernoff_bound(tau, 10, n).unwrap();
        assert!(((b.ln() + n as f64 * kl) / (n as f64 * kl)).abs() < 1e-9);
        // tau = 1: the infimum is 1/C per trigger.
        let b1 = chernoff_bound(1.0, 10, 3).unwrap();
        assert!((b1 - 1e-3).abs() < 1e-9, "{b1}");
        assert!(matches!(
            chernoff_bound(0.1, 10, 4),
            Err(MetricsError::Tau { .. })
        ));
        assert!(chernoff_bound(1.01, 10, 4).is_err());
    }

    #[test]
    fn chernoff_log_linear_in_n() {
        let per: Vec<f64> = [4usize, 16, 64]
            .iter()
            .map(|&n| chernoff_bound(0.75, 10, n).unwrap().ln() / n as f64)
            .collect();
        assert!(per[0] < 0.0);
        assert!((per[0] - per[1]).abs() < 1e-10 && (per[1] - per[2]).abs() < 1e-10);
    }

    #[test]
    fn montecarlo_matches_exact() {
        let trials = 200_000u64;
        for (c, n, tau) in [(10usize, 2usize, 1.0f64), (2, 4, 0.75)] {
            let exact = exact_tail(tau, c, n).unwrap();
            let sd = (exact * (1.0 - exact) / trials as f64).sqrt();
            let mc = ambiguity_montecarlo(c, n, tau, trials, 5).unwrap();
            assert!(
                (mc - exact).abs() <= 3.0 * sd,
                "C={c} N={n}: {mc} vs {exact}"
            );
        }
        assert!(ambiguity_montecarlo(10, 2, 1.0, 0, 0).is_err());
    }

    #[test]
    fn cascore_small_grid() {
        let p = SchemeParams::default();
        let ds = gen_dataset(4, 40, &p).unwrap();
        let config = CAScoreConfig {
            kinds: vec![ClassifierKind::NaiveBayes, ClassifierKind::Logistic],
            q_values: vec![20, 40],
            eval_size: 80,
            hyper: ClassifierHyper {
                epochs: 10,
                ..Default::default()
            },
            seed: 3,
        };
        let r = cascore_bound(SchemeId::Wonder, &ds, &p, &config).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert!(r.cells.iter().all(|c| (0.5..=1.0).contains(&c.auc)));
        assert!(r.cascore_bound <= 0.2, "{}", r.cascore_bound);
        assert_eq!(
            r,
            cascore_bound(SchemeId::Wonder, &ds, &p, &config).unwrap()
        );
        // Adding kinds can only lower the bound.
        let fewer = CAScoreReport::from_cells(
            r.scheme,
            r.dataset_seed,
            r.cells
                .iter()
                .filter(|c| c.kind == ClassifierKind::Logistic)
                .cloned()
                .collect(),
        );
        assert!(fewer.cascore_bound >= r.cascore_bound);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("scheme,classifier,q,auc,raw_auc,bound\n"));
        let back: CAScoreReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn cascore_rejects_small_pools() {
        let p = SchemeParams::default();
        let ds = gen_dataset(4, 10, &p).unwrap();
        let config = CAScoreConfig {
            q_values: vec![500],
            ..Default::default()
        };
        assert!(matches!(
            cascore_bound(SchemeId::Noise, &ds, &p, &config),
            Err(MetricsError::InsufficientData { .. })
        ));
        let empty = CAScoreConfig {
            kinds: vec![],
            ..Default::default()
        };
        assert!(matches!(
            cascore_bound(SchemeId::Noise, &ds, &p, &empty),
            Err(MetricsError::EmptyGrid)
        ));
    }
}
