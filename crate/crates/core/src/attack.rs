//! The capsulation attack: an input filter and a fake-label generator wrapped
//! around a pirated black-box model.
//!
//! A [`CapsulatedService`] answers `l(x)` when its filter flags `x` and `M(x)`
//! otherwise. Filters range from exact trigger lists ([`RuleFilter`]) to
//! classifiers fitted on `Q` triggers and `Q` normal queries
//! ([`BayesFilter`], [`LearnedFilter`]).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageDigest};
use crate::model::BlackBoxModel;
use crate::scheme::Label;
use crate::seed::{rng_for, rng_from_seed};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("prior p_T must lie in (0, 1), got {0}")]
    Prior(f64),
    #[error("no label differs from the model's when C = {0}")]
    NoFakeLabel(usize),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("no filter exists for this knowledge setting")]
    Inapplicable,
    #[error("unknown classifier kind {0:?}")]
    UnknownKind(String),
    #[error("filter file: {0}")]
    Format(String),
}

/// Per-image features seen by fitted filters: the raw pixels followed by each
/// pixel's distance to the 1/256 quantization grid, scaled to `[0, 1]`.
pub fn filter_features(x: &Image) -> Vec<f64> {
    let px = x.pixels();
    let mut out = Vec::with_capacity(px.len() * 2);
    out.extend(px.iter().map(|&p| p as f64));
    out.extend(px.iter().map(|&p| {
        let s = p as f64 * 256.0;
        2.0 * (s - s.round()).abs()
    }));
    out
}

/// Decides whether a query is an ownership query. Scores lie in `[0, 1]`.
pub trait Filter: Send + Sync {
    fn score(&self, x: &Image) -> f64;

    fn threshold(&self) -> f64;

    /// A ranking statistic with the same order as `score` that does not
    /// saturate; used for AUC.
    fn margin(&self, x: &Image) -> f64 {
        self.score(x)
    }

    fn flags(&self, x: &Image) -> bool {
        self.score(x) >= self.threshold()
    }
}

impl<F: Filter + ?Sized> Filter for &F {
    fn score(&self, x: &Image) -> f64 {
        (**self).score(x)
    }
    fn threshold(&self) -> f64 {
        (**self).threshold()
    }
    fn margin(&self, x: &Image) -> f64 {
        (**self).margin(x)
    }
    fn flags(&self, x: &Image) -> bool {
        (**self).flags(x)
    }
}

impl<F: Filter + ?Sized> Filter for Box<F> {
    fn score(&self, x: &Image) -> f64 {
        (**self).score(x)
    }
    fn threshold(&self) -> f64 {
        (**self).threshold()
    }
    fn margin(&self, x: &Image) -> f64 {
        (**self).margin(x)
    }
    fn flags(&self, x: &Image) -> bool {
        (**self).flags(x)
    }
}

/// Constant filter: `ConstFilter(false)` never flags, `ConstFilter(true)`
/// flags everything.
#[derive(Debug, Clone, Copy)]
pub struct ConstFilter(pub bool);

impl Filter for ConstFilter {
    fn score(&self, _: &Image) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
    fn threshold(&self) -> f64 {
        0.5
    }
}

/// Exact list of known triggers, optionally also flagging any image with a
/// pixel outside `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct RuleFilter {
    pub trigger_digests: HashSet<ImageDigest>,
    pub range_rule: bool,
}

impl RuleFilter {
    pub fn from_triggers<'a>(triggers: impl IntoIterator<Item = &'a Image>) -> Self {
        Self {
            trigger_digests: triggers.into_iter().map(Image::digest).collect(),
            range_rule: false,
        }
    }

    pub fn range_only() -> Self {
        Self {
            trigger_digests: HashSet::new(),
            range_rule: true,
        }
    }

    pub fn with_range_rule(mut self, on: bool) -> Self {
        self.range_rule = on;
        self
    }
}

impl Filter for RuleFilter {
    fn score(&self, x: &Image) -> f64 {
        let hit =
            (self.range_rule && x.has_outranged()) || self.trigger_digests.contains(&x.digest());
        if hit {
            1.0
        } else {
            0.0
        }
    }
    fn threshold(&self) -> f64 {
        0.5
    }
}

const VARIANCE_FLOOR: f64 = 1e-4;

/// Feature-independent Gaussian class conditionals and a prior `p_T`; the
/// score is the posterior probability that the input is a trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesFilter {
    pub trigger_mean: Vec<f64>,
    pub trigger_var: Vec<f64>,
    pub normal_mean: Vec<f64>,
    pub normal_var: Vec<f64>,
    pub prior: f64,
    pub threshold: f64,
}

fn gaussian_fit(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut()
        .for_each(|s| *s = (*s / n).max(VARIANCE_FLOOR));
    (mean, var)
}

fn gaussian_loglik(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((x - m) * (x - m) / v + v.ln()))
        .sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn fit_bayes(
    triggers: &[Image],
    normals: &[Image],
    prior: f64,
) -> Result<BayesFilter, AttackError> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(AttackError::Prior(prior));
    }
    for (what, set) in [("triggers", triggers), ("normals", normals)] {
        if set.len() < 2 {
            return Err(AttackError::TooFew {
                what,
                need: 2,
                got: set.len(),
            });
        }
    }
    let t: Vec<_> = triggers.iter().map(filter_features).collect();
    let n: Vec<_> = normals.iter().map(filter_features).collect();
    let (trigger_mean, trigger_var) = gaussian_fit(&t);
    let (normal_mean, normal_var) = gaussian_fit(&n);
    Ok(BayesFilter {
        trigger_mean,
        trigger_var,
        normal_mean,
        normal_var,
        prior,
        threshold: 0.5,
    })
}

impl BayesFilter {
    /// Posterior log-odds `log Pr{x|T} p_T - log Pr{x|¬T} (1 - p_T)`.
    pub fn log_odds(&self, x: &Image) -> f64 {
        let f = filter_features(x);
        gaussian_loglik(&f, &self.trigger_mean, &self.trigger_var) + self.prior.ln()
            - gaussian_loglik(&f, &self.normal_mean, &self.normal_var)
            - (1.0 - self.prior).ln()
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

impl Filter for BayesFilter {
    fn score(&self, x: &Image) -> f64 {
        sigmoid(self.log_odds(x))
    }
    fn threshold(&self) -> f64 {
        self.threshold
    }
    fn margin(&self, x: &Image) -> f64 {
        self.log_odds(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Knn,
    NaiveBayes,
    Logistic,
    Mlp,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [
        ClassifierKind::Knn,
        ClassifierKind::NaiveBayes,
        ClassifierKind::Logistic,
        ClassifierKind::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Knn => "knn",
            ClassifierKind::NaiveBayes => "naive_bayes",
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierKind {
    type Err = AttackError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AttackError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierHyper {
    pub k: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self {
            k: 5,
            hidden: 32,
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 32,
            l2: 1e-4,
        }
    }
}

/// Per-feature centering and scaling fitted on the filter's training set.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[Vec<f64>]) -> Self {
        let (mean, var) = gaussian_fit(rows);
        Self {
            mean,
            scale: var.iter().map(|v| 1.0 / v.sqrt()).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fitted {
    Knn {
        k: usize,
        points: Vec<Vec<f64>>,
        is_trigger: Vec<bool>,
    },
    NaiveBayes(BayesFilter),
    Logistic {
        w: Vec<f64>,
        b: f64,
    },
    Mlp {
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

/// A binary classifier trained on `Q` triggers and `Q` normal queries.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedFilter {
    kind: ClassifierKind,
    hyper: ClassifierHyper,
    threshold: f64,
    standardizer: Option<Standardizer>,
    fitted: Fitted,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logistic_loss(z: f64, y: f64) -> f64 {
    // log(1 + e^z) - y z, stable for large |z|.
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

pub fn fit_classifier(
    kind: ClassifierKind,
    triggers: &[Image],
    normals: &[Image],
    hyper: &ClassifierHyper,
    seed: u64,
) -> Result<LearnedFilter, AttackError> {
    let need = match kind {
        ClassifierKind::Knn => hyper.k.max(1),
        _ => 2,
    };
    for (what, set) in [("triggers", triggers), ("normals", normals)] {
        if set.len() < need {
            return Err(AttackError::TooFew {
                what,
                need,
                got: set.len(),
            });
        }
    }
    if kind == ClassifierKind::NaiveBayes {
        return Ok(LearnedFilter {
            kind,
            hyper: *hyper,
            threshold: 0.5,
            standardizer: None,
            fitted: Fitted::NaiveBayes(fit_bayes(triggers, normals, 0.5)?),
        });
    }
    let raw: Vec<Vec<f64>> = triggers
        .iter()
        .chain(normals)
        .map(filter_features)
        .collect();
    let ys: Vec<f64> = (0..raw.len())
        .map(|i| if i < triggers.len() { 1.0 } else { 0.0 })
        .collect();
    let std = Standardizer::fit(&raw);
    let xs: Vec<Vec<f64>> = raw.iter().map(|r| std.apply(r)).collect();
    let fitted = match kind {
        ClassifierKind::Knn => Fitted::Knn {
            k: hyper.k.max(1),
            is_trigger: ys.iter().map(|&y| y == 1.0).collect(),
            points: xs,
        },
        ClassifierKind::Logistic => fit_logistic(&xs, &ys, hyper, seed)?,
        ClassifierKind::Mlp => fit_mlp(&xs, &ys, hyper, seed)?,
        ClassifierKind::NaiveBayes => unreachable!(),
    };
    Ok(LearnedFilter {
        kind,
        hyper: *hyper,
        threshold: 0.5,
        standardizer: Some(std),
        fitted,
    })
}

fn fit_logistic(
    xs: &[Vec<f64>],
    ys: &[f64],
    hyper: &ClassifierHyper,
    seed: u64,
) -> Result<Fitted, AttackError> {
    let d = xs[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = rng_from_seed("filter-logistic", seed);
    let lr = hyper.learning_rate;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for &i in batch {
                let z = dot(&w, &xs[i]) + b;
                loss += logistic_loss(z, ys[i]);
                let g = sigmoid(z) - ys[i];
                gw.iter_mut().zip(&xs[i]).for_each(|(a, x)| *a += g * x);
                gb += g;
            }
            let scale = lr / batch.len() as f64;
            for (wj, gj) in w.iter_mut().zip(&gw) {
                *wj -= scale * gj + lr * hyper.l2 * *wj;
            }
            b -= scale * gb;
        }
        if !loss.is_finite() {
            return Err(AttackError::Divergence { epoch });
        }
    }
    Ok(Fitted::Logistic { w, b })
}

fn fit_mlp(
    xs: &[Vec<f64>],
    ys: &[f64],
    hyper: &ClassifierHyper,
    seed: u64,
) -> Result<Fitted, AttackError> {
    let d = xs[0].len();
    let h = hyper.hidden.max(1);
    let mut rng = rng_from_seed("filter-mlp", seed);
    let a1 = (6.0 / (d + h) as f64).sqrt();
    let a2 = (6.0 / (h + 1) as f64).sqrt();
    let mut w1: Vec<f64> = (0..h * d).map(|_| rng.gen_range(-a1..a1)).collect();
    let mut b1 = vec![0.0; h];
    let mut w2: Vec<f64> = (0..h).map(|_| rng.gen_range(-a2..a2)).collect();
    let mut b2 = 0.0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let lr = hyper.learning_rate;
    let mut act = vec![0.0; h];
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut gw1 = vec![0.0; h * d];
            let mut gb1 = vec![0.0; h];
            let mut gw2 = vec![0.0; h];
            let mut gb2 = 0.0;
            for &i in batch {
                let x = &xs[i];
                for j in 0..h {
                    act[j] = (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).max(0.0);
                }
                let z = dot(&w2, &act) + b2;
                loss += logistic_loss(z, ys[i]);
                let g = sigmoid(z) - ys[i];
                gb2 += g;
                for j in 0..h {
                    gw2[j] += g * act[j];
                    if act[j] > 0.0 {
                        let gj = g * w2[j];
                        gb1[j] += gj;
                        gw1[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(x)
                            .for_each(|(a, xv)| *a += gj * xv);
                    }
                }
            }
            let scale = lr / batch.len() as f64;
            for (p, g) in w1.iter_mut().zip(&gw1) {
                *p -= scale * g + lr * hyper.l2 * *p;
            }
            for (p, g) in b1.iter_mut().zip(&gb1) {
                *p -= scale * g;
            }
            for (p, g) in w2.iter_mut().zip(&gw2) {
                *p -= scale * g + lr * hyper.l2 * *p;
            }
            b2 -= scale * gb2;
        }
        if !loss.is_finite() {
            return Err(AttackError::Divergence { epoch });
        }
    }
    Ok(Fitted::Mlp {
        hidden: h,
        w1,
        b1,
        w2,
        b2,
    })
}

impl LearnedFilter {
    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn hyper(&self) -> &ClassifierHyper {
        &self.hyper
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    fn prepare(&self, x: &Image) -> Vec<f64> {
        let f = filter_features(x);
        match &self.standardizer {
            Some(s) => s.apply(&f),
            None => f,
        }
    }

    fn knn_fraction(k: usize, points: &[Vec<f64>], is_trigger: &[bool], x: &[f64]) -> f64 {
        let mut dist: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let k = k.min(dist.len());
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist[..k].iter().filter(|(_, i)| is_trigger[*i]).count() as f64 / k as f64
    }

    fn raw_margin(&self, x: &Image) -> f64 {
        match &self.fitted {
            Fitted::NaiveBayes(b) => b.log_odds(x),
            Fitted::Knn {
                k,
                points,
                is_trigger,
            } => Self::knn_fraction(*k, points, is_trigger, &self.prepare(x)),
            Fitted::Logistic { w, b } => dot(w, &self.prepare(x)) + b,
            Fitted::Mlp {
                hidden,
                w1,
                b1,
                w2,
                b2,
            } => {
                let f = self.prepare(x);
                let d = f.len();
                (0..*hidden)
                    .map(|j| (dot(&w1[j * d..(j + 1) * d], &f) + b1[j]).max(0.0) * w2[j])
                    .sum::<f64>()
                    + b2
            }
        }
    }
}

impl Filter for LearnedFilter {
    fn score(&self, x: &Image) -> f64 {
        let m = self.raw_margin(x);
        match self.fitted {
            Fitted::Knn { .. } => m,
            _ => sigmoid(m),
        }
    }
    fn threshold(&self) -> f64 {
        self.threshold
    }
    fn margin(&self, x: &Image) -> f64 {
        self.raw_margin(x)
    }
}

fn hex_f64(v: &[f64]) -> String {
    hex::encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn unhex_f64(s: &str) -> Result<Vec<f64>, AttackError> {
    let bytes = hex::decode(s).map_err(|e| AttackError::Format(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(AttackError::Format(
            "array length is not a multiple of 8".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// On-disk filter: kind, hyperparameters, threshold, and named parameter
/// arrays as hex-encoded little-endian `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFile {
    pub kind: ClassifierKind,
    pub hyper: ClassifierHyper,
    pub threshold: f64,
    pub scalars: BTreeMap<String, f64>,
    pub arrays: BTreeMap<String, String>,
}

impl LearnedFilter {
    pub fn to_file(&self) -> FilterFile {
        let mut scalars = BTreeMap::new();
        let mut arrays = BTreeMap::new();
        if let Some(s) = &self.standardizer {
            arrays.insert("std_mean".into(), hex_f64(&s.mean));
            arrays.insert("std_scale".into(), hex_f64(&s.scale));
        }
        match &self.fitted {
            Fitted::Knn {
                k,
                points,
                is_trigger,
            } => {
                scalars.insert("k".into(), *k as f64);
                scalars.insert("rows".into(), points.len() as f64);
                arrays.insert("points".into(), hex_f64(&points.concat()));
                let ys: Vec<f64> = is_trigger.iter().map(|&t| t as u8 as f64).collect();
                arrays.insert("is_trigger".into(), hex_f64(&ys));
            }
            Fitted::NaiveBayes(b) => {
                scalars.insert("prior".into(), b.prior);
                arrays.insert("trigger_mean".into(), hex_f64(&b.trigger_mean));
                arrays.insert("trigger_var".into(), hex_f64(&b.trigger_var));
                arrays.insert("normal_mean".into(), hex_f64(&b.normal_mean));
                arrays.insert("normal_var".into(), hex_f64(&b.normal_var));
            }
            Fitted::Logistic { w, b } => {
                scalars.insert("b".into(), *b);
                arrays.insert("w".into(), hex_f64(w));
            }
            Fitted::Mlp {
                hidden,
                w1,
                b1,
                w2,
                b2,
            } => {
                scalars.insert("hidden".into(), *hidden as f64);
                scalars.insert("b2".into(), *b2);
                arrays.insert("w1".into(), hex_f64(w1));
                arrays.insert("b1".into(), hex_f64(b1));
                arrays.insert("w2".into(), hex_f64(w2));
            }
        }
        FilterFile {
            kind: self.kind,
            hyper: self.hyper,
            threshold: self.threshold,
            scalars,
            arrays,
        }
    }

    pub fn from_file(file: &FilterFile) -> Result<Self, AttackError> {
        let array = |name: &str| -> Result<Vec<f64>, AttackError> {
            unhex_f64(
                file.arrays
                    .get(name)
                    .ok_or_else(|| AttackError::Format(format!("missing array {name}")))?,
            )
        };
        let scalar = |name: &str| -> Result<f64, AttackError> {
            file.scalars
                .get(name)
                .copied()
                .ok_or_else(|| AttackError::Format(format!("missing scalar {name}")))
        };
        let standardizer = if file.kind == ClassifierKind::NaiveBayes {
            None
        } else {
            Some(Standardizer {
                mean: array("std_mean")?,
                scale: array("std_scale")?,
            })
        };
        let fitted = match file.kind {
            ClassifierKind::Knn => {
                let rows = scalar("rows")? as usize;
                let flat = array("points")?;
                if rows == 0 || flat.len() % rows != 0 {
                    return Err(AttackError::Format("points do not divide into rows".into()));
                }
                Fitted::Knn {
                    k: scalar("k")? as usize,
                    points: flat
                        .chunks(flat.len() / rows)
                        .map(<[f64]>::to_vec)
                        .collect(),
                    is_trigger: array("is_trigger")?.iter().map(|&y| y == 1.0).collect(),
                }
            }
            ClassifierKind::NaiveBayes => Fitted::NaiveBayes(BayesFilter {
                trigger_mean: array("trigger_mean")?,
                trigger_var: array("trigger_var")?,
                normal_mean: array("normal_mean")?,
                normal_var: array("normal_var")?,
                prior: scalar("prior")?,
                threshold: file.threshold,
            }),
            ClassifierKind::Logistic => Fitted::Logistic {
                w: array("w")?,
                b: scalar("b")?,
            },
            ClassifierKind::Mlp => Fitted::Mlp {
                hidden: scalar("hidden")? as usize,
                w1: array("w1")?,
                b1: array("b1")?,
                w2: array("w2")?,
                b2: scalar("b2")?,
            },
        };
        Ok(Self {
            kind: file.kind,
            hyper: file.hyper,
            threshold: file.threshold,
            standardizer,
            fitted,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("filter serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AttackError> {
        let file: FilterFile =
            serde_json::from_str(s).map_err(|e| AttackError::Format(e.to_string()))?;
        Self::from_file(&file)
    }
}

/// Produces the answer for a flagged query given the inner model's answer.
pub trait FakeLabeler: Send + Sync {
    fn fake(&self, x: &Image, inner: Label) -> Label;
}

impl<L: FakeLabeler + ?Sized> FakeLabeler for Box<L> {
    fn fake(&self, x: &Image, inner: Label) -> Label {
        (**self).fake(x, inner)
    }
}

/// A seeded uniform draw from the labels other than the inner model's.
/// The draw depends on `(seed, x)` only, so repeated queries agree.
#[derive(Debug, Clone, Copy)]
pub struct ComplementLabeler {
    classes: usize,
    seed: u64,
}

impl ComplementLabeler {
    pub fn new(classes: usize, seed: u64) -> Result<Self, AttackError> {
        if classes < 2 {
            return Err(AttackError::NoFakeLabel(classes));
        }
        Ok(Self { classes, seed })
    }
}

impl FakeLabeler for ComplementLabeler {
    fn fake(&self, x: &Image, inner: Label) -> Label {
        let mut rng = rng_for("fake-label", &[&self.seed.to_le_bytes(), &x.digest()]);
        let k = rng.gen_range(0..self.classes as u32 - 1);
        Label(if k >= inner.0 { k + 1 } else { k })
    }
}

/// Queries `m` on `x` and returns a seeded label different from its answer.
pub fn fake_label<M: BlackBoxModel + ?Sized>(
    x: &Image,
    m: &M,
    classes: usize,
    seed: u64,
) -> Result<Label, AttackError> {
    Ok(ComplementLabeler::new(classes, seed)?.fake(x, m.query(x, 0)))
}

/// Answers listed inputs with fixed labels and passes everything else
/// through unchanged.
#[derive(Debug, Clone, Default)]
pub struct TableLabeler {
    pub labels: HashMap<ImageDigest, Label>,
}

impl TableLabeler {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a Image, Label)>) -> Self {
        Self {
            labels: pairs.into_iter().map(|(x, l)| (x.digest(), l)).collect(),
        }
    }
}

impl FakeLabeler for TableLabeler {
    fn fake(&self, x: &Image, inner: Label) -> Label {
        self.labels.get(&x.digest()).copied().unwrap_or(inner)
    }
}

/// `M^CA_{f,l}`: flagged queries get `l(x)`, the rest get `M(x)`.
pub struct CapsulatedService<M, F, L> {
    pub inner: M,
    pub filter: F,
    pub labeler: L,
}

pub fn capsulate<M, F, L>(inner: M, filter: F, labeler: L) -> CapsulatedService<M, F, L>
where
    M: BlackBoxModel,
    F: Filter,
    L: FakeLabeler,
{
    CapsulatedService {
        inner,
        filter,
        labeler,
    }
}

impl<M: BlackBoxModel, F: Filter, L: FakeLabeler> BlackBoxModel for CapsulatedService<M, F, L> {
    fn query(&self, x: &Image, position: u64) -> Label {
        let answer = self.inner.query(x, position);
        if self.filter.flags(x) {
            self.labeler.fake(x, answer)
        } else {
            answer
        }
    }
}

/// What the adversary knows about the scheme's trigger generator, the owner's
/// key, and previously exposed triggers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnowledgeSetting {
    pub generator: bool,
    pub key: bool,
    pub exposed_triggers: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterType {
    /// Exact list of triggers recomputed from the key.
    Rule,
    /// Either a rule tailored to the generator's signature or a classifier
    /// fitted on generated samples.
    BayesOrRule,
    /// A classifier fitted on exposed triggers.
    Bayes,
}

impl KnowledgeSetting {
    pub fn filter_type(self) -> Result<FilterType, AttackError> {
        match (self.generator, self.key, self.exposed_triggers) {
            (true, true, _) => Ok(FilterType::Rule),
            (true, false, _) => Ok(FilterType::BayesOrRule),
            (false, _, true) => Ok(FilterType::Bayes),
            (false, _, false) => Err(AttackError::Inapplicable),
        }
    }
}
