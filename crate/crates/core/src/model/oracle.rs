use std::collections::HashMap;

use rand::Rng;

use super::{BlackBoxModel, SyntheticDataset};
use crate::image::{Image, ImageDigest};
use crate::scheme::{label_mod, Label};
use crate::seed::rng_for;
use crate::triggers::TriggerSet;

/// Lookup-table service. Mapped triggers answer their assigned label with
/// probability `trigger_fidelity`; everything else answers its true label
/// with probability `clean_accuracy`. Misses return a uniformly drawn wrong
/// label. Randomness is keyed by `(seed, position, input digest)`.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub classes: usize,
    pub trigger_map: HashMap<ImageDigest, Label>,
    pub truth: HashMap<ImageDigest, Label>,
    pub trigger_fidelity: f64,
    pub clean_accuracy: f64,
    pub seed: u64,
}

impl OracleModel {
    /// A noiseless oracle that knows the dataset's true labels and nothing else.
    pub fn clean(dataset: &SyntheticDataset, seed: u64) -> Self {
        let truth = dataset
            .images
            .iter()
            .zip(&dataset.labels)
            .map(|(img, &l)| (img.digest(), l))
            .collect();
        Self {
            classes: dataset.classes,
            trigger_map: HashMap::new(),
            truth,
            trigger_fidelity: 1.0,
            clean_accuracy: 1.0,
            seed,
        }
    }

    pub fn with_triggers(mut self, triggers: &TriggerSet) -> Self {
        for (t, l) in triggers.labeled() {
            self.trigger_map.insert(t.digest(), l);
        }
        self
    }

    pub fn with_noise(mut self, trigger_fidelity: f64, clean_accuracy: f64) -> Self {
        assert!((0.0..=1.0).contains(&trigger_fidelity));
        assert!((0.0..=1.0).contains(&clean_accuracy));
        self.trigger_fidelity = trigger_fidelity;
        self.clean_accuracy = clean_accuracy;
        self
    }

    /// True label of `x`: the dataset label if known, else a hash-derived one.
    pub fn true_label(&self, digest: &ImageDigest) -> Label {
        self.truth
            .get(digest)
            .copied()
            .unwrap_or_else(|| label_mod(digest, self.classes as u32))
    }
}

impl BlackBoxModel for OracleModel {
    fn query(&self, x: &Image, position: u64) -> Label {
        let digest = x.digest();
        let (target, p) = match self.trigger_map.get(&digest) {
            Some(&l) => (l, self.trigger_fidelity),
            None => (self.true_label(&digest), self.clean_accuracy),
        };
        let mut rng = rng_for(
            "oracle",
            &[&self.seed.to_le_bytes(), &position.to_le_bytes(), &digest],
        );
        if p >= 1.0 || rng.gen_bool(p) {
            return target;
        }
        if self.classes < 2 {
            return target;
        }
        let k = rng.gen_range(0..self.classes as u32 - 1);
        Label(if k >= target.0 { k + 1 } else { k })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, gen_dataset};
    use crate::scheme::SchemeParams;
    use crate::triggers::reverse_select;

    fn labeled_triggers(ds: &SyntheticDataset) -> TriggerSet {
        let mut ts = reverse_select(ds, 8, 4).unwrap();
        ts.labels = Some((0..8).map(|i| Label(i % 10)).collect());
        ts
    }

    #[test]
    fn noiseless_oracle_is_exact() {
        let ds = gen_dataset(1, 20, &SchemeParams::default()).unwrap();
        let ts = labeled_triggers(&ds);
        let o = OracleModel::clean(&ds, 0).with_triggers(&ts);
        assert_eq!(accuracy(&o, ts.labeled()), 1.0);
        let untouched: Vec<_> = ds
            .test_pairs()
            .filter(|(img, _)| !o.trigger_map.contains_key(&img.digest()))
            .collect();
        assert_eq!(accuracy(&o, untouched), 1.0);
    }

    #[test]
    fn zero_fidelity_never_answers_assigned() {
        let ds = gen_dataset(1, 20, &SchemeParams::default()).unwrap();
        let ts = labeled_triggers(&ds);
        let o = OracleModel::clean(&ds, 0)
            .with_triggers(&ts)
            .with_noise(0.0, 1.0);
        for pos in 0..50 {
            for (t, l) in ts.labeled() {
                assert_ne!(o.query(t, pos), l);
            }
        }
    }

    #[test]
    fn clean_accuracy_is_binomial() {
        // 10^4 queries at p = 0.9: 3 sigma = 0.009, so [0.891, 0.909] is
        // inside the required [0.885, 0.915].
        let ds = gen_dataset(1, 10, &SchemeParams::default()).unwrap();
        let o = OracleModel::clean(&ds, 77).with_noise(1.0, 0.9);
        let (img, label) = (&ds.images[0], ds.labels[0]);
        let hits = (0..10_000u64).filter(|&i| o.query(img, i) == label).count();
        let acc = hits as f64 / 10_000.0;
        assert!((0.885..=0.915).contains(&acc), "acc {acc}");
        assert_eq!(o.query(img, 5), o.query(img, 5));
    }
}
