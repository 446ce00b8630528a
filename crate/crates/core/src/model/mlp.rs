use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{accuracy, BlackBoxModel, SyntheticDataset};
use crate::image::Image;
use crate::scheme::Label;
use crate::seed::{rng_for, rng_from_seed};
use crate::triggers::TriggerSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("empty training data")]
    Empty,
    #[error("trigger set has no labels")]
    Unlabeled,
    #[error("trigger dims {got:?} do not match model input {want:?}")]
    Dimensions {
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("backdoor target {target} not reached; best trigger accuracy {best}")]
    TargetUnreachable { best: f64, target: f64 },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("checkpoint holds {got} floats, sidecar implies {want}")]
    CheckpointSize { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub hidden: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Backdoor fine-tuning recipe: after every `clean_per_trigger` clean batches
/// one trigger batch is taken. Once trigger accuracy reaches
/// `target_accuracy`, `settle_epochs` more mixed epochs let clean accuracy
/// recover. Hitting `max_epochs` below `min_accuracy` is an error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedHyper {
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub clean_per_trigger: usize,
    pub target_accuracy: f64,
    pub min_accuracy: f64,
    pub settle_epochs: usize,
    pub seed: u64,
}

impl Default for EmbedHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_epochs: 60,
            batch_size: 32,
            clean_per_trigger: 4,
            target_accuracy: 1.0,
            min_accuracy: 0.9,
            settle_epochs: 5,
            seed: 0,
        }
    }
}

/// One-hidden-layer ReLU classifier with a softmax head. Inputs are raw pixel
/// values, unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `hidden x input`, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `classes x hidden`, row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub hyper: TrainHyper,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    height: usize,
    width: usize,
    hidden: usize,
    classes: usize,
    hyper: TrainHyper,
    layout: Vec<String>,
}

struct Grads {
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

impl Grads {
    fn zeros(m: &Mlp) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }
}

impl Mlp {
    pub fn init(height: usize, width: usize, classes: usize, hyper: TrainHyper) -> Self {
        let input = height * width;
        let mut rng = rng_from_seed("mlp-init", hyper.seed);
        let s1 = (6.0 / (input + hyper.hidden) as f32).sqrt();
        let s2 = (6.0 / (hyper.hidden + classes) as f32).sqrt();
        let w1 = (0..hyper.hidden * input)
            .map(|_| rng.gen_range(-s1..s1))
            .collect();
        let w2 = (0..classes * hyper.hidden)
            .map(|_| rng.gen_range(-s2..s2))
            .collect();
        Self {
            height,
            width,
            hidden: hyper.hidden,
            classes,
            w1,
            b1: vec![0.0; hyper.hidden],
            w2,
            b2: vec![0.0; classes],
            hyper,
        }
    }

    fn input_len(&self) -> usize {
        self.height * self.width
    }

    fn forward(&self, x: &[f32], hidden: &mut [f32], logits: &mut [f32]) {
        let n = self.input_len();
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * n..(j + 1) * n];
            let z = self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>();
            *h = z.max(0.0);
        }
        for (k, o) in logits.iter_mut().enumerate() {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            *o = self.b2[k]
                + row
                    .iter()
                    .zip(hidden.iter())
                    .map(|(w, h)| w * h)
                    .sum::<f32>();
        }
    }

    pub fn logits(&self, x: &Image) -> Vec<f32> {
        let mut hidden = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        self.forward(x.pixels(), &mut hidden, &mut logits);
        logits
    }

    pub fn predict(&self, x: &Image) -> Label {
        let logits = self.logits(x);
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
        Label(best as u32)
    }

    pub fn all_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// One SGD step on a batch; returns the summed cross-entropy.
    fn sgd_step(&mut self, batch: &[(&Image, Label)], lr: f32) -> f64 {
        let n = self.input_len();
        let mut g = Grads::zeros(self);
        let mut hidden = vec![0.0f32; self.hidden];
        let mut logits = vec![0.0f32; self.classes];
        let mut dh = vec![0.0f32; self.hidden];
        let mut loss = 0.0f64;
        for (x, y) in batch {
            let xs = x.pixels();
            self.forward(xs, &mut hidden, &mut logits);
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for o in logits.iter_mut() {
                *o = (*o - max).exp();
                denom += *o;
            }
            let target = y.value();
            loss -= f64::from((logits[target] / denom).max(1e-30).ln());
            dh.iter_mut().for_each(|d| *d = 0.0);
            for (k, &lk) in logits.iter().enumerate() {
                let dz = lk / denom - if k == target { 1.0 } else { 0.0 };
                g.b2[k] += dz;
                let row = k * self.hidden;
                for j in 0..self.hidden {
                    g.w2[row + j] += dz * hidden[j];
                    dh[j] += dz * self.w2[row + j];
                }
            }
            for j in 0..self.hidden {
                if hidden[j] <= 0.0 {
                    continue;
                }
                let d = dh[j];
                g.b1[j] += d;
                let grow = &mut g.w1[j * n..(j + 1) * n];
                for (gw, v) in grow.iter_mut().zip(xs) {
                    *gw += d * v;
                }
            }
        }
        let scale = lr / batch.len() as f32;
        for (w, d) in self
            .w1
            .iter_mut()
            .zip(&g.w1)
            .chain(self.b1.iter_mut().zip(&g.b1))
            .chain(self.w2.iter_mut().zip(&g.w2))
            .chain(self.b2.iter_mut().zip(&g.b2))
        {
            *w -= scale * d;
        }
        loss
    }

    /// Flat little-endian `f32` weights (`w1, b1, w2, b2`) plus a JSON sidecar
    /// at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut bytes = Vec::new();
        for v in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for x in v.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        let sidecar = Sidecar {
            height: self.height,
            width: self.width,
            hidden: self.hidden,
            classes: self.classes,
            hyper: self.hyper,
            layout: ["w1", "b1", "w2", "b2"].map(String::from).to_vec(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let s: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let floats: Vec<f32> = fs::read(path)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let input = s.height * s.width;
        let sizes = [s.hidden * input, s.hidden, s.classes * s.hidden, s.classes];
        let want: usize = sizes.iter().sum();
        if floats.len() != want {
            return Err(ModelError::CheckpointSize {
                got: floats.len(),
                want,
            });
        }
        let mut rest = floats.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        Ok(Self {
            height: s.height,
            width: s.width,
            hidden: s.hidden,
            classes: s.classes,
            w1: take(sizes[0]),
            b1: take(sizes[1]),
            w2: take(sizes[2]),
            b2: take(sizes[3]),
            hyper: s.hyper,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl BlackBoxModel for Mlp {
    fn query(&self, x: &Image, _position: u64) -> Label {
        self.predict(x)
    }
}

/// Mini-batch SGD on the train split under cross-entropy.
pub fn train(dataset: &SyntheticDataset, hyper: &TrainHyper) -> Result<Mlp, ModelError> {
    if dataset.train.is_empty() {
        return Err(ModelError::Empty);
    }
    let mut model = Mlp::init(dataset.height, dataset.width, dataset.classes, *hyper);
    let mut order = dataset.train.clone();
    for epoch in 0..hyper.epochs {
        let mut rng = rng_for(
            "train-epoch",
            &[&hyper.seed.to_le_bytes(), &epoch.to_le_bytes()],
        );
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&dataset.images[i], dataset.labels[i]))
                .collect();
            loss += model.sgd_step(&batch, hyper.learning_rate);
        }
        if !loss.is_finite() || !model.all_finite() {
            return Err(ModelError::Divergence { epoch });
        }
    }
    Ok(model)
}

/// Fine-tunes `model` on clean batches interleaved with trigger batches.
///
/// Train samples that a trigger was built from are held out of the clean
/// batches so that their true labels do not compete with the backdoor.
pub fn embed_backdoor(
    model: &Mlp,
    triggers: &TriggerSet,
    dataset: &SyntheticDataset,
    hyper: &EmbedHyper,
) -> Result<Mlp, ModelError> {
    if triggers.is_empty() {
        return Ok(model.clone());
    }
    let labels = triggers.labels.as_ref().ok_or(ModelError::Unlabeled)?;
    for t in &triggers.triggers {
        if t.dims() != (model.height, model.width) {
            return Err(ModelError::Dimensions {
                got: t.dims(),
                want: (model.height, model.width),
            });
        }
    }
    let held_out: HashSet<usize> = triggers.sources.iter().flatten().copied().collect();
    let mut clean: Vec<usize> = dataset
        .train
        .iter()
        .copied()
        .filter(|i| !held_out.contains(i))
        .collect();
    let mut trig_order: Vec<usize> = (0..triggers.len()).collect();
    let trig_pairs = || triggers.triggers.iter().zip(labels.iter().copied());

    let mut tuned = model.clone();
    let mut best = accuracy(&tuned, trig_pairs());
    let mut best_model = tuned.clone();
    if best >= hyper.target_accuracy {
        return Ok(tuned);
    }
    let mut trig_cursor = 0usize;
    let mut stop_after: Option<usize> = None;
    for epoch in 0..hyper.max_epochs {
        let mut rng = rng_for(
            "embed-epoch",
            &[&hyper.seed.to_le_bytes(), &epoch.to_le_bytes()],
        );
        clean.shuffle(&mut rng);
        let mut loss = 0.0;
        for (b, chunk) in clean.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&dataset.images[i], dataset.labels[i]))
                .collect();
            loss += tuned.sgd_step(&batch, hyper.learning_rate);
            if (b + 1) % hyper.clean_per_trigger.max(1) == 0 {
                let mut tb = Vec::with_capacity(hyper.batch_size);
                for _ in 0..hyper.batch_size.min(triggers.len()) {
                    if trig_cursor == 0 {
                        trig_order.shuffle(&mut rng);
                    }
                    let i = trig_order[trig_cursor];
                    tb.push((&triggers.triggers[i], labels[i]));
                    trig_cursor = (trig_cursor + 1) % triggers.len();
                }
                loss += tuned.sgd_step(&tb, hyper.learning_rate);
            }
        }
        if !loss.is_finite() || !tuned.all_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        let acc = accuracy(&tuned, trig_pairs());
        if acc > best {
            best = acc;
            best_model = tuned.clone();
        }
        if stop_after.is_none() && acc >= hyper.target_accuracy {
            stop_after = Some(epoch + hyper.settle_epochs);
        }
        if stop_after.is_some_and(|last| epoch >= last) {
            if acc >= hyper.min_accuracy {
                return Ok(tuned);
            }
            break;
        }
    }
    if best >= hyper.min_accuracy {
        Ok(best_model)
    } else {
        Err(ModelError::TargetUnreachable {
            best,
            target: hyper.min_accuracy,
        })
    }
}
