use crate::data::{batch_indices, DomainDataset, PIXEL_MAX};
use crate::error::{Error, Result};
use crate::networks::{add_conv, apply_conv, ConvLayer, Init};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Bound, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Tape, Tensor, Var};

const CONV1: usize = 10;
const CONV2: usize = 20;
const HIDDEN: usize = 50;
const KERNEL: usize = 5;

/// Two conv blocks (5x5 conv, 2x2 max pool, ReLU) followed by a hidden fully
/// connected layer and the class logits. Inputs are divided by 255.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub n_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub params: ParamStore,
    conv1: ConvLayer,
    conv2: ConvLayer,
    fc1: (usize, usize),
    fc2: (usize, usize),
    /// Accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

fn flat_size(image_size: usize) -> Option<usize> {
    let a = image_size.checked_sub(KERNEL - 1)? / 2;
    let b = a.checked_sub(KERNEL - 1)? / 2;
    (b > 0).then_some(CONV2 * b * b)
}

fn add_linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut RngState) -> (usize, usize) {
    let b = 1.0 / (din as f64).sqrt();
    let w = store.push(format!("{name}.weight"), Tensor::uniform(&[dout, din], -b, b, rng), true);
    let bias = store.push(format!("{name}.bias"), Tensor::uniform(&[dout], -b, b, rng), true);
    (w, bias)
}

impl Classifier {
    /// A freshly initialized classifier for `[in_channels, image_size, image_size]` inputs.
    pub fn new(n_classes: usize, in_channels: usize, image_size: usize, seed: u64) -> Result<Self> {
        let flat = flat_size(image_size)
            .ok_or_else(|| Error::config("image_size", format!("{image_size} px is too small for the classifier")))?;
        if n_classes < 2 {
            return Err(Error::DegenerateLabels(format!("{n_classes} classes")));
        }
        let mut rng = RngState::new(seed);
        let mut params = ParamStore::new();
        let conv1 = add_conv(&mut params, "conv1", in_channels, CONV1, KERNEL, 1, 0, false, Init::FanIn, &mut rng);
        let conv2 = add_conv(&mut params, "conv2", CONV1, CONV2, KERNEL, 1, 0, false, Init::FanIn, &mut rng);
        let fc1 = add_linear(&mut params, "fc1", flat, HIDDEN, &mut rng);
        let fc2 = add_linear(&mut params, "fc2", HIDDEN, n_classes, &mut rng);
        Ok(Classifier {
            n_classes,
            in_channels,
            image_size,
            params,
            conv1,
            conv2,
            fc1,
            fc2,
            train_accuracy: 0.0,
        })
    }

    /// Returns `(hidden features [n, 50], logits [n, n_classes])`.
    fn forward(&self, tape: &mut Tape<f32>, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let n = tape.shape(x)[0];
        let mut h = tape.affine(x, 1.0 / PIXEL_MAX, 0.0)?;
        for layer in [&self.conv1, &self.conv2] {
            let c = apply_conv(tape, bound, layer, h)?;
            let p = tape.max_pool2d(c)?;
            h = tape.relu(p)?;
        }
        let d = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, d])?;
        let h = tape.linear(h, bound.var(self.fc1.0), bound.var(self.fc1.1))?;
        let feats = tape.relu(h)?;
        let logits = tape.linear(feats, bound.var(self.fc2.0), bound.var(self.fc2.1))?;
        Ok((feats, logits))
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        match x.shape() {
            [_, c, h, w] if *c == self.in_channels && *h == self.image_size && *w == self.image_size => Ok(()),
            s => Err(Error::config(
                "image_size",
                format!(
                    "classifier expects [n, {0}, {1}, {1}], got {s:?}",
                    self.in_channels, self.image_size
                ),
            )),
        }
    }

    fn eval_batch(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (f, l) = self.forward(&mut tape, &bound, xv)?;
        Ok((tape.value(f).clone(), tape.value(l).clone()))
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.eval_batch(x)?.1)
    }

    /// Penultimate-layer features, `[n, 50]`.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.eval_batch(x)?.0)
    }

    pub fn feature_dim(&self) -> usize {
        HIDDEN
    }

    /// Argmax class of every image of `ds`, evaluated in chunks.
    pub fn predict(&self, ds: &DomainDataset) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ds.len());
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(128) {
            let l = self.logits(&ds.stack(chunk)?)?;
            out.extend(argmax_rows(&l));
        }
        Ok(out)
    }
}

pub(crate) fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of images of `test` whose predicted class equals their label.
pub fn cross_accuracy(clf: &Classifier, test: &DomainDataset) -> Result<f64> {
    test.require_non_empty()?;
    if let Some(&bad) = test.labels().iter().find(|&&l| l >= clf.n_classes) {
        return Err(Error::ClassSpace {
            expected: clf.n_classes,
            found: bad,
        });
    }
    let pred = clf.predict(test)?;
    let correct = pred.iter().zip(test.labels()).filter(|(p, l)| **p == *l).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Cross-entropy training with Adam on shuffled minibatches. The class count
/// is taken from the dataset; fewer than two distinct labels is an error.
pub fn train_classifier(train: &DomainDataset, opts: &ClassifierTraining) -> Result<Classifier> {
    train.require_non_empty()?;
    let distinct = train.histogram().iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::DegenerateLabels(format!(
            "dataset {:?} has {distinct} distinct label(s)",
            train.name
        )));
    }
    let shape = train
        .image_shape()
        .ok_or_else(|| Error::Invalid(format!("dataset {:?} mixes image shapes", train.name)))?
        .to_vec();
    if shape[1] != shape[2] {
        return Err(Error::config("image_size", "classifier inputs must be square"));
    }
    let root = RngState::new(opts.seed);
    let mut clf = Classifier::new(train.n_classes, shape[0], shape[1], root.derive_str("init").seed)?;
    let mut adam = AdamState::new(&clf.params);
    let adam_cfg = AdamConfig::with_lr(opts.lr);
    let labels = train.labels();
    let mut step = 0u64;
    for epoch in 0..opts.epochs {
        let mut order = root.derive_str("order").derive(epoch as u64);
        for idx in batch_indices(train.len(), opts.batch_size, &mut order) {
            step += 1;
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = clf.params.bind(&mut tape, true);
            let x = tape.constant(train.stack(&idx)?);
            let (_, logits) = clf.forward(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite classifier loss".into(),
                });
            }
            tape.backward(loss)?;
            let grads = clf.params.grads(&tape, &bound);
            adam_step(&mut clf.params, &grads, &mut adam, &adam_cfg)?;
        }
    }
    clf.train_accuracy = cross_accuracy(&clf, train)?;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledImage;

    /// Two classes told apart by which half of the image is bright.
    fn halves(n: usize) -> DomainDataset {
        let mut rng = RngState::new(4);
        let images = (0..n)
            .map(|i| {
                let label = i % 2;
                let mut px = Tensor::<f32>::uniform(&[1, 16, 16], 0.0, 60.0, &mut rng);
                for y in 0..16 {
                    for x in 0..8 {
                        px.data_mut()[y * 16 + x + 8 * label] += 150.0;
                    }
                }
                LabeledImage {
                    id: format!("{i}"),
                    label,
                    pixels: px,
                }
            })
            .collect();
        DomainDataset::new("halves", images, 2).unwrap()
    }

    fn opts(seed: u64) -> ClassifierTraining {
        ClassifierTraining {
            epochs: 5,
            lr: 0.001,
            batch_size: 8,
            seed,
        }
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let clf = train_classifier(&halves(64), &opts(1)).unwrap();
        assert!(clf.train_accuracy > 0.95, "{}", clf.train_accuracy);
    }

    #[test]
    fn same_seed_same_params() {
        let ds = halves(16);
        assert_eq!(train_classifier(&ds, &opts(3)).unwrap(), train_classifier(&ds, &opts(3)).unwrap());
        assert_ne!(
            train_classifier(&ds, &opts(3)).unwrap().params,
            train_classifier(&ds, &opts(4)).unwrap().params
        );
    }

    #[test]
    fn one_class_is_rejected() {
        let mut ds = halves(6);
        for img in &mut ds.images {
            img.label = 1;
        }
        assert!(matches!(train_classifier(&ds, &opts(0)), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn class_space_mismatch() {
        let clf = Classifier::new(2, 1, 16, 0).unwrap();
        let mut ds = halves(4);
        ds.n_classes = 3;
        ds.images[0].label = 2;
        assert!(matches!(cross_accuracy(&clf, &ds), Err(Error::ClassSpace { .. })));
    }

    #[test]
    fn flat_size_matches_forward() {
        assert_eq!(flat_size(32), Some(500));
        assert_eq!(flat_size(28), Some(320));
        assert_eq!(flat_size(8), None);
        let clf = Classifier::new(10, 3, 32, 0).unwrap();
        let f = clf.features(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(f.shape(), &[2, 50]);
    }
}
