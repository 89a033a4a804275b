//! Training: He initialization, weighted cross-entropy, Adam, the stratified
//! train/validation split, flip augmentation, early stopping and `fit`.

mod adam;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{class_weighted_batch_loss, cross_entropy, softmax_cross_entropy_grad, LOG_CLAMP};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledDataset};
use crate::layers::{softmax_rows, Mode};
use crate::model::{Checkpoint, ModelGraph};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Gestures that get a higher loss weight by default because they are
/// easily confused with their neighbours.
pub const CONFUSABLE_GESTURES: [&str; 3] = ["one", "three", "four"];
pub const CONFUSABLE_WEIGHT: f64 = 1.2;

/// Samples a tensor of the given shape from `Normal(0, √(2/fan_in))`.
pub fn he_init<T: Scalar>(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::config("fan_in must be at least 1"));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std dev");
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(dims.to_vec(), data)
}

/// Weights of 1 for every class except the confusable gestures, which get
/// `weight`.
pub fn gesture_class_weights(class_names: &[String], weight: f64) -> Vec<f64> {
    class_names
        .iter()
        .map(|n| {
            if CONFUSABLE_GESTURES.contains(&n.as_str()) {
                weight
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    /// One weight per class; `None` means all 1.
    pub class_weights: Option<Vec<f64>>,
    pub hflip_prob: f64,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 25,
            patience: 3,
            adam: AdamConfig::default(),
            class_weights: None,
            hflip_prob: 0.5,
            split_fraction: 0.85,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let checks = [
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.patience >= 1, "patience must be at least 1"),
            (
                a.learning_rate.is_finite() && a.learning_rate > 0.0,
                "learning rate must be positive",
            ),
            ((0.0..1.0).contains(&a.beta1), "beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&a.beta2), "beta2 must lie in [0, 1)"),
            (a.epsilon.is_finite() && a.epsilon > 0.0, "epsilon must be positive"),
            ((0.0..=1.0).contains(&self.hflip_prob), "hflip_prob must lie in [0, 1]"),
            (
                self.split_fraction > 0.0 && self.split_fraction < 1.0,
                "split_fraction must lie in (0, 1)",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::config(*msg));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                return Err(Error::config("class weights must all be positive"));
            }
        }
        Ok(())
    }

    /// Class weights resolved for `num_classes`.
    pub fn weights_for(&self, num_classes: usize) -> Result<Vec<f64>> {
        match &self.class_weights {
            None => Ok(vec![1.0; num_classes]),
            Some(w) if w.len() == num_classes => Ok(w.clone()),
            Some(w) => Err(Error::config(format!(
                "{} class weights for {num_classes} classes",
                w.len()
            ))),
        }
    }
}

/// Stratified split: each class contributes `round(fraction · n_c)` items
/// (clamped to `1..=n_c-1`) to the training side. Both sides are shuffled.
pub fn split_dataset(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("split fraction must lie in (0, 1)"));
    }
    if ds.is_empty() {
        return Err(Error::input("cannot split an empty dataset"));
    }
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, (_, c)) in ds.items().iter().enumerate() {
        by_class[*c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let n = idx.len();
        if n < 2 {
            return Err(Error::config(format!(
                "class '{}' has {n} example(s); at least 2 are needed to split",
                ds.class_names()[c]
            )));
        }
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Scales an 8-bit image to `[0, 1]`, giving an `(H, W, 3)` tensor.
pub fn normalize(img: &Image) -> Tensor<f32> {
    let data = img.data().iter().map(|&v| normalize_pixel(v)).collect();
    Tensor::from_vec([img.height(), img.width(), 3], data).expect("image buffer matches its extent")
}

#[inline]
pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Stacks normalized images into an `(N, H, W, 3)` batch.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut extent = None;
    let mut n = 0;
    for img in images {
        let e = (img.height(), img.width());
        if *extent.get_or_insert(e) != e {
            return Err(Error::input("images in a batch must share one size"));
        }
        data.extend(img.data().iter().map(|&v| normalize_pixel(v)));
        n += 1;
    }
    let Some((h, w)) = extent else {
        return Err(Error::input("empty batch"));
    };
    Tensor::from_vec([n, h, w, 3], data)
}

/// Mirrors every image of an NHWC batch left-right with probability
/// `hflip_prob`, independently.
pub fn augment_batch<T: Scalar>(batch: &mut Tensor<T>, hflip_prob: f64, rng: &mut impl Rng) -> Result<()> {
    let &[n, h, w, c] = batch.dims() else {
        return Err(Error::shape(format!("augment expects an NHWC batch, got {}", batch.shape())));
    };
    let per_image = h * w * c;
    for i in 0..n {
        if hflip_prob > 0.0 && rng.random::<f64>() < hflip_prob {
            hflip(&mut batch.data_mut()[i * per_image..(i + 1) * per_image], h, w, c);
        }
    }
    Ok(())
}

/// In-place left-right mirror of one `(H, W, C)` image.
pub fn hflip<T: Copy>(image: &mut [T], h: usize, w: usize, c: usize) {
    for row in image.chunks_exact_mut(w * c).take(h) {
        for x in 0..w / 2 {
            let (l, r) = (x * c, (w - 1 - x) * c);
            for k in 0..c {
                row.swap(l + k, r + k);
            }
        }
    }
}

/// Stops once validation loss has risen, relative to the epoch right
/// before it, for `patience` epochs in a row.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    previous: Option<f64>,
    rises: usize,
    best: Option<(usize, f64)>,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            previous: None,
            rises: 0,
            best: None,
            seen: 0,
        }
    }

    /// Records one epoch's validation loss; returns true when training
    /// should stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.seen += 1;
        match self.previous {
            Some(p) if val_loss > p => self.rises += 1,
            _ => self.rises = 0,
        }
        self.previous = Some(val_loss);
        if self.best.is_none_or(|(_, b)| val_loss < b) {
            self.best = Some((self.seen, val_loss));
        }
        self.rises >= self.patience
    }

    /// 1-based epoch with the lowest loss seen so far, and that loss.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Unweighted mean cross-entropy and accuracy over `ds`, evaluated in
/// inference mode in chunks of `batch` images.
pub fn loss_and_accuracy(graph: &ModelGraph<f32>, ds: &LabeledDataset, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::input("empty dataset"));
    }
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in ds.items().chunks(batch.max(1)) {
        let x = image_batch(chunk.iter().map(|(img, _)| img))?;
        let probs = graph.predict_batch(&x)?;
        let c = probs.dims()[1];
        for (row, (_, y)) in probs.data().chunks_exact(c).zip(chunk) {
            loss -= (row[*y] as f64).max(LOG_CLAMP).ln();
            correct += (argmax(row) == *y) as usize;
        }
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `start` on `train`, validating on `val` after each epoch, and
/// returns the weights (with optimizer state) from the epoch with the lowest
/// validation loss. Single-threaded and bit-reproducible for a fixed seed.
pub fn fit(
    start: Checkpoint,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    fit_with(start, train, val, cfg, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with(
    start: Checkpoint,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    let gc = *start.graph.config();
    let weights: Vec<f32> = cfg
        .weights_for(gc.num_classes)?
        .into_iter()
        .map(|w| w as f32)
        .collect();
    for (name, ds) in [("training", train), ("validation", val)] {
        if ds.is_empty() {
            return Err(Error::input(format!("{name} set is empty")));
        }
        if ds.num_classes() != gc.num_classes {
            return Err(Error::input(format!(
                "{name} set has {} classes, model has {}",
                ds.num_classes(),
                gc.num_classes
            )));
        }
        if ds.extent() != Some((gc.input_size, gc.input_size)) {
            return Err(Error::input(format!(
                "{name} images are not {0}x{0}",
                gc.input_size
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = start;
    let mut best = current.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let first_epoch = current.epoch;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            let items: Vec<&(Image, usize)> = batch_idx.iter().map(|&i| &train.items()[i]).collect();
            let labels: Vec<usize> = items.iter().map(|(_, y)| *y).collect();
            let mut x = image_batch(items.iter().map(|(img, _)| img))?;
            augment_batch(&mut x, cfg.hflip_prob, &mut rng)?;

            let (logits, trace) = current.graph.forward_train(&x, &mut Mode::Train(&mut rng))?;
            let probs = softmax_rows(&logits)?;
            let loss = class_weighted_batch_loss(&probs, &labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            loss_sum += loss as f64 * labels.len() as f64;
            let c = gc.num_classes;
            correct += probs
                .data()
                .chunks_exact(c)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();

            let dlogits = softmax_cross_entropy_grad(&probs, &labels, &weights)?;
            let grads = current.graph.backward(&trace, &dlogits)?;
            let mut params = current.graph.params_mut();
            adam_step(&mut params, &grads, &mut current.optimizer, &cfg.adam)?;
        }

        let (val_loss, val_acc) = loss_and_accuracy(&current.graph, val, 64)?;
        current.epoch = first_epoch + epoch as u32;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            metrics.train_loss,
            metrics.train_acc,
            val_loss,
            val_acc
        );
        on_epoch(&metrics);
        history.epochs.push(metrics);

        let stop = stopper.observe(val_loss);
        if stopper.best().map(|(e, _)| e) == Some(epoch) {
            current.best_val_loss = val_loss;
            best = current.clone();
        }
        if stop {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best().map(|(e, _)| e).unwrap_or(0);
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};
    use crate::model::GraphConfig;

    #[test]
    fn he_init_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = he_init(&[100_000], 2, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let sd = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 1.0).abs() < 0.02, "sd = {sd}");
        assert!(mean.abs() < 0.02);

        let a: Tensor<f32> = he_init(&[4, 4], 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Tensor<f32> = he_init(&[4, 4], 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(he_init::<f32>(&[2], 0, &mut rng).is_err());
    }

    #[test]
    fn gesture_weights() {
        let names: Vec<String> = ["five", "four", "one", "three", "two"].map(String::from).to_vec();
        assert_eq!(gesture_class_weights(&names, 1.2), vec![1.0, 1.2, 1.2, 1.2, 1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { split_fraction: 1.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { class_weights: Some(vec![1.0, 0.0]), ..Default::default() },
            TrainConfig { hflip_prob: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        let cfg = TrainConfig { class_weights: Some(vec![1.0; 3]), ..Default::default() };
        assert!(cfg.weights_for(5).is_err());
    }

    fn tiny_dataset(per_class: usize, classes: usize) -> LabeledDataset {
        let items = (0..classes * per_class)
            .map(|i| (Image::filled(2, 2, [i as u8, 0, 0]).unwrap(), i % classes))
            .collect();
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        LabeledDataset::new(items, names).unwrap()
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let ds = tiny_dataset(20, 5);
        let (tr, va) = split_dataset(&ds, 0.85, 1).unwrap();
        assert_eq!(tr.class_counts(), vec![17; 5]);
        assert_eq!(va.class_counts(), vec![3; 5]);
        let mut all: Vec<u8> = tr.items().iter().chain(va.items()).map(|(img, _)| img.data()[0]).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<u8>>());

        let one = tiny_dataset(100, 1);
        let (tr, va) = split_dataset(&one, 0.85, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (85, 15));

        let again = split_dataset(&ds, 0.85, 1).unwrap();
        assert_eq!(again.0.items(), split_dataset(&ds, 0.85, 1).unwrap().0.items());
        assert!(matches!(split_dataset(&tiny_dataset(1, 3), 0.85, 0), Err(Error::Config(_))));
    }

    #[test]
    fn flips() {
        let data: Vec<f32> = (0..2 * 3 * 3 * 2).map(|v| v as f32).collect();
        let orig = Tensor::from_vec([2, 3, 3, 2], data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = orig.clone();
        augment_batch(&mut t, 0.0, &mut rng).unwrap();
        assert_eq!(t, orig);
        augment_batch(&mut t, 1.0, &mut rng).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    for c in 0..2 {
                        assert_eq!(t.get(&[n, y, x, c]), orig.get(&[n, y, 2 - x, c]));
                    }
                }
            }
        }
        augment_batch(&mut t, 1.0, &mut rng).unwrap();
        assert_eq!(t, orig);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_pixel(0), 0.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert!((normalize_pixel(51) - 0.2).abs() < 1e-7);
        let t = normalize(&Image::filled(3, 2, [128; 3]).unwrap());
        assert_eq!(t.dims(), [2, 3, 3]);
        assert!(t.data().iter().all(|&v| (v - 0.50196).abs() < 1e-5));
    }

    #[test]
    fn early_stopping_sequences() {
        let mut s = EarlyStopping::new(3);
        let seq = [1.0, 0.8, 0.7, 0.72, 0.75, 0.78];
        let stops: Vec<bool> = seq.iter().map(|&l| s.observe(l)).collect();
        assert_eq!(stops, [false, false, false, false, false, true]);
        assert_eq!(s.best(), Some((3, 0.7)));

        let mut s = EarlyStopping::new(3);
        for e in 0..25 {
            assert!(!s.observe(1.0 / (e + 1) as f64));
        }
        assert_eq!(s.best().unwrap().0, 25);

        // A dip resets the count.
        let mut s = EarlyStopping::new(2);
        let stops: Vec<bool> = [1.0, 1.1, 1.0, 1.1, 1.2].iter().map(|&l| s.observe(l)).collect();
        assert_eq!(stops, [false, false, false, false, true]);
    }

    fn small_config(size: usize, classes: usize) -> GraphConfig {
        GraphConfig {
            conv1_filters: 4,
            conv2_filters: 4,
            dense_units: 8,
            ..GraphConfig::new(size, classes)
        }
    }

    #[test]
    fn fit_is_reproducible_and_keeps_best() {
        let ds = synthesize(&SynthConfig::new(6, 16, 5)).unwrap();
        let (tr, va) = split_dataset(&ds, 0.7, 5).unwrap();
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 8,
            seed: 11,
            ..Default::default()
        };
        let start = Checkpoint::fresh(ModelGraph::init(small_config(16, 5), 1).unwrap());
        let (a, ha) = fit(start.clone(), &tr, &va, &cfg).unwrap();
        let (b, hb) = fit(start, &tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let min = ha.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_loss, min);
        assert_eq!(ha.epochs[ha.best_epoch - 1].val_loss, min);
        assert_eq!(a.epoch as usize, ha.best_epoch);
        assert!(ha.epochs.len() <= 4);
        let (l, _) = loss_and_accuracy(&a.graph, &va, 7).unwrap();
        assert!((l - min).abs() < 1e-9);
        assert!(ha.to_csv().starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n1,"));
    }

    #[test]
    fn fit_rejects_mismatched_data() {
        let ds = synthesize(&SynthConfig::new(4, 16, 5)).unwrap();
        let (tr, va) = split_dataset(&ds, 0.5, 0).unwrap();
        let start = Checkpoint::fresh(ModelGraph::init(small_config(20, 5), 1).unwrap());
        assert!(matches!(fit(start, &tr, &va, &TrainConfig::default()), Err(Error::Input(_))));
    }
}
