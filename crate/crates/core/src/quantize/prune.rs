//! Structured pruning of whole convolution output channels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::model::{Checkpoint, GraphConfig, ModelGraph};
use crate::tensor::Tensor;
use crate::train::{image_batch, AdamState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvTarget {
    Conv1,
    Conv2,
}

impl ConvTarget {
    pub fn label(self) -> &'static str {
        match self {
            ConvTarget::Conv1 => "conv1",
            ConvTarget::Conv2 => "conv2",
        }
    }

    /// Index of the kernel tensor in parameter order.
    fn kernel_index(self) -> usize {
        match self {
            ConvTarget::Conv1 => 0,
            ConvTarget::Conv2 => 2,
        }
    }
}

impl fmt::Display for ConvTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ConvTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1" => Ok(ConvTarget::Conv1),
            "conv2" => Ok(ConvTarget::Conv2),
            _ => Err(Error::config(format!("unknown conv layer '{s}' (expected conv1 or conv2)"))),
        }
    }
}

/// How output channels are scored; the lowest scores are removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranking {
    /// Sum of absolute kernel weights feeding the channel.
    #[default]
    WeightL1,
    /// Mean absolute activation over a representative set.
    ActivationL1,
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ranking::WeightL1 => "weight-l1",
            Ranking::ActivationL1 => "activation-l1",
        })
    }
}

impl FromStr for Ranking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight-l1" => Ok(Ranking::WeightL1),
            "activation-l1" => Ok(Ranking::ActivationL1),
            _ => Err(Error::config(format!(
                "unknown ranking '{s}' (expected weight-l1 or activation-l1)"
            ))),
        }
    }
}

/// Channels to remove from each conv layer, ascending.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub conv1: Vec<usize>,
    pub conv2: Vec<usize>,
    pub ranking: Ranking,
}

impl PruneSpec {
    pub fn channels(&self, target: ConvTarget) -> &[usize] {
        match target {
            ConvTarget::Conv1 => &self.conv1,
            ConvTarget::Conv2 => &self.conv2,
        }
    }

    pub fn validate(&self, config: &GraphConfig) -> Result<()> {
        for (target, width) in [
            (ConvTarget::Conv1, config.conv1_filters),
            (ConvTarget::Conv2, config.conv2_filters),
        ] {
            let ch = self.channels(target);
            if ch.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(format!("{target} prune indices must be strictly ascending")));
            }
            if let Some(&c) = ch.iter().find(|&&c| c >= width) {
                return Err(Error::config(format!("{target} has {width} channels; cannot remove {c}")));
            }
            if ch.len() >= width {
                return Err(Error::config(format!("pruning would remove every channel of {target}")));
            }
        }
        Ok(())
    }
}

fn channel_scores(graph: &ModelGraph<f32>, target: ConvTarget, ranking: Ranking, calib: Option<&LabeledDataset>) -> Result<Vec<f64>> {
    match ranking {
        Ranking::WeightL1 => {
            let k = graph.params()[target.kernel_index()];
            let cout = *k.dims().last().expect("rank-4 kernel");
            let mut scores = vec![0.0f64; cout];
            for row in k.data().chunks_exact(cout) {
                for (s, &w) in scores.iter_mut().zip(row) {
                    *s += w.abs() as f64;
                }
            }
            Ok(scores)
        }
        Ranking::ActivationL1 => {
            let calib = calib.ok_or_else(|| Error::config("activation-l1 ranking requires a representative set"))?;
            if calib.is_empty() {
                return Err(Error::config("representative set is empty"));
            }
            let s = graph.config().input_size;
            if calib.extent() != Some((s, s)) {
                return Err(Error::config(format!("representative images must be {s}x{s}")));
            }
            let mut sums: Vec<f64> = Vec::new();
            let mut rows = 0u64;
            for chunk in calib.items().chunks(32) {
                let x = image_batch(chunk.iter().map(|(img, _)| img))?;
                graph.logits_observed(&x, &mut |label, act| {
                    if label != target.label() {
                        return;
                    }
                    let c = *act.dims().last().expect("NHWC activation");
                    sums.resize(c, 0.0);
                    for px in act.data().chunks_exact(c) {
                        for (s, &v) in sums.iter_mut().zip(px) {
                            *s += v.abs() as f64;
                        }
                    }
                    rows += (act.len() / c) as u64;
                })?;
            }
            Ok(sums.into_iter().map(|s| s / rows as f64).collect())
        }
    }
}

/// Picks `round(fraction · C_out)` lowest-scoring channels for each target.
/// Ties break toward the lower channel index.
pub fn plan_pruning(
    ckpt: &Checkpoint,
    targets: &[(ConvTarget, f64)],
    ranking: Ranking,
    calib: Option<&LabeledDataset>,
) -> Result<PruneSpec> {
    let mut spec = PruneSpec {
        ranking,
        ..PruneSpec::default()
    };
    for &(target, fraction) in targets {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("prune fraction for {target} must lie in [0, 1), got {fraction}")));
        }
        let scores = channel_scores(&ckpt.graph, target, ranking, calib)?;
        let n_remove = (fraction * scores.len() as f64).round() as usize;
        if n_remove >= scores.len() {
            return Err(Error::config(format!(
                "fraction {fraction} would remove all {} channels of {target}",
                scores.len()
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut chosen = order[..n_remove].to_vec();
        chosen.sort_unstable();
        match target {
            ConvTarget::Conv1 => spec.conv1 = chosen,
            ConvTarget::Conv2 => spec.conv2 = chosen,
        }
    }
    spec.validate(ckpt.graph.config())?;
    Ok(spec)
}

/// Copy of `t` keeping only the listed indices along `axis`.
fn keep_along_axis(t: &Tensor<f32>, axis: usize, keep: &[usize]) -> Result<Tensor<f32>> {
    let dims = t.dims();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let len = dims[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        let block = &t.data()[o * len * inner..(o + 1) * len * inner];
        for &k in keep {
            data.extend_from_slice(&block[k * inner..(k + 1) * inner]);
        }
    }
    let mut new_dims = dims.to_vec();
    new_dims[axis] = keep.len();
    Tensor::from_vec(new_dims, data)
}

fn complement(n: usize, removed: &[usize]) -> Vec<usize> {
    (0..n).filter(|c| removed.binary_search(c).is_err()).collect()
}

/// Rewires one parameter-ordered tensor list (weights or an Adam moment).
fn prune_tensor_set(tensors: &[Tensor<f32>], config: &GraphConfig, spec: &PruneSpec) -> Result<Vec<Tensor<f32>>> {
    let keep1 = complement(config.conv1_filters, &spec.conv1);
    let keep2 = complement(config.conv2_filters, &spec.conv2);
    let e = config.final_extent()?;
    let d = config.dense_units;
    let mut out = tensors.to_vec();
    out[0] = keep_along_axis(&tensors[0], 3, &keep1)?;
    out[1] = keep_along_axis(&tensors[1], 0, &keep1)?;
    let conv2 = keep_along_axis(&tensors[2], 2, &keep1)?;
    out[2] = keep_along_axis(&conv2, 3, &keep2)?;
    out[3] = keep_along_axis(&tensors[3], 0, &keep2)?;
    // dense1 rows follow the flatten order (h, w, c).
    let rows = tensors[4].clone().reshape([e, e, config.conv2_filters, d])?;
    out[4] = keep_along_axis(&rows, 2, &keep2)?.reshape([e * e * keep2.len(), d])?;
    Ok(out)
}

/// Removes the channels listed in `spec`, together with their downstream
/// consumers, from the weights and both Adam moments.
pub fn apply_prune(ckpt: &Checkpoint, spec: &PruneSpec) -> Result<Checkpoint> {
    let config = *ckpt.graph.config();
    spec.validate(&config)?;
    let new_config = GraphConfig {
        conv1_filters: config.conv1_filters - spec.conv1.len(),
        conv2_filters: config.conv2_filters - spec.conv2.len(),
        ..config
    };
    let params: Vec<Tensor<f32>> = ckpt.graph.params().into_iter().cloned().collect();
    let graph = ModelGraph::from_param_tensors(new_config, prune_tensor_set(&params, &config, spec)?)?;
    let opt = &ckpt.optimizer;
    let optimizer = AdamState {
        step: opt.step,
        m: prune_tensor_set(&opt.m, &config, spec)?,
        v: prune_tensor_set(&opt.v, &config, spec)?,
    };
    Ok(Checkpoint {
        graph,
        optimizer,
        epoch: ckpt.epoch,
        best_val_loss: ckpt.best_val_loss,
    })
}

/// Ranks and removes channels in one go. Returns the pruned checkpoint and
/// the channels that were removed.
pub fn prune_channels(
    ckpt: &Checkpoint,
    targets: &[(ConvTarget, f64)],
    ranking: Ranking,
    calib: Option<&LabeledDataset>,
) -> Result<(Checkpoint, PruneSpec)> {
    let spec = plan_pruning(ckpt, targets, ranking, calib)?;
    Ok((apply_prune(ckpt, &spec)?, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn small(size: usize) -> Checkpoint {
        let cfg = GraphConfig {
            conv1_filters: 5,
            conv2_filters: 6,
            dense_units: 7,
            ..GraphConfig::new(size, 3)
        };
        Checkpoint::fresh(ModelGraph::init(cfg, 4).unwrap())
    }

    fn random_batch(size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(0.0f32, 1.0).unwrap();
        let data = (0..2 * size * size * 3).map(|_| u.sample(&mut rng)).collect();
        Tensor::from_vec([2, size, size, 3], data).unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let ckpt = small(16);
        let (pruned, spec) =
            prune_channels(&ckpt, &[(ConvTarget::Conv1, 0.0), (ConvTarget::Conv2, 0.0)], Ranking::WeightL1, None)
                .unwrap();
        assert!(spec.conv1.is_empty() && spec.conv2.is_empty());
        assert_eq!(pruned, ckpt);
    }

    #[test]
    fn zero_channels_are_removed_exactly() {
        for target in [ConvTarget::Conv1, ConvTarget::Conv2] {
            let mut ckpt = small(16);
            let dead = 3;
            {
                let mut params = ckpt.graph.params_mut();
                let k = &mut params[target.kernel_index()];
                let cout = *k.dims().last().unwrap();
                for row in k.data_mut().chunks_exact_mut(cout) {
                    row[dead] = 0.0;
                }
            }
            let cout = ckpt.graph.params()[target.kernel_index()].dims()[3];
            let (pruned, spec) =
                prune_channels(&ckpt, &[(target, 1.0 / cout as f64)], Ranking::WeightL1, None).unwrap();
            assert_eq!(spec.channels(target), &[dead]);
            let x = random_batch(16, 1);
            let before = ckpt.graph.logits(&x).unwrap();
            let after = pruned.graph.logits(&x).unwrap();
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before), bits(&after), "{target}");
        }
    }

    #[test]
    fn moments_follow_weights() {
        let mut ckpt = small(16);
        for (i, m) in ckpt.optimizer.m.iter_mut().enumerate() {
            *m = ckpt.graph.params()[i].map(|v| v * 2.0);
        }
        let (pruned, _) = prune_channels(&ckpt, &[(ConvTarget::Conv2, 0.5)], Ranking::WeightL1, None).unwrap();
        for (p, m) in pruned.graph.params().iter().zip(&pruned.optimizer.m) {
            assert_eq!(&p.map(|v| v * 2.0), m);
        }
        assert_eq!(pruned.graph.config().conv2_filters, 3);
        assert_eq!(pruned.graph.param_count(), pruned.graph.config().param_count().unwrap());
    }

    #[test]
    fn activation_ranking_needs_calibration() {
        let ckpt = small(16);
        let err = plan_pruning(&ckpt, &[(ConvTarget::Conv1, 0.2)], Ranking::ActivationL1, None);
        assert!(matches!(err, Err(Error::Config(_))));
        let ds = synthesize(&SynthConfig::new(2, 16, 3)).unwrap();
        let ds = LabeledDataset::new(
            ds.items().iter().map(|(img, c)| (img.clone(), c % 3)).collect(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let spec = plan_pruning(&ckpt, &[(ConvTarget::Conv1, 0.4)], Ranking::ActivationL1, Some(&ds)).unwrap();
        assert_eq!(spec.conv1.len(), 2);
        assert_eq!(spec.ranking, Ranking::ActivationL1);
    }

    #[test]
    fn bad_fractions_and_specs() {
        let ckpt = small(16);
        for f in [1.0, -0.1, 0.95] {
            let r = plan_pruning(&ckpt, &[(ConvTarget::Conv2, f)], Ranking::WeightL1, None);
            assert!(matches!(r, Err(Error::Config(_))), "{f}");
        }
        let spec = PruneSpec {
            conv1: vec![2, 1],
            ..PruneSpec::default()
        };
        assert!(apply_prune(&ckpt, &spec).is_err());
        let spec = PruneSpec {
            conv2: vec![6],
            ..PruneSpec::default()
        };
        assert!(apply_prune(&ckpt, &spec).is_err());
        assert_eq!("activation-l1".parse::<Ranking>().unwrap(), Ranking::ActivationL1);
        assert!("conv3".parse::<ConvTarget>().is_err());
    }
}
