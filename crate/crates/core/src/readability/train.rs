use fundus_nn::{Graph, Optimizer, Reduction, RmsProp, Tensor};
use ndarray::{Array2, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_class_weights, DatasetSplit, FundusSample};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::image::ImageTensor;

use super::labels::ReadabilityLabels;
use super::model::{augment, preprocess, ClassifierConfig, ClassifierModel};

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// Class-weighted binary cross-entropy averaged over batch and labels.
/// `probs` and `targets` are (N, 4); a target of 1 takes `w_pos`, 0 takes
/// `w_neg`.
pub fn weighted_bce_loss(probs: &Array2<f64>, targets: &Array2<f64>, weights: &[(f64, f64); 4]) -> Result<f64> {
    if probs.dim() != targets.dim() || probs.ncols() != 4 {
        return Err(invalid(format!(
            "expected matching (N, 4) arrays, got {:?} and {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    ensure_finite("probabilities", probs.iter())?;
    ensure_finite("targets", targets.iter())?;
    let mut total = 0.0;
    for (((_, j), &p), &t) in probs.indexed_iter().zip(targets.iter()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let w = if t >= 0.5 { weights[j].0 } else { weights[j].1 };
        total += w * -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    Ok(total / probs.len() as f64)
}

fn weight_tensor(labels: &[ReadabilityLabels], weights: &[(f64, f64); 4]) -> (Tensor, Tensor) {
    let n = labels.len();
    let mut t = Tensor::zeros(IxDyn(&[n, 4]));
    let mut w = Tensor::zeros(IxDyn(&[n, 4]));
    for (i, l) in labels.iter().enumerate() {
        for (j, bit) in l.bits().into_iter().enumerate() {
            t[[i, j]] = if bit { 1.0 } else { 0.0 };
            w[[i, j]] = if bit { weights[j].0 } else { weights[j].1 };
        }
    }
    (t, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the split has no validation samples
    pub val_loss: Option<f64>,
}

/// Trains a classifier with RMSprop on the training indices of `split`,
/// reporting the weighted loss on the validation indices after every epoch.
pub fn train_readability(
    config: &ClassifierConfig,
    split: &DatasetSplit,
    corpus: &[FundusSample],
    seed: u64,
) -> Result<(ClassifierModel, Vec<EpochStats>)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let mut model = ClassifierModel::new(config.clone(), seed)?;
    let prep = |idx: &[usize]| -> Result<Vec<(ImageTensor, ReadabilityLabels)>> {
        idx.iter()
            .map(|&i| {
                let s = corpus.get(i).ok_or_else(|| invalid(format!("split index {i} out of range")))?;
                Ok((preprocess(&s.image, config.input_size)?, s.labels))
            })
            .collect()
    };
    let train = prep(&split.train)?;
    let val = prep(&split.val)?;
    let weights = match config.class_weights {
        Some(w) => w,
        None => {
            let labels: Vec<_> = train.iter().map(|(_, l)| *l).collect();
            compute_class_weights(&labels).weights
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6461);
    let mut opt = RmsProp::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let imgs: Vec<ImageTensor> = batch
                .iter()
                .map(|&i| augment(&train[i].0, &config.augment, &mut rng))
                .collect();
            let labels: Vec<_> = batch.iter().map(|&i| train[i].1).collect();
            let refs: Vec<&ImageTensor> = imgs.iter().collect();
            let (t, w) = weight_tensor(&labels, &weights);
            let g = Graph::new(&model.params);
            let p = g.sigmoid(model.logits(&g, g.input(ImageTensor::batch(&refs)?)));
            let loss = g.binary_cross_entropy(p, &t, Some(&w), BCE_EPS, Reduction::Mean);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss became {value}"),
                });
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss).params();
            drop(g);
            opt.step(&mut model.params, &grads);
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let refs: Vec<&ImageTensor> = val.iter().map(|(im, _)| im).collect();
            let probs = model.forward(&refs)?;
            let labels: Vec<_> = val.iter().map(|(_, l)| *l).collect();
            let (t, _) = weight_tensor(&labels, &weights);
            let t = t.into_dimensionality::<ndarray::Ix2>().expect("(N, 4)");
            Some(weighted_bce_loss(&probs, &t, &weights)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
        };
        log::info!("readability epoch {epoch}: train {:.5} val {:?}", stats.train_loss, stats.val_loss);
        history.push(stats);
    }
    model.training.epochs_run = config.epochs;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::LN_2;

    const ONES: [(f64, f64); 4] = [(1.0, 1.0); 4];

    #[test]
    fn loss_spot_values() {
        let t = array![[1.0, 0.0, 1.0, 0.0]];
        let perfect = weighted_bce_loss(&t, &t, &ONES).unwrap();
        assert!(perfect <= 1.2e-7, "{perfect}");
        let half = Array2::from_elem((3, 4), 0.5);
        let t = array![[1.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]];
        assert!((weighted_bce_loss(&half, &t, &ONES).unwrap() - LN_2).abs() < 1e-12);
        let w = [(5.0, 1.0); 4];
        let loss = weighted_bce_loss(&Array2::from_elem((2, 4), 0.5), &Array2::ones((2, 4)), &w).unwrap();
        assert!((loss - 3.465736).abs() < 1e-6);
        assert!((5.0 * LN_2 - 3.465736).abs() < 1e-6);
    }

    #[test]
    fn rejects_nan_and_bad_shapes() {
        let mut p = Array2::from_elem((1, 4), 0.5);
        let t = Array2::zeros((1, 4));
        p[[0, 2]] = f64::NAN;
        assert!(matches!(weighted_bce_loss(&p, &t, &ONES), Err(Error::Numeric(_))));
        assert!(weighted_bce_loss(&Array2::zeros((1, 3)), &Array2::zeros((1, 3)), &ONES).is_err());
    }

    #[test]
    fn unit_weights_match_plain_bce() {
        let p = array![[0.1, 0.7, 0.3, 0.95], [0.6, 0.2, 0.8, 0.5]];
        let t = array![[0.0, 1.0, 1.0, 1.0], [1.0, 0.0, 0.0, 1.0]];
        let plain: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&p, &t): (&f64, &f64)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 8.0;
        assert_eq!(weighted_bce_loss(&p, &t, &ONES).unwrap(), plain);
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let p = array![[0.1, 0.7, 0.3, 0.95], [0.6, 0.2, 0.8, 0.5]];
        let labels = [
            ReadabilityLabels::from_bits([false, true, true, true]),
            ReadabilityLabels::from_bits([true, false, false, true]),
        ];
        let w = [(2.0, 0.5), (1.0, 1.0), (0.7, 3.0), (1.5, 1.5)];
        let (t, wt) = weight_tensor(&labels, &w);
        let g = Graph::detached();
        let loss = g.binary_cross_entropy(g.input(p.clone().into_dyn()), &t, Some(&wt), BCE_EPS, Reduction::Mean);
        let t2 = t.into_dimensionality::<ndarray::Ix2>().unwrap();
        let scalar = weighted_bce_loss(&p, &t2, &w).unwrap();
        assert!((g.scalar(loss) - scalar).abs() < 1e-12);
    }
}
