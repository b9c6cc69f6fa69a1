//! A small ReLU multilayer perceptron trained with softmax cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    /// `out × in`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Layer<T> {
    fn forward(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        self.weights.dot(&x) + &self.bias
    }
}

/// Feed-forward network with ReLU between layers and a softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar + ndarray::LinalgScalar> Mlp<T> {
    /// He-normal hidden layers; the output layer starts at zero so the initial
    /// prediction is exactly uniform.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be non-empty and positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let weights = if i + 1 == n {
                    Array2::from_elem((fan_out, fan_in), T::zero())
                } else {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(normal.sample(&mut rng)))
                };
                Layer {
                    weights,
                    bias: Array1::from_elem(fan_out, T::zero()),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "feature length {} does not match model input {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Pre-activation outputs of every layer plus the input activations.
    fn forward_all(&self, x: &[T]) -> Vec<Array1<T>> {
        let mut acts = vec![Array1::from(x.to_vec())];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(acts[i].view());
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(T::zero()));
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &[T]) -> Result<Array1<T>> {
        self.check(x)?;
        Ok(self.forward_all(x).pop().expect("at least one layer"))
    }

    pub fn probabilities(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, x: &[T]) -> Result<usize> {
        let p = self.probabilities(x)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Mean negative log-likelihood over a dataset.
    pub fn loss(&self, xs: &[Vec<T>], ys: &[usize]) -> Result<T> {
        let mut total = T::zero();
        for (x, &y) in xs.iter().zip(ys) {
            total = total + nll(&self.logits(x)?, y);
        }
        Ok(total / T::count(xs.len().max(1)))
    }

    pub fn accuracy(&self, xs: &[Vec<T>], ys: &[usize]) -> Result<f64> {
        if xs.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (x, &y) in xs.iter().zip(ys) {
            hits += usize::from(self.predict(x)? == y);
        }
        Ok(hits as f64 / xs.len() as f64)
    }

    /// One gradient step on the mean loss of a minibatch.
    pub fn sgd_step(&mut self, batch: &[(&[T], usize)], lr: T) {
        let mut grads: Vec<(Array2<T>, Array1<T>)> = self
            .layers
            .iter()
            .map(|l| (Array2::from_elem(l.weights.raw_dim(), T::zero()), Array1::from_elem(l.bias.len(), T::zero())))
            .collect();
        for &(x, y) in batch {
            let acts = self.forward_all(x);
            let mut delta = Array1::from(softmax(&acts[acts.len() - 1]));
            delta[y] = delta[y] - T::one();
            for i in (0..self.layers.len()).rev() {
                let input = &acts[i];
                let (gw, gb) = &mut grads[i];
                let outer = delta
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&input.view().insert_axis(Axis(0)));
                *gw = &*gw + &outer;
                *gb = &*gb + &delta;
                if i > 0 {
                    let mut back = self.layers[i].weights.t().dot(&delta);
                    // ReLU derivative at the previous layer's output.
                    back.zip_mut_with(input, |b, &a| {
                        if a <= T::zero() {
                            *b = T::zero();
                        }
                    });
                    delta = back;
                }
            }
        }
        let scale = lr / T::count(batch.len().max(1));
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            layer.weights.scaled_add(-scale, &gw);
            layer.bias.scaled_add(-scale, &gb);
        }
    }
}

pub fn softmax<T: Scalar>(z: &Array1<T>) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(z)[y]` computed stably.
pub fn nll<T: Scalar>(z: &Array1<T>, y: usize) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    lse - z[y]
}

/// Per-feature standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn fit(xs: &[Vec<T>]) -> Self {
        let d = xs.first().map_or(0, Vec::len);
        let n = T::count(xs.len().max(1));
        let mut mean = vec![T::zero(); d];
        for x in xs {
            for (m, &v) in mean.iter_mut().zip(x) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); d];
        for x in xs {
            for ((s, &v), &m) in var.iter_mut().zip(x).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > T::lit(1e-8) {
                    sd
                } else {
                    T::one()
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub h1: usize,
    pub h2: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of examples held out for validation.
    pub validation_split: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            h1: 128,
            h2: 64,
            learning_rate: 1e-3,
            epochs: 50,
            batch: 1,
            seed: 0,
            validation_split: 0.2,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.h1 == 0 || self.h2 == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("hidden sizes, batch and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return Err(Error::invalid("validation_split must lie in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: TrainParams,
    pub classes: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub final_train_accuracy: f64,
    pub final_validation_accuracy: Option<f64>,
}

/// Deterministic train/validation split by seeded shuffle.
pub fn split_indices(n: usize, validation_split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = ((n as f64) * validation_split).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Fit standardizer and network on `(xs, ys)`.
pub fn fit<T: Scalar + ndarray::LinalgScalar>(
    xs: &[Vec<T>],
    ys: &[usize],
    classes: usize,
    params: &TrainParams,
) -> Result<(Standardizer<T>, Mlp<T>, TrainReport)> {
    params.validate()?;
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::invalid("one label per example is required"));
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("examples must share a non-zero feature length"));
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    if ys.iter().any(|&y| y >= classes) {
        return Err(Error::invalid("label out of range"));
    }
    let (train_idx, val_idx) = split_indices(xs.len(), params.validation_split, params.seed);
    let raw_train: Vec<Vec<T>> = train_idx.iter().map(|&i| xs[i].clone()).collect();
    let std = Standardizer::fit(&raw_train);
    let train_x: Vec<Vec<T>> = raw_train.iter().map(|x| std.apply(x)).collect();
    let train_y: Vec<usize> = train_idx.iter().map(|&i| ys[i]).collect();
    let val_x: Vec<Vec<T>> = val_idx.iter().map(|&i| std.apply(&xs[i])).collect();
    let val_y: Vec<usize> = val_idx.iter().map(|&i| ys[i]).collect();

    let mut net = Mlp::init(&[d, params.h1, params.h2, classes], params.seed)?;
    let initial_loss = net.loss(&train_x, &train_y)?.as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));
    let lr = T::lit(params.learning_rate);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut epochs = Vec::with_capacity(params.epochs);
    let val_acc = |net: &Mlp<T>| -> Result<Option<f64>> {
        if val_x.is_empty() {
            Ok(None)
        } else {
            net.accuracy(&val_x, &val_y).map(Some)
        }
    };
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(params.batch) {
            let batch: Vec<(&[T], usize)> = chunk.iter().map(|&i| (train_x[i].as_slice(), train_y[i])).collect();
            net.sgd_step(&batch, lr);
        }
        epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: net.loss(&train_x, &train_y)?.as_f64(),
            validation_accuracy: val_acc(&net)?,
        });
    }
    let report = TrainReport {
        params: *params,
        classes,
        train_size: train_x.len(),
        validation_size: val_x.len(),
        initial_loss,
        final_train_accuracy: net.accuracy(&train_x, &train_y)?,
        final_validation_accuracy: val_acc(&net)?,
        epochs,
    };
    Ok((std, net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = Mlp::<f64>::init(&[3, 5, 4, 3], 7).unwrap();
        // Give the zero output layer some signal so every gradient path is exercised.
        for (i, w) in net.layers[2].weights.iter_mut().enumerate() {
            *w = ((i as f64) * 0.37).sin() * 0.5;
        }
        let x = [0.3, -1.2, 0.8];
        let y = 1;
        let loss = |n: &Mlp<f64>| nll(&n.logits(&x).unwrap(), y);
        let mut stepped = net.clone();
        let lr = 1e-3;
        stepped.sgd_step(&[(&x, y)], lr);
        let h = 1e-6;
        for l in 0..net.layers.len() {
            for idx in [(0, 0), (1, 2), (2, 1)] {
                if idx.0 >= net.layers[l].weights.nrows() || idx.1 >= net.layers[l].weights.ncols() {
                    continue;
                }
                let mut plus = net.clone();
                plus.layers[l].weights[idx] += h;
                let mut minus = net.clone();
                minus.layers[l].weights[idx] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = (net.layers[l].weights[idx] - stepped.layers[l].weights[idx]) / lr;
                assert!((numeric - analytic).abs() < 1e-5, "layer {l} {idx:?}: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_prediction() {
        let net = Mlp::<f32>::init(&[4, 8, 8, 4], 1).unwrap();
        let p = net.probabilities(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert_eq!(net.predict(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0);
        assert!(net.predict(&[1.0]).is_err());
    }

    #[test]
    fn standardizer_leaves_constant_features() {
        let s = Standardizer::fit(&[vec![1.0, 2.0], vec![1.0, 4.0]]);
        assert_eq!(s.apply(&[1.0, 3.0]), vec![0.0, 0.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
    }
}
