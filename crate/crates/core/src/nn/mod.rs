//! Bias-free dense networks trained with SGD on a softmax + binary
//! cross-entropy objective.
//!
//! Weight matrices are stored `fan_in x fan_out`: row `i` holds the outgoing
//! weights of presynaptic neuron `i`. Hidden layers use ReLU with inverted
//! dropout at training time; the output layer is a row-wise softmax.

mod snapshot;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::Section;
use crate::data::DatasetSlice;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::seed::{self, Rng};

pub use snapshot::{SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

/// Layer sizes of the network used throughout the experiments.
pub const PAPER_LAYERS: [usize; 4] = [784, 1200, 1200, 10];

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Initial supervised training: lr 0.06, 5 epochs, batch 64, dropout 0.25.
    pub fn baseline() -> Self {
        Self {
            learning_rate: 0.06,
            epochs: 5,
            batch_size: 64,
            dropout_rate: 0.25,
            seed: 0,
        }
    }

    /// Single post-sleep fine-tuning epoch at lr 0.02.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 0.02,
            epochs: 1,
            ..Self::baseline()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new();
        s.set("learning_rate", self.learning_rate);
        s.set("epochs", self.epochs);
        s.set("batch_size", self.batch_size);
        s.set("dropout_rate", self.dropout_rate);
        s.set("seed", self.seed);
        s
    }

    /// `base` with every key present in `s` overridden.
    pub fn from_section_over(base: &Self, s: &Section) -> Result<Self> {
        let mut cfg = base.clone();
        if let Some(v) = s.get("learning_rate")? {
            cfg.learning_rate = v;
        }
        if let Some(v) = s.get("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = s.get("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = s.get("dropout_rate")? {
            cfg.dropout_rate = v;
        }
        if let Some(v) = s.get("seed")? {
            cfg.seed = v;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::input(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Inverted-dropout masks for the hidden layers of one minibatch.
///
/// Entries are `0` for dropped units and `1 / (1 - rate)` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    masks: Vec<Matrix<T>>,
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn sample(mlp: &Mlp<T>, batch_rows: usize, rate: f64, rng: &mut Rng) -> Self {
        let keep = T::lit(1.0 / (1.0 - rate));
        let masks = mlp.layer_sizes[1..mlp.layer_sizes.len() - 1]
            .iter()
            .map(|&width| {
                Matrix::from_fn(batch_rows, width, |_, _| {
                    if rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
            })
            .collect();
        Self { masks }
    }

    pub fn from_masks(masks: Vec<Matrix<T>>) -> Self {
        Self { masks }
    }

    pub fn masks(&self) -> &[Matrix<T>] {
        &self.masks
    }
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network from explicit weights, checking that shapes chain.
    pub fn from_weights(weights: Vec<Matrix<T>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::input("a network needs at least one weight layer"));
        }
        let mut layer_sizes = vec![weights[0].rows()];
        for (k, w) in weights.iter().enumerate() {
            if w.rows() != layer_sizes[k] {
                return Err(Error::shape(
                    "Mlp::from_weights",
                    format!("layer {k} fan_in {}", layer_sizes[k]),
                    w.rows(),
                ));
            }
            if w.rows() == 0 || w.cols() == 0 {
                return Err(Error::input("layer sizes must be >= 1"));
            }
            layer_sizes.push(w.cols());
        }
        Ok(Self {
            layer_sizes,
            weights,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    /// Mutable access to the row-major data of weight layer `layer`.
    pub fn weight_data_mut(&mut self, layer: usize) -> &mut [T] {
        self.weights[layer].data_mut()
    }

    pub(crate) fn weights_mut_internal(&mut self) -> &mut [Matrix<T>] {
        &mut self.weights
    }

    pub fn num_weight_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn num_synapses(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum()
    }

    fn check_batch(&self, batch: &Matrix<T>, op: &'static str) -> Result<()> {
        if batch.cols() != self.input_size() {
            return Err(Error::shape(
                op,
                format!("{} input columns", self.input_size()),
                batch.cols(),
            ));
        }
        Ok(())
    }

    /// Activations of every layer, input included at index 0. The last entry
    /// holds raw logits when `softmax` is false.
    fn propagate(
        &self,
        batch: &Matrix<T>,
        dropout: Option<&DropoutMasks<T>>,
        softmax: bool,
    ) -> Result<Vec<Matrix<T>>> {
        self.check_batch(batch, "forward")?;
        if let Some(d) = dropout {
            let expected = self.weights.len() - 1;
            if d.masks.len() != expected {
                return Err(Error::shape("forward dropout", expected, d.masks.len()));
            }
            for (k, m) in d.masks.iter().enumerate() {
                let want = (batch.rows(), self.layer_sizes[k + 1]);
                if m.shape() != want {
                    return Err(Error::shape(
                        "forward dropout",
                        format!("{want:?}"),
                        format!("{:?}", m.shape()),
                    ));
                }
            }
        }

        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(batch.clone());
        for (k, w) in self.weights.iter().enumerate() {
            let mut z = acts[k].matmul(w)?;
            if k < last {
                z.map_inplace(|v| if v > T::zero() { v } else { T::zero() });
                if let Some(d) = dropout {
                    for (v, m) in z.data_mut().iter_mut().zip(d.masks[k].data()) {
                        *v *= *m;
                    }
                }
            } else if softmax {
                softmax_rows(&mut z);
            }
            if !z.is_finite() {
                return Err(Error::Numeric {
                    what: "activation",
                    layer: k + 1,
                });
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Per-layer activations (input at index 0, softmax probabilities last).
    pub fn forward(
        &self,
        batch: &Matrix<T>,
        dropout: Option<&DropoutMasks<T>>,
    ) -> Result<Vec<Matrix<T>>> {
        self.propagate(batch, dropout, true)
    }

    /// Like [`Mlp::forward`] without dropout, but the last layer holds logits.
    pub fn forward_logits(&self, batch: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        self.propagate(batch, None, false)
    }

    /// Class probabilities for each row of `batch`.
    pub fn probabilities(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(batch, None)?.pop().expect("output layer"))
    }

    /// Argmax class per row; ties resolve to the lowest class id.
    pub fn predict(&self, batch: &Matrix<T>) -> Result<Vec<usize>> {
        let probs = self.probabilities(batch)?;
        Ok(probs.iter_rows().map(argmax).collect())
    }

    /// Loss and per-layer weight gradients of the mean softmax-BCE objective.
    pub fn gradients(
        &self,
        batch: &Matrix<T>,
        one_hot: &Matrix<T>,
        dropout: Option<&DropoutMasks<T>>,
    ) -> Result<(T, Vec<Matrix<T>>)> {
        if one_hot.shape() != (batch.rows(), self.output_size()) {
            return Err(Error::shape(
                "backward",
                format!("{}x{} targets", batch.rows(), self.output_size()),
                format!("{}x{}", one_hot.rows(), one_hot.cols()),
            ));
        }
        let acts = self.forward(batch, dropout)?;
        let probs = acts.last().expect("output layer");
        let loss = bce_softmax_loss(probs, one_hot)?;

        // dL/dp, then through the softmax Jacobian: dz_k = p_k (g_k - sum_j g_j p_j).
        let scale = T::one() / T::lit((probs.rows() * probs.cols()) as f64);
        let eps = T::lit(PROB_EPS);
        let hi = T::one() - eps;
        let mut delta = Matrix::zeros(probs.rows(), probs.cols());
        for r in 0..probs.rows() {
            let p = probs.row(r);
            let y = one_hot.row(r);
            let g: Vec<T> = p
                .iter()
                .zip(y)
                .map(|(&p, &y)| {
                    if p < eps || p > hi {
                        T::zero()
                    } else {
                        scale * ((T::one() - y) / (T::one() - p) - y / p)
                    }
                })
                .collect();
            let dot: T = g.iter().zip(p).map(|(&g, &p)| g * p).sum();
            for (d, (&g, &p)) in delta.row_mut(r).iter_mut().zip(g.iter().zip(p)) {
                *d = p * (g - dot);
            }
        }

        let mut grads = vec![Matrix::zeros(0, 0); self.weights.len()];
        for k in (0..self.weights.len()).rev() {
            let grad = acts[k].t_matmul(&delta)?;
            if !grad.is_finite() {
                return Err(Error::Numeric {
                    what: "gradient",
                    layer: k,
                });
            }
            grads[k] = grad;
            if k == 0 {
                break;
            }
            let mut upstream = delta.matmul_t(&self.weights[k])?;
            let a = &acts[k];
            match dropout {
                Some(d) => {
                    let mask = &d.masks[k - 1];
                    for ((u, &a), &m) in upstream.data_mut().iter_mut().zip(a.data()).zip(mask.data())
                    {
                        *u = if a > T::zero() { *u * m } else { T::zero() };
                    }
                }
                None => {
                    for (u, &a) in upstream.data_mut().iter_mut().zip(a.data()) {
                        if a <= T::zero() {
                            *u = T::zero();
                        }
                    }
                }
            }
            delta = upstream;
        }
        Ok((loss, grads))
    }

    /// One SGD step on a minibatch. Returns the loss before the update.
    pub fn backward_and_step(
        &mut self,
        batch: &Matrix<T>,
        one_hot: &Matrix<T>,
        cfg: &TrainConfig,
        dropout: Option<&DropoutMasks<T>>,
    ) -> Result<T> {
        let (loss, grads) = self.gradients(batch, one_hot, dropout)?;
        let lr = T::lit(cfg.learning_rate);
        for (w, g) in self.weights.iter_mut().zip(&grads) {
            for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * g;
            }
        }
        Ok(loss)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax applied to every row in place.
pub fn softmax_rows<T: Scalar>(m: &mut Matrix<T>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Mean over batch and classes of the binary cross-entropy between clamped
/// probabilities and one-hot targets.
pub fn bce_softmax_loss<T: Scalar>(probs: &Matrix<T>, one_hot: &Matrix<T>) -> Result<T> {
    if probs.shape() != one_hot.shape() {
        return Err(Error::shape(
            "bce_softmax_loss",
            format!("{:?}", probs.shape()),
            format!("{:?}", one_hot.shape()),
        ));
    }
    let eps = T::lit(PROB_EPS);
    let hi = T::one() - eps;
    let total: T = probs
        .data()
        .iter()
        .zip(one_hot.data())
        .map(|(&p, &y)| {
            let p = p.max(eps).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(total / T::lit(probs.data().len().max(1) as f64))
}

pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l as usize, T::one());
    }
    m
}

/// Bound of the uniform weight distribution as a function of fan-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `sqrt(6 / fan_in)`.
    #[default]
    HeUniform,
    /// `1 / sqrt(fan_in)`; trains markedly slower on small subsets.
    FanInUniform,
}

impl InitScheme {
    fn bound(self, fan_in: usize) -> f64 {
        match self {
            Self::HeUniform => (6.0 / fan_in as f64).sqrt(),
            Self::FanInUniform => 1.0 / (fan_in as f64).sqrt(),
        }
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he_uniform" => Ok(Self::HeUniform),
            "fan_in_uniform" => Ok(Self::FanInUniform),
            other => Err(Error::Config(format!("unknown init scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::HeUniform => "he_uniform",
            Self::FanInUniform => "fan_in_uniform",
        })
    }
}

/// Uniform fan-in initialization: each weight drawn from
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn init_weights<T: Scalar>(layer_sizes: &[usize], seed: u64) -> Result<Mlp<T>> {
    init_weights_with(layer_sizes, seed, InitScheme::HeUniform)
}

pub fn init_weights_with<T: Scalar>(layer_sizes: &[usize], seed: u64, scheme: InitScheme) -> Result<Mlp<T>> {
    if layer_sizes.len() < 2 {
        return Err(Error::input(format!(
            "need at least 2 layers, got {}",
            layer_sizes.len()
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::input("layer sizes must be >= 1"));
    }
    let mut rng = seed::rng(seed);
    let weights = layer_sizes
        .windows(2)
        .map(|pair| {
            let bound = scheme.bound(pair[0]);
            Matrix::from_fn(pair[0], pair[1], |_, _| {
                T::lit(bound * (2.0 * rng.random::<f64>() - 1.0))
            })
        })
        .collect();
    Mlp::from_weights(weights)
}

/// Minibatch SGD over `data`. Returns the mean training loss of each epoch.
///
/// Samples are reshuffled every epoch and the trailing short batch is kept.
pub fn train<T: Scalar>(mlp: &mut Mlp<T>, data: &DatasetSlice<T>, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    mlp.check_batch(data.images(), "train")?;
    if let Some(&bad) = data.labels().iter().find(|&&l| l as usize >= mlp.output_size()) {
        return Err(Error::input(format!(
            "label {bad} exceeds output width {}",
            mlp.output_size()
        )));
    }

    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.images().select_rows(chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let targets = one_hot(&labels, mlp.output_size());
            let masks = (cfg.dropout_rate > 0.0)
                .then(|| DropoutMasks::sample(mlp, chunk.len(), cfg.dropout_rate, &mut rng));
            let loss = mlp.backward_and_step(&batch, &targets, cfg, masks.as_ref())?;
            total += loss.as_f64() * chunk.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(sizes: &[usize], seed: u64) -> Mlp<f64> {
        init_weights(sizes, seed).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let w = vec![Matrix::zeros(4, 3), Matrix::zeros(3, 10)];
        let mlp = Mlp::from_weights(w).unwrap();
        let x = Matrix::from_fn(2, 4, |r, c| (r + c) as f64 / 7.0);
        let acts = mlp.forward(&x, None).unwrap();
        assert!(acts[1].data().iter().all(|&v| v == 0.0));
        for &p in acts[2].data() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn single_output_toy() {
        let w1 = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let w2 = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let mlp = Mlp::from_weights(vec![w1, w2]).unwrap();
        let x = Matrix::new(1, 1, vec![2.0]).unwrap();
        let logits = mlp.forward_logits(&x).unwrap();
        assert_eq!(logits[1].data(), &[2.0, 2.0]);
        assert_eq!(logits[2].data(), &[4.0]);
        assert_eq!(mlp.forward(&x, None).unwrap()[2].data(), &[1.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = toy(&[4, 3, 2], 1);
        let x = Matrix::<f64>::zeros(1, 5);
        assert!(matches!(mlp.forward(&x, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn loss_closed_forms() {
        let mut p = Matrix::zeros(1, 10);
        p.set(0, 0, 1.0);
        let y = p.clone();
        assert!(bce_softmax_loss(&p, &y).unwrap() < 1e-10);

        let u = Matrix::from_fn(3, 10, |_, _| 0.1);
        let y = one_hot::<f64>(&[2, 7, 0], 10);
        let expected = -((0.1f64).ln() + 9.0 * (0.9f64).ln()) / 10.0;
        assert!((bce_softmax_loss(&u, &y).unwrap() - expected).abs() < 1e-14);

        assert!(bce_softmax_loss(&u, &Matrix::zeros(3, 9)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut mlp = toy(&[4, 3, 2], 3);
        let before = mlp.clone();
        let x = Matrix::from_fn(5, 4, |r, c| (r * 4 + c) as f64 / 20.0);
        let y = one_hot(&[0, 1, 1, 0, 1], 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::baseline()
        };
        mlp.backward_and_step(&x, &y, &cfg, None).unwrap();
        assert_eq!(mlp, before);
    }

    #[test]
    fn init_shapes_and_validation() {
        let mlp = toy(&PAPER_LAYERS, 9);
        let shapes: Vec<_> = mlp.weights().iter().map(|w| w.shape()).collect();
        assert_eq!(shapes, vec![(784, 1200), (1200, 1200), (1200, 10)]);
        assert!(init_weights::<f64>(&[3], 0).is_err());
        assert!(init_weights::<f64>(&[3, 0, 2], 0).is_err());
        assert_eq!(toy(&[5, 4], 11), toy(&[5, 4], 11));
        assert_ne!(toy(&[5, 4], 11), toy(&[5, 4], 12));
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::baseline().validate().is_ok());
        let bad = TrainConfig {
            dropout_rate: 1.0,
            ..TrainConfig::baseline()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::baseline()
        };
        assert!(bad.validate().is_err());
    }
}
