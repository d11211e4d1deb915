//! Independent scalar-loop reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numeric code; weights are plain
//! nested vectors `w[layer][pre][post]`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Weights = Vec<Vec<Vec<f64>>>;

pub const EPS: f64 = 1e-12;

/// Forward pass, one neuron at a time. Returns every layer's activation,
/// the last one being softmax probabilities.
pub fn forward(w: &Weights, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    for (l, layer) in w.iter().enumerate() {
        let prev = acts.last().unwrap();
        let n_out = layer[0].len();
        let mut z = vec![0.0; n_out];
        for j in 0..n_out {
            let mut s = 0.0;
            for i in 0..prev.len() {
                s += prev[i] * layer[i][j];
            }
            z[j] = s;
        }
        if l + 1 < w.len() {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        } else {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in z.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in z.iter_mut() {
                *v /= total;
            }
        }
        acts.push(z);
    }
    acts
}

/// Pre-softmax logits of the last layer, with ReLU between hidden layers.
pub fn logits(w: &Weights, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (l, layer) in w.iter().enumerate() {
        let mut z = vec![0.0; layer[0].len()];
        for (j, zj) in z.iter_mut().enumerate() {
            for (i, ai) in a.iter().enumerate() {
                *zj += ai * layer[i][j];
            }
        }
        if l + 1 < w.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
    }
    a
}

/// Mean over rows and classes of the clamped binary cross-entropy.
pub fn bce(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, &y) in probs.iter().zip(labels) {
        for (k, &p) in row.iter().enumerate() {
            let p = p.clamp(EPS, 1.0 - EPS);
            let t = if k == y { 1.0 } else { 0.0 };
            total += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            n += 1;
        }
    }
    total / n as f64
}

pub fn batch_loss(w: &Weights, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let probs: Vec<Vec<f64>> = xs.iter().map(|x| forward(w, x).pop().unwrap()).collect();
    bce(&probs, labels)
}

/// Central finite-difference gradient of the batch loss.
pub fn numeric_gradient(w: &Weights, xs: &[Vec<f64>], labels: &[usize], eps: f64) -> Weights {
    let mut g = w.clone();
    for l in 0..w.len() {
        for i in 0..w[l].len() {
            for j in 0..w[l][i].len() {
                let mut plus = w.clone();
                plus[l][i][j] += eps;
                let mut minus = w.clone();
                minus[l][i][j] -= eps;
                g[l][i][j] = (batch_loss(&plus, xs, labels) - batch_loss(&minus, xs, labels)) / (2.0 * eps);
            }
        }
    }
    g
}

pub fn hebbian(w: &mut [Vec<f64>], pre: &[bool], post: &[bool], inc: f64, dec: f64) {
    for i in 0..w.len() {
        for j in 0..w[i].len() {
            if post[j] {
                if pre[i] {
                    w[i][j] += inc;
                } else {
                    w[i][j] -= dec;
                }
            }
        }
    }
}

/// Maximum post-ReLU activation per layer over `xs` (output layer: logits
/// clipped at 0), with the input maximum floored at machine epsilon.
pub fn activation_maxima(w: &Weights, xs: &[Vec<f64>]) -> Vec<f64> {
    let mut maxima = vec![0.0; w.len() + 1];
    for x in xs {
        let mut a = x.clone();
        for v in &a {
            maxima[0] = f64::max(maxima[0], *v);
        }
        for (l, layer) in w.iter().enumerate() {
            let mut z = vec![0.0; layer[0].len()];
            for (j, zj) in z.iter_mut().enumerate() {
                for (i, ai) in a.iter().enumerate() {
                    *zj += ai * layer[i][j];
                }
            }
            for v in z.iter_mut() {
                *v = v.max(0.0);
                maxima[l + 1] = f64::max(maxima[l + 1], *v);
            }
            a = z;
        }
    }
    maxima[0] = maxima[0].max(f64::EPSILON);
    maxima
}

pub struct SleepParams {
    pub time_steps: usize,
    pub dt: f64,
    pub max_rate: f64,
    pub beta: Vec<f64>,
    pub decay: f64,
    pub inc: f64,
    pub dec: f64,
    pub seed: u64,
}

/// Step-by-step sleep simulation with propagation-time scaling. Returns the
/// final weights and the per-step spike counts of every layer.
pub fn sleep(w: &Weights, mean: &[f64], scales: &[f64], p: &SleepParams) -> (Weights, Vec<Vec<usize>>) {
    let mut w = w.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let sizes: Vec<usize> = std::iter::once(w[0].len()).chain(w.iter().map(|l| l[0].len())).collect();
    let mut v: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut counts = Vec::new();
    for _ in 0..p.time_steps {
        let mut s: Vec<Vec<bool>> = Vec::new();
        let mut input = Vec::new();
        for &m in mean {
            let prob = (m * p.max_rate * p.dt).clamp(0.0, 1.0);
            input.push(rng.random::<f64>() < prob);
        }
        s.push(input);
        for l in 0..w.len() {
            let n_out = sizes[l + 1];
            let mut out = vec![false; n_out];
            for j in 0..n_out {
                let mut c = 0.0;
                for i in 0..sizes[l] {
                    if s[l][i] {
                        c += w[l][i][j];
                    }
                }
                v[l + 1][j] = p.decay * v[l + 1][j] + scales[l] * c;
                if v[l + 1][j] > p.beta[l] {
                    out[j] = true;
                    v[l + 1][j] = 0.0;
                }
            }
            s.push(out);
        }
        if p.inc != 0.0 || p.dec != 0.0 {
            for l in 0..w.len() {
                let (pre, post) = (s[l].clone(), s[l + 1].clone());
                hebbian(&mut w[l], &pre, &post, p.inc, p.dec);
            }
        }
        counts.push(s.iter().map(|x| x.iter().filter(|&&b| b).count()).collect());
    }
    (w, counts)
}

/// `(correct, confusion counts)` by direct counting with lowest-index argmax.
pub fn count_predictions(probs: &[Vec<f64>], labels: &[u8]) -> (usize, [[usize; 10]; 10]) {
    let mut counts = [[0usize; 10]; 10];
    let mut correct = 0;
    for (row, &y) in probs.iter().zip(labels) {
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        counts[y as usize][best] += 1;
        if best == y as usize {
            correct += 1;
        }
    }
    (correct, counts)
}

/// Two-pass mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    for x in xs {
        sum += x;
    }
    let mean = sum / xs.len() as f64;
    let mut ss = 0.0;
    for x in xs {
        ss += (x - mean) * (x - mean);
    }
    (mean, (ss / xs.len() as f64).sqrt())
}

pub fn random_weights(sizes: &[usize], seed: u64, bound: f64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .windows(2)
        .map(|p| {
            (0..p[0])
                .map(|_| (0..p[1]).map(|_| rng.random_range(-bound..bound)).collect())
                .collect()
        })
        .collect()
}

pub fn random_inputs(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| (0..cols).map(|_| rng.random::<f64>()).collect()).collect()
}
