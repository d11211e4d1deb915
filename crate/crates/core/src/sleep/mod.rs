//! Sleep replay consolidation.
//!
//! A trained network is run as a layered spiking network: ReLU units become
//! integrate-and-fire units with per-layer thresholds, propagation is scaled by
//! layer-wise activation maxima, the input layer is driven by Bernoulli spikes
//! drawn from the running pixel mean, and after every time step a two-case
//! Hebbian rule adjusts the weights of each layer whose postsynaptic units
//! fired.
//!
//! Weight matrices follow the network convention (`pre x post`), so
//! `w[i][j]` connects presynaptic unit `i` to postsynaptic unit `j`.

mod trace;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::Section;
use crate::data::{DatasetId, DatasetSlice, PixelMean};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::seed::{self, Rng};

pub use trace::{
    DeltaHistogram, DeltaSigns, SleepTrace, SpikeEvent, TraceLevel, TraceSummary,
    DEFAULT_HISTOGRAM_BINS,
};

/// Where the layer-wise scale factors enter the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// The scale multiplies `W^T S` during propagation; plasticity acts on the
    /// stored weights.
    #[default]
    Propagation,
    /// Weights are multiplied by their scale for the whole sleep, plasticity
    /// acts on the scaled copy and the accumulated change is divided by the
    /// scale afterwards.
    InPlace,
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propagation" => Ok(Self::Propagation),
            "in_place" => Ok(Self::InPlace),
            other => Err(Error::Config(format!("unknown scaling mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Propagation => "propagation",
            Self::InPlace => "in_place",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepConfig {
    pub time_steps: usize,
    /// Seconds per step.
    pub dt: f64,
    /// Input rate in Hz for a pixel whose mean intensity is 1.
    pub max_rate: f64,
    pub alpha_scale: f64,
    /// Firing threshold of each non-input layer.
    pub beta: Vec<f64>,
    pub decay: f64,
    pub inc: f64,
    /// Magnitude of the depression step; it is subtracted.
    pub dec: f64,
    pub seed: u64,
    #[serde(default)]
    pub scaling: ScalingMode,
}

impl SleepConfig {
    pub fn mnist() -> Self {
        Self {
            time_steps: 365,
            dt: 0.001,
            max_rate: 211.9,
            alpha_scale: 15.5,
            beta: vec![24.3, 5.08, 18.42],
            decay: 0.97,
            inc: 7.49e-4,
            dec: 1.87e-4,
            seed: 0,
            scaling: ScalingMode::Propagation,
        }
    }

    pub fn fmnist() -> Self {
        Self {
            time_steps: 267,
            dt: 0.001,
            max_rate: 465.5,
            alpha_scale: 23.7,
            beta: vec![22.60, 14.93, 23.05],
            decay: 0.95,
            inc: 4.95e-4,
            dec: 2.72e-4,
            seed: 0,
            scaling: ScalingMode::Propagation,
        }
    }

    pub fn for_dataset(id: DatasetId) -> Self {
        match id {
            DatasetId::Mnist => Self::mnist(),
            DatasetId::Fmnist => Self::fmnist(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, weight_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.time_steps == 0 {
            return bad("time_steps must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.max_rate >= 0.0 && self.max_rate.is_finite()) {
            return bad(format!("max_rate must be >= 0, got {}", self.max_rate));
        }
        if !(self.alpha_scale > 0.0 && self.alpha_scale.is_finite()) {
            return bad(format!("alpha_scale must be > 0, got {}", self.alpha_scale));
        }
        if self.beta.len() != weight_layers {
            return bad(format!(
                "need {weight_layers} beta thresholds, got {}",
                self.beta.len()
            ));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return bad("beta thresholds must be finite".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if !(self.inc >= 0.0 && self.inc.is_finite()) {
            return bad(format!("inc must be >= 0, got {}", self.inc));
        }
        if !(self.dec >= 0.0 && self.dec.is_finite()) {
            return bad(format!(
                "dec is a magnitude and must be >= 0, got {}",
                self.dec
            ));
        }
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new();
        s.set("time_steps", self.time_steps);
        s.set("dt", self.dt);
        s.set("max_rate", self.max_rate);
        s.set("alpha_scale", self.alpha_scale);
        for (k, b) in self.beta.iter().enumerate() {
            s.set(&format!("beta_{}", k + 1), b);
        }
        s.set("decay", self.decay);
        s.set("inc", self.inc);
        s.set("dec", self.dec);
        s.set("seed", self.seed);
        s.set("scaling", self.scaling);
        s
    }

    /// `base` with every key present in `s` overridden.
    pub fn from_section_over(base: &Self, s: &Section) -> Result<Self> {
        let mut cfg = base.clone();
        if let Some(v) = s.get("time_steps")? {
            cfg.time_steps = v;
        }
        if let Some(v) = s.get("dt")? {
            cfg.dt = v;
        }
        if let Some(v) = s.get("max_rate")? {
            cfg.max_rate = v;
        }
        if let Some(v) = s.get("alpha_scale")? {
            cfg.alpha_scale = v;
        }
        let mut k = 1;
        while s.contains(&format!("beta_{k}")) {
            let v = s.require(&format!("beta_{k}"))?;
            if k <= cfg.beta.len() {
                cfg.beta[k - 1] = v;
            } else {
                cfg.beta.push(v);
            }
            k += 1;
        }
        if k > 1 {
            cfg.beta.truncate(k - 1);
        }
        if let Some(v) = s.get("decay")? {
            cfg.decay = v;
        }
        if let Some(v) = s.get("inc")? {
            cfg.inc = v;
        }
        if let Some(v) = s.get("dec")? {
            cfg.dec = v;
        }
        if let Some(v) = s.get("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = s.get("scaling")? {
            cfg.scaling = v;
        }
        Ok(cfg)
    }
}

/// Layer-wise maximum activations and the derived propagation scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScales<T> {
    /// `act_max[0]` is the input maximum.
    pub act_max: Vec<T>,
    /// `scales[l] = alpha_scale * act_max[l] / act_max[l + 1]`.
    pub scales: Vec<T>,
}

impl<T: Scalar> LayerScales<T> {
    pub fn from_act_max(act_max: Vec<T>, alpha_scale: f64) -> Result<Self> {
        if let Some(layer) = act_max.iter().position(|&a| a.is_nan() || a <= T::zero()) {
            return Err(Error::Degenerate { layer });
        }
        let alpha = T::lit(alpha_scale);
        let scales = act_max.windows(2).map(|p| alpha * (p[0] / p[1])).collect();
        Ok(Self { act_max, scales })
    }

    pub fn unit(weight_layers: usize) -> Self {
        Self {
            act_max: vec![T::one(); weight_layers + 1],
            scales: vec![T::one(); weight_layers],
        }
    }
}

/// Maximum post-ReLU activation of every layer over `data`. The output
/// layer contributes `max(0, logit)`; the input maximum is floored at
/// machine epsilon.
pub fn activation_maxima<T: Scalar>(mlp: &Mlp<T>, data: &DatasetSlice<T>) -> Result<Vec<T>> {
    if data.is_empty() {
        return Err(Error::input("scale data is empty"));
    }
    const CHUNK: usize = 1000;
    let mut maxima = vec![T::zero(); mlp.layer_sizes().len()];
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(CHUNK) {
        let batch = data.images().select_rows(chunk);
        let acts = mlp.forward_logits(&batch)?;
        for (m, a) in maxima.iter_mut().zip(&acts) {
            let v = a.max_value();
            if v > *m {
                *m = v;
            }
        }
    }
    maxima[0] = maxima[0].max(T::epsilon());
    Ok(maxima)
}

pub fn compute_scales<T: Scalar>(
    mlp: &Mlp<T>,
    data: &DatasetSlice<T>,
    alpha_scale: f64,
) -> Result<LayerScales<T>> {
    LayerScales::from_act_max(activation_maxima(mlp, data)?, alpha_scale)
}

/// Membrane voltages and the spikes of the current step, per layer
/// (input layer at index 0, whose voltage is unused).
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeState<T> {
    pub v: Vec<Vec<T>>,
    pub spikes: Vec<Vec<bool>>,
}

impl<T: Scalar> SpikeState<T> {
    pub fn new(layer_sizes: &[usize]) -> Self {
        Self {
            v: layer_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            spikes: layer_sizes.iter().map(|&n| vec![false; n]).collect(),
        }
    }
}

/// Input spikes for one step: unit `i` fires with probability
/// `clamp(mean_i * max_rate * dt, 0, 1)`.
pub fn generate_poisson_input<T: Scalar>(
    mean: &PixelMean<T>,
    cfg: &SleepConfig,
    rng: &mut Rng,
) -> Vec<bool> {
    mean.mean()
        .iter()
        .map(|&m| {
            let p = (m.as_f64() * cfg.max_rate * cfg.dt).clamp(0.0, 1.0);
            rng.random::<f64>() < p
        })
        .collect()
}

/// Propagates one step of spikes through every layer in order.
///
/// For layer `l`: `v <- decay * v + scale * W^T S(l-1)`; units with
/// `v > beta` spike and are reset to 0, the rest keep their voltage.
pub fn sleep_forward_step<T: Scalar>(
    state: &mut SpikeState<T>,
    mlp: &Mlp<T>,
    scales: &LayerScales<T>,
    cfg: &SleepConfig,
    input_spikes: &[bool],
) -> Result<()> {
    let sizes = mlp.layer_sizes();
    if input_spikes.len() != sizes[0] {
        return Err(Error::shape("sleep_forward_step input", sizes[0], input_spikes.len()));
    }
    if state.v.len() != sizes.len() || state.v.iter().zip(sizes).any(|(v, &n)| v.len() != n) {
        return Err(Error::shape("sleep_forward_step state", format!("{sizes:?}"), "mismatched"));
    }
    if scales.scales.len() != mlp.num_weight_layers() || cfg.beta.len() != mlp.num_weight_layers() {
        return Err(Error::shape(
            "sleep_forward_step scales/beta",
            mlp.num_weight_layers(),
            format!("{}/{}", scales.scales.len(), cfg.beta.len()),
        ));
    }
    state.spikes[0].copy_from_slice(input_spikes);
    let decay = T::lit(cfg.decay);
    let mut current = Vec::new();
    for (l, w) in mlp.weights().iter().enumerate() {
        current.clear();
        current.resize(w.cols(), T::zero());
        for (i, _) in state.spikes[l].iter().enumerate().filter(|(_, &s)| s) {
            for (c, &wij) in current.iter_mut().zip(w.row(i)) {
                *c += wij;
            }
        }
        let alpha = scales.scales[l];
        let beta = T::lit(cfg.beta[l]);
        let (v, out) = (&mut state.v[l + 1], &mut state.spikes[l + 1]);
        for ((v, s), &c) in v.iter_mut().zip(out.iter_mut()).zip(&current) {
            *v = decay * *v + alpha * c;
            if !v.is_finite() {
                return Err(Error::Numeric {
                    what: "voltage",
                    layer: l + 1,
                });
            }
            *s = *v > beta;
            if *s {
                *v = T::zero();
            }
        }
    }
    Ok(())
}

fn hebbian_apply<T: Scalar>(
    weights: &mut Matrix<T>,
    mut delta: Option<&mut Matrix<T>>,
    pre: &[bool],
    post: &[bool],
    inc: T,
    dec: T,
) {
    let active: Vec<usize> = post
        .iter()
        .enumerate()
        .filter_map(|(j, &s)| s.then_some(j))
        .collect();
    if active.is_empty() {
        return;
    }
    for (i, &fired) in pre.iter().enumerate() {
        let row = weights.row_mut(i);
        if fired {
            for &j in &active {
                row[j] += inc;
            }
        } else {
            for &j in &active {
                row[j] -= dec;
            }
        }
        if let Some(d) = delta.as_deref_mut() {
            let row = d.row_mut(i);
            for &j in &active {
                if fired {
                    row[j] += inc;
                } else {
                    row[j] -= dec;
                }
            }
        }
    }
}

/// Two-case Hebbian rule for one weight layer.
///
/// Where postsynaptic unit `j` fired: `w[i][j] += inc` if presynaptic `i`
/// fired too, else `w[i][j] -= dec`. Columns of silent units are untouched
/// and weights are not clipped.
pub fn hebbian_update<T: Scalar>(
    weights: &mut Matrix<T>,
    pre: &[bool],
    post: &[bool],
    inc: T,
    dec: T,
) -> Result<()> {
    if pre.len() != weights.rows() || post.len() != weights.cols() {
        return Err(Error::shape(
            "hebbian_update",
            format!("{}x{}", weights.rows(), weights.cols()),
            format!("{}x{}", pre.len(), post.len()),
        ));
    }
    hebbian_apply(weights, None, pre, post, inc, dec);
    Ok(())
}

/// Runs a full sleep phase and returns the updated network with its trace.
pub fn src_sleep<T: Scalar>(
    mlp: &Mlp<T>,
    mean: &PixelMean<T>,
    data_for_scales: &DatasetSlice<T>,
    cfg: &SleepConfig,
) -> Result<(Mlp<T>, SleepTrace<T>)> {
    cfg.validate(mlp.num_weight_layers())?;
    let scales = compute_scales(mlp, data_for_scales, cfg.alpha_scale)?;
    src_sleep_with_scales(mlp, mean, &scales, cfg, TraceLevel::Counts)
}

/// [`src_sleep`] with precomputed scales and a chosen trace detail.
pub fn src_sleep_with_scales<T: Scalar>(
    mlp: &Mlp<T>,
    mean: &PixelMean<T>,
    scales: &LayerScales<T>,
    cfg: &SleepConfig,
    level: TraceLevel,
) -> Result<(Mlp<T>, SleepTrace<T>)> {
    let n_w = mlp.num_weight_layers();
    cfg.validate(n_w)?;
    if mean.mean().len() != mlp.input_size() {
        return Err(Error::shape("src_sleep pixel mean", mlp.input_size(), mean.mean().len()));
    }
    if scales.scales.len() != n_w {
        return Err(Error::shape("src_sleep scales", n_w, scales.scales.len()));
    }

    let (mut work, step_scales) = match cfg.scaling {
        ScalingMode::Propagation => (mlp.clone(), scales.clone()),
        ScalingMode::InPlace => {
            let scaled = mlp
                .weights()
                .iter()
                .zip(&scales.scales)
                .map(|(w, &a)| {
                    let mut w = w.clone();
                    w.map_inplace(|v| v * a);
                    w
                })
                .collect();
            (Mlp::from_weights(scaled)?, LayerScales::unit(n_w))
        }
    };

    let mut trace = SleepTrace::new(mlp, level);
    let mut state = SpikeState::new(mlp.layer_sizes());
    let mut rng = seed::rng(cfg.seed);
    let inc = T::lit(cfg.inc);
    let dec = T::lit(cfg.dec);
    let plastic = cfg.inc != 0.0 || cfg.dec != 0.0;

    for step in 0..cfg.time_steps {
        let input = generate_poisson_input(mean, cfg, &mut rng);
        sleep_forward_step(&mut state, &work, &step_scales, cfg, &input)?;
        if plastic {
            for l in 0..n_w {
                let (w, d) = (&mut work.weights_mut_internal()[l], &mut trace.deltas_mut()[l]);
                hebbian_apply(w, Some(d), &state.spikes[l], &state.spikes[l + 1], inc, dec);
            }
        }
        trace.record_step(step, &state.spikes);
    }

    let out = match cfg.scaling {
        ScalingMode::Propagation => work,
        ScalingMode::InPlace => {
            // back to unscaled units, then onto the original weights
            for (d, &a) in trace.deltas_mut().iter_mut().zip(&scales.scales) {
                d.map_inplace(|v| v / a);
            }
            let weights = mlp
                .weights()
                .iter()
                .zip(trace.deltas())
                .map(|(w, d)| {
                    let mut w = w.clone();
                    for (w, &d) in w.data_mut().iter_mut().zip(d.data()) {
                        *w += d;
                    }
                    w
                })
                .collect();
            Mlp::from_weights(weights)?
        }
    };
    Ok((out, trace))
}

/// Firing-rate series, half-run rate comparison and weight-delta histograms.
pub fn trace_summary<T: Scalar>(trace: &SleepTrace<T>) -> Result<TraceSummary> {
    TraceSummary::from_trace(trace, DEFAULT_HISTOGRAM_BINS)
}
