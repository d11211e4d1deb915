//! Instrumentation recorded during sleep and its summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Mlp;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceLevel {
    /// Per-step spike counts and cumulative weight deltas.
    #[default]
    Counts,
    /// Additionally every individual spike.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub step: usize,
    pub layer: usize,
    pub neuron: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SleepTrace<T> {
    layer_sizes: Vec<usize>,
    /// `spike_counts[step][layer]`.
    spike_counts: Vec<Vec<usize>>,
    raster: Option<Vec<SpikeEvent>>,
    /// Cumulative change applied to every synapse, shaped like the weights.
    deltas: Vec<Matrix<T>>,
}

impl<T: Scalar> SleepTrace<T> {
    pub(crate) fn new(mlp: &Mlp<T>, level: TraceLevel) -> Self {
        Self {
            layer_sizes: mlp.layer_sizes().to_vec(),
            spike_counts: Vec::new(),
            raster: (level == TraceLevel::Full).then(Vec::new),
            deltas: mlp
                .weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub(crate) fn record_step(&mut self, step: usize, spikes: &[Vec<bool>]) {
        self.spike_counts
            .push(spikes.iter().map(|s| s.iter().filter(|&&b| b).count()).collect());
        if let Some(raster) = self.raster.as_mut() {
            for (layer, s) in spikes.iter().enumerate() {
                raster.extend(
                    s.iter()
                        .enumerate()
                        .filter(|(_, &b)| b)
                        .map(|(neuron, _)| SpikeEvent {
                            step,
                            layer,
                            neuron,
                        }),
                );
            }
        }
    }

    pub(crate) fn deltas_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.deltas
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn steps(&self) -> usize {
        self.spike_counts.len()
    }

    pub fn spike_counts(&self) -> &[Vec<usize>] {
        &self.spike_counts
    }

    pub fn raster(&self) -> Option<&[SpikeEvent]> {
        self.raster.as_deref()
    }

    pub fn deltas(&self) -> &[Matrix<T>] {
        &self.deltas
    }

    /// Total spikes emitted by `layer` over the whole run.
    pub fn total_spikes(&self, layer: usize) -> usize {
        self.spike_counts.iter().map(|c| c[layer]).sum()
    }

    pub fn write_spike_counts_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.layer_sizes.len()).map(|l| format!("layer_{l}")).collect();
        writeln!(w, "step,{}", header.join(","))?;
        for (step, counts) in self.spike_counts.iter().enumerate() {
            let row: Vec<String> = counts.iter().map(ToString::to_string).collect();
            writeln!(w, "{step},{}", row.join(","))?;
        }
        Ok(())
    }

    /// Sparse `(step, layer, neuron)` triples; needs [`TraceLevel::Full`].
    pub fn write_raster_csv(&self, mut w: impl Write) -> Result<()> {
        let raster = self
            .raster
            .as_ref()
            .ok_or_else(|| Error::input("trace was recorded without a raster"))?;
        writeln!(w, "step,layer,neuron")?;
        for e in raster {
            writeln!(w, "{},{},{}", e.step, e.layer, e.neuron)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaSigns {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

impl DeltaSigns {
    pub fn total(&self) -> usize {
        self.negative + self.zero + self.positive
    }
}

/// Equal-width histogram over `[min, max]` of one layer's deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl DeltaHistogram {
    pub fn build(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Self {
        let (min, max) = values
            .clone()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !min.is_finite() {
            return Self {
                min: 0.0,
                max: 0.0,
                counts: vec![0],
            };
        }
        let bins = if max > min { bins.max(1) } else { 1 };
        let width = (max - min) / bins as f64;
        let mut counts = vec![0; bins];
        for v in values {
            let b = if width > 0.0 {
                (((v - min) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { min, max, counts }
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.max - self.min) / self.counts.len() as f64;
        let lo = self.min + width * bin as f64;
        let hi = if bin + 1 == self.counts.len() {
            self.max
        } else {
            self.min + width * (bin + 1) as f64
        };
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub layer_sizes: Vec<usize>,
    /// `rate_series[layer][step]`: fraction of the layer's units that fired.
    pub rate_series: Vec<Vec<f64>>,
    pub mean_rate: Vec<f64>,
    /// Mean rate over the first and the second half of the run, per layer.
    pub half_rates: Vec<[f64; 2]>,
    pub delta_signs: Vec<DeltaSigns>,
    pub delta_histograms: Vec<DeltaHistogram>,
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

impl TraceSummary {
    pub fn from_trace<T: Scalar>(trace: &SleepTrace<T>, bins: usize) -> Result<Self> {
        let steps = trace.steps();
        if steps == 0 {
            return Err(Error::input("trace has no steps"));
        }
        let rate_series: Vec<Vec<f64>> = trace
            .layer_sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                trace
                    .spike_counts
                    .iter()
                    .map(|c| c[l] as f64 / n as f64)
                    .collect()
            })
            .collect();
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let mean_rate = rate_series.iter().map(|r| mean(r)).collect();
        let half_rates = rate_series
            .iter()
            .map(|r| {
                let (a, b) = r.split_at(steps / 2);
                [mean(a), mean(b)]
            })
            .collect();
        let delta_signs = trace
            .deltas
            .iter()
            .map(|d| {
                let mut s = DeltaSigns::default();
                for &v in d.data() {
                    if v < T::zero() {
                        s.negative += 1;
                    } else if v > T::zero() {
                        s.positive += 1;
                    } else {
                        s.zero += 1;
                    }
                }
                s
            })
            .collect();
        let delta_histograms = trace
            .deltas
            .iter()
            .map(|d| DeltaHistogram::build(d.data().iter().map(|v| v.as_f64()), bins))
            .collect();
        Ok(Self {
            steps,
            layer_sizes: trace.layer_sizes.clone(),
            rate_series,
            mean_rate,
            half_rates,
            delta_signs,
            delta_histograms,
        })
    }

    /// Sign counts summed over every weight layer.
    pub fn total_signs(&self) -> DeltaSigns {
        self.delta_signs.iter().fold(DeltaSigns::default(), |a, s| DeltaSigns {
            negative: a.negative + s.negative,
            zero: a.zero + s.zero,
            positive: a.positive + s.positive,
        })
    }

    pub fn write_rate_series_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.layer_sizes.len()).map(|l| format!("layer_{l}")).collect();
        writeln!(w, "step,{}", header.join(","))?;
        for step in 0..self.steps {
            let row: Vec<String> = self.rate_series.iter().map(|r| r[step].to_string()).collect();
            writeln!(w, "{step},{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_delta_histogram_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "weight_layer,bin,lo,hi,count")?;
        for (l, h) in self.delta_histograms.iter().enumerate() {
            for (b, c) in h.counts.iter().enumerate() {
                let (lo, hi) = h.edges(b);
                writeln!(w, "{l},{b},{lo},{hi},{c}")?;
            }
        }
        Ok(())
    }

    pub fn write_delta_signs_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "weight_layer,negative,zero,positive")?;
        for (l, s) in self.delta_signs.iter().enumerate() {
            writeln!(w, "{l},{},{},{}", s.negative, s.zero, s.positive)?;
        }
        Ok(())
    }
}
