//! Timestep samplers: uniform and detail-aware.
//!
//! The detail-aware sampler weights each denoising step by how much the
//! high-frequency DCT content of the model's clean estimate changes across
//! it, then samples timesteps in proportion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dct::DctPlan;
use crate::error::{Error, Result};
use crate::media::{emit_curve_labeled, emit_report, Report};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Piecewise-uniform distribution over `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepDistribution {
    edges: Vec<f64>,
    probs: Vec<f64>,
}

impl TimestepDistribution {
    pub fn new(edges: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || edges.len() != probs.len() + 1 {
            return Err(Error::invalid(
                "TimestepDistribution",
                format!("{} edges for {} bins", edges.len(), probs.len()),
            ));
        }
        if edges.windows(2).any(|e| e[1] <= e[0]) || edges[0] < 0.0 || edges[edges.len() - 1] > 1.0 {
            return Err(Error::invalid("TimestepDistribution", "edges must increase within [0, 1]"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("TimestepDistribution", "negative or non-finite probability"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(
                "TimestepDistribution",
                format!("probabilities sum to {total}, not 1"),
            ));
        }
        Ok(Self { edges, probs })
    }

    /// `n` equal bins with equal mass.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("TimestepDistribution", "need at least one bin"));
        }
        Self::new(
            (0..=n).map(|i| i as f64 / n as f64).collect(),
            vec![1.0 / n as f64; n],
        )
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Probability mass on `[lo, hi)`, pro rata for partially covered bins.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (a, b) = (self.edges[i], self.edges[i + 1]);
                let overlap = (b.min(hi) - a.max(lo)).max(0.0);
                p * overlap / (b - a)
            })
            .sum()
    }

    /// CSV table with columns `bin_lo, bin_hi, probability`.
    pub fn to_report(&self) -> Report {
        let mut r = Report::new(["bin_lo", "bin_hi", "probability"]);
        for (i, p) in self.probs.iter().enumerate() {
            r.push([
                format!("{:.6}", self.edges[i]),
                format!("{:.6}", self.edges[i + 1]),
                format!("{p:.9}"),
            ])
            .expect("three cells");
        }
        r
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        emit_report(&self.to_report(), path)
    }

    /// Reads a table written by [`TimestepDistribution::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let (mut edges, mut probs) = (Vec::new(), Vec::new());
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            let cell = |c: usize| -> Result<f64> {
                row.get(c)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::format(path, format!("row {}: column {c} is not a number", i + 1)))
            };
            if i == 0 {
                edges.push(cell(0)?);
            }
            edges.push(cell(1)?);
            probs.push(cell(2)?);
        }
        let total: f64 = probs.iter().sum();
        if total > 0.0 {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Self::new(edges, probs)
    }

    /// Probability density per bin against the discrete timestep of its
    /// center, as an SVG curve.
    pub fn write_curve(&self, path: impl AsRef<Path>) -> Result<()> {
        let xs: Vec<f64> = self.edges.windows(2).map(|e| 500.0 * (e[0] + e[1])).collect();
        let ys: Vec<f64> = self
            .probs
            .iter()
            .zip(self.edges.windows(2))
            .map(|(p, e)| p / (e[1] - e[0]))
            .collect();
        emit_curve_labeled(
            &xs,
            &ys,
            "High-frequency variation over timesteps",
            "timestep",
            "sampling density",
            path,
        )
    }
}

/// Uniform draw on `[0, 1)`.
pub fn sample_timestep_uniform(rng: &mut Rng) -> f64 {
    rng.uniform()
}

/// Picks a bin by its probability, then a uniform point inside it.
pub fn sample_timestep(dist: &TimestepDistribution, rng: &mut Rng) -> f64 {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut bin = dist.probs.len() - 1;
    for (i, p) in dist.probs.iter().enumerate() {
        acc += p;
        if u < acc && *p > 0.0 {
            bin = i;
            break;
        }
    }
    while dist.probs[bin] == 0.0 && bin > 0 {
        bin -= 1;
    }
    let (lo, hi) = (dist.edges[bin], dist.edges[bin + 1]);
    lo + (hi - lo) * rng.uniform()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetailAwareOptions {
    /// Coefficients with `(u / H + v / W) / 2 >= hf_cut` count as high frequency.
    pub hf_cut: f64,
    pub norm: DeltaNorm,
}

impl Default for DetailAwareOptions {
    fn default() -> Self {
        Self {
            hf_cut: 0.5,
            norm: DeltaNorm::L1,
        }
    }
}

/// High-frequency DCT coefficients of every `H x W` plane of `x`
/// (the two trailing dimensions), concatenated.
pub fn high_frequency(x: &Tensor, plan: &DctPlan, hf_cut: f64) -> Result<Vec<f32>> {
    if x.rank() < 2 {
        return Err(Error::shape("high_frequency", format!("need planes, got {:?}", x.shape())));
    }
    let (h, w) = (plan.height(), plan.width());
    if x.dim(x.rank() - 2) != h || x.dim(x.rank() - 1) != w {
        return Err(Error::shape("high_frequency", format!("{:?} vs plan {h}x{w}", x.shape())));
    }
    let mask: Vec<bool> = (0..h * w)
        .map(|i| ((i / w) as f64 / h as f64 + (i % w) as f64 / w as f64) / 2.0 >= hf_cut)
        .collect();
    let mut out = Vec::new();
    for plane in x.data().chunks(h * w) {
        let c = plan.forward_plane(plane);
        out.extend(c.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v));
    }
    Ok(out)
}

/// Per-step high-frequency change `delta[i] = |H_{i+1} - H_i|`, averaged
/// over traces. Each trace lists the clean estimates of steps `0..S` in
/// sampling order (step 0 at `t = 1`). The last step has no successor and
/// gets zero.
pub fn high_frequency_deltas(traces: &[Vec<Tensor>], options: DetailAwareOptions) -> Result<Vec<f64>> {
    Ok(deltas_and_scale(traces, options)?.0)
}

/// Total change below this fraction of the high-frequency content is float
/// rounding, not detail.
const DEGENERATE_RTOL: f64 = 1e-5;

/// Deltas plus the mean per-step high-frequency magnitude in the same norm.
fn deltas_and_scale(traces: &[Vec<Tensor>], options: DetailAwareOptions) -> Result<(Vec<f64>, f64)> {
    if !(0.0 < options.hf_cut && options.hf_cut < 1.0) {
        return Err(Error::invalid("detail-aware sampler", "hf_cut must lie in (0, 1)"));
    }
    let first = traces
        .first()
        .ok_or_else(|| Error::invalid("detail-aware sampler", "no traces"))?;
    let steps = first.len();
    if steps < 2 {
        return Err(Error::invalid("detail-aware sampler", format!("need at least 2 steps, got {steps}")));
    }
    let shape = first[0].shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("detail-aware sampler", format!("trace entries must hold planes, got {shape:?}")));
    }
    let plan = DctPlan::new(shape[shape.len() - 2], shape[shape.len() - 1])?;
    let mut delta = vec![0.0; steps];
    let mut scale = 0.0;
    for (n, trace) in traces.iter().enumerate() {
        if trace.len() != steps {
            return Err(Error::invalid(
                "detail-aware sampler",
                format!("trace {n} has {} steps, expected {steps}", trace.len()),
            ));
        }
        let hf: Vec<Vec<f32>> = trace
            .iter()
            .map(|z| high_frequency(z, &plan, options.hf_cut))
            .collect::<Result<_>>()?;
        for h in &hf {
            let mags = h.iter().map(|&a| (a as f64).abs());
            scale += match options.norm {
                DeltaNorm::L1 => mags.sum::<f64>(),
                DeltaNorm::L2 => mags.map(|d| d * d).sum::<f64>().sqrt(),
            };
        }
        for i in 0..steps - 1 {
            let diffs = hf[i + 1].iter().zip(&hf[i]).map(|(&a, &b)| (a as f64 - b as f64).abs());
            delta[i] += match options.norm {
                DeltaNorm::L1 => diffs.sum::<f64>(),
                DeltaNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            };
        }
    }
    delta.iter_mut().for_each(|d| *d /= traces.len() as f64);
    Ok((delta, scale / (traces.len() * steps) as f64))
}

/// Normalized per-step deltas as a distribution over `t`. Step `i` of `S`
/// covers `[1 - (i + 1) / S, 1 - i / S)`.
pub fn build_detail_aware_sampler(traces: &[Vec<Tensor>], options: DetailAwareOptions) -> Result<TimestepDistribution> {
    let (delta, scale) = deltas_and_scale(traces, options)?;
    let total: f64 = delta.iter().sum();
    if !(total > DEGENERATE_RTOL * scale) || !total.is_finite() {
        return Err(Error::Degenerate(
            "degenerate trace: high-frequency content never changes".into(),
        ));
    }
    let s = delta.len();
    let edges = (0..=s).map(|j| j as f64 / s as f64).collect();
    // Ascending t puts step S - 1 first.
    let probs = (0..s).map(|j| delta[s - 1 - j] / total).collect();
    TimestepDistribution::new(edges, probs)
}
