//! Latency, robustness and carbon estimates for pruned networks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{backward, forward_trace, ResidualNet};
use crate::rng;
use crate::training::{accuracy_of_logits, evaluate, softmax_cross_entropy, Dataset};

// ---------------------------------------------------------------- latency

/// Aggregate wall-clock latency of forwarding one fixed batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_ms: f64,
    pub runs: usize,
    pub n_samples: usize,
    pub speedup_vs_baseline: f64,
    pub raw_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_raw(raw_ms: Vec<f64>, n_samples: usize) -> Self {
        let runs = raw_ms.len();
        let mean = raw_ms.iter().sum::<f64>() / runs as f64;
        let mut sorted = raw_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if runs % 2 == 1 {
            sorted[runs / 2]
        } else {
            0.5 * (sorted[runs / 2 - 1] + sorted[runs / 2])
        };
        let std = if runs > 1 {
            (raw_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (runs - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            median_ms: median,
            std_ms: std,
            runs,
            n_samples,
            speedup_vs_baseline: 1.0,
            raw_ms,
        }
    }

    /// Raw timings as `run_index,ms` CSV.
    pub fn raw_csv(&self) -> String {
        let mut s = String::from("run_index,ms\n");
        for (i, t) in self.raw_ms.iter().enumerate() {
            s.push_str(&format!("{i},{t}\n"));
        }
        s
    }
}

/// Fixed random input batch for latency runs.
pub fn latency_batch(input_dim: usize, n_samples: usize) -> Matrix {
    let mut r = rng::stream(0, rng::tags::LATENCY_BATCH);
    Matrix::from_fn(n_samples, input_dim, |_, _| r.random_range(-1.0..1.0))
}

fn time_forward(net: &ResidualNet, x: &Matrix) -> Result<f64> {
    let t = Instant::now();
    let out = net.forward(x)?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(out);
    Ok(ms)
}

/// Times `runs` forwards of a fixed `n_samples` batch after discarding
/// `warmup_runs`. Runs on the calling thread.
pub fn measure_latency(net: &ResidualNet, n_samples: usize, runs: usize, warmup_runs: usize) -> Result<LatencyStats> {
    if n_samples == 0 || runs == 0 {
        return Err(Error::Config("latency needs n_samples >= 1 and runs >= 1".into()));
    }
    let x = latency_batch(net.input_dim(), n_samples);
    for _ in 0..warmup_runs {
        time_forward(net, &x)?;
    }
    let raw = (0..runs).map(|_| time_forward(net, &x)).collect::<Result<Vec<_>>>()?;
    Ok(LatencyStats::from_raw(raw, n_samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    #[serde(default = "default_latency_samples")]
    pub n_samples: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_runs: usize,
    /// Relative neuron-count tolerance for matching layer and filter steps.
    #[serde(default = "default_tolerance")]
    pub neuron_tolerance: f64,
    /// Number of layer-pruning steps for the comparison curve.
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_latency_samples() -> usize {
    2000
}
fn default_runs() -> usize {
    30
}
fn default_warmup() -> usize {
    3
}
fn default_tolerance() -> f64 {
    0.05
}
fn default_steps() -> usize {
    6
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            n_samples: default_latency_samples(),
            runs: default_runs(),
            warmup_runs: default_warmup(),
            neuron_tolerance: default_tolerance(),
            steps: default_steps(),
        }
    }
}

/// A pruned model annotated with how many hidden units it lost.
#[derive(Debug, Clone)]
pub struct PrunedStep {
    pub net: ResidualNet,
    pub neurons_removed: usize,
}

/// One matched point of the layer-vs-filter comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub neurons_removed: usize,
    pub filter_neurons_removed: usize,
    pub base_ms: f64,
    pub layer_ms: f64,
    pub filter_ms: f64,
    pub layer_speedup: f64,
    pub filter_speedup: f64,
}

/// Pairs each layer step with the filter step closest in removed neurons,
/// keeping pairs within `tolerance × layer neurons` of each other.
pub fn match_steps(layer: &[PrunedStep], filter: &[PrunedStep], tolerance: f64) -> Vec<(usize, usize)> {
    layer
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            filter
                .iter()
                .enumerate()
                .map(|(j, f)| (j, l.neurons_removed.abs_diff(f.neurons_removed)))
                .min_by_key(|&(j, d)| (d, j))
                .filter(|&(_, d)| d as f64 <= tolerance * l.neurons_removed as f64)
                .map(|(j, _)| (i, j))
        })
        .collect()
}

/// Layer-vs-filter speedup table. Each round times base, layer-pruned and
/// filter-pruned nets back to back so drift hits all three alike; speedups
/// are ratios of mean latency.
pub fn latency_compare(
    base: &ResidualNet,
    layer_steps: &[PrunedStep],
    filter_steps: &[PrunedStep],
    cfg: &LatencyConfig,
) -> Result<Vec<LatencyRow>> {
    if cfg.runs == 0 || cfg.n_samples == 0 {
        return Err(Error::Config("latency needs n_samples >= 1 and runs >= 1".into()));
    }
    let pairs = match_steps(layer_steps, filter_steps, cfg.neuron_tolerance);
    if pairs.is_empty() {
        return Err(Error::NoMatchedPairs(cfg.neuron_tolerance * 100.0));
    }
    let x = latency_batch(base.input_dim(), cfg.n_samples);
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        let nets = [base, &layer_steps[i].net, &filter_steps[j].net];
        for _ in 0..cfg.warmup_runs {
            for n in nets {
                time_forward(n, &x)?;
            }
        }
        let mut raw = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..cfg.runs {
            for (k, n) in nets.iter().enumerate() {
                raw[k].push(time_forward(n, &x)?);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (b, l, f) = (mean(&raw[0]), mean(&raw[1]), mean(&raw[2]));
        rows.push(LatencyRow {
            neurons_removed: layer_steps[i].neurons_removed,
            filter_neurons_removed: filter_steps[j].neurons_removed,
            base_ms: b,
            layer_ms: l,
            filter_ms: f,
            layer_speedup: b / l,
            filter_speedup: b / f,
        });
    }
    Ok(rows)
}

/// `neurons_removed,layer_speedup,filter_speedup` CSV.
pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("neurons_removed,layer_speedup,filter_speedup\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.neurons_removed, r.layer_speedup, r.filter_speedup));
    }
    s
}

// ------------------------------------------------------------ adversarial

/// Gradient of the mean cross-entropy with respect to the inputs.
pub fn input_gradient(net: &ResidualNet, x: &Matrix, y: &[usize]) -> Result<Matrix> {
    if y.len() != x.rows() {
        return Err(Error::InvalidData(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    let trace = forward_trace(net, x)?;
    let (_, d_logits) = softmax_cross_entropy(trace.logits(), y);
    Ok(backward(net, &trace, &d_logits)?.1)
}

/// Fast gradient sign attack: `x + ε·sign(∇ₓ loss)` with `sign(0) = 0`.
/// Every coordinate moves by at most `ε`, exactly, in floating point.
pub fn fgsm(net: &ResidualNet, x: &Matrix, y: &[usize], epsilon: f64) -> Result<Matrix> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(net, x, y)?;
    let mut out = x.clone();
    for (o, &gv) in out.data_mut().iter_mut().zip(g.data()) {
        let orig = *o;
        let step = if gv > 0.0 {
            epsilon
        } else if gv < 0.0 {
            -epsilon
        } else {
            continue;
        };
        let mut v = orig + step;
        // rounding in x + ε can overshoot by an ulp
        while (v - orig).abs() > epsilon {
            v = if v > orig { v.next_down() } else { v.next_up() };
        }
        *o = v;
    }
    Ok(out)
}

// ------------------------------------------------------------- corruption

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Additive normal noise, `σⱼ = 0.05 · severity · stdⱼ`.
    Gaussian,
    /// Additive uniform noise with the same per-feature standard deviation
    /// as `Gaussian` (half-width `√3 · σⱼ`).
    Uniform,
    /// Each entry zeroed with probability `0.1 · severity`.
    FeatureDropout,
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            "feature_dropout" => Ok(Self::FeatureDropout),
            other => Err(Error::Config(format!("unknown corruption kind {other:?}"))),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Uniform => "uniform",
            Self::FeatureDropout => "feature_dropout",
        })
    }
}

/// Per-column population standard deviation.
pub fn feature_std(x: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    let c = x.center_columns();
    (0..x.cols())
        .map(|j| ((0..x.rows()).map(|i| c.get(i, j).powi(2)).sum::<f64>() / n).sqrt())
        .collect()
}

/// Corrupted copy of `x` at `severity ∈ 1..=5`, deterministic per seed.
pub fn corrupt(x: &Matrix, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Matrix> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("severity {severity} outside 1..=5")));
    }
    let s = f64::from(severity);
    let std = feature_std(x);
    let mut r = rng::stream(seed, rng::tags::CORRUPT);
    let mut out = x.clone();
    let cols = x.cols();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let sigma = 0.05 * s * std[k % cols];
        match kind {
            CorruptionKind::Gaussian => {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += sigma * z;
            }
            CorruptionKind::Uniform => {
                let a = 3f64.sqrt() * sigma;
                *v += a * r.random_range(-1.0..=1.0);
            }
            CorruptionKind::FeatureDropout => {
                if r.random::<f64>() < 0.1 * s {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            kinds: vec![
                CorruptionKind::Gaussian,
                CorruptionKind::Uniform,
                CorruptionKind::FeatureDropout,
            ],
            severities: vec![1, 3, 5],
            seed: 0,
        }
    }
}

/// Accuracy of both nets on one input condition, with the pruned-minus-
/// unpruned difference in percentage points (positive = improvement).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub unpruned: f64,
    pub pruned: f64,
    pub delta_pp: f64,
}

impl AccuracyPair {
    pub fn new(unpruned: f64, pruned: f64) -> Self {
        Self {
            unpruned,
            pruned,
            delta_pp: (pruned - unpruned) * 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgsmResult {
    pub epsilon: f64,
    #[serde(flatten)]
    pub accuracy: AccuracyPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(flatten)]
    pub accuracy: AccuracyPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean: AccuracyPair,
    pub fgsm: Vec<FgsmResult>,
    pub corruptions: Vec<CorruptionResult>,
}

/// Clean, FGSM and corruption accuracies of both nets on `data`.
///
/// Each net is attacked with its own gradients. Corrupted inputs are shared
/// between the two nets.
pub fn robustness_report(
    unpruned: &ResidualNet,
    pruned: &ResidualNet,
    data: &Dataset,
    epsilons: &[f64],
    corruption: &CorruptionConfig,
) -> Result<RobustnessReport> {
    let clean = AccuracyPair::new(evaluate(unpruned, data)?, evaluate(pruned, data)?);
    let attacked = |net: &ResidualNet, eps: f64| -> Result<f64> {
        let adv = fgsm(net, &data.x, &data.y, eps)?;
        Ok(accuracy_of_logits(&net.forward(&adv)?, &data.y))
    };
    let fgsm = epsilons
        .iter()
        .map(|&eps| {
            Ok(FgsmResult {
                epsilon: eps,
                accuracy: AccuracyPair::new(attacked(unpruned, eps)?, attacked(pruned, eps)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut corruptions = Vec::new();
    for &kind in &corruption.kinds {
        for &severity in &corruption.severities {
            let xc = corrupt(&data.x, kind, severity, corruption.seed)?;
            let acc = |net: &ResidualNet| -> Result<f64> {
                Ok(accuracy_of_logits(&net.forward(&xc)?, &data.y))
            };
            corruptions.push(CorruptionResult {
                kind,
                severity,
                accuracy: AccuracyPair::new(acc(unpruned)?, acc(pruned)?),
            });
        }
    }
    Ok(RobustnessReport {
        clean,
        fgsm,
        corruptions,
    })
}

// -------------------------------------------------------------------- CO2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Co2Config {
    /// Sustained FLOP/s of the assumed hardware.
    pub throughput_flops: f64,
    pub power_w: f64,
    /// kg CO2 per kWh.
    pub intensity_kg_per_kwh: f64,
}

impl Default for Co2Config {
    fn default() -> Self {
        Self {
            throughput_flops: 1e12,
            power_w: 300.0,
            intensity_kg_per_kwh: 0.475,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Co2Estimate {
    pub flops_total: f64,
    pub assumed_throughput: f64,
    pub assumed_power_w: f64,
    pub assumed_intensity: f64,
    pub energy_kwh: f64,
    pub co2_kg: f64,
}

/// Energy and emissions of `total_flops` of compute:
/// `kWh = (flops / throughput) · power / 3.6e6`, `kg = kWh · intensity`.
pub fn co2_estimate(total_flops: f64, cfg: &Co2Config) -> Result<Co2Estimate> {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(cfg.throughput_flops) {
        return Err(Error::Config("co2 throughput must be positive".into()));
    }
    if !positive(total_flops) || !positive(cfg.power_w) || !positive(cfg.intensity_kg_per_kwh) {
        return Err(Error::Config("co2 inputs must be positive".into()));
    }
    let energy_kwh = total_flops / cfg.throughput_flops * cfg.power_w / 3.6e6;
    Ok(Co2Estimate {
        flops_total: total_flops,
        assumed_throughput: cfg.throughput_flops,
        assumed_power_w: cfg.power_w,
        assumed_intensity: cfg.intensity_kg_per_kwh,
        energy_kwh,
        co2_kg: energy_kwh * cfg.intensity_kg_per_kwh,
    })
}

/// `1 − pruned/unpruned` emissions, as a fraction.
pub fn co2_reduction(unpruned: &Co2Estimate, pruned: &Co2Estimate) -> f64 {
    1.0 - pruned.co2_kg / unpruned.co2_kg
}

/// Training compute: forward plus backward taken as three forwards, per
/// sample per epoch.
pub fn training_flops(per_sample_flops: usize, samples: usize, epochs: usize) -> f64 {
    3.0 * per_sample_flops as f64 * samples as f64 * epochs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, ArchSpec};
    use crate::training::{synth_dataset, train, TrainConfig};

    fn net(seed: u64) -> ResidualNet {
        ResidualNet::build(&ArchSpec {
            input_dim: 4,
            stage_widths: vec![6, 5],
            blocks_per_stage: vec![3, 3],
            num_classes: 3,
            activation: Activation::Relu,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn stats_recompute_from_raw() {
        let s = LatencyStats::from_raw(vec![3.0, 1.0, 2.0, 6.0], 10);
        assert_eq!(s.mean_ms, 3.0);
        assert_eq!(s.median_ms, 2.5);
        let var = (0.0 + 4.0 + 1.0 + 9.0) / 3.0;
        assert!((s.std_ms - f64::sqrt(var)).abs() < 1e-15);
        assert_eq!(LatencyStats::from_raw(vec![4.2], 1).std_ms, 0.0);
        assert_eq!(s.raw_csv().lines().count(), 5);
    }

    #[test]
    fn measured_stats_match_raw() {
        let st = measure_latency(&net(1), 50, 5, 1).unwrap();
        let again = LatencyStats::from_raw(st.raw_ms.clone(), 50);
        assert_eq!(st, again);
        assert_eq!(measure_latency(&net(1), 5, 1, 0).unwrap().std_ms, 0.0);
        assert!(measure_latency(&net(1), 0, 1, 0).is_err());
    }

    #[test]
    fn matching_respects_tolerance() {
        let n = net(2);
        let step = |k| PrunedStep { net: n.clone(), neurons_removed: k };
        let layer = [step(0), step(100), step(200)];
        let filter = [step(0), step(96), step(230)];
        assert_eq!(match_steps(&layer, &filter, 0.05), vec![(0, 0), (1, 1)]);
        assert!(matches!(
            latency_compare(&n, &[step(100)], &[step(300)], &LatencyConfig::default()),
            Err(Error::NoMatchedPairs(_))
        ));
    }

    #[test]
    fn fgsm_contract() {
        let n = net(3);
        let data = synth_dataset(60, 4, 3, 0.3, 1).unwrap();
        let x = &data.train.x;
        assert_eq!(&fgsm(&n, x, &data.train.y, 0.0).unwrap(), x);
        for eps in [1e-3, 0.1, 0.3, 1.7] {
            let adv = fgsm(&n, x, &data.train.y, eps).unwrap();
            for (a, b) in adv.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= eps);
            }
        }
        assert!(fgsm(&n, x, &data.train.y, -1.0).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let n = net(4);
        let data = synth_dataset(30, 4, 3, 0.3, 2).unwrap();
        let x = &data.train.x;
        let y = &data.train.y;
        let g = input_gradient(&n, x, y).unwrap();
        let loss = |m: &Matrix| softmax_cross_entropy(&n.forward(m).unwrap(), y).0;
        let h = 1e-5;
        for k in [0, 17, 53] {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            let num = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = g.data()[k];
            assert!((a - num).abs() <= 1e-4 * a.abs().max(num.abs()).max(1e-2), "{a} vs {num}");
        }
    }

    #[test]
    fn fgsm_hurts_linear_toy() {
        let spec = ArchSpec {
            input_dim: 2,
            stage_widths: vec![4],
            blocks_per_stage: vec![2],
            num_classes: 2,
            activation: Activation::Relu,
            seed: 5,
        };
        let data = synth_dataset(200, 2, 2, 0.3, 6).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 20,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let (n, _) = train(&ResidualNet::build(&spec).unwrap(), &data, &cfg).unwrap();
        let clean = evaluate(&n, &data.test).unwrap();
        let adv = fgsm(&n, &data.test.x, &data.test.y, 0.5).unwrap();
        let attacked = accuracy_of_logits(&n.forward(&adv).unwrap(), &data.test.y);
        assert!(attacked < clean, "{attacked} vs {clean}");
    }

    #[test]
    fn corruption_contract() {
        assert!("speckle".parse::<CorruptionKind>().is_err());
        assert_eq!("uniform".parse::<CorruptionKind>().unwrap(), CorruptionKind::Uniform);
        let x = Matrix::from_fn(10_000, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        assert!(corrupt(&x, CorruptionKind::Gaussian, 0, 1).is_err());
        assert!(corrupt(&x, CorruptionKind::Gaussian, 6, 1).is_err());
        for kind in [CorruptionKind::Gaussian, CorruptionKind::Uniform] {
            let a = corrupt(&x, kind, 3, 9).unwrap();
            assert_eq!(a, corrupt(&x, kind, 3, 9).unwrap());
            // feature std is exactly 1 here
            let noise: Vec<f64> = a.data().iter().zip(x.data()).map(|(p, q)| p - q).collect();
            let m = noise.iter().sum::<f64>() / noise.len() as f64;
            let sd = (noise.iter().map(|v| (v - m).powi(2)).sum::<f64>() / noise.len() as f64).sqrt();
            assert!((sd - 0.15).abs() < 0.05 * 0.15, "{kind}: {sd}");
        }
        let d = corrupt(&x, CorruptionKind::FeatureDropout, 2, 3).unwrap();
        let zeros = d.data().iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((zeros - 0.2).abs() < 0.02);
    }

    #[test]
    fn accuracy_non_increasing_in_severity_on_average() {
        let data = synth_dataset(600, 6, 4, 0.3, 11).unwrap();
        let spec = ArchSpec {
            input_dim: 6,
            stage_widths: vec![12],
            blocks_per_stage: vec![2],
            num_classes: 4,
            activation: Activation::Relu,
            seed: 2,
        };
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (n, _) = train(&ResidualNet::build(&spec).unwrap(), &data, &cfg).unwrap();
        for kind in [CorruptionKind::Gaussian, CorruptionKind::Uniform, CorruptionKind::FeatureDropout] {
            let mut prev = f64::INFINITY;
            for sev in 1..=5u8 {
                let mut acc = 0.0;
                for seed in 0..5 {
                    let xc = corrupt(&data.test.x, kind, sev, seed).unwrap();
                    acc += accuracy_of_logits(&n.forward(&xc).unwrap(), &data.test.y);
                }
                acc /= 5.0;
                assert!(acc <= prev + 1e-12, "{kind} severity {sev}: {acc} > {prev}");
                prev = acc;
            }
        }
    }

    #[test]
    fn report_self_comparison_is_zero() {
        let n = net(7);
        let data = synth_dataset(60, 4, 3, 0.3, 1).unwrap();
        let r = robustness_report(&n, &n, &data.test, &[0.0, 0.1], &CorruptionConfig::default()).unwrap();
        assert_eq!(r.clean.delta_pp, 0.0);
        assert!(r.fgsm.iter().all(|f| f.accuracy.delta_pp == 0.0));
        assert!(r.corruptions.iter().all(|c| c.accuracy.delta_pp == 0.0));
        assert_eq!(r.corruptions.len(), 9);
        let other = net(8);
        let r = robustness_report(&n, &other, &data.test, &[0.1], &CorruptionConfig::default()).unwrap();
        for c in &r.corruptions {
            assert_eq!(c.accuracy.delta_pp, (c.accuracy.pruned - c.accuracy.unpruned) * 100.0);
        }
    }

    #[test]
    fn co2_arithmetic() {
        let cfg = Co2Config::default();
        let full = co2_estimate(8e15, &cfg).unwrap();
        let half = co2_estimate(4e15, &cfg).unwrap();
        assert_eq!(half.co2_kg * 2.0, full.co2_kg);
        assert_eq!(full.co2_kg, full.energy_kwh * cfg.intensity_kg_per_kwh);
        assert_eq!(co2_reduction(&full, &co2_estimate(8e15, &cfg).unwrap()), 0.0);
        let doubled = Co2Config {
            intensity_kg_per_kwh: cfg.intensity_kg_per_kwh * 2.0,
            ..cfg.clone()
        };
        assert_eq!(co2_estimate(8e15, &doubled).unwrap().co2_kg, 2.0 * full.co2_kg);
        let zero = Co2Config {
            throughput_flops: 0.0,
            ..cfg
        };
        assert!(co2_estimate(1.0, &zero).is_err());
    }
}
