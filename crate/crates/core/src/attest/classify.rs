//! Rule-based workload classification over telemetry traces, a labeled
//! trace generator, and evasion transforms.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chipmodel::EpochMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadLabel {
    FrontierTraining,
    Inference,
    NonAi,
}

impl WorkloadLabel {
    pub const ALL: [WorkloadLabel; 3] = [WorkloadLabel::FrontierTraining, WorkloadLabel::Inference, WorkloadLabel::NonAi];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    FrontierTraining,
    Inference,
    NonAi,
    Indeterminate,
}

impl From<WorkloadLabel> for ClassLabel {
    fn from(l: WorkloadLabel) -> Self {
        match l {
            WorkloadLabel::FrontierTraining => ClassLabel::FrontierTraining,
            WorkloadLabel::Inference => ClassLabel::Inference,
            WorkloadLabel::NonAi => ClassLabel::NonAi,
        }
    }
}

/// Per-step telemetry of one device.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceSeries {
    pub utilization: Vec<f64>,
    pub interconnect_bytes: Vec<u64>,
    pub pcie_bytes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub devices: Vec<DeviceSeries>,
    pub step_period_ms: EpochMs,
    /// Ground truth, known only to the generator.
    pub label: Option<WorkloadLabel>,
}

impl WorkloadTrace {
    pub fn steps(&self) -> usize {
        self.devices.first().map_or(0, |d| d.utilization.len())
    }

    /// Utilization within `[0, 1]` and equal lengths everywhere.
    pub fn is_valid(&self) -> bool {
        let n = self.steps();
        self.devices.iter().all(|d| {
            d.utilization.len() == n
                && d.interconnect_bytes.len() == n
                && d.pcie_bytes.len() == n
                && d.utilization.iter().all(|u| (0.0..=1.0).contains(u))
        })
    }

    /// Interconnect bytes summed over devices, per step.
    pub fn aggregate_interconnect(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.steps()];
        for d in &self.devices {
            for (o, b) in out.iter_mut().zip(&d.interconnect_bytes) {
                *o += *b as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Device count must exceed this.
    pub min_devices: usize,
    pub min_mean_utilization: f64,
    pub max_utilization_stddev: f64,
    pub min_autocorrelation: f64,
    /// Shortest trace the periodicity test accepts; lags up to half of it
    /// are searched.
    pub autocorrelation_window: usize,
    /// Shortest lag counted as a training-step period.
    pub min_period_steps: usize,
    /// Mean interconnect bytes per device per step below which traffic is low.
    pub low_interconnect_bytes: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            min_devices: 64,
            min_mean_utilization: 0.8,
            max_utilization_stddev: 0.05,
            min_autocorrelation: 0.6,
            autocorrelation_window: 32,
            min_period_steps: 2,
            low_interconnect_bytes: 1e5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub device_count: usize,
    pub mean_utilization: f64,
    /// Mean over devices of the per-device standard deviation over time.
    pub utilization_stddev: f64,
    pub autocorrelation_peak: f64,
    pub peak_lag: usize,
    pub mean_interconnect_bytes: f64,
    pub many_devices: bool,
    pub steady: bool,
    pub periodic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: ClassLabel,
    pub features: Option<FeatureScores>,
}

/// Normalized autocorrelation of `x` at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if var <= 0.0 {
        return 0.0;
    }
    let cov: f64 = (0..n - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum();
    cov / var
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|u| (u - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn features(trace: &WorkloadTrace, cfg: &ClassifierConfig) -> FeatureScores {
    let n = trace.devices.len();
    let mut mean_sum = 0.0;
    let mut std_sum = 0.0;
    let mut bytes = 0.0;
    for d in &trace.devices {
        let (m, s) = mean_std(&d.utilization);
        mean_sum += m;
        std_sum += s;
        bytes += d.interconnect_bytes.iter().map(|b| *b as f64).sum::<f64>() / d.interconnect_bytes.len().max(1) as f64;
    }
    let nf = n.max(1) as f64;
    let agg = trace.aggregate_interconnect();
    let max_lag = (cfg.autocorrelation_window / 2).max(cfg.min_period_steps);
    let (mut peak, mut peak_lag) = (0.0, 0);
    for lag in cfg.min_period_steps..=max_lag {
        let r = autocorrelation(&agg, lag);
        if r > peak {
            peak = r;
            peak_lag = lag;
        }
    }
    let mean_utilization = mean_sum / nf;
    let utilization_stddev = std_sum / nf;
    FeatureScores {
        device_count: n,
        mean_utilization,
        utilization_stddev,
        autocorrelation_peak: peak,
        peak_lag,
        mean_interconnect_bytes: bytes / nf,
        many_devices: n > cfg.min_devices,
        steady: utilization_stddev < cfg.max_utilization_stddev && mean_utilization > cfg.min_mean_utilization,
        periodic: peak >= cfg.min_autocorrelation,
    }
}

/// Frontier training needs all three features; inference is bursty
/// utilization with little interconnect traffic; anything else is non-AI.
pub fn classify(trace: &WorkloadTrace, cfg: &ClassifierConfig) -> Classification {
    if trace.devices.is_empty() || trace.steps() < cfg.autocorrelation_window {
        return Classification { label: ClassLabel::Indeterminate, features: None };
    }
    let f = features(trace, cfg);
    let label = if f.many_devices && f.steady && f.periodic {
        ClassLabel::FrontierTraining
    } else if f.utilization_stddev >= cfg.max_utilization_stddev && f.mean_interconnect_bytes < cfg.low_interconnect_bytes {
        ClassLabel::Inference
    } else {
        ClassLabel::NonAi
    };
    Classification { label, features: Some(f) }
}

/// Frontier-training template: steady near-peak utilization and periodic
/// all-reduce bursts every `period` steps.
pub fn frontier_trace<R: Rng + ?Sized>(rng: &mut R, devices: usize, steps: usize, period: usize) -> WorkloadTrace {
    let util: Normal<f64> = Normal::new(0.95, 0.02).expect("valid normal");
    let period = period.max(2);
    let phase = rng.random_range(0..period);
    let burst = rng.random_range(5e7..5e8);
    let series = (0..devices)
        .map(|_| {
            let mut d = DeviceSeries::default();
            for t in 0..steps {
                d.utilization.push(util.sample(rng).clamp(0.0, 1.0));
                let b = if t % period == phase { burst * rng.random_range(0.9..1.1) } else { rng.random_range(0.0..1e5) };
                d.interconnect_bytes.push(b as u64);
                d.pcie_bytes.push(rng.random_range(1e4..1e5) as u64);
            }
            d
        })
        .collect();
    WorkloadTrace { devices: series, step_period_ms: 1000, label: Some(WorkloadLabel::FrontierTraining) }
}

fn inference_trace<R: Rng + ?Sized>(rng: &mut R, devices: usize, steps: usize) -> WorkloadTrace {
    let busy = rng.random_range(0.3..0.7);
    let series = (0..devices)
        .map(|_| {
            let mut d = DeviceSeries::default();
            for _ in 0..steps {
                let u = if rng.random_bool(busy) { rng.random_range(0.4..1.0) } else { rng.random_range(0.0..0.1) };
                d.utilization.push(u);
                d.interconnect_bytes.push(rng.random_range(0.0..2e4) as u64);
                d.pcie_bytes.push(rng.random_range(1e4..1e6) as u64);
            }
            d
        })
        .collect();
    WorkloadTrace { devices: series, step_period_ms: 1000, label: Some(WorkloadLabel::Inference) }
}

fn non_ai_trace<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> WorkloadTrace {
    let hpc = rng.random_bool(0.5);
    let devices = if hpc { rng.random_range(16..=512) } else { rng.random_range(1..=32) };
    let level = if hpc { rng.random_range(0.5..0.99) } else { 0.98 };
    let util: Normal<f64> = Normal::new(level, 0.01).expect("valid normal");
    let series = (0..devices)
        .map(|_| {
            let mut d = DeviceSeries::default();
            for _ in 0..steps {
                d.utilization.push(util.sample(rng).clamp(0.0, 1.0));
                d.interconnect_bytes.push(if hpc { rng.random_range(1e6..1e8) as u64 } else { 0 });
                d.pcie_bytes.push(rng.random_range(1e3..1e5) as u64);
            }
            d
        })
        .collect();
    WorkloadTrace { devices: series, step_period_ms: 1000, label: Some(WorkloadLabel::NonAi) }
}

/// A random trace of the given class.
pub fn generate_trace<R: Rng + ?Sized>(rng: &mut R, label: WorkloadLabel, steps: usize) -> WorkloadTrace {
    match label {
        WorkloadLabel::FrontierTraining => {
            let devices = rng.random_range(96..=384);
            let period = rng.random_range(2..=8);
            frontier_trace(rng, devices, steps, period)
        }
        WorkloadLabel::Inference => {
            let devices = rng.random_range(1..=256);
            inference_trace(rng, devices, steps)
        }
        WorkloadLabel::NonAi => non_ai_trace(rng, steps),
    }
}

/// Adds Gaussian noise of standard deviation `magnitude` to utilization and
/// uniform junk traffic up to `magnitude` times the mean aggregate
/// interconnect volume.
pub fn inject_noise<R: Rng + ?Sized>(trace: &WorkloadTrace, magnitude: f64, rng: &mut R) -> WorkloadTrace {
    if magnitude <= 0.0 {
        return trace.clone();
    }
    let noise = Normal::new(0.0, magnitude).expect("valid normal");
    let mean_bytes = {
        let agg = trace.aggregate_interconnect();
        agg.iter().sum::<f64>() / agg.len().max(1) as f64 / trace.devices.len().max(1) as f64
    };
    let mut out = trace.clone();
    for d in &mut out.devices {
        for u in &mut d.utilization {
            *u = (*u + noise.sample(rng)).clamp(0.0, 1.0);
        }
        for b in &mut d.interconnect_bytes {
            *b += (rng.random_range(0.0..1.0) * magnitude * mean_bytes * 10.0) as u64;
        }
    }
    out
}

/// Splits the devices into `k` contiguous groups, one trace per group.
pub fn fragment(trace: &WorkloadTrace, k: usize) -> Vec<WorkloadTrace> {
    let k = k.max(1);
    let n = trace.devices.len();
    (0..k)
        .map(|i| WorkloadTrace {
            devices: trace.devices[i * n / k..(i + 1) * n / k].to_vec(),
            step_period_ms: trace.step_period_ms,
            label: trace.label,
        })
        .collect()
}

/// Label at each noise magnitude, in order.
pub fn noise_sweep<R: Rng + ?Sized>(
    trace: &WorkloadTrace,
    magnitudes: &[f64],
    cfg: &ClassifierConfig,
    rng: &mut R,
) -> Vec<(f64, ClassLabel)> {
    magnitudes.iter().map(|m| (*m, classify(&inject_noise(trace, *m, rng), cfg).label)).collect()
}

/// First magnitude whose label differs from the noiseless one.
pub fn flip_point(sweep: &[(f64, ClassLabel)]) -> Option<f64> {
    let base = sweep.first()?.1;
    sweep.iter().find(|(_, l)| *l != base).map(|(m, _)| *m)
}
