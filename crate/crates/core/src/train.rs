//! Offline calibration: PCA basis from pooled spike windows, coefficient
//! quantization, shift selection and the trigger grid search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adc::{Polarity, TriggerConfig};
use crate::compress::{compress_window, mac_step, ChannelMemoryEntry, QuantizedPcaMemory};
use crate::eval::{sort_and_score, Detection, TruthSpike};
use crate::pipeline::{extract_windows, CodeMatrix, SpikeWindow};
use crate::{COMPONENTS, WINDOW_LEN};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("covariance is degenerate (all spike rows identical)")]
    DegenerateCovariance,
    #[error("need at least {need} spike rows, got {got}")]
    TooFewSpikes { need: usize, got: usize },
    #[error("k = {0} is outside 1..=22")]
    BadComponentCount(usize),
    #[error("search grid has no feasible point")]
    EmptyGrid,
    #[error("no shift setting avoids saturation on the training spikes")]
    NoShiftFits,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and the matching unit eigenvectors.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let norm: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

/// Training corpus: centered 22-sample windows pooled over all channels.
pub type SpikeMatrix = Vec<[f64; WINDOW_LEN]>;

pub fn spike_matrix(windows: &[SpikeWindow]) -> SpikeMatrix {
    windows
        .iter()
        .map(|w| {
            let mut row = [0.0; WINDOW_LEN];
            for (r, c) in row.iter_mut().zip(w.centered()) {
                *r = c as f64;
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// `components[c]` is the c-th eigenvector (a column of W).
    pub components: Vec<[f64; WINDOW_LEN]>,
    pub eigenvalues: Vec<f64>,
    pub mean: [f64; WINDOW_LEN],
}

impl PcaBasis {
    /// Full-precision projection `x W`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// Full-precision reconstruction `p W^T`.
    pub fn reconstruct(&self, p: &[f64]) -> [f64; WINDOW_LEN] {
        let mut out = [0.0; WINDOW_LEN];
        for (w, &pc) in self.components.iter().zip(p) {
            for (o, wi) in out.iter_mut().zip(w) {
                *o += pc * wi;
            }
        }
        out
    }
}

pub fn covariance(spikes: &SpikeMatrix) -> ([f64; WINDOW_LEN], Vec<Vec<f64>>) {
    let n = spikes.len() as f64;
    let mut mean = [0.0; WINDOW_LEN];
    for row in spikes {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = vec![vec![0.0; WINDOW_LEN]; WINDOW_LEN];
    for row in spikes {
        for i in 0..WINDOW_LEN {
            let di = row[i] - mean[i];
            for j in i..WINDOW_LEN {
                cov[i][j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..WINDOW_LEN {
        for j in i..WINDOW_LEN {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    (mean, cov)
}

/// Top-`k` principal axes of the pooled spike windows. Each axis is signed so
/// its largest-magnitude entry is positive.
pub fn compute_pca_basis(spikes: &SpikeMatrix, k: usize) -> Result<PcaBasis, TrainError> {
    if k == 0 || k > WINDOW_LEN {
        return Err(TrainError::BadComponentCount(k));
    }
    if spikes.len() < 2 {
        return Err(TrainError::TooFewSpikes { need: 2, got: spikes.len() });
    }
    let (mean, cov) = covariance(spikes);
    let trace: f64 = (0..WINDOW_LEN).map(|i| cov[i][i]).sum();
    let energy: f64 = mean.iter().map(|m| m * m).sum();
    if trace <= 1e-12 * energy.max(1.0) {
        return Err(TrainError::DegenerateCovariance);
    }
    let (values, vectors) = jacobi_eigen(&cov);
    let components = vectors
        .into_iter()
        .take(k)
        .map(|v| {
            let lead = v.iter().fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            let mut col = [0.0; WINDOW_LEN];
            for (c, x) in col.iter_mut().zip(&v) {
                *c = sign * x;
            }
            col
        })
        .collect();
    Ok(PcaBasis {
        components,
        eigenvalues: values.into_iter().take(k).map(|l| l.max(0.0)).collect(),
        mean,
    })
}

/// Quantize the first four axes to signed 9-bit with one global scale chosen
/// so the largest magnitude maps to 255.
pub fn quantize_basis(basis: &PcaBasis, mac_shift: u32, out_shift: u32) -> Result<QuantizedPcaMemory, TrainError> {
    if basis.components.len() < COMPONENTS {
        return Err(TrainError::BadComponentCount(basis.components.len()));
    }
    let max = basis.components[..COMPONENTS]
        .iter()
        .flatten()
        .fold(0.0f64, |m, w| m.max(w.abs()));
    let scale = if max > 0.0 { 255.0 / max } else { 1.0 };
    let mut coefficients = [[0i16; WINDOW_LEN]; COMPONENTS];
    for (row, w) in coefficients.iter_mut().zip(&basis.components) {
        for (q, &x) in row.iter_mut().zip(w) {
            *q = (x * scale).round().clamp(-256.0, 255.0) as i16;
        }
    }
    Ok(QuantizedPcaMemory {
        coefficients,
        mac_shift,
        out_shift,
        scale,
    })
}

/// Smallest `mac_shift`, then smallest `out_shift`, with no saturation in the
/// running sums or the output components over `windows` (centered codes).
pub fn select_shifts(mem: &QuantizedPcaMemory, windows: &[SpikeWindow]) -> Result<(u32, u32), TrainError> {
    let mut probe = mem.clone();
    for mac_shift in 0..=16 {
        probe.mac_shift = mac_shift;
        let mut peak = 0i32;
        let fits = windows.iter().all(|w| {
            let mut e = ChannelMemoryEntry::default();
            for &code in &w.codes {
                let (next, sat) = mac_step(e, code, &probe).expect("window within 22 samples");
                if sat > 0 {
                    return false;
                }
                e = next;
            }
            peak = e.sums.iter().fold(peak, |p, &s| p.max(if s < 0 { -(s as i32) - 1 } else { s as i32 }));
            true
        });
        if !fits {
            continue;
        }
        // Smallest out_shift with |sum >> out_shift| inside 6 bits.
        let out_shift = (0..=16).find(|&o| peak >> o <= 31).ok_or(TrainError::NoShiftFits)?;
        return Ok((mac_shift, out_shift));
    }
    Err(TrainError::NoShiftFits)
}

/// Calibrated PCA memory for a set of windows.
pub fn train_memory(windows: &[SpikeWindow]) -> Result<(PcaBasis, QuantizedPcaMemory), TrainError> {
    let basis = compute_pca_basis(&spike_matrix(windows), COMPONENTS)?;
    let mut mem = quantize_basis(&basis, 0, 0)?;
    let (m, o) = select_shifts(&mem, windows)?;
    mem.mac_shift = m;
    mem.out_shift = o;
    Ok((basis, mem))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub threshold1: Vec<u8>,
    pub threshold2: Vec<u8>,
    pub pretrigger_n: Vec<u8>,
    pub posttrigger_m: Vec<u8>,
    #[serde(default)]
    pub polarity: Polarity,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            threshold1: (3..=10).map(|k| 128 - k).collect(),
            threshold2: (6..=13).map(|k| 128 - k).collect(),
            pretrigger_n: vec![2, 3, 4],
            posttrigger_m: vec![17, 19, 21],
            polarity: Polarity::NegativeGoing,
        }
    }
}

impl SearchSpace {
    /// Every valid trigger configuration in the grid, in a fixed order.
    pub fn points(&self) -> Vec<TriggerConfig> {
        let mut out = Vec::new();
        for &t1 in &self.threshold1 {
            for &t2 in &self.threshold2 {
                for &n in &self.pretrigger_n {
                    for &m in &self.posttrigger_m {
                        let cfg = TriggerConfig {
                            threshold1: t1,
                            threshold2: t2,
                            pretrigger_n: n,
                            posttrigger_m: m,
                            polarity: self.polarity,
                        };
                        if cfg.validate().is_ok() {
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub trigger: TriggerConfig,
    pub accuracy: f64,
    pub digitized_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub trigger: TriggerConfig,
    pub basis: PcaBasis,
    pub memory: QuantizedPcaMemory,
    pub accuracy: f64,
    pub digitized_samples: u64,
    pub evaluated: Vec<GridPoint>,
}

/// Samples converted by the detector over `codes`, aborted arms included.
pub fn digitized_samples(codes: &CodeMatrix, trigger: &TriggerConfig, enable: &[bool]) -> u64 {
    let mut total = 0u64;
    for (ch, series) in codes.codes.iter().enumerate() {
        if !enable.get(ch).copied().unwrap_or(false) {
            continue;
        }
        let mut st = crate::adc::ChannelTriggerState::default();
        for &code in series {
            if st.phase == crate::adc::TriggerPhase::Idle && !trigger.beyond(code, trigger.threshold1) {
                continue;
            }
            let (next, action) = crate::adc::dual_threshold_step(st, code, trigger);
            total += action.digitizes() as u64;
            st = next;
        }
    }
    total
}

struct PointResult {
    accuracy: f64,
    digitized: u64,
    trained: Option<(PcaBasis, QuantizedPcaMemory)>,
}

fn evaluate_point(
    codes: &CodeMatrix,
    truth: &[TruthSpike],
    trigger: &TriggerConfig,
    enable: &[bool],
    window: u64,
) -> PointResult {
    let digitized = digitized_samples(codes, trigger, enable);
    let windows = extract_windows(codes, trigger, enable);
    let Ok((basis, mem)) = train_memory(&windows) else {
        return PointResult { accuracy: 0.0, digitized, trained: None };
    };
    let detections: Vec<Detection> = windows
        .iter()
        .map(|w| {
            let (s, _) = compress_window(&w.codes, &mem, w.channel, w.start_period).expect("window fits");
            Detection {
                channel: w.channel,
                time: w.start_period,
                features: s.components.iter().map(|&c| c as f64).collect(),
            }
        })
        .collect();
    let split = codes.periods() as u64 / 2;
    let accuracy = sort_and_score(&detections, truth, split, window).map_or(0.0, |r| r.accuracy);
    PointResult {
        accuracy,
        digitized,
        trained: Some((basis, mem)),
    }
}

/// Exhaustive grid search over trigger settings. Each point trains a PCA
/// memory on its own detections and is scored by the accuracy of the
/// compressed-stream sorter (first half of `codes` trains the classifier,
/// second half scores it). Ties go to fewer digitized samples, then to grid
/// order.
pub fn calibrate(
    codes: &CodeMatrix,
    truth: &[TruthSpike],
    search: &SearchSpace,
    enable: &[bool],
    window: u64,
) -> Result<Calibration, TrainError> {
    let points = search.points();
    if points.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let results: Vec<PointResult> = points
        .par_iter()
        .map(|t| evaluate_point(codes, truth, t, enable, window))
        .collect();
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if r.trained.is_none() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let rb = &results[b];
                r.accuracy > rb.accuracy || (r.accuracy == rb.accuracy && r.digitized < rb.digitized)
            }
        };
        if better {
            best = Some(i);
        }
    }
    let b = best.ok_or(TrainError::TooFewSpikes { need: 2, got: 0 })?;
    let evaluated = points
        .iter()
        .zip(&results)
        .map(|(t, r)| GridPoint {
            trigger: *t,
            accuracy: r.accuracy,
            digitized_samples: r.digitized,
        })
        .collect();
    let (basis, memory) = results[b].trained.clone().expect("best point trained");
    Ok(Calibration {
        trigger: points[b],
        basis,
        memory,
        accuracy: results[b].accuracy,
        digitized_samples: results[b].digitized,
        evaluated,
    })
}

/// Calibrate on the periods before `split` only.
pub fn calibrate_on_training_split(
    codes: &CodeMatrix,
    truth: &[TruthSpike],
    search: &SearchSpace,
    enable: &[bool],
    window: u64,
    split: u64,
) -> Result<Calibration, TrainError> {
    let train_codes = codes.slice(0, split as usize);
    let train_truth: Vec<TruthSpike> = truth.iter().copied().filter(|t| t.time < split).collect();
    calibrate(&train_codes, &train_truth, search, enable, window)
}
