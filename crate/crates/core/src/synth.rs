//! Synthetic extracellular recordings with ground truth.
//!
//! Each cell gets a biphasic action-potential template (sharp trough, slower
//! and smaller positive rebound) and a spatial footprint over the electrode
//! grid. Recordings superimpose Poisson spike trains of those templates and
//! add band-limited Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthesis configuration: {0}")]
    InvalidConfig(String),
    #[error("cell_model_count must be at least 1")]
    NoCells,
    #[error("recording duration yields zero samples")]
    EmptyRecording,
    #[error("template bank does not match the configuration: {0}")]
    BankMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Cell models in the template library.
    pub cell_model_count: usize,
    /// Cells that actually fire in the recording (the first ones of the bank).
    pub active_cell_count: usize,
    pub recording_duration: f64,
    /// Additive noise RMS, volts, referred to the electrode.
    pub noise_rms: f64,
    pub band_low: f64,
    pub band_high: f64,
    /// Mean firing rate of each active cell, hertz.
    pub mean_spike_rate: f64,
    /// Each cell's rate is `mean * U(1 - jitter, 1 + jitter)`.
    pub rate_jitter: f64,
    pub refractory: f64,
    pub sample_rate: f64,
    pub channel_count: usize,
    /// Trough depth range on the dominant electrode, volts.
    pub trough_min: f64,
    pub trough_max: f64,
    /// Footprint radius of a cell, in electrode pitches.
    pub spatial_spread: f64,
    pub template_len: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cell_model_count: 130,
            active_cell_count: 20,
            recording_duration: 20.0,
            noise_rms: 10e-6,
            band_low: 500.0,
            band_high: 6000.0,
            mean_spike_rate: 20.0,
            rate_jitter: 0.0,
            refractory: 2e-3,
            sample_rate: 20_000.0,
            channel_count: 49,
            trough_min: 30e-6,
            trough_max: 150e-6,
            spatial_spread: 0.6,
            template_len: 64,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn sample_count(&self) -> usize {
        (self.recording_duration * self.sample_rate).round().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.cell_model_count == 0 {
            return Err(SynthError::NoCells);
        }
        if !(self.band_low > 0.0
            && self.band_low < self.band_high
            && self.band_high < self.sample_rate / 2.0)
        {
            return bad("need 0 < band_low < band_high < sample_rate / 2");
        }
        if !(self.recording_duration > 0.0) {
            return bad("recording_duration must be positive");
        }
        if !(self.noise_rms >= 0.0 && self.mean_spike_rate >= 0.0) {
            return bad("noise_rms and mean_spike_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rate_jitter) {
            return bad("rate_jitter must be within [0, 1)");
        }
        if !(self.refractory >= 0.0)
            || self.mean_spike_rate * (1.0 + self.rate_jitter) * self.refractory >= 1.0
        {
            return bad("refractory period incompatible with the spike rate");
        }
        if self.channel_count == 0 || self.channel_count > 1024 {
            return bad("channel_count must be within 1..=1024");
        }
        if self.active_cell_count > self.cell_model_count {
            return bad("active_cell_count exceeds cell_model_count");
        }
        if !(self.trough_min > 0.0 && self.trough_min <= self.trough_max) {
            return bad("need 0 < trough_min <= trough_max");
        }
        if !(self.spatial_spread > 0.0) {
            return bad("spatial_spread must be positive");
        }
        if self.template_len < crate::WINDOW_LEN {
            return bad("template_len must cover the 22-sample detector window");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub sample_rate: f64,
    pub cell_ids: Vec<u32>,
    /// Waveform of each cell in volts, scaled to its dominant-electrode depth.
    pub templates: Vec<Vec<f64>>,
    /// Sample of each template's trough; spike times refer to this sample.
    pub trough_index: Vec<usize>,
    /// `weights[cell][channel]`, 1.0 on the dominant electrode.
    pub weights: Vec<Vec<f64>>,
}

impl TemplateBank {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn dominant_channel(&self, cell: usize) -> usize {
        let w = &self.weights[cell];
        (0..w.len())
            .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn check(&self, cfg: &SynthConfig) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BankMismatch(m));
        let n = self.templates.len();
        if n == 0 || self.cell_ids.len() != n || self.trough_index.len() != n || self.weights.len() != n {
            return bad("bank fields have inconsistent lengths".into());
        }
        if n < cfg.active_cell_count {
            return bad(format!("{n} cells, {} requested", cfg.active_cell_count));
        }
        if (self.sample_rate - cfg.sample_rate).abs() > 1e-9 {
            return bad("template sample rate differs from the recording".into());
        }
        for (i, t) in self.templates.iter().enumerate() {
            if t.len() < crate::WINDOW_LEN || t.iter().any(|v| !v.is_finite()) {
                return bad(format!("template {i} is too short or non-finite"));
            }
            if t.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 0.0 {
                return bad(format!("template {i} is flat"));
            }
            if self.trough_index[i] >= t.len() {
                return bad(format!("template {i} trough index out of range"));
            }
            if self.weights[i].len() != cfg.channel_count {
                return bad(format!("template {i} has the wrong channel count"));
            }
        }
        Ok(())
    }
}

/// Multichannel trace matrix, row per channel, volts.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sample_rate: f64,
    pub traces: Vec<Vec<f64>>,
}

impl Recording {
    pub fn channel_count(&self) -> usize {
        self.traces.len()
    }

    pub fn sample_count(&self) -> usize {
        self.traces.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        self.sample_count() as f64 / self.sample_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthSpike {
    pub cell_id: u32,
    /// Sample index of the trough.
    pub spike_time: u64,
    pub channel: u16,
}

pub type GroundTruth = Vec<GroundTruthSpike>;

const TEMPLATE_STREAM: u64 = 1;
const SPIKE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 1 << 32;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(t: f64, center: f64, sigma: f64) -> f64 {
    let z = (t - center) / sigma;
    (-0.5 * z * z).exp()
}

/// Zero every DFT bin outside `[low, high]` hertz (circular, length of `x`).
fn band_limit(x: &mut [f64], fs: f64, low: f64, high: f64, planner: &mut FftPlanner<f64>) {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        if f < low || f > high {
            *b = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, b) in x.iter_mut().zip(&buf) {
        *v = b.re / n as f64;
    }
}

fn grid_position(channel: usize, side: usize) -> (f64, f64) {
    ((channel % side) as f64, (channel / side) as f64)
}

pub fn generate_templates(cfg: &SynthConfig) -> Result<TemplateBank, SynthError> {
    cfg.validate()?;
    let mut r = rng(cfg.rng_seed, TEMPLATE_STREAM);
    let mut planner = FftPlanner::new();
    let fs = cfg.sample_rate;
    let len = cfg.template_len;
    let side = (cfg.channel_count as f64).sqrt().ceil() as usize;
    let taper = (len / 8).max(1);
    let mut bank = TemplateBank {
        sample_rate: fs,
        cell_ids: Vec::with_capacity(cfg.cell_model_count),
        templates: Vec::with_capacity(cfg.cell_model_count),
        trough_index: Vec::with_capacity(cfg.cell_model_count),
        weights: Vec::with_capacity(cfg.cell_model_count),
    };
    let trough_at = 0.3 * len as f64 / fs;
    for cell in 0..cfg.cell_model_count {
        // Widths in seconds; the rebound area matches the trough so the
        // waveform carries little DC.
        let sigma_trough = r.random_range(0.08e-3..0.20e-3);
        let sigma_rebound = r.random_range(0.30e-3..0.70e-3);
        let delay = r.random_range(0.30e-3..0.80e-3);
        let rebound = sigma_trough / sigma_rebound * r.random_range(0.6..1.0);
        let mut t: Vec<f64> = (0..len)
            .map(|i| {
                let s = i as f64 / fs;
                -gaussian(s, trough_at, sigma_trough) + rebound * gaussian(s, trough_at + delay, sigma_rebound)
            })
            .collect();
        band_limit(&mut t, fs, cfg.band_low, cfg.band_high, &mut planner);
        for i in 0..taper {
            let w = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / taper as f64).cos();
            t[i] *= w;
            t[len - 1 - i] *= w;
        }
        let (trough_index, depth) = t
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let amplitude = r.random_range(cfg.trough_min..=cfg.trough_max);
        let scale = amplitude / depth.abs();
        t.iter_mut().for_each(|v| *v *= scale);

        let home = r.random_range(0..cfg.channel_count);
        let (hx, hy) = grid_position(home, side);
        let (px, py) = (hx + r.random_range(-0.5..0.5), hy + r.random_range(-0.5..0.5));
        let mut w: Vec<f64> = (0..cfg.channel_count)
            .map(|c| {
                let (x, y) = grid_position(c, side);
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                (-d2 / (2.0 * cfg.spatial_spread.powi(2))).exp()
            })
            .collect();
        let peak = w.iter().cloned().fold(0.0, f64::max);
        w.iter_mut().for_each(|v| *v /= peak);

        bank.cell_ids.push(cell as u32);
        bank.templates.push(t);
        bank.trough_index.push(trough_index);
        bank.weights.push(w);
    }
    Ok(bank)
}

/// Spike trough times (samples) for one cell: exponential intervals shifted by
/// the refractory gap, with the exponential rate raised so the mean rate holds.
fn spike_train(rate: f64, refractory: f64, duration: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return Vec::new();
    }
    let free = Exp::new(1.0 / (1.0 / rate - refractory)).expect("positive rate");
    let mut times = Vec::new();
    let mut t = Exp::new(rate).expect("positive rate").sample(r);
    while t < duration {
        times.push(t);
        t += refractory + free.sample(r);
    }
    times
}

pub fn generate_recording(
    cfg: &SynthConfig,
    bank: &TemplateBank,
) -> Result<(Recording, GroundTruth), SynthError> {
    cfg.validate()?;
    let n = cfg.sample_count();
    if n == 0 {
        return Err(SynthError::EmptyRecording);
    }
    bank.check(cfg)?;
    let mut spikes_r = rng(cfg.rng_seed, SPIKE_STREAM);
    let mut gt = Vec::new();
    for cell in 0..cfg.active_cell_count {
        let jitter = if cfg.rate_jitter > 0.0 {
            spikes_r.random_range(1.0 - cfg.rate_jitter..1.0 + cfg.rate_jitter)
        } else {
            1.0
        };
        let rate = cfg.mean_spike_rate * jitter;
        let trough = bank.trough_index[cell];
        let len = bank.templates[cell].len();
        for t in spike_train(rate, cfg.refractory, cfg.recording_duration, &mut spikes_r) {
            let s = (t * cfg.sample_rate).round() as usize;
            if s < trough || s - trough + len > n {
                continue;
            }
            gt.push(GroundTruthSpike {
                cell_id: bank.cell_ids[cell],
                spike_time: s as u64,
                channel: bank.dominant_channel(cell) as u16,
            });
        }
    }
    gt.sort_by_key(|g| (g.spike_time, g.cell_id));

    let index_of = |id: u32| bank.cell_ids.iter().position(|&c| c == id).expect("cell in bank");
    let traces: Vec<Vec<f64>> = (0..cfg.channel_count)
        .into_par_iter()
        .map(|ch| {
            let mut trace = if cfg.noise_rms > 0.0 {
                band_limited_noise(cfg, ch, n)
            } else {
                vec![0.0; n]
            };
            for g in &gt {
                let cell = index_of(g.cell_id);
                let w = bank.weights[cell][ch];
                if w == 0.0 {
                    continue;
                }
                let onset = g.spike_time as usize - bank.trough_index[cell];
                for (dst, v) in trace[onset..].iter_mut().zip(&bank.templates[cell]) {
                    *dst += w * v;
                }
            }
            trace
        })
        .collect();
    Ok((
        Recording {
            sample_rate: cfg.sample_rate,
            traces,
        },
        gt,
    ))
}

fn band_limited_noise(cfg: &SynthConfig, channel: usize, n: usize) -> Vec<f64> {
    let mut r = rng(cfg.rng_seed, NOISE_STREAM + channel as u64);
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut planner = FftPlanner::new();
    band_limit(&mut x, cfg.sample_rate, cfg.band_low, cfg.band_high, &mut planner);
    let kept = (0..n)
        .filter(|&k| {
            let f = k.min(n - k) as f64 * cfg.sample_rate / n as f64;
            f >= cfg.band_low && f <= cfg.band_high
        })
        .count();
    let scale = cfg.noise_rms / (kept as f64 / n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= scale);
    x
}
