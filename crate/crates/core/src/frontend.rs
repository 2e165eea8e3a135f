//! Behavioral front-end: input-referred noise, band-pass, gain, output clamp,
//! then sample-and-hold decimation to the ADC rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrontEndError {
    #[error("invalid front-end configuration: {0}")]
    InvalidConfig(String),
    #[error("trace rate {trace_rate} Hz is not an integer multiple of {sample_rate} Hz")]
    NonIntegerDecimation { trace_rate: f64, sample_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontEndConfig {
    pub gain_db: f64,
    pub band_low: f64,
    pub band_high: f64,
    /// Butterworth order of the high-pass corner.
    pub highpass_order: u32,
    /// Butterworth order of the low-pass corner.
    pub lowpass_order: u32,
    /// Input-referred noise RMS integrated over the pass band, volts.
    pub input_noise_rms: f64,
    pub output_low: f64,
    pub output_high: f64,
    pub baseline: f64,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            gain_db: 54.6,
            band_low: 500.0,
            band_high: 9_200.0,
            highpass_order: 1,
            lowpass_order: 1,
            input_noise_rms: 15.8e-6,
            output_low: 0.0,
            output_high: 1.0,
            baseline: 0.5,
        }
    }
}

impl FrontEndConfig {
    pub fn linear_gain(&self) -> f64 {
        10f64.powf(self.gain_db / 20.0)
    }

    pub fn validate(&self, trace_rate: f64) -> Result<(), FrontEndError> {
        let bad = |m: &str| Err(FrontEndError::InvalidConfig(m.to_string()));
        if !(self.band_low > 0.0 && self.band_low < self.band_high) {
            return bad("band_low must be positive and below band_high");
        }
        if self.band_high >= trace_rate / 2.0 {
            return bad("band_high must be below the Nyquist frequency");
        }
        if !(1..=8).contains(&self.highpass_order) || !(1..=8).contains(&self.lowpass_order) {
            return bad("filter orders must be within 1..=8");
        }
        if !(self.output_high > self.output_low) {
            return bad("output range must have positive width");
        }
        if !(self.output_low..=self.output_high).contains(&self.baseline) {
            return bad("baseline must lie inside the output range");
        }
        if !(self.input_noise_rms >= 0.0) || !self.gain_db.is_finite() {
            return bad("noise must be non-negative and gain finite");
        }
        Ok(())
    }
}

/// Transposed direct-form II section; first-order sections leave `b2`/`a2` zero.
#[derive(Debug, Clone, Copy)]
struct Section {
    b: [f64; 3],
    a: [f64; 2],
    s: [f64; 2],
}

impl Section {
    fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.s[0];
        self.s[0] = self.b[1] * x - self.a[0] * y + self.s[1];
        self.s[1] = self.b[2] * x - self.a[1] * y;
        y
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Put the section in the steady state for a constant input `x`.
    fn settle(&mut self, x: f64) -> f64 {
        let y = self.dc_gain() * x;
        self.s[1] = self.b[2] * x - self.a[1] * y;
        self.s[0] = self.b[1] * x - self.a[0] * y + self.s[1];
        y
    }
}

fn butterworth(order: u32, f0: f64, fs: f64, highpass: bool) -> Vec<Section> {
    let mut out = Vec::new();
    let w0 = 2.0 * PI * f0 / fs;
    let (sin, cos) = w0.sin_cos();
    for k in 1..=order / 2 {
        let q = 1.0 / (2.0 * ((2 * k - 1) as f64 * PI / (2 * order) as f64).sin());
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        out.push(Section {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
            s: [0.0; 2],
        });
    }
    if order % 2 == 1 {
        let k = (PI * f0 / fs).tan();
        let a1 = (k - 1.0) / (k + 1.0);
        let b = if highpass {
            [1.0 / (1.0 + k), -1.0 / (1.0 + k), 0.0]
        } else {
            [k / (1.0 + k), k / (1.0 + k), 0.0]
        };
        out.push(Section {
            b,
            a: [a1, 0.0],
            s: [0.0; 2],
        });
    }
    out
}

/// One channel of the amplifier with its own filter memory and noise source.
#[derive(Debug, Clone)]
pub struct FrontEndChannel {
    cfg: FrontEndConfig,
    gain: f64,
    sections: Vec<Section>,
    noise_sigma: f64,
    rng: ChaCha8Rng,
    primed: bool,
}

impl FrontEndChannel {
    pub fn new(cfg: &FrontEndConfig, trace_rate: f64, seed: u64) -> Result<Self, FrontEndError> {
        cfg.validate(trace_rate)?;
        let mut sections = butterworth(cfg.highpass_order, cfg.band_low, trace_rate, true);
        sections.extend(butterworth(cfg.lowpass_order, cfg.band_high, trace_rate, false));
        let power = white_noise_power_gain(&sections);
        Ok(Self {
            gain: cfg.linear_gain(),
            noise_sigma: cfg.input_noise_rms / power.sqrt(),
            cfg: cfg.clone(),
            sections,
            rng: ChaCha8Rng::seed_from_u64(seed),
            primed: false,
        })
    }

    /// Disable the noise source, leaving a deterministic linear filter.
    pub fn without_noise(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    /// Process one input sample (volts at the electrode).
    pub fn process(&mut self, x: f64) -> f64 {
        let noisy = if self.noise_sigma > 0.0 {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            x + self.noise_sigma * n
        } else {
            x
        };
        let y = if self.primed {
            self.sections.iter_mut().fold(noisy, |v, s| s.step(v))
        } else {
            // The amplifier has been running before the first sample.
            self.primed = true;
            self.sections.iter_mut().fold(noisy, |v, s| s.settle(v))
        };
        (self.cfg.baseline + y * self.gain).clamp(self.cfg.output_low, self.cfg.output_high)
    }
}

fn white_noise_power_gain(sections: &[Section]) -> f64 {
    let mut probe: Vec<Section> = sections.to_vec();
    let mut energy = 0.0;
    for i in 0..(1 << 16) {
        let x = if i == 0 { 1.0 } else { 0.0 };
        let h = probe.iter_mut().fold(x, |v, s| s.step(v));
        energy += h * h;
    }
    energy
}

/// Amplify a whole trace with a fresh channel instance.
pub fn amplify(
    trace: &[f64],
    cfg: &FrontEndConfig,
    trace_rate: f64,
    noise_seed: Option<u64>,
) -> Result<Vec<f64>, FrontEndError> {
    let mut ch = FrontEndChannel::new(cfg, trace_rate, noise_seed.unwrap_or(0))?;
    if noise_seed.is_none() {
        ch = ch.without_noise();
    }
    Ok(trace.iter().map(|&x| ch.process(x)).collect())
}

/// Integer decimation ratio between the trace rate and the sampling rate.
pub fn decimation(trace_rate: f64, sample_rate: f64) -> Result<usize, FrontEndError> {
    let ratio = trace_rate / sample_rate;
    let r = ratio.round();
    if !(r >= 1.0) || (ratio - r).abs() > 1e-9 * r {
        return Err(FrontEndError::NonIntegerDecimation {
            trace_rate,
            sample_rate,
        });
    }
    Ok(r as usize)
}

/// Hold the trace value at the start of every sampling period.
pub fn sample_hold(
    amplified: &[f64],
    trace_rate: f64,
    sample_rate: f64,
) -> Result<Vec<f64>, FrontEndError> {
    let d = decimation(trace_rate, sample_rate)?;
    Ok(amplified.iter().step_by(d).copied().collect())
}
