//! Shared single-slope ramp ADC with per-channel comparators.
//!
//! One global counter drives a ramp DAC that every channel compares against
//! its held voltage. A channel latches the counter value during the ramp step
//! in which its comparator trips. When several channels trip in the same step
//! the ramp pauses and the latched value is read out one channel per clock
//! cycle, lowest address first.
//!
//! Digitization is gated per channel by a dual-threshold trigger: a sample is
//! only converted once the signal has crossed the first threshold, and the
//! capture is kept only if the second threshold follows within `N` samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdcError {
    #[error("period overrun: {needed} cycles needed, budget is {budget}")]
    PeriodOverrun { needed: u64, budget: u64 },
    #[error("invalid ramp configuration: {0}")]
    InvalidRamp(String),
    #[error("invalid trigger configuration: {0}")]
    InvalidTrigger(String),
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
    #[error("held voltage on channel {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampConfig {
    pub resolution_bits: u32,
    /// Lower end of the conversion range, volts.
    pub full_scale_low: f64,
    /// Upper end of the conversion range, volts.
    pub full_scale_high: f64,
    pub clock_hz: u64,
    pub sample_rate: u64,
    /// Per-code step width error in LSB; code `k` spans `1 + dnl_profile[k]` LSB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dnl_profile: Option<Vec<f64>>,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self {
            resolution_bits: 8,
            full_scale_low: 0.0,
            full_scale_high: 1.0,
            clock_hz: 16_000_000,
            sample_rate: 20_000,
            dnl_profile: None,
        }
    }
}

impl RampConfig {
    pub fn levels(&self) -> usize {
        1 << self.resolution_bits
    }

    pub fn max_code(&self) -> u8 {
        (self.levels() - 1) as u8
    }

    pub fn lsb(&self) -> f64 {
        (self.full_scale_high - self.full_scale_low) / self.levels() as f64
    }

    /// Clock cycles available inside one sampling period.
    pub fn cycles_per_period(&self) -> u64 {
        self.clock_hz / self.sample_rate
    }

    pub fn validate(&self) -> Result<(), AdcError> {
        let bad = |m: &str| Err(AdcError::InvalidRamp(m.to_string()));
        if !(1..=8).contains(&self.resolution_bits) {
            return bad("resolution_bits must be within 1..=8");
        }
        if !(self.full_scale_high - self.full_scale_low > 0.0) {
            return bad("full-scale width must be positive");
        }
        if self.sample_rate == 0 || self.clock_hz == 0 {
            return bad("clock and sample rate must be positive");
        }
        if self.clock_hz % self.sample_rate != 0 {
            return bad("clock_hz must be an integer multiple of sample_rate");
        }
        if (self.levels() as u64) > self.cycles_per_period() {
            return bad("ramp does not fit in one sampling period");
        }
        if let Some(profile) = &self.dnl_profile {
            if profile.len() != self.levels() {
                return bad("dnl_profile length must equal the number of codes");
            }
            if profile.iter().any(|d| !d.is_finite() || *d <= -1.0) {
                return bad("dnl_profile entries must be finite and > -1");
            }
        }
        Ok(())
    }
}

/// Reference quantizer: `floor((v - low) / lsb)` clamped to the code range.
pub fn quantize_ideal(voltage: f64, cfg: &RampConfig) -> u8 {
    let x = ((voltage - cfg.full_scale_low) / cfg.lsb()).floor();
    if x.is_nan() || x < 0.0 {
        0
    } else {
        x.min(cfg.max_code() as f64) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdcEvent {
    pub channel: u16,
    pub code: u8,
    pub period_index: u64,
    /// Clock cycle inside the period at which the value was read out.
    pub ramp_cycle: u16,
}

/// Result of one ramp sweep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RampPeriod {
    pub events: Vec<AdcEvent>,
    /// Extra cycles spent reading out colliding channels.
    pub stalls: u64,
    /// Highest crossing step plus stalls (zero when nothing was digitized).
    pub cycles: u64,
}

/// Ramp ADC instance with its (possibly mismatched) step edges precomputed.
#[derive(Debug, Clone)]
pub struct RampAdc {
    cfg: RampConfig,
    /// `edges[k]` is the ramp level at which code `k` begins; `levels + 1` long.
    edges: Vec<f64>,
    scratch: Vec<(usize, f64)>,
}

impl RampAdc {
    pub fn new(cfg: RampConfig) -> Result<Self, AdcError> {
        cfg.validate()?;
        let lsb = cfg.lsb();
        let n = cfg.levels();
        let edges = match &cfg.dnl_profile {
            None => (0..=n).map(|k| cfg.full_scale_low + k as f64 * lsb).collect(),
            Some(profile) => {
                let mut edges = Vec::with_capacity(n + 1);
                let mut level = cfg.full_scale_low;
                edges.push(level);
                for d in profile {
                    level += lsb * (1.0 + d);
                    edges.push(level);
                }
                edges
            }
        };
        Ok(Self {
            cfg,
            edges,
            scratch: Vec::new(),
        })
    }

    pub fn config(&self) -> &RampConfig {
        &self.cfg
    }

    /// Code the ramp would latch for `voltage`; also what the threshold
    /// comparators see, since thresholds are expressed as codes.
    pub fn code_of(&self, voltage: f64) -> u8 {
        // Number of code boundaries (edges 1..=max) at or below the voltage.
        let inner = &self.edges[1..self.cfg.levels()];
        inner.partition_point(|&e| e <= voltage) as u8
    }

    /// Sweep the ramp once over the held voltages of the enabled channels.
    ///
    /// `held[ch]` is the sample-and-hold output of channel `ch`; `gate[ch]`
    /// says whether that channel digitizes this period.
    pub fn run_period(
        &mut self,
        held: &[f64],
        gate: &[bool],
        period_index: u64,
    ) -> Result<RampPeriod, AdcError> {
        self.scratch.clear();
        for (ch, (&v, &g)) in held.iter().zip(gate).enumerate() {
            if g {
                if !v.is_finite() {
                    return Err(AdcError::NonFinite(ch));
                }
                self.scratch.push((ch, v));
            }
        }
        if self.scratch.is_empty() {
            return Ok(RampPeriod::default());
        }
        // Ascending voltage trips comparators in ramp order; ties keep address
        // order because the sort is stable over an address-ordered list.
        self.scratch.sort_by(|a, b| a.1.total_cmp(&b.1));

        let levels = self.cfg.levels();
        let budget = self.cfg.cycles_per_period();
        let mut out = RampPeriod {
            events: Vec::with_capacity(self.scratch.len()),
            ..RampPeriod::default()
        };
        let mut pending = 0usize;
        let mut tripped: Vec<usize> = Vec::new();
        for step in 0..levels {
            if pending == self.scratch.len() {
                break;
            }
            // The ramp sits at edges[step + 1] during this count; the last
            // count latches every comparator that has not yet tripped.
            let top = self.edges[step + 1];
            tripped.clear();
            while pending < self.scratch.len()
                && (step == levels - 1 || self.scratch[pending].1 < top)
            {
                tripped.push(self.scratch[pending].0);
                pending += 1;
            }
            if tripped.is_empty() {
                continue;
            }
            tripped.sort_unstable();
            for (i, &ch) in tripped.iter().enumerate() {
                if i > 0 {
                    out.stalls += 1;
                }
                let cycle = step as u64 + out.stalls;
                if cycle >= budget {
                    return Err(AdcError::PeriodOverrun {
                        needed: cycle + 1,
                        budget,
                    });
                }
                out.events.push(AdcEvent {
                    channel: ch as u16,
                    code: step as u8,
                    period_index,
                    ramp_cycle: cycle as u16,
                });
            }
            out.cycles = step as u64 + out.stalls;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    NegativeGoing,
    PositiveGoing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerConfig {
    pub threshold1: u8,
    pub threshold2: u8,
    /// Samples after arming in which the second threshold must be reached.
    pub pretrigger_n: u8,
    /// Captured samples counted from the confirming sample in the latest
    /// allowed confirmation; the window is always `N + M` samples from arming.
    pub posttrigger_m: u8,
    #[serde(default)]
    pub polarity: Polarity,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            threshold1: 121,
            threshold2: 117,
            pretrigger_n: 3,
            posttrigger_m: 19,
            polarity: Polarity::NegativeGoing,
        }
    }
}

impl TriggerConfig {
    pub fn window_len(&self) -> usize {
        self.pretrigger_n as usize + self.posttrigger_m as usize
    }

    pub fn beyond(&self, code: u8, threshold: u8) -> bool {
        match self.polarity {
            Polarity::NegativeGoing => code <= threshold,
            Polarity::PositiveGoing => code >= threshold,
        }
    }

    pub fn validate(&self) -> Result<(), AdcError> {
        let bad = |m: &str| Err(AdcError::InvalidTrigger(m.to_string()));
        let ordered = match self.polarity {
            Polarity::NegativeGoing => self.threshold2 <= self.threshold1,
            Polarity::PositiveGoing => self.threshold2 >= self.threshold1,
        };
        if !ordered {
            return bad("threshold2 must be at least as extreme as threshold1");
        }
        if self.posttrigger_m == 0 {
            return bad("posttrigger_m must be at least 1");
        }
        if self.window_len() > crate::WINDOW_LEN {
            return bad("pretrigger_n + posttrigger_m exceeds the 22-sample window");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TriggerPhase {
    #[default]
    Idle,
    Armed,
    Capturing,
}

/// Per-channel dual-threshold detector state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelTriggerState {
    pub phase: TriggerPhase,
    /// Offset of the latest sample from the arming sample; frozen at the
    /// confirmation offset once capturing.
    pub samples_since_arm: u8,
    /// Samples captured after the confirming sample.
    pub samples_since_confirm: u8,
}

impl ChannelTriggerState {
    /// Samples of the current window digitized so far.
    pub fn captured(&self) -> usize {
        match self.phase {
            TriggerPhase::Idle => 0,
            TriggerPhase::Armed => self.samples_since_arm as usize + 1,
            TriggerPhase::Capturing => {
                self.samples_since_arm as usize + 1 + self.samples_since_confirm as usize
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerAction {
    /// Below the first threshold while idle: nothing is converted.
    Ignore,
    Digitize,
    /// Sample reached the second threshold; it is digitized and the window kept.
    ConfirmSpike,
    /// No confirmation within `N` samples: the partial window is dropped and
    /// this sample is not converted.
    AbortArm,
}

impl TriggerAction {
    pub fn digitizes(self) -> bool {
        matches!(self, TriggerAction::Digitize | TriggerAction::ConfirmSpike)
    }
}

/// Advance one channel's detector by one sample.
pub fn dual_threshold_step(
    state: ChannelTriggerState,
    code: u8,
    cfg: &TriggerConfig,
) -> (ChannelTriggerState, TriggerAction) {
    let n = cfg.pretrigger_n;
    let window = cfg.window_len();
    let confirm = |offset: u8| {
        let s = ChannelTriggerState {
            phase: TriggerPhase::Capturing,
            samples_since_arm: offset,
            samples_since_confirm: 0,
        };
        if s.captured() >= window {
            (ChannelTriggerState::default(), TriggerAction::ConfirmSpike)
        } else {
            (s, TriggerAction::ConfirmSpike)
        }
    };
    match state.phase {
        TriggerPhase::Idle => {
            if !cfg.beyond(code, cfg.threshold1) {
                (state, TriggerAction::Ignore)
            } else if cfg.beyond(code, cfg.threshold2) {
                confirm(0)
            } else if n == 0 {
                (ChannelTriggerState::default(), TriggerAction::AbortArm)
            } else {
                let s = ChannelTriggerState {
                    phase: TriggerPhase::Armed,
                    samples_since_arm: 0,
                    samples_since_confirm: 0,
                };
                (s, TriggerAction::Digitize)
            }
        }
        TriggerPhase::Armed => {
            let offset = state.samples_since_arm + 1;
            if cfg.beyond(code, cfg.threshold2) {
                confirm(offset)
            } else if offset >= n {
                (ChannelTriggerState::default(), TriggerAction::AbortArm)
            } else {
                let s = ChannelTriggerState {
                    samples_since_arm: offset,
                    ..state
                };
                (s, TriggerAction::Digitize)
            }
        }
        TriggerPhase::Capturing => {
            let s = ChannelTriggerState {
                samples_since_confirm: state.samples_since_confirm + 1,
                ..state
            };
            if s.captured() >= window {
                (ChannelTriggerState::default(), TriggerAction::Digitize)
            } else {
                (s, TriggerAction::Digitize)
            }
        }
    }
}

/// Slow linear sweep injected for the code-density test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSweep {
    pub frequency_hz: f64,
    pub start_v: f64,
    pub end_v: f64,
}

impl Default for RampSweep {
    fn default() -> Self {
        Self {
            frequency_hz: 1.0,
            start_v: 0.0,
            end_v: 1.0,
        }
    }
}

/// Histogram of output codes for `repetitions` sweeps sampled at the ADC rate.
///
/// Each repetition is offset by a fraction `r / repetitions` of one sampling
/// interval so repeated sweeps land on distinct voltages.
pub fn code_density_capture(
    cfg: &RampConfig,
    sweep: &RampSweep,
    repetitions: u32,
) -> Result<Vec<u64>, AdcError> {
    if repetitions == 0 {
        return Err(AdcError::ZeroRepetitions);
    }
    let mut adc = RampAdc::new(cfg.clone())?;
    let samples = (cfg.sample_rate as f64 / sweep.frequency_hz).round() as u64;
    let mut hist = vec![0u64; cfg.levels()];
    let span = sweep.end_v - sweep.start_v;
    for rep in 0..repetitions {
        let phase = rep as f64 / repetitions as f64;
        for j in 0..samples {
            let v = sweep.start_v + span * (j as f64 + phase) / samples as f64;
            let period = adc.run_period(&[v], &[true], j)?;
            for ev in &period.events {
                hist[ev.code as usize] += 1;
            }
        }
    }
    Ok(hist)
}

/// Sync word separating sampling periods in the raw event stream.
pub const RAW_SYNC: u32 = 0xFFFF_FFFF;

/// Pack an event as `[channel:6][code:8][ramp_cycle:10][reserved:8]`, LSB first.
pub fn encode_raw_word(ev: &AdcEvent) -> Option<u32> {
    if ev.channel >= 64 || ev.ramp_cycle >= 1024 {
        return None;
    }
    Some(ev.channel as u32 | (ev.code as u32) << 6 | (ev.ramp_cycle as u32) << 14)
}

/// Inverse of [`encode_raw_word`]; the period index comes from the stream.
pub fn decode_raw_word(word: u32, period_index: u64) -> Option<AdcEvent> {
    if word == RAW_SYNC || word >> 24 != 0 {
        return None;
    }
    Some(AdcEvent {
        channel: (word & 0x3F) as u16,
        code: ((word >> 6) & 0xFF) as u8,
        ramp_cycle: ((word >> 14) & 0x3FF) as u16,
        period_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adc() -> RampAdc {
        RampAdc::new(RampConfig::default()).unwrap()
    }

    #[test]
    fn ideal_quantizer_examples() {
        let cfg = RampConfig::default();
        assert_eq!(quantize_ideal(0.5, &cfg), 128);
        assert_eq!(quantize_ideal(-0.1, &cfg), 0);
        assert_eq!(quantize_ideal(1.2, &cfg), 255);
        assert_eq!(quantize_ideal(0.00390625, &cfg), 1);
        assert_eq!(quantize_ideal(f64::NAN, &cfg), 0);
    }

    #[test]
    fn collision_reads_out_lowest_address_first() {
        let mut adc = adc();
        let mut held = vec![0.2; 8];
        held[3] = 0.5;
        held[7] = 0.5;
        let mut gate = vec![false; 8];
        gate[3] = true;
        gate[7] = true;
        let p = adc.run_period(&held, &gate, 0).unwrap();
        let chans: Vec<_> = p.events.iter().map(|e| (e.channel, e.code)).collect();
        assert_eq!(chans, vec![(3, 128), (7, 128)]);
        assert_eq!(p.events[0].ramp_cycle, 128);
        assert_eq!(p.events[1].ramp_cycle, 129);
        assert_eq!(p.stalls, 1);
    }

    #[test]
    fn zero_volts_latches_at_cycle_zero() {
        let p = adc().run_period(&[0.0], &[true], 5).unwrap();
        assert_eq!(p.events.len(), 1);
        assert_eq!(p.events[0].code, 0);
        assert_eq!(p.events[0].ramp_cycle, 0);
        assert_eq!(p.events[0].period_index, 5);
    }

    #[test]
    fn distinct_codes_need_no_stall() {
        let cfg = RampConfig::default();
        let held: Vec<f64> = (0..49).map(|i| (i as f64 * 5.0 + 0.5) * cfg.lsb()).collect();
        let p = adc().run_period(&held, &[true; 49], 0).unwrap();
        assert_eq!(p.events.len(), 49);
        assert_eq!(p.stalls, 0);
        for ev in &p.events {
            assert_eq!(ev.code, quantize_ideal(held[ev.channel as usize], &cfg));
        }
    }

    #[test]
    fn oversized_array_overruns_the_period() {
        let n = 900;
        let held = vec![0.99; n];
        let err = adc().run_period(&held, &vec![true; n], 0).unwrap_err();
        assert!(matches!(err, AdcError::PeriodOverrun { .. }));
    }

    #[test]
    fn ungated_channels_are_silent() {
        let p = adc().run_period(&[0.3, 0.4], &[false, false], 0).unwrap();
        assert!(p.events.is_empty());
        assert_eq!(p.cycles, 0);
    }

    #[test]
    fn ramp_config_rejects_unreachable_codes() {
        let cfg = RampConfig {
            clock_hz: 4_000_000,
            ..RampConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn run(codes: &[u8], cfg: &TriggerConfig) -> Vec<TriggerAction> {
        let mut st = ChannelTriggerState::default();
        codes
            .iter()
            .map(|&c| {
                let (s, a) = dual_threshold_step(st, c, cfg);
                st = s;
                a
            })
            .collect()
    }

    #[test]
    fn arm_without_confirmation_aborts_on_nth_sample() {
        let cfg = TriggerConfig::default();
        let codes = [128, 120, 120, 119, 120, 128];
        let acts = run(&codes, &cfg);
        use TriggerAction::*;
        assert_eq!(acts, vec![Ignore, Digitize, Digitize, Digitize, AbortArm, Ignore]);
    }

    #[test]
    fn confirmed_spike_digitizes_full_window() {
        let cfg = TriggerConfig::default();
        let mut codes = vec![128, 120, 110];
        codes.extend(std::iter::repeat(125).take(30));
        let acts = run(&codes, &cfg);
        assert_eq!(acts[2], TriggerAction::ConfirmSpike);
        let digitized = acts.iter().filter(|a| a.digitizes()).count();
        assert_eq!(digitized, 22);
        assert!(acts[1..23].iter().all(|a| a.digitizes()));
        assert_eq!(acts[23], TriggerAction::Ignore);
    }

    #[test]
    fn equal_thresholds_confirm_on_arming() {
        let cfg = TriggerConfig {
            threshold1: 120,
            threshold2: 120,
            ..TriggerConfig::default()
        };
        let acts = run(&[128, 119], &cfg);
        assert_eq!(acts[1], TriggerAction::ConfirmSpike);
    }

    #[test]
    fn capture_ignores_rearming() {
        let cfg = TriggerConfig::default();
        let mut codes = vec![110];
        codes.extend(std::iter::repeat(100).take(25));
        let acts = run(&codes, &cfg);
        // A second window starts right after the first one closes.
        assert_eq!(acts[0], TriggerAction::ConfirmSpike);
        assert!(acts[1..22].iter().all(|a| *a == TriggerAction::Digitize));
        assert_eq!(acts[22], TriggerAction::ConfirmSpike);
    }

    #[test]
    fn positive_polarity_mirrors_comparisons() {
        let cfg = TriggerConfig {
            threshold1: 135,
            threshold2: 139,
            polarity: Polarity::PositiveGoing,
            ..TriggerConfig::default()
        };
        cfg.validate().unwrap();
        let acts = run(&[128, 136, 140], &cfg);
        use TriggerAction::*;
        assert_eq!(acts, vec![Ignore, Digitize, ConfirmSpike]);
    }

    #[test]
    fn trigger_validation() {
        let inverted = TriggerConfig {
            threshold1: 110,
            threshold2: 120,
            ..TriggerConfig::default()
        };
        assert!(inverted.validate().is_err());
        let long = TriggerConfig {
            pretrigger_n: 4,
            posttrigger_m: 19,
            ..TriggerConfig::default()
        };
        assert!(long.validate().is_err());
        assert!(TriggerConfig::default().validate().is_ok());
    }

    #[test]
    fn code_density_rejects_zero_repetitions() {
        let err = code_density_capture(&RampConfig::default(), &RampSweep::default(), 0);
        assert_eq!(err, Err(AdcError::ZeroRepetitions));
    }

    #[test]
    fn code_density_counts_every_sample() {
        let cfg = RampConfig::default();
        let hist = code_density_capture(&cfg, &RampSweep::default(), 2).unwrap();
        assert_eq!(hist.len(), 256);
        assert_eq!(hist.iter().sum::<u64>(), 40_000);
    }

    #[test]
    fn raw_word_layout() {
        let ev = AdcEvent {
            channel: 48,
            code: 0xA5,
            period_index: 9,
            ramp_cycle: 799,
        };
        let w = encode_raw_word(&ev).unwrap();
        assert_eq!(w & 0x3F, 48);
        assert_eq!((w >> 6) & 0xFF, 0xA5);
        assert_eq!((w >> 14) & 0x3FF, 799);
        assert_eq!(w >> 24, 0);
        assert_eq!(decode_raw_word(w, 9), Some(ev));
        assert_eq!(decode_raw_word(RAW_SYNC, 0), None);
    }
}
