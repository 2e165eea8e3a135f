//! Recorder simulation: front-end → sample-and-hold → event-driven ramp ADC
//! → (raw event stream | fixed-point compressor).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adc::{dual_threshold_step, AdcEvent, ChannelTriggerState, RampAdc, RampConfig};
use crate::adc::{TriggerAction, TriggerConfig, TriggerPhase};
use crate::compress::{CompressedSpike, Compressor, QuantizedPcaMemory};
use crate::eval::{sort_and_score, Detection, MatchReport, TruthSpike};
use crate::frontend::{decimation, FrontEndChannel, FrontEndConfig};
use crate::synth::{GroundTruth, Recording};
use crate::{Error, Result, WINDOW_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Raw,
    #[default]
    Compressed,
}

/// Everything the recorder needs besides the PCA memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RecorderSetup {
    pub frontend: FrontEndConfig,
    pub ramp: RampConfig,
    pub trigger: TriggerConfig,
    /// Per-channel pixel enable; channels past the end are disabled.
    pub pixel_enable: Vec<bool>,
    /// Seed for the front-end noise sources.
    pub noise_seed: u64,
}

impl RecorderSetup {
    pub fn all_enabled(
        frontend: FrontEndConfig,
        ramp: RampConfig,
        trigger: TriggerConfig,
        channels: usize,
        noise_seed: u64,
    ) -> Self {
        Self {
            frontend,
            ramp,
            trigger,
            pixel_enable: vec![true; channels],
            noise_seed,
        }
    }

    fn enabled(&self, ch: usize) -> bool {
        self.pixel_enable.get(ch).copied().unwrap_or(false)
    }
}

fn channel_seed(seed: u64, ch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(ch as u64 + 1)
}

/// Held (sample-and-hold) voltage of every channel at every sampling period,
/// channel-major.
pub fn held_voltages(rec: &Recording, setup: &RecorderSetup) -> Result<Vec<Vec<f64>>> {
    let d = decimation(rec.sample_rate, setup.ramp.sample_rate as f64)?;
    rec.traces
        .par_iter()
        .enumerate()
        .map(|(ch, trace)| {
            let mut fe = FrontEndChannel::new(&setup.frontend, rec.sample_rate, channel_seed(setup.noise_seed, ch))?;
            let mut held = Vec::with_capacity(trace.len() / d + 1);
            for (i, &x) in trace.iter().enumerate() {
                let y = fe.process(x);
                if i % d == 0 {
                    held.push(y);
                }
            }
            Ok(held)
        })
        .collect()
}

/// Comparator code of every held sample, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub codes: Vec<Vec<u8>>,
}

impl CodeMatrix {
    pub fn periods(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }

    /// Restrict to periods `[start, end)`; period indices restart at zero.
    pub fn slice(&self, start: usize, end: usize) -> CodeMatrix {
        CodeMatrix {
            codes: self.codes.iter().map(|c| c[start.min(c.len())..end.min(c.len())].to_vec()).collect(),
        }
    }
}

pub fn code_matrix(rec: &Recording, setup: &RecorderSetup) -> Result<CodeMatrix> {
    let adc = RampAdc::new(setup.ramp.clone())?;
    let held = held_voltages(rec, setup)?;
    Ok(CodeMatrix {
        codes: held.iter().map(|h| h.iter().map(|&v| adc.code_of(v)).collect()).collect(),
    })
}

/// A captured (confirmed) spike window in raw codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeWindow {
    pub channel: u16,
    pub start_period: u64,
    pub codes: Vec<u8>,
}

impl SpikeWindow {
    /// Codes minus the mid-scale baseline, zero-padded to the PCA depth.
    pub fn centered(&self) -> [i32; WINDOW_LEN] {
        let mut out = [0i32; WINDOW_LEN];
        for (o, &c) in out.iter_mut().zip(&self.codes) {
            *o = c as i32 - 128;
        }
        out
    }

    pub fn centered_f64(&self) -> Vec<f64> {
        self.centered().iter().map(|&v| v as f64).collect()
    }
}

/// Reassembles confirmed windows from a per-channel stream of digitized
/// samples and trigger decisions.
#[derive(Debug, Clone)]
pub struct WindowAssembler {
    window_len: usize,
    open: Vec<(bool, u64, Vec<u8>)>,
}

impl WindowAssembler {
    pub fn new(channels: usize, window_len: usize) -> Self {
        Self {
            window_len,
            open: vec![(false, 0, Vec::new()); channels],
        }
    }

    pub fn push(&mut self, ev: &AdcEvent, action: TriggerAction) -> Option<SpikeWindow> {
        let slot = &mut self.open[ev.channel as usize];
        match action {
            TriggerAction::Ignore => None,
            TriggerAction::AbortArm => {
                *slot = (false, 0, Vec::new());
                None
            }
            TriggerAction::Digitize | TriggerAction::ConfirmSpike => {
                // Raw streams carry no abort sample; a gap means the arm was dropped.
                if !slot.2.is_empty() && slot.1 + slot.2.len() as u64 != ev.period_index {
                    *slot = (false, 0, Vec::new());
                }
                if slot.2.is_empty() {
                    slot.1 = ev.period_index;
                }
                slot.0 |= action == TriggerAction::ConfirmSpike;
                slot.2.push(ev.code);
                if slot.0 && slot.2.len() == self.window_len {
                    let (_, start, codes) = std::mem::replace(slot, (false, 0, Vec::new()));
                    return Some(SpikeWindow {
                        channel: ev.channel,
                        start_period: start,
                        codes,
                    });
                }
                None
            }
        }
    }
}

/// Fast path used by calibration: run the detector over precomputed codes.
/// Yields the same windows as a full [`simulate`] run.
pub fn extract_windows(codes: &CodeMatrix, trigger: &TriggerConfig, enable: &[bool]) -> Vec<SpikeWindow> {
    let window_len = trigger.window_len();
    let mut out = Vec::new();
    for (ch, series) in codes.codes.iter().enumerate() {
        if !enable.get(ch).copied().unwrap_or(false) {
            continue;
        }
        let mut st = ChannelTriggerState::default();
        let mut start = 0u64;
        let mut buf: Vec<u8> = Vec::with_capacity(window_len);
        for (p, &code) in series.iter().enumerate() {
            if st.phase == TriggerPhase::Idle && !trigger.beyond(code, trigger.threshold1) {
                continue;
            }
            let (next, action) = dual_threshold_step(st, code, trigger);
            match action {
                TriggerAction::Ignore => {}
                TriggerAction::AbortArm => buf.clear(),
                TriggerAction::Digitize | TriggerAction::ConfirmSpike => {
                    if buf.is_empty() {
                        start = p as u64;
                    }
                    buf.push(code);
                    if next.phase == TriggerPhase::Idle {
                        out.push(SpikeWindow {
                            channel: ch as u16,
                            start_period: start,
                            codes: std::mem::take(&mut buf),
                        });
                    }
                }
            }
            st = next;
        }
    }
    out.sort_by_key(|w| (w.start_period, w.channel));
    out
}

/// Counters collected over a simulation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub periods: u64,
    pub digitized_samples: u64,
    pub confirmed_spikes: u64,
    pub aborted_arms: u64,
    pub collision_stalls: u64,
    /// Largest number of ramp cycles used in any period.
    pub peak_period_cycles: u64,
    pub compressor_cycles: u64,
    pub saturations: u64,
}

/// Output of [`simulate`].
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Digitized samples with the trigger decision that gated them, in
    /// emission order. Filled in raw mode.
    pub events: Vec<(AdcEvent, TriggerAction)>,
    /// Abort decisions (which are not digitized) in raw mode.
    pub aborts: Vec<(u16, u64)>,
    pub windows: Vec<SpikeWindow>,
    pub spikes: Vec<CompressedSpike>,
    pub stats: RunStats,
}

/// Full period-by-period simulation of the recorder.
pub fn simulate(
    rec: &Recording,
    setup: &RecorderSetup,
    mode: Mode,
    memory: Option<&QuantizedPcaMemory>,
) -> Result<RunOutput> {
    setup.trigger.validate()?;
    let held = held_voltages(rec, setup)?;
    let channels = held.len();
    let periods = held.first().map_or(0, Vec::len);
    let mut adc = RampAdc::new(setup.ramp.clone())?;
    let window_len = setup.trigger.window_len();
    let mut compressor = match mode {
        Mode::Compressed => {
            let mem = memory.ok_or_else(|| Error::Config("compressed mode needs a PCA memory".into()))?;
            Some(Compressor::new(mem.clone(), channels, window_len)?)
        }
        Mode::Raw => None,
    };
    let mut assembler = WindowAssembler::new(channels, window_len);
    let mut states = vec![ChannelTriggerState::default(); channels];
    let mut actions = vec![TriggerAction::Ignore; channels];
    let mut gate = vec![false; channels];
    let mut column = vec![0.0; channels];
    let mut out = RunOutput::default();
    out.stats.periods = periods as u64;

    for p in 0..periods {
        let mut any = false;
        for ch in 0..channels {
            column[ch] = held[ch][p];
            gate[ch] = false;
            if !setup.enabled(ch) {
                continue;
            }
            let code = adc.code_of(column[ch]);
            let (next, action) = dual_threshold_step(states[ch], code, &setup.trigger);
            states[ch] = next;
            actions[ch] = action;
            match action {
                TriggerAction::Ignore => {}
                TriggerAction::AbortArm => {
                    out.stats.aborted_arms += 1;
                    let ev = AdcEvent {
                        channel: ch as u16,
                        code,
                        period_index: p as u64,
                        ramp_cycle: 0,
                    };
                    assembler.push(&ev, action);
                    if let Some(c) = compressor.as_mut() {
                        c.push(&ev, action)?;
                    } else {
                        out.aborts.push((ch as u16, p as u64));
                    }
                }
                TriggerAction::Digitize | TriggerAction::ConfirmSpike => {
                    gate[ch] = true;
                    any = true;
                    out.stats.confirmed_spikes += (action == TriggerAction::ConfirmSpike) as u64;
                }
            }
        }
        if !any {
            continue;
        }
        let period = adc.run_period(&column, &gate, p as u64)?;
        out.stats.collision_stalls += period.stalls;
        out.stats.peak_period_cycles = out.stats.peak_period_cycles.max(period.cycles + 1);
        out.stats.digitized_samples += period.events.len() as u64;
        for ev in period.events {
            let action = actions[ev.channel as usize];
            if let Some(w) = assembler.push(&ev, action) {
                out.windows.push(w);
            }
            match compressor.as_mut() {
                Some(c) => {
                    if let Some(s) = c.push(&ev, action)? {
                        out.spikes.push(s);
                    }
                }
                None => out.events.push((ev, action)),
            }
        }
    }
    if let Some(c) = &compressor {
        out.stats.compressor_cycles = c.cycles();
        out.stats.saturations = c.saturations();
    }
    Ok(out)
}

/// Recover trigger decisions for a raw event stream (which carries codes
/// only) by replaying the detector. A gap in a channel's samples while armed
/// is the undigitized abort sample.
pub fn replay_raw(events: &[AdcEvent], trigger: &TriggerConfig, channels: usize) -> Result<Vec<(AdcEvent, TriggerAction)>> {
    let mut states = vec![ChannelTriggerState::default(); channels];
    let mut last: Vec<Option<u64>> = vec![None; channels];
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        let ch = ev.channel as usize;
        if ch >= channels {
            return Err(Error::Format(format!("event on channel {ch} beyond {channels}")));
        }
        let contiguous = last[ch].is_some_and(|l| l + 1 == ev.period_index);
        if !contiguous {
            match states[ch].phase {
                TriggerPhase::Idle => {}
                TriggerPhase::Armed => states[ch] = ChannelTriggerState::default(),
                TriggerPhase::Capturing => {
                    return Err(Error::Format(format!(
                        "channel {ch} lost samples during a capture at period {}",
                        ev.period_index
                    )))
                }
            }
        }
        let (next, action) = dual_threshold_step(states[ch], ev.code, trigger);
        if !action.digitizes() {
            return Err(Error::Format(format!(
                "sample on channel {ch} at period {} would not have been digitized",
                ev.period_index
            )));
        }
        states[ch] = next;
        last[ch] = Some(ev.period_index);
        out.push((*ev, action));
    }
    Ok(out)
}

/// Windows confirmed in a stream of (event, action) pairs.
pub fn windows_from_events(events: &[(AdcEvent, TriggerAction)], channels: usize, window_len: usize) -> Vec<SpikeWindow> {
    let mut a = WindowAssembler::new(channels, window_len);
    events.iter().filter_map(|(e, act)| a.push(e, *act)).collect()
}

/// Ground truth on the sampling-period time base; `decimation` is the ratio
/// of the trace rate to the ADC sampling rate.
pub fn truth_spikes(gt: &GroundTruth, decimation: u64) -> Vec<TruthSpike> {
    gt.iter()
        .map(|g| TruthSpike {
            unit: g.cell_id,
            time: g.spike_time / decimation.max(1),
            channel: g.channel,
        })
        .collect()
}

/// Detections for the template-matching sorter on raw windows.
pub fn raw_detections(windows: &[SpikeWindow]) -> Vec<Detection> {
    windows
        .iter()
        .map(|w| Detection {
            channel: w.channel,
            time: w.start_period,
            features: w.centered_f64(),
        })
        .collect()
}

/// Detections for the component-space sorter.
pub fn compressed_detections(spikes: &[CompressedSpike]) -> Vec<Detection> {
    spikes
        .iter()
        .map(|s| Detection {
            channel: s.channel,
            time: s.period_index,
            features: s.components.iter().map(|&c| c as f64).collect(),
        })
        .collect()
}

/// Built-in sorter score of a simulated run: raw mode sorts the captured
/// windows, compressed mode the component records.
pub fn score_run(out: &RunOutput, mode: Mode, truth: &[TruthSpike], split: u64, window: u64) -> Result<MatchReport> {
    let detections = match mode {
        Mode::Raw => raw_detections(&out.windows),
        Mode::Compressed => compressed_detections(&out.spikes),
    };
    Ok(sort_and_score(&detections, truth, split, window)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(p: u64, code: u8) -> AdcEvent {
        AdcEvent {
            channel: 0,
            code,
            period_index: p,
            ramp_cycle: code as u16,
        }
    }

    fn trigger() -> TriggerConfig {
        TriggerConfig {
            threshold1: 120,
            threshold2: 110,
            pretrigger_n: 2,
            posttrigger_m: 3,
            ..TriggerConfig::default()
        }
    }

    #[test]
    fn assembler_drops_arm_across_a_gap() {
        let mut a = WindowAssembler::new(1, 5);
        assert_eq!(a.push(&ev(0, 119), TriggerAction::Digitize), None);
        assert_eq!(a.push(&ev(1, 119), TriggerAction::Digitize), None);
        // Period 2 was the undigitized abort sample.
        let mut got = None;
        for (i, code) in [118, 100, 100, 100, 100].into_iter().enumerate() {
            let action = if i == 1 { TriggerAction::ConfirmSpike } else { TriggerAction::Digitize };
            got = a.push(&ev(3 + i as u64, code), action);
        }
        let w = got.expect("window closes");
        assert_eq!(w.start_period, 3);
        assert_eq!(w.codes, vec![118, 100, 100, 100, 100]);
    }

    #[test]
    fn replay_recovers_actions() {
        let t = trigger();
        let codes = [127, 119, 119, 119, 125, 119, 105, 100, 100, 100, 127];
        let mut st = ChannelTriggerState::default();
        let mut direct = Vec::new();
        for (p, &c) in codes.iter().enumerate() {
            let (next, action) = dual_threshold_step(st, c, &t);
            st = next;
            if action.digitizes() {
                direct.push((ev(p as u64, c), action));
            }
        }
        let events: Vec<AdcEvent> = direct.iter().map(|(e, _)| *e).collect();
        assert_eq!(replay_raw(&events, &t, 1).unwrap(), direct);
        let windows = windows_from_events(&direct, 1, t.window_len());
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].start_period, 5);
        assert!(replay_raw(&[ev(0, 127)], &t, 1).is_err());
    }

    #[test]
    fn extract_matches_code_series() {
        let t = trigger();
        let codes = CodeMatrix {
            codes: vec![vec![127, 119, 105, 100, 100, 100, 127], vec![127; 7]],
        };
        let w = extract_windows(&codes, &t, &[true, true]);
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].channel, w[0].start_period), (0, 1));
        assert_eq!(w[0].codes, vec![119, 105, 100, 100, 100]);
        assert!(extract_windows(&codes, &t, &[false, true]).is_empty());
    }

    #[test]
    fn centered_window_is_zero_padded() {
        let w = SpikeWindow {
            channel: 0,
            start_period: 0,
            codes: vec![128, 0, 255],
        };
        let c = w.centered();
        assert_eq!(&c[..3], &[0, -128, 127]);
        assert!(c[3..].iter().all(|&x| x == 0));
    }

    #[test]
    fn truth_spikes_decimate() {
        let gt = vec![crate::synth::GroundTruthSpike {
            cell_id: 4,
            spike_time: 41,
            channel: 2,
        }];
        let t = truth_spikes(&gt, 2);
        assert_eq!((t[0].unit, t[0].time, t[0].channel), (4, 20, 2));
    }
}
