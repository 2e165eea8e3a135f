//! Fixed-point PCA compression datapath.
//!
//! Samples from all channels arrive interleaved, one per clock cycle. For each
//! sample the datapath reads the channel's memory entry (state, sample index,
//! four running sums) and the coefficients for that sample index, multiplies
//! and accumulates with saturation, then writes the entry back or, once the
//! window is complete, forwards the quantized components.
//!
//! Scale chain: coefficients are `round(w * scale)` in 9 bits, each product of
//! a centered 8-bit sample and a coefficient is shifted right by `mac_shift`
//! before accumulation into 11 bits, and the final sum is shifted right by
//! `out_shift` into 6 bits. One output LSB therefore equals
//! `2^(mac_shift + out_shift) / scale` in centered-code units.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adc::{AdcEvent, TriggerAction};
use crate::{COMPONENTS, WINDOW_LEN};

#[derive(Debug, Error, PartialEq)]
pub enum CompressError {
    #[error("sample index overflow: window already holds {WINDOW_LEN} samples")]
    IndexOverflow,
    #[error("window incomplete: {0} of {WINDOW_LEN} samples")]
    IncompleteWindow(u8),
    #[error("{0} channels exceed the compressor capacity of {MAX_CHANNELS}")]
    CapacityExceeded(usize),
    #[error("event for channel {channel} but only {count} channels configured")]
    UnknownChannel { channel: u16, count: usize },
    #[error("invalid compressor configuration: {0}")]
    InvalidConfig(String),
    #[error("value {value} does not fit a {bits}-bit field")]
    FieldOverflow { value: i64, bits: u32 },
}

/// Concurrent channels the datapath can serve: one MAC per 16 MHz cycle over a
/// 20 kHz sampling period.
pub const MAX_CHANNELS: usize = 800;

pub const SUM_BITS: u32 = 11;
pub const COEFF_BITS: u32 = 9;
pub const COMPONENT_BITS: u32 = 6;
pub const ENTRY_BITS: u32 = 2 + 5 + COMPONENTS as u32 * SUM_BITS;
pub const COEFF_MEMORY_BITS: u32 = (COMPONENTS * WINDOW_LEN) as u32 * COEFF_BITS;
pub const PAYLOAD_BITS: u32 = COMPONENTS as u32 * COMPONENT_BITS;

const fn signed_range(bits: u32) -> (i32, i32) {
    (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
}

/// Clamp to a signed `bits`-wide range, reporting whether clamping happened.
fn saturate(v: i32, bits: u32) -> (i32, bool) {
    let (lo, hi) = signed_range(bits);
    if v < lo {
        (lo, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    }
}

fn to_field(v: i32, bits: u32) -> u64 {
    (v as u64) & ((1u64 << bits) - 1)
}

fn from_field(raw: u64, bits: u32) -> i32 {
    let shift = 64 - bits;
    (((raw << shift) as i64) >> shift) as i32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EntryState {
    #[default]
    Idle = 0,
    Armed = 1,
    Capturing = 2,
}

/// Per-channel compression state, 51 bits in hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelMemoryEntry {
    pub state: EntryState,
    pub sample_index: u8,
    pub sums: [i16; COMPONENTS],
}

impl ChannelMemoryEntry {
    /// `[state:2][index:5][sum0:11]..[sum3:11]`, LSB first.
    pub fn to_bits(&self) -> u64 {
        let mut w = self.state as u64 | (self.sample_index as u64 & 0x1F) << 2;
        for (c, &s) in self.sums.iter().enumerate() {
            w |= to_field(s as i32, SUM_BITS) << (7 + c as u32 * SUM_BITS);
        }
        w
    }

    pub fn from_bits(w: u64) -> Option<Self> {
        if w >> ENTRY_BITS != 0 {
            return None;
        }
        let state = match w & 0x3 {
            0 => EntryState::Idle,
            1 => EntryState::Armed,
            2 => EntryState::Capturing,
            _ => return None,
        };
        let mut sums = [0i16; COMPONENTS];
        for (c, s) in sums.iter_mut().enumerate() {
            *s = from_field(w >> (7 + c as u32 * SUM_BITS), SUM_BITS) as i16;
        }
        Some(Self {
            state,
            sample_index: ((w >> 2) & 0x1F) as u8,
            sums,
        })
    }
}

/// Quantized coefficient memory plus the shift chain around the MAC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedPcaMemory {
    /// `coefficients[component][sample]`, signed 9-bit.
    pub coefficients: [[i16; WINDOW_LEN]; COMPONENTS],
    pub mac_shift: u32,
    pub out_shift: u32,
    /// Coefficient scale: `coefficient = round(w * scale)`.
    pub scale: f64,
}

impl QuantizedPcaMemory {
    pub fn validate(&self) -> Result<(), CompressError> {
        let (lo, hi) = signed_range(COEFF_BITS);
        for &c in self.coefficients.iter().flatten() {
            if (c as i32) < lo || (c as i32) > hi {
                return Err(CompressError::FieldOverflow {
                    value: c as i64,
                    bits: COEFF_BITS,
                });
            }
        }
        if self.mac_shift > 16 || self.out_shift > 16 {
            return Err(CompressError::InvalidConfig("shifts must be at most 16".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CompressError::InvalidConfig("scale must be positive".into()));
        }
        Ok(())
    }

    /// Coefficients as a 792-bit little-endian bit string packed into bytes,
    /// component-major, 9 bits each.
    pub fn coefficient_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; COEFF_MEMORY_BITS.div_ceil(8) as usize];
        let mut pos = 0usize;
        for &c in self.coefficients.iter().flatten() {
            let f = to_field(c as i32, COEFF_BITS);
            for b in 0..COEFF_BITS as usize {
                if f >> b & 1 == 1 {
                    out[pos / 8] |= 1 << (pos % 8);
                }
                pos += 1;
            }
        }
        out
    }

    pub fn coefficients_from_bits(bytes: &[u8]) -> Option<[[i16; WINDOW_LEN]; COMPONENTS]> {
        if bytes.len() * 8 < COEFF_MEMORY_BITS as usize {
            return None;
        }
        let mut coeffs = [[0i16; WINDOW_LEN]; COMPONENTS];
        let mut pos = 0usize;
        for c in coeffs.iter_mut().flatten() {
            let mut f = 0u64;
            for b in 0..COEFF_BITS as usize {
                f |= (((bytes[pos / 8] >> (pos % 8)) & 1) as u64) << b;
                pos += 1;
            }
            *c = from_field(f, COEFF_BITS) as i16;
        }
        Some(coeffs)
    }

    /// Value of one output LSB in centered-code units.
    pub fn component_lsb(&self) -> f64 {
        (1u64 << (self.mac_shift + self.out_shift)) as f64 / self.scale
    }

    /// Worst-case difference between a dequantized fixed-point component and
    /// the full-precision projection of `window` (centered codes), assuming no
    /// saturation: half-LSB coefficient rounding, one floor per product and one
    /// floor at the output.
    pub fn error_bound(&self, window: &[i32]) -> f64 {
        let rounding: f64 = window.iter().map(|x| 0.5 * x.unsigned_abs() as f64).sum();
        let floors = WINDOW_LEN as f64 * (1u64 << self.mac_shift) as f64
            + (1u64 << (self.mac_shift + self.out_shift)) as f64;
        (rounding + floors) / self.scale
    }
}

/// Four quantized components of one spike plus its address and time stamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressedSpike {
    pub channel: u16,
    /// Sampling period in which the window started (arming sample).
    pub period_index: u64,
    pub components: [i8; COMPONENTS],
}

impl CompressedSpike {
    /// The 24-bit component payload, PC0 in the low bits.
    pub fn payload(&self) -> u32 {
        self.components
            .iter()
            .enumerate()
            .fold(0u32, |w, (c, &v)| w | (to_field(v as i32, COMPONENT_BITS) as u32) << (c as u32 * COMPONENT_BITS))
    }

    pub fn from_payload(payload: u32, channel: u16, period_index: u64) -> Self {
        let mut components = [0i8; COMPONENTS];
        for (c, v) in components.iter_mut().enumerate() {
            *v = from_field((payload >> (c as u32 * COMPONENT_BITS)) as u64, COMPONENT_BITS) as i8;
        }
        Self {
            channel,
            period_index,
            components,
        }
    }
}

/// Compressed-stream sync word.
pub const RECORD_SYNC: u16 = 0xA55A;
pub const PERIOD_FIELD_BITS: u32 = 18;

/// 48-bit record `[channel:6][period_index:18][PC0:6]..[PC3:6]`, little endian.
/// The period index is stored modulo 2^18.
pub fn encode_record(spike: &CompressedSpike) -> Result<[u8; 6], CompressError> {
    if spike.channel >= 64 {
        return Err(CompressError::FieldOverflow {
            value: spike.channel as i64,
            bits: 6,
        });
    }
    let period = spike.period_index & ((1 << PERIOD_FIELD_BITS) - 1);
    let w = spike.channel as u64 | period << 6 | (spike.payload() as u64) << 24;
    let b = w.to_le_bytes();
    Ok([b[0], b[1], b[2], b[3], b[4], b[5]])
}

/// Decode a record; the returned period index is the wrapped 18-bit value.
pub fn decode_record(bytes: &[u8; 6]) -> CompressedSpike {
    let mut b = [0u8; 8];
    b[..6].copy_from_slice(bytes);
    let w = u64::from_le_bytes(b);
    CompressedSpike::from_payload(
        (w >> 24) as u32 & 0xFF_FFFF,
        (w & 0x3F) as u16,
        (w >> 6) & ((1 << PERIOD_FIELD_BITS) - 1),
    )
}

/// One MAC cycle. Returns the updated entry and how many sums saturated.
pub fn mac_step(
    entry: ChannelMemoryEntry,
    code: u8,
    mem: &QuantizedPcaMemory,
) -> Result<(ChannelMemoryEntry, u32), CompressError> {
    let i = entry.sample_index as usize;
    if i >= WINDOW_LEN {
        return Err(CompressError::IndexOverflow);
    }
    let centered = code as i32 - 128;
    let mut out = entry;
    let mut saturations = 0;
    for c in 0..COMPONENTS {
        let product = centered * mem.coefficients[c][i] as i32;
        let (s, sat) = saturate(entry.sums[c] as i32 + (product >> mem.mac_shift), SUM_BITS);
        out.sums[c] = s as i16;
        saturations += sat as u32;
    }
    out.sample_index += 1;
    Ok((out, saturations))
}

/// Shift and saturate the running sums of a complete window.
pub fn finalize(
    entry: ChannelMemoryEntry,
    mem: &QuantizedPcaMemory,
    channel: u16,
    period_index: u64,
) -> Result<(CompressedSpike, u32), CompressError> {
    if entry.sample_index as usize != WINDOW_LEN {
        return Err(CompressError::IncompleteWindow(entry.sample_index));
    }
    let mut components = [0i8; COMPONENTS];
    let mut saturations = 0;
    for (c, out) in components.iter_mut().enumerate() {
        let (v, sat) = saturate(entry.sums[c] as i32 >> mem.out_shift, COMPONENT_BITS);
        *out = v as i8;
        saturations += sat as u32;
    }
    Ok((
        CompressedSpike {
            channel,
            period_index,
            components,
        },
        saturations,
    ))
}

/// Compress one window of codes directly (shorter windows are zero-padded).
pub fn compress_window(
    codes: &[u8],
    mem: &QuantizedPcaMemory,
    channel: u16,
    period_index: u64,
) -> Result<(CompressedSpike, u32), CompressError> {
    if codes.len() > WINDOW_LEN {
        return Err(CompressError::IndexOverflow);
    }
    let mut entry = ChannelMemoryEntry {
        state: EntryState::Capturing,
        ..Default::default()
    };
    let mut saturations = 0;
    for &code in codes {
        let (e, s) = mac_step(entry, code, mem)?;
        entry = e;
        saturations += s;
    }
    entry.sample_index = WINDOW_LEN as u8;
    let (spike, s) = finalize(entry, mem, channel, period_index)?;
    Ok((spike, saturations + s))
}

/// Inverse projection `P W^T` in centered-code units.
pub fn decompress(spike: &CompressedSpike, mem: &QuantizedPcaMemory) -> [f64; WINDOW_LEN] {
    let unit = mem.component_lsb() / mem.scale;
    let mut out = [0.0; WINDOW_LEN];
    for (i, o) in out.iter_mut().enumerate() {
        let acc: i64 = (0..COMPONENTS)
            .map(|c| spike.components[c] as i64 * mem.coefficients[c][i] as i64)
            .sum();
        *o = acc as f64 * unit;
    }
    out
}

/// Streaming compressor: one memory entry per channel, one cycle per sample.
#[derive(Debug, Clone)]
pub struct Compressor {
    mem: QuantizedPcaMemory,
    window_len: usize,
    entries: Vec<ChannelMemoryEntry>,
    cycles: u64,
    saturations: u64,
}

impl Compressor {
    pub fn new(
        mem: QuantizedPcaMemory,
        channel_count: usize,
        window_len: usize,
    ) -> Result<Self, CompressError> {
        if channel_count > MAX_CHANNELS {
            return Err(CompressError::CapacityExceeded(channel_count));
        }
        if window_len == 0 || window_len > WINDOW_LEN {
            return Err(CompressError::InvalidConfig(format!(
                "window length {window_len} outside 1..={WINDOW_LEN}"
            )));
        }
        mem.validate()?;
        Ok(Self {
            mem,
            window_len,
            entries: vec![ChannelMemoryEntry::default(); channel_count],
            cycles: 0,
            saturations: 0,
        })
    }

    pub fn memory(&self) -> &QuantizedPcaMemory {
        &self.mem
    }

    pub fn entry(&self, channel: usize) -> ChannelMemoryEntry {
        self.entries[channel]
    }

    /// Clock cycles charged so far (one per consumed sample).
    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    /// Consume one digitized sample together with the trigger decision that
    /// produced it.
    pub fn push(
        &mut self,
        event: &AdcEvent,
        action: TriggerAction,
    ) -> Result<Option<CompressedSpike>, CompressError> {
        let ch = event.channel as usize;
        if ch >= self.entries.len() {
            return Err(CompressError::UnknownChannel {
                channel: event.channel,
                count: self.entries.len(),
            });
        }
        let entry = &mut self.entries[ch];
        match action {
            TriggerAction::Ignore => return Ok(None),
            TriggerAction::AbortArm => {
                *entry = ChannelMemoryEntry::default();
                return Ok(None);
            }
            TriggerAction::Digitize => {
                if entry.state == EntryState::Idle {
                    entry.state = EntryState::Armed;
                }
            }
            TriggerAction::ConfirmSpike => entry.state = EntryState::Capturing,
        }
        let (next, sat) = mac_step(*entry, event.code, &self.mem)?;
        *entry = next;
        self.cycles += 1;
        self.saturations += sat as u64;
        if entry.state == EntryState::Capturing && entry.sample_index as usize == self.window_len {
            // Remaining indices see centered zeros, which add nothing.
            entry.sample_index = WINDOW_LEN as u8;
            let start = event.period_index + 1 - self.window_len as u64;
            let (spike, sat) = finalize(*entry, &self.mem, event.channel, start)?;
            self.saturations += sat as u64;
            *entry = ChannelMemoryEntry::default();
            return Ok(Some(spike));
        }
        Ok(None)
    }
}

/// Run a time-ordered stream of (event, action) pairs through a fresh compressor.
pub fn process_stream<I>(
    events: I,
    mem: &QuantizedPcaMemory,
    channel_count: usize,
    window_len: usize,
) -> Result<(Vec<CompressedSpike>, u64), CompressError>
where
    I: IntoIterator<Item = (AdcEvent, TriggerAction)>,
{
    let mut comp = Compressor::new(mem.clone(), channel_count, window_len)?;
    let mut out = Vec::new();
    for (ev, action) in events {
        if let Some(s) = comp.push(&ev, action)? {
            out.push(s);
        }
    }
    Ok((out, comp.cycles()))
}
