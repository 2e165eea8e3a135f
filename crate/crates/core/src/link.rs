//! Controller model: register bank, Manchester chip coding, framed
//! configuration transfers and link timing.
//!
//! Frames are `0xAA55 | len:8 | payload | crc8`, bits sent MSB first, each bit
//! sent as two chips (`1 -> 1,0`, `0 -> 0,1`). Payloads longer than 255 bytes
//! span several frames; a frame shorter than 255 bytes ends the transfer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adc::{Polarity, TriggerConfig};
use crate::compress::{QuantizedPcaMemory, COEFF_BITS};
use crate::pipeline::Mode;
use crate::{COMPONENTS, WINDOW_LEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("invalid chip pair at chip offset {offset}")]
    InvalidChipPair { offset: usize },
    #[error("odd chip count {0}")]
    OddChipCount(usize),
    #[error("unknown register address {0:#04x}")]
    UnknownAddress(u8),
    #[error("value {value:#x} does not fit register {address:#04x}")]
    ValueTooWide { address: u8, value: u64 },
    #[error("bad preamble {0:#06x}")]
    BadPreamble(u16),
    #[error("crc mismatch: frame {found:#04x}, computed {computed:#04x}")]
    BadCrc { found: u8, computed: u8 },
    #[error("frame truncated")]
    TruncatedFrame,
    #[error("trailing data after final frame")]
    TrailingData,
}

pub const PREAMBLE: u16 = 0xAA55;
pub const MAX_FRAME_PAYLOAD: usize = 255;
/// Preamble, length and CRC bytes around each frame payload.
pub const FRAME_OVERHEAD_BYTES: usize = 4;
pub const DEFAULT_LINK_RATE: f64 = 2.0e6;

pub fn manchester_encode(bits: &[u8]) -> Vec<u8> {
    bits.iter().flat_map(|&b| if b != 0 { [1, 0] } else { [0, 1] }).collect()
}

pub fn manchester_decode(chips: &[u8]) -> Result<Vec<u8>, LinkError> {
    if chips.len() % 2 != 0 {
        return Err(LinkError::OddChipCount(chips.len()));
    }
    chips
        .chunks_exact(2)
        .enumerate()
        .map(|(i, p)| match (p[0], p[1]) {
            (1, 0) => Ok(1),
            (0, 1) => Ok(0),
            _ => Err(LinkError::InvalidChipPair { offset: 2 * i }),
        })
        .collect()
}

/// MSB-first bit expansion.
pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|&b| (0..8).rev().map(move |k| (b >> k) & 1)).collect()
}

/// MSB-first packing; a partial final byte is zero-filled.
pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | ((b & 1) << (7 - k))))
        .collect()
}

/// CRC-8 with polynomial 0x07, zero init, no reflection, no final xor.
pub fn crc8(data: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &b in data {
        crc ^= b;
        for _ in 0..8 {
            crc = if crc & 0x80 != 0 { (crc << 1) ^ 0x07 } else { crc << 1 };
        }
    }
    crc
}

fn frame_bytes(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD_BYTES);
    out.extend_from_slice(&PREAMBLE.to_be_bytes());
    out.push(payload.len() as u8);
    out.extend_from_slice(payload);
    out.push(crc8(&out[2..]));
    out
}

/// Byte image of a transfer before chip coding.
pub fn frame_config_bytes(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut chunks = payload.chunks(MAX_FRAME_PAYLOAD);
    loop {
        match chunks.next() {
            Some(c) => {
                out.extend(frame_bytes(c));
                if c.len() < MAX_FRAME_PAYLOAD {
                    break;
                }
            }
            None => {
                out.extend(frame_bytes(&[]));
                break;
            }
        }
    }
    out
}

/// Frame and Manchester-code a payload. Returns chips (0/1 values).
pub fn frame_config(payload: &[u8]) -> Vec<u8> {
    manchester_encode(&bytes_to_bits(&frame_config_bytes(payload)))
}

/// Parse a byte image of one complete transfer.
pub fn parse_frame_bytes(bytes: &[u8]) -> Result<Vec<u8>, LinkError> {
    let mut payload = Vec::new();
    let mut pos = 0;
    loop {
        let head = bytes.get(pos..pos + 3).ok_or(LinkError::TruncatedFrame)?;
        let preamble = u16::from_be_bytes([head[0], head[1]]);
        if preamble != PREAMBLE {
            return Err(LinkError::BadPreamble(preamble));
        }
        let len = head[2] as usize;
        let body = bytes.get(pos + 2..pos + 3 + len).ok_or(LinkError::TruncatedFrame)?;
        let found = *bytes.get(pos + 3 + len).ok_or(LinkError::TruncatedFrame)?;
        let computed = crc8(body);
        if found != computed {
            return Err(LinkError::BadCrc { found, computed });
        }
        payload.extend_from_slice(&body[1..]);
        pos += 4 + len;
        if len < MAX_FRAME_PAYLOAD {
            break;
        }
    }
    if pos != bytes.len() {
        return Err(LinkError::TrailingData);
    }
    Ok(payload)
}

/// Decode chips and parse the transfer they carry.
pub fn parse_frame(chips: &[u8]) -> Result<Vec<u8>, LinkError> {
    let bits = manchester_decode(chips)?;
    if bits.len() % 8 != 0 {
        return Err(LinkError::TruncatedFrame);
    }
    parse_frame_bytes(&bits_to_bytes(&bits))
}

pub mod addr {
    pub const MODE: u8 = 0x00;
    pub const PIXEL_ENABLE: u8 = 0x01;
    pub const THRESHOLD1: u8 = 0x02;
    pub const THRESHOLD2: u8 = 0x03;
    pub const SAMPLING_PERIOD_DIVIDER: u8 = 0x04;
    pub const PRETRIGGER_N: u8 = 0x05;
    pub const POSTTRIGGER_M: u8 = 0x06;
    /// `mac_shift` in bits 0..4, `out_shift` in bits 4..8.
    pub const SHIFTS: u8 = 0x07;
    /// Coefficient `(c, i)` lives at `COEFF_BASE + 22 c + i`.
    pub const COEFF_BASE: u8 = 0x20;
}

pub const PIXEL_COUNT: usize = 49;
const COEFF_COUNT: usize = COMPONENTS * WINDOW_LEN;

/// Register width in bits, or `None` for unmapped addresses.
pub fn register_width(address: u8) -> Option<u32> {
    match address {
        addr::MODE => Some(1),
        addr::PIXEL_ENABLE => Some(PIXEL_COUNT as u32),
        addr::THRESHOLD1 | addr::THRESHOLD2 | addr::SHIFTS => Some(8),
        addr::SAMPLING_PERIOD_DIVIDER => Some(16),
        addr::PRETRIGGER_N | addr::POSTTRIGGER_M => Some(5),
        a if (addr::COEFF_BASE..addr::COEFF_BASE + COEFF_COUNT as u8).contains(&a) => Some(COEFF_BITS),
        _ => None,
    }
}

/// Every mapped address in ascending order.
pub fn register_addresses() -> Vec<u8> {
    (0..=u8::MAX).filter(|&a| register_width(a).is_some()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterBank {
    pub mode: Mode,
    /// Bit `k` enables channel `k`.
    pub pixel_enable: u64,
    pub threshold1: u8,
    pub threshold2: u8,
    pub sampling_period_divider: u16,
    pub pretrigger_n: u8,
    pub posttrigger_m: u8,
    pub mac_shift: u8,
    pub out_shift: u8,
    pub pca_coefficients: [[i16; WINDOW_LEN]; COMPONENTS],
}

impl Default for RegisterBank {
    fn default() -> Self {
        let t = TriggerConfig::default();
        Self {
            mode: Mode::Raw,
            pixel_enable: (1u64 << PIXEL_COUNT) - 1,
            threshold1: t.threshold1,
            threshold2: t.threshold2,
            sampling_period_divider: 800,
            pretrigger_n: t.pretrigger_n,
            posttrigger_m: t.posttrigger_m,
            mac_shift: 0,
            out_shift: 0,
            pca_coefficients: [[0; WINDOW_LEN]; COMPONENTS],
        }
    }
}

impl RegisterBank {
    pub fn write_register(&mut self, address: u8, value: u64) -> Result<(), LinkError> {
        let width = register_width(address).ok_or(LinkError::UnknownAddress(address))?;
        if width < 64 && value >> width != 0 {
            return Err(LinkError::ValueTooWide { address, value });
        }
        match address {
            addr::MODE => self.mode = if value == 0 { Mode::Raw } else { Mode::Compressed },
            addr::PIXEL_ENABLE => self.pixel_enable = value,
            addr::THRESHOLD1 => self.threshold1 = value as u8,
            addr::THRESHOLD2 => self.threshold2 = value as u8,
            addr::SAMPLING_PERIOD_DIVIDER => self.sampling_period_divider = value as u16,
            addr::PRETRIGGER_N => self.pretrigger_n = value as u8,
            addr::POSTTRIGGER_M => self.posttrigger_m = value as u8,
            addr::SHIFTS => {
                self.mac_shift = (value & 0xF) as u8;
                self.out_shift = (value >> 4) as u8;
            }
            a => {
                let k = (a - addr::COEFF_BASE) as usize;
                // Sign-extend the 9-bit field.
                let v = ((value as i16) << 7) >> 7;
                self.pca_coefficients[k / WINDOW_LEN][k % WINDOW_LEN] = v;
            }
        }
        Ok(())
    }

    pub fn read_register(&self, address: u8) -> Result<u64, LinkError> {
        register_width(address).ok_or(LinkError::UnknownAddress(address))?;
        Ok(match address {
            addr::MODE => (self.mode == Mode::Compressed) as u64,
            addr::PIXEL_ENABLE => self.pixel_enable,
            addr::THRESHOLD1 => self.threshold1 as u64,
            addr::THRESHOLD2 => self.threshold2 as u64,
            addr::SAMPLING_PERIOD_DIVIDER => self.sampling_period_divider as u64,
            addr::PRETRIGGER_N => self.pretrigger_n as u64,
            addr::POSTTRIGGER_M => self.posttrigger_m as u64,
            addr::SHIFTS => (self.mac_shift as u64 & 0xF) | ((self.out_shift as u64 & 0xF) << 4),
            a => {
                let k = (a - addr::COEFF_BASE) as usize;
                (self.pca_coefficients[k / WINDOW_LEN][k % WINDOW_LEN] as u64) & ((1 << COEFF_BITS) - 1)
            }
        })
    }

    pub fn pixel_mask(&self, channels: usize) -> Vec<bool> {
        (0..channels).map(|k| k < 64 && self.pixel_enable >> k & 1 == 1).collect()
    }

    pub fn trigger(&self, polarity: Polarity) -> TriggerConfig {
        TriggerConfig {
            threshold1: self.threshold1,
            threshold2: self.threshold2,
            pretrigger_n: self.pretrigger_n,
            posttrigger_m: self.posttrigger_m,
            polarity,
        }
    }

    pub fn set_trigger(&mut self, t: &TriggerConfig) {
        self.threshold1 = t.threshold1;
        self.threshold2 = t.threshold2;
        self.pretrigger_n = t.pretrigger_n;
        self.posttrigger_m = t.posttrigger_m;
    }

    /// Load coefficients and shifts from a trained memory.
    pub fn set_memory(&mut self, mem: &QuantizedPcaMemory) {
        self.pca_coefficients = mem.coefficients;
        self.mac_shift = mem.mac_shift as u8;
        self.out_shift = mem.out_shift as u8;
    }

    /// The compressor memory held in the bank. `scale` is host-side metadata
    /// used only for reconstruction.
    pub fn pca_memory(&self, scale: f64) -> QuantizedPcaMemory {
        QuantizedPcaMemory {
            coefficients: self.pca_coefficients,
            mac_shift: self.mac_shift as u32,
            out_shift: self.out_shift as u32,
            scale,
        }
    }

    /// Register-write stream: for each mapped address, the address byte then
    /// the value in `ceil(width / 8)` little-endian bytes.
    pub fn to_writes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for a in register_addresses() {
            let width = register_width(a).expect("mapped");
            let v = self.read_register(a).expect("mapped");
            out.push(a);
            out.extend_from_slice(&v.to_le_bytes()[..width.div_ceil(8) as usize]);
        }
        out
    }

    /// Apply a register-write stream on top of `self`.
    pub fn apply_writes(&mut self, mut stream: &[u8]) -> Result<(), LinkError> {
        while let Some((&a, rest)) = stream.split_first() {
            let width = register_width(a).ok_or(LinkError::UnknownAddress(a))?;
            let n = width.div_ceil(8) as usize;
            let bytes = rest.get(..n).ok_or(LinkError::TruncatedFrame)?;
            let mut buf = [0u8; 8];
            buf[..n].copy_from_slice(bytes);
            self.write_register(a, u64::from_le_bytes(buf))?;
            stream = &rest[n..];
        }
        Ok(())
    }

    /// Full bank as framed chips.
    pub fn serialize(&self) -> Vec<u8> {
        frame_config(&self.to_writes())
    }

    pub fn deserialize(chips: &[u8]) -> Result<Self, LinkError> {
        let mut bank = RegisterBank::default();
        bank.apply_writes(&parse_frame(chips)?)?;
        Ok(bank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferTiming {
    pub payload_bits: u64,
    /// Payload plus preamble, length and CRC of every frame.
    pub framed_bits: u64,
    /// Manchester chips on the wire.
    pub chips: u64,
    pub bit_rate: f64,
    pub payload_seconds: f64,
    pub framed_seconds: f64,
}

/// Time to move `payload_bits` over a link carrying `bit_rate` data bits per
/// second, with and without framing. Chip coding is counted separately and
/// does not consume data rate.
pub fn transfer_timing(payload_bits: u64, bit_rate: f64) -> TransferTiming {
    let payload_bytes = payload_bits.div_ceil(8) as usize;
    let frames = payload_bytes / MAX_FRAME_PAYLOAD + 1;
    let framed_bits = (payload_bytes + frames * FRAME_OVERHEAD_BYTES) as u64 * 8;
    TransferTiming {
        payload_bits,
        framed_bits,
        chips: 2 * framed_bits,
        bit_rate,
        payload_seconds: payload_bits as f64 / bit_rate,
        framed_seconds: framed_bits as f64 / bit_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manchester_convention() {
        assert_eq!(manchester_encode(&[1, 0, 1]), vec![1, 0, 0, 1, 1, 0]);
        assert_eq!(manchester_decode(&[1, 0, 0, 1, 1, 0]).unwrap(), vec![1, 0, 1]);
        assert_eq!(manchester_decode(&[1, 0, 1, 1]), Err(LinkError::InvalidChipPair { offset: 2 }));
        assert_eq!(manchester_decode(&[0, 0]), Err(LinkError::InvalidChipPair { offset: 0 }));
        assert_eq!(manchester_decode(&[1]), Err(LinkError::OddChipCount(1)));
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc8(b"123456789"), 0xF4);
        assert_eq!(crc8(&[]), 0);
    }

    #[test]
    fn empty_payload_frame() {
        let bytes = frame_config_bytes(&[]);
        assert_eq!(bytes, vec![0xAA, 0x55, 0x00, 0x00]);
        assert_eq!(parse_frame(&frame_config(&[])).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn flipped_crc_bit_is_detected() {
        let mut chips = frame_config(&[1, 2, 3]);
        let n = chips.len();
        // A lone chip flip breaks the pair; flipping both chips flips the bit.
        let mut one = chips.clone();
        one[n - 3] ^= 1;
        assert!(matches!(parse_frame(&one), Err(LinkError::InvalidChipPair { .. })));
        chips[n - 4] ^= 1;
        chips[n - 3] ^= 1;
        assert!(matches!(parse_frame(&chips), Err(LinkError::BadCrc { .. })));
    }

    #[test]
    fn frame_errors() {
        let mut b = frame_config_bytes(&[9, 9]);
        assert_eq!(parse_frame_bytes(&b[..4]), Err(LinkError::TruncatedFrame));
        b[0] = 0xAB;
        assert_eq!(parse_frame_bytes(&b), Err(LinkError::BadPreamble(0xAB55)));
    }

    #[test]
    fn segmentation_boundaries() {
        for n in [254usize, 255, 256, 510, 600] {
            let p: Vec<u8> = (0..n).map(|i| (i * 7) as u8).collect();
            let bytes = frame_config_bytes(&p);
            assert_eq!(bytes.len(), n + (n / 255 + 1) * FRAME_OVERHEAD_BYTES);
            assert_eq!(parse_frame_bytes(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn register_access() {
        let mut bank = RegisterBank::default();
        bank.write_register(addr::THRESHOLD1, 120).unwrap();
        assert_eq!(bank.read_register(addr::THRESHOLD1).unwrap(), 120);
        assert_eq!(bank.write_register(0xFF, 1), Err(LinkError::UnknownAddress(0xFF)));
        assert_eq!(bank.read_register(0x10), Err(LinkError::UnknownAddress(0x10)));
        assert!(matches!(bank.write_register(addr::PRETRIGGER_N, 32), Err(LinkError::ValueTooWide { .. })));
        bank.write_register(addr::COEFF_BASE + 23, 0x1FF).unwrap();
        assert_eq!(bank.pca_coefficients[1][1], -1);
        assert_eq!(bank.read_register(addr::COEFF_BASE + 23).unwrap(), 0x1FF);
        bank.write_register(addr::PIXEL_ENABLE, bank.pixel_enable & !(1 << 48)).unwrap();
        let mask = bank.pixel_mask(49);
        assert!(!mask[48] && mask[..48].iter().all(|&m| m));
    }

    #[test]
    fn address_map() {
        let a = register_addresses();
        assert_eq!(a.len(), 8 + COEFF_COUNT);
        assert_eq!(*a.last().unwrap(), 0x77);
        let coeff_bits: u32 = a.iter().filter(|&&x| x >= addr::COEFF_BASE).map(|&x| register_width(x).unwrap()).sum();
        assert_eq!(coeff_bits, 792);
    }

    #[test]
    fn bank_round_trip() {
        let mut bank = RegisterBank {
            mode: Mode::Compressed,
            pixel_enable: 0x1_2345_6789_ABCD,
            mac_shift: 5,
            out_shift: 3,
            ..Default::default()
        };
        for (c, row) in bank.pca_coefficients.iter_mut().enumerate() {
            for (i, q) in row.iter_mut().enumerate() {
                *q = ((c * 97 + i * 31) % 512) as i16 - 256;
            }
        }
        assert_eq!(RegisterBank::deserialize(&bank.serialize()).unwrap(), bank);
    }

    #[test]
    fn timing_of_coefficient_load() {
        let t = transfer_timing(792, DEFAULT_LINK_RATE);
        assert!((t.payload_seconds - 0.396e-3).abs() < 1e-12);
        assert!(t.framed_seconds > t.payload_seconds);
        assert_eq!(t.framed_bits, (99 + 4) * 8);
    }
}
