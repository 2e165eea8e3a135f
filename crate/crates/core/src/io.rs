//! On-disk formats.
//!
//! * `<name>.f32raw`: little-endian f32 volts, sample-interleaved
//!   (`t0c0 t0c1 .. t1c0 ..`), described by `<name>.header.json`.
//! * `<name>.gt.json`: ground-truth spike list.
//! * raw stream: 32-bit event words with a `0xFFFFFFFF` sync at the start of
//!   every sampling period.
//! * compressed stream: `0xA55A` sync (little endian) before every 48-bit
//!   record.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adc::{decode_raw_word, encode_raw_word, AdcEvent, RAW_SYNC};
use crate::compress::{decode_record, encode_record, CompressedSpike, RECORD_SYNC, PERIOD_FIELD_BITS};
use crate::synth::{GroundTruth, Recording};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingHeader {
    pub sample_rate: f64,
    pub channel_count: usize,
    pub sample_count: usize,
    pub dtype: String,
    pub layout: String,
    pub units: String,
}

impl RecordingHeader {
    pub fn of(rec: &Recording) -> Self {
        Self {
            sample_rate: rec.sample_rate,
            channel_count: rec.channel_count(),
            sample_count: rec.sample_count(),
            dtype: "f32le".into(),
            layout: "interleaved".into(),
            units: "V".into(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn encode_f32raw(rec: &Recording) -> Vec<u8> {
    let mut out = Vec::with_capacity(rec.channel_count() * rec.sample_count() * 4);
    for t in 0..rec.sample_count() {
        for ch in &rec.traces {
            out.extend_from_slice(&(ch[t] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_f32raw(bytes: &[u8], header: &RecordingHeader) -> Result<Recording> {
    if header.dtype != "f32le" || header.layout != "interleaved" {
        return Err(Error::Format(format!("unsupported layout {}/{}", header.dtype, header.layout)));
    }
    let n = header.channel_count * header.sample_count;
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!("expected {} bytes of samples, found {}", n * 4, bytes.len())));
    }
    let mut traces = vec![Vec::with_capacity(header.sample_count); header.channel_count];
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        traces[i % header.channel_count].push(v as f64);
    }
    Ok(Recording {
        sample_rate: header.sample_rate,
        traces,
    })
}

/// Write `<dir>/<name>.f32raw`, `.header.json` and `.gt.json`.
pub fn write_recording(dir: &Path, name: &str, rec: &Recording, gt: &GroundTruth) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{name}.f32raw")), encode_f32raw(rec))?;
    write_json(&dir.join(format!("{name}.header.json")), &RecordingHeader::of(rec))?;
    write_json(&dir.join(format!("{name}.gt.json")), gt)?;
    Ok(())
}

pub fn read_recording(dir: &Path, name: &str) -> Result<(Recording, GroundTruth)> {
    let header: RecordingHeader = read_json(&dir.join(format!("{name}.header.json")))?;
    let raw_path = dir.join(format!("{name}.f32raw"));
    let bytes = fs::read(&raw_path).map_err(|e| Error::Format(format!("{}: {e}", raw_path.display())))?;
    let rec = decode_f32raw(&bytes, &header)?;
    let gt = read_json(&dir.join(format!("{name}.gt.json")))?;
    Ok((rec, gt))
}

/// Raw event stream for `periods` sampling periods. Events must be sorted by
/// period.
pub fn encode_raw_stream(events: &[AdcEvent], periods: u64) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity((events.len() + periods as usize) * 4);
    let mut it = events.iter().peekable();
    for p in 0..periods {
        out.extend_from_slice(&RAW_SYNC.to_le_bytes());
        while let Some(ev) = it.next_if(|e| e.period_index == p) {
            let w = encode_raw_word(ev).ok_or_else(|| Error::Format(format!("event {ev:?} does not fit a raw word")))?;
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    if let Some(ev) = it.next() {
        return Err(Error::Format(format!("event in period {} out of order or past the end", ev.period_index)));
    }
    Ok(out)
}

/// Returns the events and the number of periods.
pub fn decode_raw_stream(bytes: &[u8]) -> Result<(Vec<AdcEvent>, u64)> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("raw stream length is not a multiple of 4".into()));
    }
    let mut events = Vec::new();
    let mut periods = 0u64;
    for c in bytes.chunks_exact(4) {
        let w = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if w == RAW_SYNC {
            periods += 1;
            continue;
        }
        if periods == 0 {
            return Err(Error::Format("raw stream does not start with a sync word".into()));
        }
        let ev = decode_raw_word(w, periods - 1).ok_or_else(|| Error::Format(format!("bad raw word {w:#010x}")))?;
        events.push(ev);
    }
    Ok((events, periods))
}

/// Records must be in non-decreasing period order.
pub fn encode_compressed_stream(spikes: &[CompressedSpike]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(spikes.len() * 8);
    for s in spikes {
        out.extend_from_slice(&RECORD_SYNC.to_le_bytes());
        out.extend_from_slice(&encode_record(s)?);
    }
    Ok(out)
}

/// Decode records and unwrap their 18-bit period fields, assuming no gap
/// between consecutive records reaches 2^18 periods.
pub fn decode_compressed_stream(bytes: &[u8]) -> Result<Vec<CompressedSpike>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("compressed stream length is not a multiple of 8".into()));
    }
    let span = 1u64 << PERIOD_FIELD_BITS;
    let mut last = 0u64;
    let mut out = Vec::with_capacity(bytes.len() / 8);
    for (i, c) in bytes.chunks_exact(8).enumerate() {
        if u16::from_le_bytes([c[0], c[1]]) != RECORD_SYNC {
            return Err(Error::Format(format!("missing sync before record {i}")));
        }
        let mut s = decode_record(c[2..8].try_into().expect("6 bytes"));
        let mut p = last - last % span + s.period_index;
        if p < last {
            p += span;
        }
        s.period_index = p;
        last = p;
        out.push(s);
    }
    Ok(out)
}

/// Two-column CSV `code,value`.
pub fn write_code_csv(path: &Path, header: &str, first_code: usize, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "code,{header}")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{},{v}", first_code + i)?;
    }
    w.flush()?;
    Ok(())
}
