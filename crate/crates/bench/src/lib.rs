//! Deterministic inputs for the datapath benchmarks.

use spikeramp::adc::{AdcEvent, TriggerAction};
use spikeramp::train::{quantize_basis, PcaBasis};
use spikeramp::{QuantizedPcaMemory, COMPONENTS, WINDOW_LEN};

/// Cheap reproducible value in `[0, 1)`.
fn unit(i: usize) -> f64 {
    let x = (i as f64 * 12.9898).sin() * 43_758.545_3;
    x - x.floor()
}

/// Held voltages for `channels` electrodes, clustered so collisions occur.
pub fn held_voltages(channels: usize) -> Vec<f64> {
    (0..channels).map(|c| 0.45 + 0.02 * (unit(c) * 5.0).floor() + 0.001 * unit(c + 999)).collect()
}

/// Spike-like windows in raw codes.
pub fn windows(count: usize) -> Vec<[u8; WINDOW_LEN]> {
    (0..count)
        .map(|k| {
            let depth = 20.0 + 60.0 * unit(k);
            std::array::from_fn(|i| {
                let t = i as f64 - 4.0;
                let v = -depth * (-t * t / 4.0).exp() + 0.3 * depth * (-(t - 6.0).powi(2) / 16.0).exp();
                (128.0 + v + 4.0 * (unit(k * 31 + i) - 0.5)).round() as u8
            })
        })
        .collect()
}

/// Memory built from a fixed orthogonal Hadamard-style basis.
pub fn memory() -> QuantizedPcaMemory {
    let components = (0..COMPONENTS)
        .map(|c| {
            std::array::from_fn(|i| {
                let sign = if (i >> c) & 1 == 0 { 1.0 } else { -1.0 };
                sign / (WINDOW_LEN as f64).sqrt()
            })
        })
        .collect();
    let basis = PcaBasis {
        components,
        eigenvalues: vec![1.0; COMPONENTS],
        mean: [0.0; WINDOW_LEN],
    };
    quantize_basis(&basis, 6, 4).expect("four components")
}

/// Interleaved confirmed windows on `channels` channels, as the compressor
/// would see them.
pub fn event_stream(channels: usize, spikes_per_channel: usize) -> Vec<(AdcEvent, TriggerAction)> {
    let w = windows(channels * spikes_per_channel);
    let mut out = Vec::with_capacity(w.len() * WINDOW_LEN);
    for s in 0..spikes_per_channel {
        for i in 0..WINDOW_LEN {
            for ch in 0..channels {
                let period = (s * 40 + i) as u64;
                let action = match i {
                    1 => TriggerAction::ConfirmSpike,
                    _ => TriggerAction::Digitize,
                };
                out.push((
                    AdcEvent {
                        channel: ch as u16,
                        code: w[s * channels + ch][i],
                        period_index: period,
                        ramp_cycle: 0,
                    },
                    action,
                ));
            }
        }
    }
    out
}

/// Symmetric covariance of the fixture windows.
pub fn covariance(count: usize) -> Vec<Vec<f64>> {
    let rows: Vec<[f64; WINDOW_LEN]> = windows(count)
        .iter()
        .map(|w| std::array::from_fn(|i| w[i] as f64 - 128.0))
        .collect();
    spikeramp::train::covariance(&rows).1
}
