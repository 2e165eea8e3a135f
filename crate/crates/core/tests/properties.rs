use proptest::prelude::*;

use spikeramp::adc::{decode_raw_word, encode_raw_word, quantize_ideal};
use spikeramp::compress::{
    compress_window, decode_record, decompress, encode_record, ChannelMemoryEntry, CompressedSpike, EntryState,
    QuantizedPcaMemory,
};
use spikeramp::eval::{inl, pearson};
use spikeramp::frontend::sample_hold;
use spikeramp::io::{decode_compressed_stream, encode_compressed_stream};
use spikeramp::link::{
    bits_to_bytes, bytes_to_bits, frame_config, manchester_decode, manchester_encode, parse_frame, RegisterBank,
    PIXEL_COUNT,
};
use spikeramp::train::{compute_pca_basis, quantize_basis};
use spikeramp::{AdcEvent, Polarity, RampAdc, RampConfig, TriggerConfig, COMPONENTS, WINDOW_LEN};

fn entry() -> impl Strategy<Value = ChannelMemoryEntry> {
    (0..3u8, 0..32u8, prop::array::uniform4(-1024i16..=1023)).prop_map(|(s, i, sums)| ChannelMemoryEntry {
        state: [EntryState::Idle, EntryState::Armed, EntryState::Capturing][s as usize],
        sample_index: i,
        sums,
    })
}

fn components() -> impl Strategy<Value = [i8; COMPONENTS]> {
    prop::array::uniform4(-32i8..=31)
}

proptest! {
    #[test]
    fn ramp_codes_equal_reference(
        held in prop::collection::vec(-0.2f64..1.2, 1..64),
        gate_bits in any::<u64>(),
    ) {
        let cfg = RampConfig::default();
        let mut adc = RampAdc::new(cfg.clone()).unwrap();
        let gate: Vec<bool> = (0..held.len()).map(|i| gate_bits >> i & 1 == 1).collect();
        let period = adc.run_period(&held, &gate, 0).unwrap();
        let got: Vec<(u8, u16)> = period.events.iter().map(|e| (e.code, e.channel)).collect();
        let mut want: Vec<(u8, u16)> = (0..held.len())
            .filter(|&c| gate[c])
            .map(|c| (quantize_ideal(held[c], &cfg), c as u16))
            .collect();
        want.sort();
        prop_assert_eq!(got, want);
        let cycles: Vec<u16> = period.events.iter().map(|e| e.ramp_cycle).collect();
        prop_assert!(cycles.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn memory_entry_round_trips(e in entry()) {
        let w = e.to_bits();
        prop_assert!(w < 1 << 51);
        prop_assert_eq!(ChannelMemoryEntry::from_bits(w), Some(e));
    }

    #[test]
    fn payload_and_record_round_trip(c in components(), channel in 0u16..64, period in 0u64..1 << 18) {
        let s = CompressedSpike { channel, period_index: period, components: c };
        prop_assert!(s.payload() < 1 << 24);
        prop_assert_eq!(CompressedSpike::from_payload(s.payload(), channel, period), s);
        prop_assert_eq!(decode_record(&encode_record(&s).unwrap()), s);
    }

    #[test]
    fn compressed_stream_unwraps_short_gaps(
        gaps in prop::collection::vec(0u64..(1 << 18) - 1, 1..40),
        c in components(),
    ) {
        let mut p = 0;
        let spikes: Vec<CompressedSpike> = gaps
            .iter()
            .map(|g| {
                p += g;
                CompressedSpike { channel: 1, period_index: p, components: c }
            })
            .collect();
        let bytes = encode_compressed_stream(&spikes).unwrap();
        prop_assert_eq!(decode_compressed_stream(&bytes).unwrap(), spikes);
    }

    #[test]
    fn raw_word_round_trips(channel in 0u16..64, code in any::<u8>(), cycle in 0u16..1024, p in any::<u32>()) {
        let ev = AdcEvent { channel, code, period_index: p as u64, ramp_cycle: cycle };
        let w = encode_raw_word(&ev).unwrap();
        prop_assert_ne!(w, u32::MAX);
        prop_assert_eq!(decode_raw_word(w, p as u64), Some(ev));
    }

    #[test]
    fn manchester_is_lossless_and_balanced(bits in prop::collection::vec(0u8..=1, 0..512)) {
        let chips = manchester_encode(&bits);
        prop_assert_eq!(chips.len(), 2 * bits.len());
        prop_assert!(chips.chunks(2).all(|p| p[0] != p[1]));
        prop_assert_eq!(manchester_decode(&chips).unwrap(), bits);
    }

    #[test]
    fn bytes_and_bits_are_inverse(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(bits_to_bytes(&bytes_to_bits(&bytes)), bytes);
    }

    #[test]
    fn frames_round_trip_at_any_length(payload in prop::collection::vec(any::<u8>(), 0..800)) {
        let chips = frame_config(&payload);
        prop_assert_eq!(parse_frame(&chips).unwrap(), payload);
    }

    #[test]
    fn register_bank_round_trips(
        mask in 0u64..1 << 49,
        t1 in 100u8..128,
        dt in 0u8..20,
        n in 0u8..6,
        m in 10u8..17,
        shifts in (0u32..16, 0u32..16),
        coeff in prop::collection::vec(-256i16..=255, COMPONENTS * WINDOW_LEN),
    ) {
        let mut bank = RegisterBank::default();
        bank.write_register(spikeramp::link::addr::PIXEL_ENABLE, mask).unwrap();
        let trigger = TriggerConfig {
            threshold1: t1,
            threshold2: t1 - dt,
            pretrigger_n: n,
            posttrigger_m: m,
            polarity: Polarity::NegativeGoing,
        };
        bank.set_trigger(&trigger);
        let mem = QuantizedPcaMemory {
            coefficients: std::array::from_fn(|c| std::array::from_fn(|i| coeff[c * WINDOW_LEN + i])),
            mac_shift: shifts.0,
            out_shift: shifts.1,
            scale: 100.0,
        };
        bank.set_memory(&mem);
        let back = RegisterBank::deserialize(&bank.serialize()).unwrap();
        prop_assert_eq!(&back, &bank);
        prop_assert_eq!(back.trigger(Polarity::NegativeGoing), trigger);
        prop_assert_eq!(back.pca_memory(100.0), mem);
        let gate = back.pixel_mask(PIXEL_COUNT);
        prop_assert!((0..PIXEL_COUNT).all(|i| gate[i] == (mask >> i & 1 == 1)));
    }

    #[test]
    fn inl_is_the_prefix_sum(d in prop::collection::vec(-1.0f64..1.0, 0..300)) {
        let got = inl(&d);
        let mut acc = 0.0;
        for (g, x) in got.iter().zip(&d) {
            acc += x;
            prop_assert_eq!(*g, acc);
        }
        prop_assert_eq!(got.len(), d.len());
    }

    #[test]
    fn negated_window_anticorrelates(x in prop::collection::vec(-100.0f64..100.0, 2..30)) {
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((pearson(&x, &y) + 1.0).abs() < 1e-9);
        prop_assert!((pearson(&x, &x) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ramp_is_held_by_index(k in 1usize..5) {
        // A 0..1 V ramp at k times the sampling rate, held at 20 kHz.
        let rate = 20_000.0 * k as f64;
        let n = 20_000 * k;
        let trace: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let held = sample_hold(&trace, rate, 20_000.0).unwrap();
        prop_assert_eq!(held.len(), 20_000);
        for (j, h) in held.iter().enumerate() {
            prop_assert!((h - j as f64 / 20_000.0).abs() <= 1.0 / n as f64);
        }
    }
}

fn random_basis_memory(seed: u64) -> (spikeramp::PcaBasis, QuantizedPcaMemory) {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<[f64; WINDOW_LEN]> = (0..100)
        .map(|_| std::array::from_fn(|i| r.random_range(-30.0..30.0) * (1.0 + i as f64 / 8.0)))
        .collect();
    let basis = compute_pca_basis(&rows, COMPONENTS).unwrap();
    // Shifts wide enough that no 8-bit window can saturate.
    let mem = quantize_basis(&basis, 10, 5).unwrap();
    (basis, mem)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Reconstruction from fixed-point components stays within the bound
    /// propagated through the transpose, plus the coefficient rounding.
    #[test]
    fn decompression_tracks_full_precision(
        seed in 0u64..8,
        codes in prop::collection::vec(any::<u8>(), WINDOW_LEN),
    ) {
        let (basis, mem) = random_basis_memory(seed);
        let (spike, sat) = compress_window(&codes, &mem, 0, 0).unwrap();
        prop_assert_eq!(sat, 0);
        let x: [i32; WINDOW_LEN] = std::array::from_fn(|i| codes[i] as i32 - 128);
        let b = mem.error_bound(&x);
        let p: Vec<f64> = (0..COMPONENTS)
            .map(|c| (0..WINDOW_LEN).map(|i| basis.components[c][i] * x[i] as f64).sum())
            .collect();
        let exact = basis.reconstruct(&p);
        let fixed = decompress(&spike, &mem);
        for i in 0..WINDOW_LEN {
            let bound: f64 = (0..COMPONENTS)
                .map(|c| b * (mem.coefficients[c][i] as f64 / mem.scale).abs() + p[c].abs() * 0.5 / mem.scale)
                .sum();
            prop_assert!((fixed[i] - exact[i]).abs() <= bound + 1e-9);
        }
    }
}
