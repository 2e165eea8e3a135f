//! Measurement suite: code-density linearity, spike matching and sorting
//! accuracy, bandwidth accounting, throughput budget and reconstruction
//! quality.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::adc::{code_density_capture, RampConfig, RampSweep};
use crate::compress::{CompressedSpike, PAYLOAD_BITS};
use crate::WINDOW_LEN;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("histogram has no interior codes with hits")]
    EmptyHistogram,
    #[error("no labeled training examples")]
    UnlabeledTraining,
    #[error("zero rate in bandwidth accounting: {0}")]
    ZeroRate(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// DNL over the operating range of a code-density histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnlReport {
    /// Code of `values[0]`.
    pub first_code: usize,
    pub values: Vec<f64>,
}

impl DnlReport {
    pub fn at(&self, code: usize) -> Option<f64> {
        code.checked_sub(self.first_code).and_then(|i| self.values.get(i).copied())
    }

    pub fn codes(&self) -> std::ops::Range<usize> {
        self.first_code..self.first_code + self.values.len()
    }
}

/// Per-code DNL, `hits / mean_hits - 1`, over the interior of the operating
/// range. The first and last hit codes collect everything outside the ramp
/// and are excluded.
pub fn dnl(histogram: &[u64]) -> Result<DnlReport, EvalError> {
    let lo = histogram.iter().position(|&h| h > 0).ok_or(EvalError::EmptyHistogram)?;
    let hi = histogram.iter().rposition(|&h| h > 0).ok_or(EvalError::EmptyHistogram)?;
    if hi < lo + 2 {
        return Err(EvalError::EmptyHistogram);
    }
    let interior = &histogram[lo + 1..hi];
    let mean = interior.iter().sum::<u64>() as f64 / interior.len() as f64;
    Ok(DnlReport {
        first_code: lo + 1,
        values: interior.iter().map(|&h| h as f64 / mean - 1.0).collect(),
    })
}

/// Running sum of DNL.
pub fn inl(dnl_values: &[f64]) -> Vec<f64> {
    dnl_values
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub repetitions: u32,
    pub histogram: Vec<u64>,
    pub dnl: DnlReport,
    pub inl: Vec<f64>,
    pub max_abs_dnl: f64,
    pub max_abs_inl: f64,
}

/// Code-density test end to end: full-scale sweeps through the ramp model,
/// histogram, DNL and INL.
pub fn linearity_suite(ramp: &RampConfig, sweep: &RampSweep, repetitions: u32) -> crate::Result<LinearityReport> {
    let histogram = code_density_capture(ramp, sweep, repetitions)?;
    let dnl = dnl(&histogram)?;
    let inl = inl(&dnl.values);
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(LinearityReport {
        repetitions,
        max_abs_dnl: max_abs(&dnl.values),
        max_abs_inl: max_abs(&inl),
        histogram,
        inl,
        dnl,
    })
}

/// A labeled event time in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTime {
    pub unit: u32,
    pub time: u64,
}

/// Rows are ground-truth units plus a final row of unmatched found spikes;
/// columns are found units plus a final column of missed ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub gt_units: Vec<u32>,
    pub found_units: Vec<u32>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gt\\found");
        for u in &self.found_units {
            s.push_str(&format!(",{u}"));
        }
        s.push_str(",fn\n");
        for (r, row) in self.counts.iter().enumerate() {
            match self.gt_units.get(r) {
                Some(u) => s.push_str(&u.to_string()),
                None => s.push_str("fp"),
            }
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Greedy time-ordered matching of `found` against `pool`, restricted to pairs
/// accepted by `same`. Returns the matched pool index for each found item.
fn greedy_match(
    pool: &[LabeledTime],
    found: &[LabeledTime],
    window: u64,
    pool_used: &mut [bool],
    found_used: &mut [bool],
    same: impl Fn(&LabeledTime, &LabeledTime) -> bool,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..found.len()).filter(|&i| !found_used[i]).collect();
    order.sort_by_key(|&i| (found[i].time, found[i].unit, i));
    let mut by_time: Vec<usize> = (0..pool.len()).collect();
    by_time.sort_by_key(|&i| (pool[i].time, i));
    let times: Vec<u64> = by_time.iter().map(|&i| pool[i].time).collect();
    let mut pairs = Vec::new();
    for fi in order {
        let f = found[fi];
        let start = times.partition_point(|&t| t + window < f.time);
        let mut best: Option<(u64, usize)> = None;
        for &pi in &by_time[start..] {
            let p = pool[pi];
            if p.time > f.time + window {
                break;
            }
            if pool_used[pi] || !same(&p, &f) {
                continue;
            }
            let d = p.time.abs_diff(f.time);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, pi));
            }
        }
        if let Some((_, pi)) = best {
            pool_used[pi] = true;
            found_used[fi] = true;
            pairs.push((pi, fi));
        }
    }
    pairs
}

/// One-to-one matching within `±window` samples. A found spike is a true
/// positive when it matches a ground-truth spike of the same unit; everything
/// else counts as FP (found) and FN (ground truth). Leftovers are then paired
/// across units to fill the off-diagonal confusion cells.
pub fn match_spikes(gt: &[LabeledTime], found: &[LabeledTime], window: u64) -> MatchReport {
    let mut gt_used = vec![false; gt.len()];
    let mut found_used = vec![false; found.len()];
    let same_unit = greedy_match(gt, found, window, &mut gt_used, &mut found_used, |a, b| a.unit == b.unit);
    let cross = greedy_match(gt, found, window, &mut gt_used, &mut found_used, |_, _| true);

    let gt_units: Vec<u32> = gt.iter().map(|g| g.unit).collect::<BTreeSet<_>>().into_iter().collect();
    let found_units: Vec<u32> = found.iter().map(|f| f.unit).collect::<BTreeSet<_>>().into_iter().collect();
    let row: BTreeMap<u32, usize> = gt_units.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let col: BTreeMap<u32, usize> = found_units.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let (fp_row, fn_col) = (gt_units.len(), found_units.len());
    let mut counts = vec![vec![0u64; found_units.len() + 1]; gt_units.len() + 1];
    for &(gi, fi) in same_unit.iter().chain(&cross) {
        counts[row[&gt[gi].unit]][col[&found[fi].unit]] += 1;
    }
    for (gi, used) in gt_used.iter().enumerate() {
        if !used {
            counts[row[&gt[gi].unit]][fn_col] += 1;
        }
    }
    for (fi, used) in found_used.iter().enumerate() {
        if !used {
            counts[fp_row][col[&found[fi].unit]] += 1;
        }
    }

    let tp = same_unit.len() as u64;
    let fp = found.len() as u64 - tp;
    let fn_ = gt.len() as u64 - tp;
    let denom = tp + fp + fn_;
    MatchReport {
        tp,
        fp,
        fn_,
        accuracy: if denom == 0 { 1.0 } else { tp as f64 / denom as f64 },
        confusion: ConfusionMatrix {
            gt_units,
            found_units,
            counts,
        },
    }
}

/// Matching window in samples for a duration in seconds.
pub fn window_samples(window_s: f64, sample_rate: f64) -> u64 {
    (window_s * sample_rate).round() as u64
}

/// Nearest-centroid classifier; ties go to the lowest label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestCentroid {
    /// Sorted by label.
    pub centroids: Vec<(u32, Vec<f64>)>,
}

impl NearestCentroid {
    pub fn fit<'a, I>(examples: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (&'a [f64], u32)>,
    {
        let mut acc: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
        let mut dim = None;
        for (x, label) in examples {
            if *dim.get_or_insert(x.len()) != x.len() {
                return Err(EvalError::LengthMismatch(dim.unwrap_or(0), x.len()));
            }
            let e = acc.entry(label).or_insert_with(|| (vec![0.0; x.len()], 0));
            e.0.iter_mut().zip(x).for_each(|(a, v)| *a += v);
            e.1 += 1;
        }
        if acc.is_empty() {
            return Err(EvalError::UnlabeledTraining);
        }
        Ok(Self {
            centroids: acc
                .into_iter()
                .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
                .collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, self.centroids[0].0);
        for (label, c) in &self.centroids {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, *label);
            }
        }
        best.1
    }
}

/// Classify compressed spikes by nearest centroid in component space, using
/// per-channel centroids where the channel has training examples and global
/// centroids otherwise.
pub fn classify_components(
    spikes: &[CompressedSpike],
    training: &[(CompressedSpike, u32)],
) -> Result<Vec<u32>, EvalError> {
    let feat = |s: &CompressedSpike| s.components.iter().map(|&c| c as f64).collect::<Vec<f64>>();
    let feats: Vec<(u16, Vec<f64>, u32)> = training.iter().map(|(s, l)| (s.channel, feat(s), *l)).collect();
    let global = NearestCentroid::fit(feats.iter().map(|(_, f, l)| (f.as_slice(), *l)))?;
    let mut per_channel: BTreeMap<u16, NearestCentroid> = BTreeMap::new();
    let channels: BTreeSet<u16> = feats.iter().map(|f| f.0).collect();
    for ch in channels {
        let model = NearestCentroid::fit(
            feats.iter().filter(|f| f.0 == ch).map(|(_, f, l)| (f.as_slice(), *l)),
        )?;
        per_channel.insert(ch, model);
    }
    Ok(spikes
        .iter()
        .map(|s| per_channel.get(&s.channel).unwrap_or(&global).predict(&feat(s)))
        .collect())
}

/// Label reserved for detections that match no ground-truth spike.
pub const NOISE_UNIT: u32 = u32::MAX;

/// Set on labels of detections caused by a unit whose home is another
/// electrode. Such classes get their own centroids and are discarded like
/// noise when predicted.
pub const FOREIGN_FLAG: u32 = 1 << 31;

/// True for labels the sorter never reports (noise and foreign units).
pub fn is_background(label: u32) -> bool {
    label & FOREIGN_FLAG != 0
}

/// A detected window reduced to a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub channel: u16,
    /// Sampling period of the window start.
    pub time: u64,
    pub features: Vec<f64>,
}

/// Ground-truth spike as seen by the sorter (unit, trough time, home channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruthSpike {
    pub unit: u32,
    pub time: u64,
    pub channel: u16,
}

/// Label training detections: a detection takes the unit of the nearest
/// unused ground-truth spike homed on the same electrode within the window.
/// Left-over detections near a spike homed elsewhere get that unit with
/// [`FOREIGN_FLAG`] set; the rest are [`NOISE_UNIT`].
pub fn label_detections(detections: &[&Detection], truth: &[TruthSpike], window: u64) -> Vec<u32> {
    let mut labels = vec![NOISE_UNIT; detections.len()];
    let mut by_channel: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        by_channel.entry(d.channel).or_default().push(i);
    }
    for (ch, idx) in by_channel {
        let pool: Vec<LabeledTime> = truth
            .iter()
            .filter(|t| t.channel == ch)
            .map(|t| LabeledTime { unit: t.unit, time: t.time })
            .collect();
        let found: Vec<LabeledTime> = idx
            .iter()
            .map(|&i| LabeledTime { unit: 0, time: detections[i].time })
            .collect();
        let mut pu = vec![false; pool.len()];
        let mut fu = vec![false; found.len()];
        for (pi, fi) in greedy_match(&pool, &found, window, &mut pu, &mut fu, |_, _| true) {
            labels[idx[fi]] = pool[pi].unit;
        }
        let others: Vec<LabeledTime> = truth
            .iter()
            .filter(|t| t.channel != ch)
            .map(|t| LabeledTime { unit: t.unit, time: t.time })
            .collect();
        let mut ou = vec![false; others.len()];
        for (pi, fi) in greedy_match(&others, &found, window, &mut ou, &mut fu, |_, _| true) {
            labels[idx[fi]] = others[pi].unit | FOREIGN_FLAG;
        }
    }
    labels
}

/// Built-in sorter: per-channel nearest centroid (with a noise class) trained
/// on detections before `split`, scored on detections and ground truth at or
/// after `split`.
pub fn sort_and_score(
    detections: &[Detection],
    truth: &[TruthSpike],
    split: u64,
    window: u64,
) -> Result<MatchReport, EvalError> {
    let (train, test): (Vec<&Detection>, Vec<&Detection>) = detections.iter().partition(|d| d.time < split);
    let train_truth: Vec<TruthSpike> = truth.iter().copied().filter(|t| t.time < split).collect();
    let labels = label_detections(&train, &train_truth, window);
    if labels.iter().all(|&l| is_background(l)) {
        return Err(EvalError::UnlabeledTraining);
    }
    let mut models: BTreeMap<u16, NearestCentroid> = BTreeMap::new();
    let channels: BTreeSet<u16> = train.iter().map(|d| d.channel).collect();
    for ch in channels {
        let examples = train
            .iter()
            .zip(&labels)
            .filter(|(d, _)| d.channel == ch)
            .map(|(d, &l)| (d.features.as_slice(), l));
        models.insert(ch, NearestCentroid::fit(examples)?);
    }
    let found: Vec<LabeledTime> = test
        .iter()
        .filter_map(|d| {
            let unit = models.get(&d.channel)?.predict(&d.features);
            (!is_background(unit)).then_some(LabeledTime { unit, time: d.time })
        })
        .collect();
    let gt: Vec<LabeledTime> = truth
        .iter()
        .filter(|t| t.time >= split)
        .map(|t| LabeledTime { unit: t.unit, time: t.time })
        .collect();
    Ok(match_spikes(&gt, &found, window))
}

/// Extra bits per event for each stream, e.g. address and time stamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overheads {
    pub detected_bits: u64,
    pub compressed_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub raw_bits_per_s: Ratio<u128>,
    pub detected_bits_per_s: Ratio<u128>,
    pub compressed_bits_per_s: Ratio<u128>,
    pub detected_ratio: Ratio<u128>,
    pub compressed_ratio: Ratio<u128>,
    /// Compressed ratio over detected ratio.
    pub fold: Ratio<u128>,
    pub overheads: Overheads,
}

impl RatioReport {
    pub fn to_json(&self) -> serde_json::Value {
        let f = |r: &Ratio<u128>| *r.numer() as f64 / *r.denom() as f64;
        let exact = |r: &Ratio<u128>| format!("{}/{}", r.numer(), r.denom());
        serde_json::json!({
            "raw_bits_per_s": f(&self.raw_bits_per_s),
            "detected_bits_per_s": f(&self.detected_bits_per_s),
            "compressed_bits_per_s": f(&self.compressed_bits_per_s),
            "detected_ratio": f(&self.detected_ratio),
            "compressed_ratio": f(&self.compressed_ratio),
            "fold": f(&self.fold),
            "exact": {
                "detected_ratio": exact(&self.detected_ratio),
                "compressed_ratio": exact(&self.compressed_ratio),
                "fold": exact(&self.fold),
            },
            "overhead_bits": {
                "detected": self.overheads.detected_bits,
                "compressed": self.overheads.compressed_bits,
            },
        })
    }
}

/// Per-electrode bandwidth of the raw, detected-window and compressed streams
/// at `spike_rate` (spikes per second per electrode), exact.
pub fn compression_ratio_at_rate(
    sample_rate: u64,
    bits_per_sample: u32,
    spike_rate: Ratio<u128>,
    overheads: Overheads,
) -> Result<RatioReport, EvalError> {
    if sample_rate == 0 || bits_per_sample == 0 {
        return Err(EvalError::ZeroRate("raw sample rate"));
    }
    if spike_rate == Ratio::from_integer(0) {
        return Err(EvalError::ZeroRate("spike rate"));
    }
    let raw = Ratio::from_integer(sample_rate as u128 * bits_per_sample as u128);
    let window_bits = (WINDOW_LEN as u128) * bits_per_sample as u128 + overheads.detected_bits as u128;
    let detected = spike_rate * window_bits;
    let compressed = spike_rate * (PAYLOAD_BITS as u128 + overheads.compressed_bits as u128);
    let detected_ratio = raw / detected;
    let compressed_ratio = raw / compressed;
    Ok(RatioReport {
        raw_bits_per_s: raw,
        detected_bits_per_s: detected,
        compressed_bits_per_s: compressed,
        fold: compressed_ratio / detected_ratio,
        detected_ratio,
        compressed_ratio,
        overheads,
    })
}

/// Bandwidth accounting from recording statistics: `spike_count` spikes over
/// `channel_count` electrodes and `sample_count` samples.
pub fn compression_ratio(
    sample_rate: u64,
    bits_per_sample: u32,
    sample_count: u64,
    channel_count: u64,
    spike_count: u64,
    overheads: Overheads,
) -> Result<RatioReport, EvalError> {
    if sample_count == 0 || channel_count == 0 {
        return Err(EvalError::ZeroRate("recording length"));
    }
    let rate = Ratio::new(
        spike_count as u128 * sample_rate as u128,
        sample_count as u128 * channel_count as u128,
    );
    compression_ratio_at_rate(sample_rate, bits_per_sample, rate, overheads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub channel_count: u64,
    pub cycles_per_period: u64,
    pub max_concurrent_digitizations: u64,
    /// Channels the compressor can serve at the given spike density.
    pub compressor_capacity: u64,
    pub spike_density: String,
    pub fits: bool,
}

/// Clock-cycle budget of the shared ADC readout and the compressor.
/// `spike_density` is the fraction of samples that belong to spikes.
pub fn throughput_budget(
    channel_count: u64,
    sample_rate: u64,
    clock_hz: u64,
    spike_density: Ratio<u64>,
) -> Result<BudgetReport, EvalError> {
    if sample_rate == 0 || clock_hz == 0 || spike_density == Ratio::from_integer(0) {
        return Err(EvalError::Invalid("budget inputs must be positive".into()));
    }
    let cycles = Ratio::new(clock_hz as u128, sample_rate as u128);
    let density = Ratio::new(*spike_density.numer() as u128, *spike_density.denom() as u128);
    let capacity = (cycles / density).to_integer() as u64;
    let cycles_per_period = cycles.to_integer() as u64;
    Ok(BudgetReport {
        channel_count,
        cycles_per_period,
        max_concurrent_digitizations: cycles_per_period,
        compressor_capacity: capacity,
        spike_density: format!("{}/{}", spike_density.numer(), spike_density.denom()),
        fits: channel_count <= capacity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub correlation: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mean_correlation: f64,
    pub mean_rmse: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        // Flat windows: perfect only when identical.
        return if a == b { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}

pub fn reconstruction_quality(
    original: &[Vec<f64>],
    decompressed: &[Vec<f64>],
) -> Result<QualityReport, EvalError> {
    if original.len() != decompressed.len() {
        return Err(EvalError::LengthMismatch(original.len(), decompressed.len()));
    }
    let mut correlation = Vec::with_capacity(original.len());
    let mut rmse = Vec::with_capacity(original.len());
    for (a, b) in original.iter().zip(decompressed) {
        if a.len() != b.len() || a.is_empty() {
            return Err(EvalError::LengthMismatch(a.len(), b.len()));
        }
        correlation.push(pearson(a, b));
        let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        rmse.push(mse.sqrt());
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(QualityReport {
        mean_correlation: mean(&correlation),
        mean_rmse: mean(&rmse),
        correlation,
        rmse,
    })
}
