use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use spikeramp::adc::RampSweep;
use spikeramp::compress::{self, decompress};
use spikeramp::eval::{self, compression_ratio, compression_ratio_at_rate, linearity_suite, throughput_budget};
use spikeramp::link::{self, bits_to_bytes, bytes_to_bits, RegisterBank};
use spikeramp::num_rational::Ratio;
use spikeramp::pipeline::{self, code_matrix, simulate, truth_spikes};
use spikeramp::train::{calibrate_on_training_split, Calibration, GridPoint};
use spikeramp::{io, synth, Mode, PcaBasis, PipelineConfig, QuantizedPcaMemory, TriggerConfig};

/// Behavioral simulator of an event-driven ramp-ADC neural recorder with
/// on-chip PCA compression.
#[derive(Parser, Debug)]
#[command(name = "spikeramp", version)]
struct Cli {
    /// Worker threads for grid search and per-channel simulation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Require an explicit seed (`rng_seed` in the config or `--seed`).
    #[arg(long, global = true)]
    ci: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic recording with ground truth.
    Gen(GenArgs),
    /// Calibrate trigger thresholds and the PCA memory on the training split.
    Train(TrainArgs),
    /// Run the recorder over a recording and write the raw or compressed stream.
    Run(RunArgs),
    /// Code-density linearity test of the ramp ADC.
    Linearity(LinearityArgs),
    /// Score a stream against ground truth and report ratios and budgets.
    Eval(EvalArgs),
    /// Build a register bank and write it as a framed, Manchester-coded binary.
    Pack(PackArgs),
    /// Decode a framed binary back into a register bank.
    Unpack(UnpackArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global RNG seed, overriding `rng_seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Base name of the generated files.
    #[arg(long)]
    name: Option<String>,
    /// Cell models in the template library.
    #[arg(long)]
    cell_model_count: Option<usize>,
    /// Cells firing in the recording.
    #[arg(long)]
    active_cell_count: Option<usize>,
    /// Recording length in seconds.
    #[arg(long)]
    recording_duration: Option<f64>,
    /// Additive noise RMS in volts, referred to the electrode.
    #[arg(long)]
    noise_rms: Option<f64>,
    /// Lower edge of the signal and noise band in hertz.
    #[arg(long)]
    band_low: Option<f64>,
    /// Upper edge of the signal and noise band in hertz.
    #[arg(long)]
    band_high: Option<f64>,
    /// Mean firing rate per active cell in hertz.
    #[arg(long)]
    mean_spike_rate: Option<f64>,
    /// Relative spread of per-cell rates around the mean, in [0, 1).
    #[arg(long)]
    rate_jitter: Option<f64>,
    /// Refractory gap between spikes of one cell in seconds.
    #[arg(long)]
    refractory: Option<f64>,
    /// Trace sample rate in hertz.
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Electrodes in the square array.
    #[arg(long)]
    channel_count: Option<usize>,
    /// Smallest trough depth on the dominant electrode in volts.
    #[arg(long)]
    trough_min: Option<f64>,
    /// Largest trough depth on the dominant electrode in volts.
    #[arg(long)]
    trough_max: Option<f64>,
    /// Footprint radius of a cell in electrode pitches.
    #[arg(long)]
    spatial_spread: Option<f64>,
    /// Template length in samples.
    #[arg(long)]
    template_len: Option<usize>,
}

#[derive(Args, Debug)]
struct RecordingArgs {
    /// Directory holding the recording files.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Base name of the recording files.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    recording: RecordingArgs,
    /// Directory for basis.json, trigger.json and grid.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Raw,
    Compressed,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Raw => Mode::Raw,
            ModeArg::Compressed => Mode::Compressed,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    recording: RecordingArgs,
    /// Recording mode (defaults to the config's `mode`).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Trained basis.json; required in compressed mode.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Trigger settings (trigger.json); the config's trigger is used otherwise.
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Output stream file; run statistics go to `<out>.stats.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LinearityArgs {
    #[command(flatten)]
    common: Common,
    /// Full-scale sweep repetitions.
    #[arg(long, default_value_t = 50)]
    reps: u32,
    /// Code whose step width gets an injected error.
    #[arg(long)]
    inject_code: Option<usize>,
    /// Injected step-width error in LSB (used with --inject-code).
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    inject_lsb: f64,
    /// Directory for dnl.csv, inl.csv and linearity.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    recording: RecordingArgs,
    /// Stream written by `run`.
    #[arg(long)]
    stream: PathBuf,
    /// Mode the stream was recorded in (defaults to the config's `mode`).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Trigger settings used for the run (needed to replay raw streams).
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Trained basis.json; enables reconstruction quality for compressed streams.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Sweep repetitions for the linearity part of the report.
    #[arg(long, default_value_t = 50)]
    reps: u32,
    /// Directory for the evaluation artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PackArgs {
    #[command(flatten)]
    common: Common,
    /// Register bank JSON to pack as is, instead of building one.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Trigger settings to load into the bank.
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Trained basis.json whose coefficients and shifts go into the bank.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Recording mode register (defaults to the config's `mode`).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Link data rate in bit/s for the timing report.
    #[arg(long, default_value_t = link::DEFAULT_LINK_RATE)]
    bit_rate: f64,
    /// Output binary (chips packed MSB first).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct UnpackArgs {
    /// Binary written by `pack`.
    #[arg(long)]
    input: PathBuf,
    /// Output register bank JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    basis: PcaBasis,
    memory: QuantizedPcaMemory,
}

fn load_config(common: &Common, ci: bool) -> Result<PipelineConfig> {
    let (mut cfg, seeded) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let seeded = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .is_some_and(|v| v.get("rng_seed").is_some());
            (PipelineConfig::from_json(&text)?, seeded)
        }
        None => (PipelineConfig::default(), false),
    };
    if let Some(seed) = common.seed {
        cfg.rng_seed = seed;
    }
    if ci && !seeded && common.seed.is_none() {
        bail!(spikeramp::Error::Config("--ci requires an explicit seed".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn recording_location(cfg: &PipelineConfig, r: &RecordingArgs) -> (PathBuf, String) {
    (
        r.input_dir.clone().unwrap_or_else(|| cfg.paths.out_dir.clone()),
        r.name.clone().unwrap_or_else(|| cfg.paths.name.clone()),
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(a: GenArgs, ci: bool) -> Result<serde_json::Value> {
    let mut cfg = load_config(&a.common, ci)?;
    let s = &mut cfg.synth;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { s.$f = v; } )* };
    }
    set!(
        cell_model_count,
        active_cell_count,
        recording_duration,
        noise_rms,
        band_low,
        band_high,
        mean_spike_rate,
        rate_jitter,
        refractory,
        sample_rate,
        channel_count,
        trough_min,
        trough_max,
        spatial_spread,
        template_len
    );
    cfg.validate()?;
    let out_dir = a.out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
    let name = a.name.unwrap_or_else(|| cfg.paths.name.clone());
    let synth_cfg = cfg.seeded_synth();
    let bank = synth::generate_templates(&synth_cfg)?;
    let (rec, gt) = synth::generate_recording(&synth_cfg, &bank)?;
    io::write_recording(&out_dir, &name, &rec, &gt)?;
    io::write_json(&out_dir.join(format!("{name}.templates.json")), &bank)?;
    Ok(json!({
        "channels": rec.channel_count(),
        "samples": rec.sample_count(),
        "spikes": gt.len(),
        "dir": out_dir,
        "name": name,
    }))
}

fn cmd_train(a: TrainArgs, ci: bool) -> Result<serde_json::Value> {
    let cfg = load_config(&a.common, ci)?;
    let (dir, name) = recording_location(&cfg, &a.recording);
    let (rec, gt) = io::read_recording(&dir, &name)?;
    let setup = cfg.setup(cfg.trigger);
    let codes = code_matrix(&rec, &setup)?;
    let d = (rec.sample_rate / cfg.ramp.sample_rate as f64).round() as u64;
    let truth = truth_spikes(&gt, d);
    let split = cfg.split_period(codes.periods());
    let cal: Calibration = calibrate_on_training_split(
        &codes,
        &truth,
        &cfg.search,
        &setup.pixel_enable,
        cfg.match_samples(),
        split,
    )?;
    let out_dir = a.out_dir.unwrap_or(dir);
    fs::create_dir_all(&out_dir)?;
    io::write_json(
        &out_dir.join("basis.json"),
        &BasisFile {
            basis: cal.basis.clone(),
            memory: cal.memory.clone(),
        },
    )?;
    io::write_json(&out_dir.join("trigger.json"), &cal.trigger)?;
    write_text(&out_dir.join("grid.csv"), &grid_csv(&cal.evaluated))?;
    Ok(json!({
        "trigger": cal.trigger,
        "training_accuracy": cal.accuracy,
        "digitized_samples": cal.digitized_samples,
        "mac_shift": cal.memory.mac_shift,
        "out_shift": cal.memory.out_shift,
        "grid_points": cal.evaluated.len(),
    }))
}

fn grid_csv(points: &[GridPoint]) -> String {
    let mut s = String::from("threshold1,threshold2,pretrigger_n,posttrigger_m,accuracy,digitized_samples\n");
    for p in points {
        let t = &p.trigger;
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.threshold1, t.threshold2, t.pretrigger_n, t.posttrigger_m, p.accuracy, p.digitized_samples
        ));
    }
    s
}

fn load_trigger(cfg: &PipelineConfig, path: &Option<PathBuf>) -> Result<TriggerConfig> {
    let t: TriggerConfig = match path {
        Some(p) => io::read_json(p)?,
        None => cfg.trigger,
    };
    t.validate()?;
    Ok(t)
}

fn load_basis(path: &Path) -> Result<BasisFile> {
    let b: BasisFile = io::read_json(path)?;
    b.memory.validate()?;
    Ok(b)
}

fn cmd_run(a: RunArgs, ci: bool) -> Result<serde_json::Value> {
    let cfg = load_config(&a.common, ci)?;
    let mode: Mode = a.mode.map_or(cfg.mode, Into::into);
    let (dir, name) = recording_location(&cfg, &a.recording);
    let (rec, _) = io::read_recording(&dir, &name)?;
    let trigger = load_trigger(&cfg, &a.trigger)?;
    let basis = match (mode, &a.basis) {
        (Mode::Compressed, None) => bail!(spikeramp::Error::Config("compressed mode needs --basis".into())),
        (_, Some(p)) => Some(load_basis(p)?),
        (Mode::Raw, None) => None,
    };
    let out = simulate(&rec, &cfg.setup(trigger), mode, basis.as_ref().map(|b| &b.memory))?;
    let bytes = match mode {
        Mode::Raw => {
            let events: Vec<_> = out.events.iter().map(|(e, _)| *e).collect();
            io::encode_raw_stream(&events, out.stats.periods)?
        }
        Mode::Compressed => io::encode_compressed_stream(&out.spikes)?,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let stats_path = PathBuf::from(format!("{}.stats.json", a.out.display()));
    io::write_json(&stats_path, &out.stats)?;
    Ok(json!({ "mode": mode, "bytes": bytes.len(), "stats": out.stats }))
}

fn linearity_artifacts(cfg: &PipelineConfig, reps: u32, out_dir: &Path) -> Result<eval::LinearityReport> {
    let report = linearity_suite(&cfg.ramp, &RampSweep::default(), reps)?;
    fs::create_dir_all(out_dir)?;
    io::write_code_csv(&out_dir.join("dnl.csv"), "dnl", report.dnl.first_code, &report.dnl.values)?;
    io::write_code_csv(&out_dir.join("inl.csv"), "inl", report.dnl.first_code, &report.inl)?;
    Ok(report)
}

fn cmd_linearity(a: LinearityArgs, ci: bool) -> Result<serde_json::Value> {
    let mut cfg = load_config(&a.common, ci)?;
    if let Some(code) = a.inject_code {
        let levels = cfg.ramp.levels();
        if code >= levels {
            bail!(spikeramp::Error::Config(format!("inject code {code} beyond {levels} levels")));
        }
        let mut profile = cfg.ramp.dnl_profile.clone().unwrap_or_else(|| vec![0.0; levels]);
        profile[code] += a.inject_lsb;
        cfg.ramp.dnl_profile = Some(profile);
        cfg.ramp.validate()?;
    }
    let out_dir = a.out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
    let report = linearity_artifacts(&cfg, a.reps, &out_dir)?;
    let summary = json!({
        "repetitions": report.repetitions,
        "max_abs_dnl": report.max_abs_dnl,
        "max_abs_inl": report.max_abs_inl,
        "injected": a.inject_code.map(|c| json!({ "code": c, "lsb": a.inject_lsb, "recovered": report.dnl.at(c) })),
    });
    io::write_json(&out_dir.join("linearity.json"), &summary)?;
    Ok(summary)
}

fn cmd_eval(a: EvalArgs, ci: bool) -> Result<serde_json::Value> {
    let cfg = load_config(&a.common, ci)?;
    let mode: Mode = a.mode.map_or(cfg.mode, Into::into);
    let (dir, name) = recording_location(&cfg, &a.recording);
    let (rec, gt) = io::read_recording(&dir, &name)?;
    let trigger = load_trigger(&cfg, &a.trigger)?;
    let bytes = fs::read(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let channels = rec.channel_count();
    let d = (rec.sample_rate / cfg.ramp.sample_rate as f64).round() as u64;
    let truth = truth_spikes(&gt, d);
    let periods = (rec.sample_count() as u64).div_ceil(d);
    let split = cfg.split_period(periods as usize);
    let out_dir = a.out_dir.unwrap_or_else(|| dir.clone());
    fs::create_dir_all(&out_dir)?;

    let (detections, events, quality) = match mode {
        Mode::Raw => {
            let (events, _) = io::decode_raw_stream(&bytes)?;
            let replay = pipeline::replay_raw(&events, &trigger, channels)?;
            let windows = pipeline::windows_from_events(&replay, channels, trigger.window_len());
            (pipeline::raw_detections(&windows), windows.len() as u64, None)
        }
        Mode::Compressed => {
            let spikes = io::decode_compressed_stream(&bytes)?;
            let quality = match &a.basis {
                Some(p) => Some(reconstruction(&load_basis(p)?, &rec, &cfg, &trigger, &spikes)?),
                None => None,
            };
            (pipeline::compressed_detections(&spikes), spikes.len() as u64, quality)
        }
    };
    let report = eval::sort_and_score(&detections, &truth, split, cfg.match_samples())?;
    write_text(&out_dir.join("confusion.csv"), &report.confusion.to_csv())?;
    let accuracy = json!({
        "mode": mode,
        "tp": report.tp,
        "fp": report.fp,
        "fn": report.fn_,
        "accuracy": report.accuracy,
        "events": events,
    });
    io::write_json(&out_dir.join("accuracy.json"), &accuracy)?;

    let bits = cfg.ramp.resolution_bits;
    let measured = compression_ratio(
        cfg.ramp.sample_rate,
        bits,
        periods,
        channels as u64,
        events,
        cfg.overheads,
    )
    .map(|r| r.to_json())
    .unwrap_or(serde_json::Value::Null);
    // Rates are specified in decimal; micro-hertz resolution keeps them exact.
    let nominal_rate = Ratio::new((cfg.synth.mean_spike_rate * 1e6).round() as u128, 1_000_000);
    let nominal = compression_ratio_at_rate(cfg.ramp.sample_rate, bits, nominal_rate, cfg.overheads)
        .map(|r| r.to_json())
        .unwrap_or(serde_json::Value::Null);
    io::write_json(
        &out_dir.join("ratios.json"),
        &json!({ "overheads": cfg.overheads, "measured": measured, "nominal_rate": nominal }),
    )?;

    let budgets: Vec<_> = [Ratio::new(1, 40), Ratio::from_integer(1)]
        .into_iter()
        .map(|density| throughput_budget(channels as u64, cfg.ramp.sample_rate, cfg.ramp.clock_hz, density))
        .collect::<Result<_, _>>()?;
    io::write_json(&out_dir.join("budget.json"), &budgets)?;

    let lin = linearity_artifacts(&cfg, a.reps, &out_dir)?;
    if let Some(q) = &quality {
        io::write_json(&out_dir.join("quality.json"), q)?;
    }
    Ok(json!({
        "accuracy": accuracy,
        "max_abs_dnl": lin.max_abs_dnl,
        "max_abs_inl": lin.max_abs_inl,
        "quality": quality.map(|q| json!({ "mean_correlation": q.mean_correlation, "mean_rmse": q.mean_rmse })),
    }))
}

/// Decompressed records against the raw windows the recorder captured.
fn reconstruction(
    basis: &BasisFile,
    rec: &spikeramp::Recording,
    cfg: &PipelineConfig,
    trigger: &TriggerConfig,
    spikes: &[compress::CompressedSpike],
) -> Result<eval::QualityReport> {
    let codes = code_matrix(rec, &cfg.setup(*trigger))?;
    let windows = pipeline::extract_windows(&codes, trigger, &cfg.pixel_enable());
    let by_key: std::collections::HashMap<(u16, u64), &spikeramp::SpikeWindow> =
        windows.iter().map(|w| ((w.channel, w.start_period), w)).collect();
    let mut original = Vec::new();
    let mut restored = Vec::new();
    for s in spikes {
        if let Some(w) = by_key.get(&(s.channel, s.period_index)) {
            let n = w.codes.len();
            original.push(w.centered_f64()[..n].to_vec());
            restored.push(decompress(s, &basis.memory)[..n].to_vec());
        }
    }
    Ok(eval::reconstruction_quality(&original, &restored)?)
}

fn cmd_pack(a: PackArgs, ci: bool) -> Result<serde_json::Value> {
    let bank = match &a.bank {
        Some(p) => io::read_json::<RegisterBank>(p)?,
        None => {
            let cfg = load_config(&a.common, ci)?;
            let mut bank = RegisterBank {
                mode: a.mode.map_or(cfg.mode, Into::into),
                sampling_period_divider: u16::try_from(cfg.ramp.cycles_per_period())
                    .context("sampling period divider exceeds 16 bits")?,
                ..Default::default()
            };
            let mask = cfg.pixel_enable();
            bank.pixel_enable = mask.iter().enumerate().fold(0, |m, (k, &e)| m | ((e as u64) << k));
            bank.set_trigger(&load_trigger(&cfg, &a.trigger)?);
            if let Some(p) = &a.basis {
                bank.set_memory(&load_basis(p)?.memory);
            }
            bank
        }
    };
    let chips = bank.serialize();
    let bytes = bits_to_bytes(&chips);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let writes = bank.to_writes();
    Ok(json!({
        "bytes": bytes.len(),
        "chips": chips.len(),
        "transfer": link::transfer_timing(writes.len() as u64 * 8, a.bit_rate),
        "coefficient_load": link::transfer_timing(compress::COEFF_MEMORY_BITS as u64, a.bit_rate),
    }))
}

fn cmd_unpack(a: UnpackArgs) -> Result<serde_json::Value> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let bank = RegisterBank::deserialize(&bytes_to_bits(&bytes))?;
    io::write_json(&a.out, &bank)?;
    Ok(json!({ "bank": bank }))
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use spikeramp::Error as E;
    if let Some(e) = e.downcast_ref::<E>() {
        return match e {
            E::Synth(_) => "synth",
            E::FrontEnd(_) => "frontend",
            E::Adc(_) => "adc",
            E::Compress(_) => "compress",
            E::Train(_) => "train",
            E::Link(_) => "link",
            E::Eval(_) => "eval",
            E::Config(_) => "config",
            E::Format(_) | E::Json(_) => "format",
            E::Io(_) => "io",
        };
    }
    for c in e.chain() {
        use spikeramp::{adc::AdcError, compress::CompressError, eval::EvalError, link::LinkError, train::TrainError};
        if c.is::<EvalError>() {
            return "eval";
        }
        if c.is::<TrainError>() {
            return "train";
        }
        if c.is::<LinkError>() {
            return "link";
        }
        if c.is::<AdcError>() {
            return "adc";
        }
        if c.is::<CompressError>() {
            return "compress";
        }
        if c.is::<serde_json::Error>() {
            return "format";
        }
    }
    if e.chain().any(|c| c.is::<std::io::Error>()) {
        return "io";
    }
    "error"
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a, cli.ci),
        Command::Train(a) => cmd_train(a, cli.ci),
        Command::Run(a) => cmd_run(a, cli.ci),
        Command::Linearity(a) => cmd_linearity(a, cli.ci),
        Command::Eval(a) => cmd_eval(a, cli.ci),
        Command::Pack(a) => cmd_pack(a, cli.ci),
        Command::Unpack(a) => cmd_unpack(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = json!({ "error": { "kind": "usage", "message": e.render().to_string() } });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            // A closed stdout (e.g. piped into `head`) is not a failure of the command.
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let record = json!({ "error": { "kind": error_kind(&e), "message": e.to_string(), "chain": chain } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
