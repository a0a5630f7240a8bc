//! Command implementations behind the `specterra` binary: corpus prep,
//! training, conversion, the gradient-check harness, and the STFT
//! round-trip check. Config precedence is built-in defaults, then the
//! config file, then CLI flags; the effective merged config is echoed at
//! the start of every run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use specterra_core::audio::{read_wav, resample, AudioBuffer};
use specterra_core::dsp::{
    deemphasis, istft, preemphasis, read_cache, snr_db, stft, write_cache, StftConfig, Window,
};
use specterra_core::gradcheck;
use specterra_core::infer::{convert_file, ConversionResult, ConvertOptions};
use specterra_core::model::ModelConfig;
use specterra_core::seq::{ingest_corpus_spectra, pair_from_spectra, SpectraPair, UtterancePair};
use specterra_core::train::{train_loop, LossMode, TrainConfig, TrainSink};
use specterra_core::vad::VadConfig;

/// Merged view of every tunable: DSP, VAD, model, optimizer, run seed.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub vad: VadConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub target_rate: u32,
    /// EOS stopping distance override; default derives from the checkpoint.
    pub eos_tau: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            vad: VadConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            target_rate: 16_000,
            eos_tau: None,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with an INI-style `key = value` file.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            for (line_no, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with(';') || line.starts_with('[') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected key = value", p.display(), line_no + 1))?;
                cfg.apply_kv(key.trim(), value.trim())
                    .with_context(|| format!("{}:{}", p.display(), line_no + 1))?;
            }
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment (file entries and flag
    /// overrides go through the same path).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<T> {
            value
                .parse()
                .map_err(|_| anyhow::anyhow!("invalid value {value:?} for {key}"))
        }
        match key {
            "nfft" => self.stft.nfft = num(key, value)?,
            "hop" => self.stft.hop = num(key, value)?,
            "window" => self.stft.window = Window::parse(value)?,
            "preemphasis" => self.stft.preemphasis_coeff = num(key, value)?,
            "vad_frame_ms" => self.vad.frame_ms = num(key, value)?,
            "vad_hop_ms" => self.vad.hop_ms = num(key, value)?,
            "vad_threshold_db" => self.vad.threshold_db = num(key, value)?,
            "vad_hangover_frames" => self.vad.hangover_frames = num(key, value)?,
            "d_model" => self.model.d_model = num(key, value)?,
            "n_layers_enc" => self.model.n_layers_enc = num(key, value)?,
            "n_layers_dec" => self.model.n_layers_dec = num(key, value)?,
            "n_heads" => self.model.n_heads = num(key, value)?,
            "d_ff" => self.model.d_ff = num(key, value)?,
            "dropout" => self.model.dropout = num(key, value)?,
            "max_decode_len" => self.model.max_decode_len = num(key, value)?,
            "lr0" => self.train.lr0 = num(key, value)?,
            "decay_step" => self.train.decay_step = num(key, value)?,
            "decay_rate" => self.train.decay_rate = num(key, value)?,
            "beta1" => self.train.beta1 = num(key, value)?,
            "beta2" => self.train.beta2 = num(key, value)?,
            "epsilon" => self.train.epsilon = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "max_steps" => self.train.max_steps = num(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "loss_normalize" => {
                self.train.loss_mode = if num::<bool>(key, value)? {
                    LossMode::Normalized
                } else {
                    LossMode::RawSum
                }
            }
            "lr_staircase" => self.train.staircase = num(key, value)?,
            "target_rate" => self.target_rate = num(key, value)?,
            "eos_tau" => self.eos_tau = Some(num(key, value)?),
            other => bail!("unknown config key {other}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.stft.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_model != self.stft.mag_bins() {
            bail!(
                "d_model {} must equal nfft/2 = {} (the magnitude width is the model width)",
                self.model.d_model,
                self.stft.mag_bins()
            );
        }
        Ok(())
    }

    /// The effective merged config, one sorted `key = value` per line.
    pub fn echo(&self) -> String {
        let mut lines = vec![
            format!("batch_size = {}", self.train.batch_size),
            format!("beta1 = {}", self.train.beta1),
            format!("beta2 = {}", self.train.beta2),
            format!("checkpoint_every = {}", self.train.checkpoint_every),
            format!("d_ff = {}", self.model.d_ff),
            format!("d_model = {}", self.model.d_model),
            format!("decay_rate = {}", self.train.decay_rate),
            format!("decay_step = {}", self.train.decay_step),
            format!("dropout = {}", self.model.dropout),
            format!(
                "eos_tau = {}",
                self.eos_tau.map_or("auto".to_string(), |v| v.to_string())
            ),
            format!("epsilon = {}", self.train.epsilon),
            format!("hop = {}", self.stft.hop),
            format!(
                "loss_normalize = {}",
                matches!(self.train.loss_mode, LossMode::Normalized)
            ),
            format!("lr0 = {}", self.train.lr0),
            format!("lr_staircase = {}", self.train.staircase),
            format!("max_decode_len = {}", self.model.max_decode_len),
            format!("max_steps = {}", self.train.max_steps),
            format!("n_heads = {}", self.model.n_heads),
            format!("n_layers_dec = {}", self.model.n_layers_dec),
            format!("n_layers_enc = {}", self.model.n_layers_enc),
            format!("nfft = {}", self.stft.nfft),
            format!("preemphasis = {}", self.stft.preemphasis_coeff),
            format!("seed = {}", self.train.seed),
            format!("target_rate = {}", self.target_rate),
            format!("vad_frame_ms = {}", self.vad.frame_ms),
            format!("vad_hangover_frames = {}", self.vad.hangover_frames),
            format!("vad_hop_ms = {}", self.vad.hop_ms),
            format!("vad_threshold_db = {}", self.vad.threshold_db),
            format!("window = {}", self.stft.window.name()),
        ];
        lines.sort();
        lines.join("\n")
    }
}

fn echo_config(cfg: &RunConfig) {
    println!("# effective config");
    for line in cfg.echo().lines() {
        println!("{line}");
    }
}

/// What `prep` produced.
#[derive(Debug, Clone)]
pub struct PrepSummary {
    pub processed: usize,
    pub skipped: usize,
    pub max_src_frames: usize,
    pub max_tgt_frames: usize,
}

const INDEX_FILE: &str = "index.tsv";
const REPORT_FILE: &str = "prep_report.txt";

/// Ingests the manifest (paths resolved against the manifest's directory)
/// and writes one spectrum cache per utterance plus an index and a
/// human-readable report. Fails if no pair survives.
pub fn cmd_prep(cfg: &RunConfig, manifest: &Path, cache_dir: &Path) -> anyhow::Result<PrepSummary> {
    cfg.validate()?;
    echo_config(cfg);
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    let (spectra, report): (Vec<SpectraPair<f32>>, _) =
        ingest_corpus_spectra(root, manifest, &cfg.stft, &cfg.vad, cfg.target_rate)?;

    fs::create_dir_all(cache_dir)
        .with_context(|| format!("creating cache dir {}", cache_dir.display()))?;
    let mut index = String::new();
    for (i, sp) in spectra.iter().enumerate() {
        let src_name = format!("pair_{i:04}_src.vfsp");
        let tgt_name = format!("pair_{i:04}_tgt.vfsp");
        write_cache(&sp.source, &cache_dir.join(&src_name))?;
        write_cache(&sp.target, &cache_dir.join(&tgt_name))?;
        index.push_str(&format!(
            "{i}\t{}\t{src_name}\t{tgt_name}\t{}\t{}\n",
            sp.text_label, sp.source_id, sp.target_id
        ));
    }
    fs::write(cache_dir.join(INDEX_FILE), index)
        .with_context(|| "writing cache index".to_string())?;

    let mut report_text = format!(
        "pairs processed: {}\npairs skipped: {}\nmax source frames: {}\nmax target frames: {}\n",
        report.processed,
        report.skipped.len(),
        report.max_src_frames,
        report.max_tgt_frames
    );
    for s in &report.skipped {
        report_text.push_str(&format!("skipped line {}: {}\n", s.line, s.reason));
    }
    fs::write(cache_dir.join(REPORT_FILE), &report_text)
        .with_context(|| "writing prep report".to_string())?;
    print!("{report_text}");

    if spectra.is_empty() {
        bail!("no usable pairs in {}", manifest.display());
    }
    Ok(PrepSummary {
        processed: report.processed,
        skipped: report.skipped.len(),
        max_src_frames: report.max_src_frames,
        max_tgt_frames: report.max_tgt_frames,
    })
}

/// Loads the pairs `prep` cached.
pub fn load_cached_pairs(cfg: &RunConfig, cache_dir: &Path) -> anyhow::Result<Vec<UtterancePair<f32>>> {
    let index_path = cache_dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)
        .with_context(|| format!("reading cache index {}", index_path.display()))?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            bail!("malformed cache index line: {line:?}");
        }
        let sp = SpectraPair {
            text_label: fields[1].to_string(),
            source_id: fields[4].to_string(),
            target_id: fields[5].to_string(),
            source: read_cache(&cache_dir.join(fields[2]), &cfg.stft)?,
            target: read_cache(&cache_dir.join(fields[3]), &cfg.stft)?,
        };
        pairs.push(pair_from_spectra(&sp));
    }
    Ok(pairs)
}

/// What `train` produced.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains on a prepped cache directory; checkpoints and the metrics CSV go
/// to `checkpoint_dir` (metrics path overridable).
pub fn cmd_train(
    cfg: &RunConfig,
    cache_dir: &Path,
    checkpoint_dir: &Path,
    metrics_out: Option<&Path>,
) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    echo_config(cfg);
    let pairs = load_cached_pairs(cfg, cache_dir)?;
    if pairs.is_empty() {
        bail!("cache {} holds no pairs", cache_dir.display());
    }
    fs::create_dir_all(checkpoint_dir)
        .with_context(|| format!("creating checkpoint dir {}", checkpoint_dir.display()))?;
    let metrics_path = metrics_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_dir.join("metrics.csv"));
    let sink = TrainSink {
        metrics_path: Some(metrics_path.clone()),
        checkpoint_dir: Some(checkpoint_dir.to_path_buf()),
    };
    let (state, metrics) = train_loop(&pairs, &cfg.model, &cfg.train, &sink)?;
    let final_loss = metrics.last().map(|m| m.loss_final);
    println!(
        "trained {} steps on {} pairs; final loss {}",
        state.step,
        pairs.len(),
        final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
    );
    Ok(TrainSummary {
        steps: state.step,
        final_loss,
        checkpoint: checkpoint_dir.join("ckpt_final.vfvc"),
        metrics: metrics_path,
    })
}

/// Converts one WAV through a checkpoint; the conversion log is JSON-lines
/// next to the output file.
pub fn cmd_convert(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
) -> anyhow::Result<ConversionResult<f32>> {
    cfg.validate()?;
    echo_config(cfg);
    let log_path = output
        .parent()
        .map(|d| d.join("conversions.jsonl"))
        .unwrap_or_else(|| PathBuf::from("conversions.jsonl"));
    let opts = ConvertOptions {
        stft: cfg.stft.clone(),
        vad: cfg.vad.clone(),
        target_rate: cfg.target_rate,
        eos_tau: cfg.eos_tau,
        max_len: None,
        log_path: Some(log_path),
    };
    let result: ConversionResult<f32> = convert_file(input, output, checkpoint, &opts)?;
    println!(
        "converted {} -> {}: {} frames predicted, {} used, stop={}",
        input.display(),
        output.display(),
        result.predicted_mag.shape()[0],
        result.frames_used,
        result.stop_reason.as_str()
    );
    Ok(result)
}

/// Runs the finite-difference harness; prints one line per op and fails
/// if any check fails.
pub fn cmd_gradcheck(seed: u64) -> anyhow::Result<gradcheck::GradCheckReport> {
    let report = gradcheck::full_report(seed);
    for o in &report.outcomes {
        println!(
            "{:<28} max_rel_err={:<12.3e} tol={:.0e}  {}",
            o.name,
            o.max_rel_err,
            o.tolerance,
            if o.passed { "PASS" } else { "FAIL" }
        );
    }
    if !report.passed() {
        bail!("gradient check failed");
    }
    println!("all {} checks passed", report.outcomes.len());
    Ok(report)
}

/// STFT/ISTFT round-trip report for one file.
#[derive(Debug, Clone)]
pub struct RoundtripReport {
    pub snr_db: f64,
    pub frames: usize,
    pub samples: usize,
    pub passed: bool,
}

/// Analysis/synthesis round trip: pre-emphasis → STFT → inverse STFT →
/// de-emphasis, scored as interior SNR against the resampled input.
/// Silence reconstructs exactly, which counts as a pass (infinite SNR).
pub fn cmd_roundtrip(cfg: &RunConfig, input: &Path) -> anyhow::Result<RoundtripReport> {
    cfg.stft.validate()?;
    echo_config(cfg);
    let wav: AudioBuffer<f32> = read_wav(input)?;
    let x = resample(&wav, cfg.target_rate)?;
    let emphasized = preemphasis(&x, cfg.stft.preemphasis_coeff);
    let spec = stft(&emphasized, &cfg.stft)?;
    let resynth = istft(&spec, cfg.target_rate)?;
    let y = deemphasis(&resynth, cfg.stft.preemphasis_coeff);
    let snr = snr_db(x.samples(), y.samples(), cfg.stft.nfft / 2);
    let report = RoundtripReport {
        snr_db: snr,
        frames: spec.frames,
        samples: x.len(),
        passed: snr >= 40.0,
    };
    println!(
        "roundtrip {}: {} samples, {} frames, interior snr {:.1} dB -> {}",
        input.display(),
        report.samples,
        report.frames,
        report.snr_db,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if !report.passed {
        bail!("round-trip SNR {:.1} dB below 40 dB", report.snr_db);
    }
    Ok(report)
}
