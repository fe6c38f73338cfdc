use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use bandsplit::dsp::wav::{read_wav, write_wav, WavEncoding};
use bandsplit::dsp::{HIGHBAND_BINS, WIDEBAND_BINS};
use bandsplit::enhance::{AidMode, Condition, ConditionKind, Enhancer};
use bandsplit::loss::IamLossParams;
use bandsplit::metrics::{band_limited_eval, fsnr, EvalBand, MetricReport};
use bandsplit::nn::{load_checkpoint, save_checkpoint};
use bandsplit::par::Exec;
use bandsplit::synth::toy::{write_toy_corpus, NoiseKind, ToyCorpusConfig};
use bandsplit::synth::{synthesize_manifest, Manifest};
use bandsplit::train::{Architecture, TrainConfig, TrainTarget, Trainer, Widths};
use bandsplit::StftConfig;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Toy-corpus options of `synth`.
#[derive(Debug, Clone)]
pub struct ToyArgs {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seconds: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    pub noise: NoiseKind,
}

/// Synthesizes every record of `manifest` (or of a freshly generated toy
/// corpus under `out/sources`) into `out`.
pub fn synth(manifest: Option<&Path>, toy: Option<&ToyArgs>, out: &Path, seed: u64, exec: Exec) -> CliResult<()> {
    let (manifest, salt) = match (manifest, toy) {
        (Some(p), None) => (Manifest::load(p).map_err(config_if_missing(p))?, seed),
        (None, Some(t)) => {
            let cfg = ToyCorpusConfig {
                train_files: t.train,
                val_files: t.val,
                test_files: t.test,
                seconds: t.seconds,
                snr_range: (t.snr_min, t.snr_max),
                noise: t.noise,
                seed,
                ..Default::default()
            };
            let src = write_toy_corpus(out.join("sources"), &cfg)?;
            // the corpus seed already drives every record seed
            (Manifest::load(&src)?, 0)
        }
        _ => return Err(CliError::Config("give exactly one of --manifest or --toy-train".into())),
    };
    let path = synthesize_manifest(&manifest, out, salt, exec)?;
    println!("records\t{}", manifest.records.len());
    println!("manifest\t{}", path.display());
    Ok(())
}

fn config_if_missing(path: &Path) -> impl Fn(bandsplit::Error) -> CliError + '_ {
    move |e| match e {
        bandsplit::Error::Io { .. } => CliError::Config(format!("cannot read manifest {}: {e}", path.display())),
        other => other.into(),
    }
}

/// Everything `train` reads from its config file.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub cfg: TrainConfig,
    pub manifest: PathBuf,
    pub dnn16: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainRun {
    pub fn from_config(mut c: RunConfig) -> CliResult<Self> {
        let d = TrainConfig::default();
        let target: TrainTarget = c.take_or("target", d.target)?;
        let stft = StftConfig {
            fft_size: c.take_or("stft.fft_size", StftConfig::fullband().fft_size)?,
            hop: c.take_or("stft.hop", StftConfig::fullband().hop)?,
            sample_rate: c.take_or("stft.sample_rate", StftConfig::fullband().sample_rate)?,
        };
        if stft != StftConfig::fullband() {
            return Err(CliError::Config(format!(
                "networks are defined on the 1536/480 grid at 48 kHz, got {}/{} at {} Hz",
                stft.fft_size, stft.hop, stft.sample_rate
            )));
        }
        let cfg = TrainConfig {
            target,
            architecture: c.take_or::<Architecture>("architecture", d.architecture)?,
            widths: c.take_or::<Widths>("widths", d.widths)?,
            lr_init: c.take_or("lr_init", d.lr_init)?,
            lr_decay_factor: c.take_or("lr_decay_factor", d.lr_decay_factor)?,
            patience: c.take_or("patience", d.patience)?,
            min_lr: c.take_or("min_lr", d.min_lr)?,
            max_epochs: c.take_or("max_epochs", d.max_epochs)?,
            batch_size: c.take_or("batch_size", d.batch_size)?,
            segment_seconds: c.take_or("segment_seconds", d.segment_seconds)?,
            seed: c.take_or("seed", d.seed)?,
            loss: IamLossParams {
                gamma: c.take_or("loss.gamma", d.loss.gamma)?,
                a: c.take_or("loss.a", d.loss.a)?,
                b: c.take_or("loss.b", d.loss.b)?,
            },
        };
        let manifest = c.require_path("manifest")?;
        let dnn16 = c.take_path("dnn16");
        let checkpoint = c.require_path("checkpoint")?;
        let log = c.take_path("log").unwrap_or_else(|| checkpoint.with_extension("log.tsv"));
        c.finish()?;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if target.needs_wideband_net() && dnn16.is_none() {
            return Err(bandsplit::Error::Prerequisite(format!("{target} needs `dnn16`, a trained wideband checkpoint")).into());
        }
        Ok(TrainRun { cfg, manifest, dnn16, checkpoint, log })
    }
}

pub fn train(run: &TrainRun, exec: Exec) -> CliResult<()> {
    let dnn16 = match &run.dnn16 {
        Some(p) if !run.cfg.target.needs_wideband_net() => {
            return Err(CliError::Config(format!("`dnn16` = {} given for one-step target {}", p.display(), run.cfg.target)))
        }
        Some(p) if !p.exists() => {
            return Err(bandsplit::Error::Prerequisite(format!(
                "wideband checkpoint {} does not exist; train target `wideband` first",
                p.display()
            ))
            .into())
        }
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let manifest = Manifest::load(&run.manifest).map_err(config_if_missing(&run.manifest))?;
    if manifest.records.is_empty() {
        return Err(CliError::Config(format!("manifest {} has no records", run.manifest.display())));
    }
    let mut trainer = Trainer::new(run.cfg.clone(), &manifest, dnn16.as_ref(), exec)?;
    eprintln!("{}", bandsplit::train::TRAIN_LOG_HEADER);
    while !trainer.finished() {
        let r = trainer.run_epoch()?;
        eprintln!("{}\t{:.6}\t{:.6}\t{}\t{:.1}", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds);
    }
    let (net, log) = trainer.into_parts();
    for p in [&run.checkpoint, &run.log] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| bandsplit::Error::Io { path: dir.to_path_buf(), source: e })?;
        }
    }
    save_checkpoint(&net, &run.checkpoint)?;
    log.save(&run.log)?;
    println!("target\t{}", run.cfg.target);
    println!("epochs\t{}", log.epochs.len());
    println!("final_lr\t{}", log.final_lr().unwrap_or(run.cfg.lr_init));
    println!("output_dim\t{}", net.output_dim());
    println!("checkpoint\t{}", run.checkpoint.display());
    println!("log\t{}", run.log.display());
    Ok(())
}

/// Enhances one file, or every `.wav` of a directory into `output`.
pub fn enhance(condition: ConditionKind, checkpoints: &[PathBuf], aid: Option<AidMode>, input: &Path, output: &Path, exec: Exec) -> CliResult<()> {
    let kind = match (condition, aid) {
        (ConditionKind::TwoStep(_), Some(a)) => ConditionKind::TwoStep(a),
        (k, Some(_)) => return Err(CliError::Config(format!("--aid applies to two-step conditions, not {k}"))),
        (k, None) => k,
    };
    for p in checkpoints {
        if !p.exists() {
            return Err(CliError::Checkpoint(format!("{} does not exist", p.display())));
        }
    }
    let condition = Condition::new(kind, checkpoints.to_vec()).map_err(|e| CliError::Config(e.to_string()))?;
    let enhancer = Enhancer::load(&condition).map_err(|e| match e {
        bandsplit::Error::Io { .. } | bandsplit::Error::Format(_) => CliError::Checkpoint(e.to_string()),
        other => other.into(),
    })?;
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        std::fs::create_dir_all(output).map_err(|e| bandsplit::Error::Io { path: output.to_path_buf(), source: e })?;
        wav_files(input)?.into_iter().map(|(name, p)| (p, output.join(name))).collect()
    } else {
        vec![(input.to_path_buf(), output.to_path_buf())]
    };
    exec.try_map(&jobs, |(src, dst)| -> CliResult<()> {
        let audio = read_wav(src)?;
        let out = enhancer.enhance(&audio)?;
        write_wav(dst, &out, WavEncoding::Float32)?;
        Ok(())
    })?;
    println!("condition\t{kind}");
    println!("files\t{}", jobs.len());
    Ok(())
}

/// `.wav` files of a directory keyed by file name.
pub fn wav_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| bandsplit::Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| bandsplit::Error::Io { path: dir.to_path_buf(), source: e })?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            files.insert(name, path);
        }
    }
    Ok(files)
}

/// Files present in both directories; any unpaired name is an error.
pub fn paired(a: &Path, b: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let (fa, fb) = (wav_files(a)?, wav_files(b)?);
    let only_a: Vec<&String> = fa.keys().filter(|k| !fb.contains_key(*k)).collect();
    let only_b: Vec<&String> = fb.keys().filter(|k| !fa.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(CliError::Format(format!(
            "unpaired files: only in {}: {only_a:?}; only in {}: {only_b:?}",
            a.display(),
            b.display()
        )));
    }
    if fa.is_empty() {
        return Err(CliError::Format(format!("no .wav files in {}", a.display())));
    }
    Ok(fa.into_iter().map(|(k, p)| { let q = fb[&k].clone(); (k, p, q) }).collect())
}

pub const EVAL_HEADER: &str = "file\twideband_sisnr\twideband_sdr\thighband_sisnr\thighband_sdr\tfullband_sisnr\tfullband_sdr";

fn eval_row(name: &str, r: &MetricReport) -> String {
    let mut s = name.to_string();
    for b in EvalBand::ALL {
        let sc = r.band(b);
        s.push_str(&format!("\t{:.4}\t{:.4}", sc.si_snr, sc.sdr));
    }
    s
}

/// Per-file band scores plus their mean, as TSV with one row per file.
pub fn evaluate(reference: &Path, estimate: &Path, output: Option<&Path>, exec: Exec) -> CliResult<()> {
    let pairs = paired(reference, estimate)?;
    let reports = exec.try_map(&pairs, |(name, r, e)| -> CliResult<MetricReport> {
        let (r, e) = (read_wav(r)?, read_wav(e)?);
        if r.len() != e.len() {
            return Err(CliError::Format(format!("{name}: reference has {} samples, estimate {}", r.len(), e.len())));
        }
        Ok(band_limited_eval(&r, &e)?)
    })?;
    let mut text = format!("{EVAL_HEADER}\n");
    for ((name, _, _), r) in pairs.iter().zip(&reports) {
        text.push_str(&eval_row(name, r));
        text.push('\n');
    }
    text.push_str(&eval_row("mean", &MetricReport::mean(&reports)?));
    text.push('\n');
    emit(&text, output)
}

pub const FSNR_HEADER: &str = "bin\tfreq_hz\tmean_db\tci_lower_db\tci_upper_db";

/// Frequency-dependent SNR over paired clean/noise files.
pub fn fsnr_cmd(clean: &Path, noise: &Path, output: Option<&Path>, exec: Exec) -> CliResult<()> {
    let pairs = paired(clean, noise)?;
    let load = |i: usize| -> CliResult<Vec<bandsplit::AudioBuffer>> {
        pairs.iter().map(|p| Ok(read_wav(if i == 0 { &p.1 } else { &p.2 })?)).collect()
    };
    let (c, n) = (load(0)?, load(1)?);
    let report = fsnr(&c, &n, &StftConfig::fullband(), exec)?;
    let mut text = format!("{FSNR_HEADER}\n");
    for k in 0..report.mean.len() {
        text.push_str(&format!(
            "{k}\t{:.2}\t{:.4}\t{:.4}\t{:.4}\n",
            k as f64 * report.bin_hz,
            report.mean[k],
            report.lower[k],
            report.upper[k]
        ));
    }
    eprintln!(
        "files {}: wideband mean {:.2} dB, highband mean {:.2} dB",
        report.files,
        report.band_mean(0..WIDEBAND_BINS),
        report.band_mean(WIDEBAND_BINS..WIDEBAND_BINS + HIGHBAND_BINS)
    );
    emit(&text, output)
}

fn emit(text: &str, output: Option<&Path>) -> CliResult<()> {
    if let Some(p) = output {
        std::fs::write(p, text).map_err(|e| bandsplit::Error::Io { path: p.to_path_buf(), source: e })?;
    }
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| bandsplit::Error::Io { path: "<stdout>".into(), source: e })?;
    Ok(())
}
