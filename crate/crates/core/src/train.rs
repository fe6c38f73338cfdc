//! Training: crop batching, Adam updates on the IAM-weighted loss, a
//! plateau learning-rate schedule and validation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Graph, Mode, Tensor};
use crate::dsp::wav::read_wav;
use crate::dsp::{band_split, MagnitudeSpectrogram, Stft, StftConfig, FULLBAND_RATE};
use crate::enhance::{aid_input, one_step_input, AidMode, ConditionKind, Feature};
use crate::loss::{iam_male_graph, iam_male_loss, IamLossParams};
use crate::nn::{
    load_checkpoint, CrnnHighbandConfig, EncoderDecoderConfig, NetConfig, NetKind, Network, StackedLstmConfig,
};
use crate::par::Exec;
use crate::synth::{salted, Manifest, Split};
use crate::{Error, Result};

/// What a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    /// A one-step fullband network on the given feature.
    OneStep(Feature),
    /// The first-step wideband network (257 bins).
    Wideband,
    /// The highband network of a two-step condition, with the wideband
    /// network frozen.
    Highband(AidMode),
}

impl TrainTarget {
    pub fn from_condition(kind: ConditionKind) -> Self {
        match (kind.feature(), kind.aid()) {
            (Some(f), _) => TrainTarget::OneStep(f),
            (None, Some(aid)) => TrainTarget::Highband(aid),
            (None, None) => unreachable!("every condition is one- or two-step"),
        }
    }

    pub fn needs_wideband_net(self) -> bool {
        matches!(self, TrainTarget::Highband(_))
    }
}

impl fmt::Display for TrainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self {
            TrainTarget::Wideband => return f.write_str("wideband"),
            TrainTarget::OneStep(Feature::Stft) => ConditionKind::Fft768,
            TrainTarget::OneStep(Feature::Mel(48)) => ConditionKind::Mel48,
            TrainTarget::OneStep(Feature::Mel(64)) => ConditionKind::Mel64,
            TrainTarget::OneStep(Feature::Mel(n)) if *n == 80 => ConditionKind::Mel80,
            TrainTarget::OneStep(Feature::Mel(n)) => return write!(f, "Mel{n}"),
            TrainTarget::Highband(aid) => ConditionKind::TwoStep(*aid),
        };
        f.write_str(kind.as_str())
    }
}

impl FromStr for TrainTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("wideband") {
            return Ok(TrainTarget::Wideband);
        }
        s.parse::<ConditionKind>().map(Self::from_condition)
    }
}

/// Network family for one-step and wideband networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    EncoderDecoder,
    StackedLstm,
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-decoder" => Ok(Architecture::EncoderDecoder),
            "stacked-lstm" => Ok(Architecture::StackedLstm),
            _ => Err(Error::Config(format!("unknown architecture {s:?} (encoder-decoder | stacked-lstm)"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::EncoderDecoder => "encoder-decoder",
            Architecture::StackedLstm => "stacked-lstm",
        })
    }
}

/// Full-size layers or the reduced toy widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Widths {
    Full,
    Toy,
}

impl FromStr for Widths {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Widths::Full),
            "toy" => Ok(Widths::Toy),
            _ => Err(Error::Config(format!("unknown widths {s:?} (full | toy)"))),
        }
    }
}

impl fmt::Display for Widths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Widths::Full => "full",
            Widths::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub target: TrainTarget,
    pub architecture: Architecture,
    pub widths: Widths,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub patience: usize,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub seed: u64,
    pub loss: IamLossParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target: TrainTarget::Highband(AidMode::Estimated),
            architecture: Architecture::EncoderDecoder,
            widths: Widths::Full,
            lr_init: 1e-3,
            lr_decay_factor: 0.5,
            patience: 5,
            min_lr: 1.25e-4,
            max_epochs: 200,
            batch_size: 4,
            segment_seconds: 1.0,
            seed: 0,
            loss: IamLossParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init {} must be positive", self.lr_init));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor {} outside (0, 1)", self.lr_decay_factor));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(self.segment_seconds > 0.0 && self.segment_seconds.is_finite()) {
            return bad(format!("segment_seconds {}", self.segment_seconds));
        }
        if !(self.min_lr >= 0.0) {
            return bad(format!("min_lr {}", self.min_lr));
        }
        self.loss.validate()?;
        self.network_config().validate()
    }

    /// Architecture of the network this run trains.
    pub fn network_config(&self) -> NetConfig {
        let dim = match self.target {
            TrainTarget::Highband(_) => {
                return NetConfig::CrnnHighband(match self.widths {
                    Widths::Full => CrnnHighbandConfig::default(),
                    Widths::Toy => CrnnHighbandConfig::toy(),
                })
            }
            TrainTarget::Wideband => crate::dsp::WIDEBAND_BINS,
            TrainTarget::OneStep(f) => f.dim(),
        };
        match (self.architecture, self.widths) {
            (Architecture::EncoderDecoder, Widths::Full) => NetConfig::EncoderDecoder(EncoderDecoderConfig::new(dim)),
            (Architecture::EncoderDecoder, Widths::Toy) => NetConfig::EncoderDecoder(EncoderDecoderConfig::toy(dim)),
            (Architecture::StackedLstm, Widths::Full) => NetConfig::StackedLstm(StackedLstmConfig::new(dim)),
            (Architecture::StackedLstm, Widths::Toy) => NetConfig::StackedLstm(StackedLstmConfig::toy(dim)),
        }
    }

    /// Crop length in STFT frames.
    pub fn segment_frames(&self) -> usize {
        let hop = StftConfig::fullband().hop as f64;
        ((self.segment_seconds * FULLBAND_RATE as f64 / hop).round() as usize).max(1)
    }
}

/// New learning rate after the last entry of `history` (validation losses,
/// oldest first). The history is replayed: each time the best loss has not
/// improved for `patience` consecutive epochs the rate is multiplied by
/// `factor` and the stagnation counter restarts. Returns `current_lr *
/// factor` only if such a decay falls on the last epoch.
pub fn lr_schedule_step(history: &[f64], current_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut sched = PlateauSchedule::new(current_lr, patience, factor);
    let mut lr = current_lr;
    for &v in history {
        lr = sched.observe(v);
    }
    if history.is_empty() || lr == current_lr {
        current_lr
    } else {
        current_lr * factor
    }
}

/// Incremental form of [`lr_schedule_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    patience: usize,
    factor: f64,
    best: f64,
    stagnant: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauSchedule { lr, patience: patience.max(1), factor, best: f64::INFINITY, stagnant: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one validation loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant >= self.patience {
                self.lr *= self.factor;
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss per time-frequency element over the epoch's crops.
    pub train_loss: f64,
    /// Mean loss per element over validation utterances, dropout off.
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch\ttrain_loss\tval_loss\tlr\tseconds";

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.epochs {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds));
        }
        s
    }

    /// The log with wall times removed, for reproducibility comparisons.
    pub fn without_times(&self) -> Vec<(usize, f64, f64, f64)> {
        self.epochs.iter().map(|r| (r.epoch, r.train_loss, r.val_loss, r.lr)).collect()
    }

    pub fn final_lr(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.lr)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Network inputs and loss references of one utterance, all with the same
/// frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub inputs: Vec<MagnitudeSpectrogram>,
    /// `X` in the loss: clean magnitudes in the output domain.
    pub clean: MagnitudeSpectrogram,
    /// `Y` in the loss: noisy magnitudes in the output domain; the
    /// prediction is `mask ⊙ Y`.
    pub noisy: MagnitudeSpectrogram,
}

impl TrainExample {
    pub fn frames(&self) -> usize {
        self.clean.frames()
    }
}

/// Builds a training example from a noisy/target pair of 48 kHz signals.
/// Highband targets need the frozen wideband network.
pub fn prepare_example(
    target: TrainTarget,
    noisy: &crate::AudioBuffer,
    clean: &crate::AudioBuffer,
    dnn16: Option<&Network>,
) -> Result<TrainExample> {
    noisy.expect_rate(FULLBAND_RATE)?;
    clean.expect_rate(FULLBAND_RATE)?;
    if noisy.len() != clean.len() {
        return Err(Error::Shape(format!("noisy/target lengths differ: {} vs {}", noisy.len(), clean.len())));
    }
    let stft = Stft::new(StftConfig::fullband())?.with_exec(Exec::Sequential);
    let y = stft.analyze(noisy)?;
    let s = stft.analyze(clean)?;
    Ok(match target {
        TrainTarget::OneStep(feature) => {
            let fb = feature.filterbank()?;
            let ym = y.magnitude();
            let input = one_step_input(&ym, fb.as_ref())?;
            TrainExample { clean: one_step_input(&s.magnitude(), fb.as_ref())?, noisy: input.clone(), inputs: vec![input] }
        }
        TrainTarget::Wideband => {
            let (y16, _) = band_split(&y)?;
            let (s16, _) = band_split(&s)?;
            let y16 = y16.magnitude();
            TrainExample { inputs: vec![y16.clone()], clean: s16.magnitude(), noisy: y16 }
        }
        TrainTarget::Highband(aid) => {
            let dnn16 = dnn16.ok_or_else(|| Error::Prerequisite("highband training needs the wideband network".into()))?;
            let (y16, y48) = band_split(&y)?;
            let (_, s48) = band_split(&s)?;
            let y16m = y16.magnitude();
            let estimate = match aid {
                AidMode::Estimated => y16.apply_mask(&dnn16.infer(&[&y16m])?)?.magnitude(),
                _ => MagnitudeSpectrogram::zeros(0, 0),
            };
            let y48m = y48.magnitude();
            TrainExample { inputs: vec![y48m.clone(), aid_input(aid, &y16m, &estimate)], clean: s48.magnitude(), noisy: y48m }
        }
    })
}

/// Loads and prepares every pair of `split`.
pub fn load_split(
    manifest: &Manifest,
    split: Split,
    target: TrainTarget,
    dnn16: Option<&Network>,
    exec: Exec,
) -> Result<Vec<TrainExample>> {
    let pairs = manifest.pairs(split)?;
    exec.try_map(&pairs, |(n, t)| prepare_example(target, &read_wav(n)?, &read_wav(t)?, dnn16))
}

/// Mean per-element IAM-weighted loss over whole utterances in eval mode.
pub fn validate(net: &Network, examples: &[TrainExample], params: &IamLossParams, exec: Exec) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let losses = exec.try_map(examples, |ex| {
        let refs: Vec<&MagnitudeSpectrogram> = ex.inputs.iter().collect();
        let mask = net.infer(&refs)?;
        let pred: Vec<f64> = mask.data().iter().zip(ex.noisy.data()).map(|(m, y)| m * y).collect();
        Ok::<_, Error>(iam_male_loss(&pred, ex.clean.data(), ex.noisy.data(), params)? / pred.len() as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Stateful training run; [`train_condition`] drives it to completion.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: Network,
    adam: Adam,
    schedule: PlateauSchedule,
    train: Vec<TrainExample>,
    val: Vec<TrainExample>,
    epoch: usize,
    log: TrainLog,
    exec: Exec,
}

impl Trainer {
    /// Prepares data from a synthesized manifest. The validation split falls
    /// back to the training split when it has no records.
    pub fn new(cfg: TrainConfig, manifest: &Manifest, dnn16: Option<&Network>, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        check_wideband(cfg.target, dnn16)?;
        let train = load_split(manifest, Split::Train, cfg.target, dnn16, exec)?;
        let val = if manifest.records.iter().any(|r| r.spec.split == Split::Val) {
            load_split(manifest, Split::Val, cfg.target, dnn16, exec)?
        } else {
            train.clone()
        };
        Self::from_examples(cfg, train, val, exec)
    }

    pub fn from_examples(cfg: TrainConfig, train: Vec<TrainExample>, val: Vec<TrainExample>, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidInput("training split is empty".into()));
        }
        let net = Network::build(cfg.network_config(), cfg.seed)?;
        let dims = net.input_dims();
        for ex in train.iter().chain(&val) {
            let got: Vec<usize> = ex.inputs.iter().map(|m| m.bins()).collect();
            if got != dims || ex.clean.bins() != net.output_dim() || ex.frames() == 0 {
                return Err(Error::Shape(format!("example inputs {got:?} do not fit network inputs {dims:?}")));
            }
        }
        let adam = Adam::new(net.store(), cfg.lr_init);
        let schedule = PlateauSchedule::new(cfg.lr_init, cfg.patience, cfg.lr_decay_factor);
        Ok(Trainer { cfg, net, adam, schedule, train, val, epoch: 0, log: TrainLog::default(), exec })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn train_examples(&self) -> &[TrainExample] {
        &self.train
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr()
    }

    /// True once `max_epochs` ran or the rate fell below `min_lr`.
    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.schedule.lr() < self.cfg.min_lr
    }

    /// One pass over shuffled crops followed by validation.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let start = Instant::now();
        let lr = self.schedule.lr();
        self.adam.lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(salted(self.cfg.seed, self.epoch as u64 + 1));
        let seg = self.cfg.segment_frames().min(self.train.iter().map(TrainExample::frames).min().unwrap_or(1));
        let mut crops = Vec::new();
        for (i, ex) in self.train.iter().enumerate() {
            let t = ex.frames();
            let offset = if t > seg { rng.gen_range(0..=(t - seg).min(seg - 1)) } else { 0 };
            crops.extend((offset..=t - seg).step_by(seg).map(|s| (i, s)));
        }
        crops.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in crops.chunks(self.cfg.batch_size) {
            let per_element = self.step(batch, seg, rng.gen())?;
            total += per_element * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = total / count as f64;
        let val_loss = validate(&self.net, &self.val, &self.cfg.loss, self.exec)?;
        self.schedule.observe(val_loss);
        self.log.epochs.push(EpochRecord {
            epoch: self.epoch,
            train_loss,
            val_loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.epoch += 1;
        Ok(self.log.epochs.last().unwrap())
    }

    fn step(&mut self, batch: &[(usize, usize)], seg: usize, seed: u64) -> Result<f64> {
        let b = batch.len();
        let stack = |pick: &dyn Fn(&TrainExample) -> &MagnitudeSpectrogram| -> Result<Tensor> {
            let bins = pick(&self.train[batch[0].0]).bins();
            let mut data = Vec::with_capacity(b * seg * bins);
            for &(i, s) in batch {
                let m = pick(&self.train[i]);
                data.extend_from_slice(&m.data()[s * bins..(s + seg) * bins]);
            }
            Tensor::new(vec![b, seg, bins], data)
        };
        let n_inputs = self.train[0].inputs.len();
        let inputs = (0..n_inputs).map(|k| stack(&|ex| &ex.inputs[k])).collect::<Result<Vec<_>>>()?;
        let clean = stack(&|ex| &ex.clean)?;
        let noisy = stack(&|ex| &ex.noisy)?;
        let mut g = Graph::new(Mode::Train, seed);
        let vars = inputs.into_iter().map(|t| g.constant(t)).collect::<Result<Vec<_>>>()?;
        let mask = self.net.forward(&mut g, &vars)?;
        let y = g.constant(noisy.clone())?;
        let pred = g.mul(mask, y)?;
        let loss = iam_male_graph(&mut g, pred, &clean, &noisy, &self.cfg.loss, b)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let updates = g.take_buffer_updates();
        let grads = grads.for_store(self.net.store());
        match self.adam.step(self.net.store_mut(), &grads) {
            Ok(()) => self.net.apply_buffer_updates(updates)?,
            // a non-finite gradient skips the update entirely
            Err(Error::NonFinite(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(value / (seg * clean.shape()[2]) as f64)
    }

    pub fn into_parts(self) -> (Network, TrainLog) {
        (self.net, self.log)
    }
}

fn check_wideband(target: TrainTarget, dnn16: Option<&Network>) -> Result<()> {
    if !target.needs_wideband_net() {
        return Ok(());
    }
    let net = dnn16.ok_or_else(|| Error::Prerequisite("two-step training needs a trained wideband checkpoint".into()))?;
    if net.input_dims() != [crate::dsp::WIDEBAND_BINS] || net.output_dim() != crate::dsp::WIDEBAND_BINS {
        return Err(Error::Checkpoint(format!(
            "wideband checkpoint maps {:?} -> {}, expected [257] -> 257",
            net.input_dims(),
            net.output_dim()
        )));
    }
    if net.kind() == NetKind::CrnnHighband {
        return Err(Error::Checkpoint("wideband checkpoint holds a highband network".into()));
    }
    Ok(())
}

/// Trains one network to completion. Two-step targets load the frozen
/// wideband network from `dnn16_checkpoint`, which must exist.
pub fn train_condition(
    cfg: &TrainConfig,
    manifest: &Manifest,
    dnn16_checkpoint: Option<&Path>,
    exec: Exec,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    let dnn16 = match (cfg.target.needs_wideband_net(), dnn16_checkpoint) {
        (false, _) => None,
        (true, Some(p)) if p.exists() => Some(load_checkpoint(p)?),
        (true, Some(p)) => {
            return Err(Error::Prerequisite(format!("wideband checkpoint {} does not exist", p.display())))
        }
        (true, None) => return Err(Error::Prerequisite("two-step training needs a wideband checkpoint".into())),
    };
    if manifest.records.is_empty() {
        return Err(Error::Config("manifest has no records".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), manifest, dnn16.as_ref(), exec)?;
    while !trainer.finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::toy::{toy_noise, toy_speech};
    use crate::synth::mix_at_snr;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule_step(&[1.0, 0.9, 0.8], 1e-3, 5, 0.5), 1e-3);
        let h = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95];
        assert_eq!(lr_schedule_step(&h[..6], 1e-3, 5, 0.5), 1e-3);
        assert_eq!(lr_schedule_step(&h, 1e-3, 5, 0.5), 5e-4);
        let mut s = PlateauSchedule::new(1e-3, 5, 0.5);
        let lrs: Vec<f64> = [1.0, 0.9].iter().chain([1.0; 10].iter()).map(|&v| s.observe(v)).collect();
        assert_eq!(lrs[6], 5e-4);
        assert_eq!(lrs[10], 5e-4);
        assert_eq!(lrs[11], 2.5e-4);
    }

    proptest! {
        #[test]
        fn lr_is_power_of_half(losses in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            let mut s = PlateauSchedule::new(1e-3, 5, 0.5);
            let mut prev = 1e-3;
            for v in losses {
                let lr = s.observe(v);
                prop_assert!(lr <= prev);
                let k = (1e-3 / lr).log2();
                prop_assert!((k - k.round()).abs() < 1e-12);
                prev = lr;
            }
        }
    }

    fn pair(seed: u64, secs: f64) -> (crate::AudioBuffer, crate::AudioBuffer) {
        let s = toy_speech(seed, secs, 48_000).unwrap();
        let n = toy_noise(seed, secs, 48_000).unwrap();
        (mix_at_snr(&s, &n, 5.0).unwrap().0, s)
    }

    fn toy_cfg(target: TrainTarget) -> TrainConfig {
        TrainConfig {
            target,
            widths: Widths::Toy,
            max_epochs: 4,
            batch_size: 1,
            segment_seconds: 0.2,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn examples_have_expected_domains() {
        let (y, s) = pair(1, 0.5);
        let one = prepare_example(TrainTarget::OneStep(Feature::Mel(64)), &y, &s, None).unwrap();
        assert_eq!((one.inputs[0].bins(), one.clean.bins(), one.frames()), (64, 64, 50));
        let wide = prepare_example(TrainTarget::Wideband, &y, &s, None).unwrap();
        assert_eq!(wide.clean.bins(), 257);
        assert!(matches!(
            prepare_example(TrainTarget::Highband(AidMode::None), &y, &s, None),
            Err(Error::Prerequisite(_))
        ));
        let dnn16 = Network::build(NetConfig::EncoderDecoder(EncoderDecoderConfig::toy(257)), 0).unwrap();
        let hb = prepare_example(TrainTarget::Highband(AidMode::None), &y, &s, Some(&dnn16)).unwrap();
        assert_eq!((hb.inputs[0].bins(), hb.inputs[1].bins(), hb.clean.bins()), (512, 257, 512));
        assert!(hb.inputs[1].data().iter().all(|v| *v == 0.0));
        let noisy = prepare_example(TrainTarget::Highband(AidMode::Noisy), &y, &s, Some(&dnn16)).unwrap();
        assert_eq!(noisy.inputs[1], wide.inputs[0]);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data: Vec<TrainExample> = (0..3)
            .map(|i| {
                let (y, s) = pair(i, 0.6);
                prepare_example(TrainTarget::Wideband, &y, &s, None).unwrap()
            })
            .collect();
        let run = || {
            let mut t = Trainer::from_examples(toy_cfg(TrainTarget::Wideband), data.clone(), data.clone(), Exec::Parallel).unwrap();
            while !t.finished() {
                t.run_epoch().unwrap();
            }
            t.into_parts()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.store(), b.store());
        assert_eq!(la.without_times(), lb.without_times());
        assert_eq!(la.epochs.len(), 4);
        assert!(la.epochs[3].val_loss < la.epochs[0].val_loss, "{:?}", la.epochs);
        let v1 = validate(&a, &data, &IamLossParams::default(), Exec::Sequential).unwrap();
        let v2 = validate(&a, &data, &IamLossParams::default(), Exec::Parallel).unwrap();
        assert_eq!(v1, v2);
        assert!(validate(&a, &[], &IamLossParams::default(), Exec::Sequential).is_err());
    }

    #[test]
    fn two_step_requires_wideband_checkpoint() {
        let cfg = toy_cfg(TrainTarget::Highband(AidMode::Estimated));
        let m = Manifest::default();
        assert!(matches!(train_condition(&cfg, &m, None, Exec::Sequential), Err(Error::Prerequisite(_))));
        let missing = Path::new("/nonexistent/dnn16.ckpt");
        assert!(matches!(train_condition(&cfg, &m, Some(missing), Exec::Sequential), Err(Error::Prerequisite(_))));
        assert!(matches!(
            train_condition(&toy_cfg(TrainTarget::Wideband), &m, None, Exec::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn target_names_and_configs() {
        for k in ConditionKind::ALL {
            let t = TrainTarget::from_condition(k);
            assert_eq!(t.to_string(), k.as_str());
            assert_eq!(k.as_str().parse::<TrainTarget>().unwrap(), t);
        }
        assert_eq!("wideband".parse::<TrainTarget>().unwrap(), TrainTarget::Wideband);
        for arch in [Architecture::EncoderDecoder, Architecture::StackedLstm] {
            for widths in [Widths::Full, Widths::Toy] {
                for k in ConditionKind::ALL {
                    let cfg = TrainConfig { target: TrainTarget::from_condition(k), architecture: arch, widths, ..Default::default() };
                    cfg.validate().unwrap_or_else(|e| panic!("{k} {arch} {widths}: {e}"));
                    if let Some(f) = k.feature() {
                        assert_eq!(cfg.network_config().output_dim(), f.dim());
                    }
                }
            }
        }
        let bad = TrainConfig { patience: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().segment_frames(), 100);
    }
}
