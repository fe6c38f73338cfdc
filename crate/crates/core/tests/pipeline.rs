//! Library-level pipeline: toy corpus, synthesis, two-step training,
//! checkpoint round trip and inference.

use bandsplit::dsp::wav::read_wav;
use bandsplit::enhance::{AidMode, Condition, ConditionKind, Enhancer};
use bandsplit::metrics::{band_limited_eval, fsnr};
use bandsplit::nn::save_checkpoint;
use bandsplit::par::Exec;
use bandsplit::synth::toy::{write_toy_corpus, ToyCorpusConfig};
use bandsplit::synth::{synthesize_manifest, Manifest, Split};
use bandsplit::train::{train_condition, TrainConfig, TrainTarget, Widths};
use bandsplit::{Error, StftConfig};

fn corpus(dir: &std::path::Path) -> Manifest {
    let cfg = ToyCorpusConfig { train_files: 2, val_files: 1, test_files: 1, seconds: 1.5, ..Default::default() };
    let src = write_toy_corpus(dir.join("sources"), &cfg).unwrap();
    Manifest::load(synthesize_manifest(&Manifest::load(src).unwrap(), &dir.join("mix"), 0, Exec::Parallel).unwrap())
        .unwrap()
}

#[test]
fn two_step_train_save_load_enhance() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let base = TrainConfig { widths: Widths::Toy, max_epochs: 1, batch_size: 2, ..Default::default() };

    let highband = TrainConfig { target: TrainTarget::Highband(AidMode::Estimated), ..base.clone() };
    let missing = dir.path().join("dnn16.ckpt");
    assert!(matches!(train_condition(&highband, &m, Some(&missing), Exec::Parallel), Err(Error::Prerequisite(_))));

    let (dnn16, log) = train_condition(&TrainConfig { target: TrainTarget::Wideband, ..base }, &m, None, Exec::Parallel).unwrap();
    assert_eq!(log.epochs.len(), 1);
    save_checkpoint(&dnn16, &missing).unwrap();
    let (dnn16_48, _) = train_condition(&highband, &m, Some(&missing), Exec::Parallel).unwrap();
    let high = dir.path().join("high.ckpt");
    save_checkpoint(&dnn16_48, &high).unwrap();

    let (noisy, target) = &m.pairs(Split::Test).unwrap()[0];
    let (noisy, target) = (read_wav(noisy).unwrap(), read_wav(target).unwrap());
    let mut outputs = Vec::new();
    for aid in AidMode::ALL {
        let cond = Condition::new(ConditionKind::TwoStep(aid), vec![missing.clone(), high.clone()]).unwrap();
        let out = Enhancer::load(&cond).unwrap().enhance(&noisy).unwrap();
        assert_eq!(out.len(), noisy.len());
        assert!(out.samples().iter().all(|v| v.is_finite()));
        band_limited_eval(&target, &out).unwrap();
        outputs.push(out);
    }
    // the aid only reaches the highband path
    assert_ne!(outputs[0], outputs[1]);

    // the wideband checkpoint cannot stand in for the highband network
    let wrong = Condition::new(ConditionKind::TwoStep(AidMode::None), vec![missing.clone(), missing]).unwrap();
    assert!(matches!(Enhancer::load(&wrong), Err(Error::Checkpoint(_))));
}

#[test]
fn parallel_and_sequential_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyCorpusConfig { train_files: 3, val_files: 0, test_files: 0, seconds: 1.0, eq_fraction: 1.0, ..Default::default() };
    let src = Manifest::load(write_toy_corpus(dir.path().join("sources"), &cfg).unwrap()).unwrap();
    let a = synthesize_manifest(&src, &dir.path().join("par"), 5, Exec::Parallel).unwrap();
    let b = synthesize_manifest(&src, &dir.path().join("seq"), 5, Exec::Sequential).unwrap();
    let (a, b) = (Manifest::load(a).unwrap(), Manifest::load(b).unwrap());
    let (pa, pb) = (a.pairs(Split::Train).unwrap(), b.pairs(Split::Train).unwrap());
    let mut clean = Vec::new();
    let mut noise = Vec::new();
    for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
        assert_eq!(std::fs::read(na).unwrap(), std::fs::read(nb).unwrap());
        assert_eq!(std::fs::read(ta).unwrap(), std::fs::read(tb).unwrap());
        let (n, t) = (read_wav(na).unwrap(), read_wav(ta).unwrap());
        let residual = n.samples().iter().zip(t.samples()).map(|(x, y)| x - y).collect();
        noise.push(bandsplit::AudioBuffer::new(residual, 48_000).unwrap());
        clean.push(t);
    }
    let cfg = StftConfig::fullband();
    assert_eq!(
        fsnr(&clean, &noise, &cfg, Exec::Parallel).unwrap(),
        fsnr(&clean, &noise, &cfg, Exec::Sequential).unwrap()
    );
}
