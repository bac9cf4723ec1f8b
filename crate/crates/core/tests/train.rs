use std::fs;

use msf_core::augment::{Image, ViewStrategy};
use msf_core::data::{synthetic, ImageSet};
use msf_core::model::{load_checkpoint, save_checkpoint, EncoderConfig, StageSpec};
use msf_core::tensor::nn::{Module, TensorKind};
use msf_core::train::{byol_reference_loss, train, MetricsLog, TrainConfig, Trainer, METRICS_FILE};
use msf_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(k: usize) -> TrainConfig {
    TrainConfig {
        k,
        bank_capacity: 64,
        batch_size: 8,
        epochs: 3,
        seed: 17,
        out_size: 16,
        checkpoint_every: 1,
        encoder: EncoderConfig {
            in_channels: 3,
            stages: vec![
                StageSpec { channels: 8, kernel: 4, stride: 2, pad: 1 },
                StageSpec { channels: 16, kernel: 4, stride: 2, pad: 1 },
            ],
            proj_hidden: 32,
            embed_dim: 16,
            pred_hidden: 32,
        },
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> ImageSet {
    synthetic(n, 16, 4, 3).unwrap()
}

fn trainer(cfg: TrainConfig, d: &ImageSet) -> Trainer {
    let norm = d.pixel_stats().unwrap();
    Trainer::new(cfg, norm, d.len()).unwrap()
}

#[test]
fn k1_loss_is_byol_on_random_batches() {
    let cfg = TrainConfig { epochs: 100, ..tiny(1) };
    let d = data(8);
    let mut t = trainer(cfg, &d);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f32;
    for _ in 0..100 {
        let images: Vec<Image> = (0..8)
            .map(|_| Image::new(16, 16, (0..3 * 256).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let seeds: Vec<u64> = (0..8).map(|_| rng.gen()).collect();
        let m = t.train_step(&images, None, &seeds).unwrap();
        let det = t.last_detail().unwrap();
        assert!(det.neighbor_counts.iter().all(|&c| c == 1));
        let dim = det.dim;
        let mut mean = 0.0;
        for i in 0..8 {
            let u = &det.u[i * dim..(i + 1) * dim];
            let v = &det.v[i * dim..(i + 1) * dim];
            worst = worst.max((det.losses[i] - byol_reference_loss(u, v)).abs());
            mean += det.losses[i] / 8.0;
        }
        assert!((m.loss - mean).abs() < 1e-6);
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn first_step_fills_bank_with_the_batch() {
    let d = data(32);
    let mut t = trainer(tiny(5), &d);
    let mut log = MetricsLog::default();
    t.run(&d, &mut log, Some(1)).unwrap();
    let m = &log.0[0];
    assert_eq!((m.step, m.bank_fill), (0, 8));
    let det = t.last_detail().unwrap();
    assert!(det.neighbor_counts.iter().all(|&c| c == 5));
    // Each query sees its own entry first.
    for i in 0..8 {
        let u = &det.u[i * det.dim..(i + 1) * det.dim];
        assert_eq!(t.bank.slot(i), u);
    }
}

#[test]
fn warm_fill_uses_available_neighbours() {
    let d = data(32);
    let cfg = TrainConfig { k: 20, ..tiny(20) };
    let mut t = trainer(cfg, &d);
    t.run(&d, &mut (), Some(1)).unwrap();
    assert!(t.last_detail().unwrap().neighbor_counts.iter().all(|&c| c == 8));
    t.run(&d, &mut (), Some(1)).unwrap();
    assert!(t.last_detail().unwrap().neighbor_counts.iter().all(|&c| c == 16));
}

#[test]
fn losses_bounded_lr_decays_bank_saturates() {
    let d = data(64);
    let mut t = trainer(tiny(5), &d);
    let mut log = MetricsLog::default();
    t.run(&d, &mut log, None).unwrap();
    assert_eq!(log.0.len(), 24);
    assert!(t.is_finished());
    for m in &log.0 {
        assert!((0.0..=4.0).contains(&m.loss), "{}", m.loss);
        assert!(m.mean_nn_sim <= 1.0 + 1e-5);
        assert!(m.purity.is_some_and(|p| (0.0..=1.0).contains(&p)));
    }
    for w in log.0.windows(2) {
        assert!(w[1].lr <= w[0].lr);
        assert!(w[1].bank_fill >= w[0].bank_fill);
    }
    assert_eq!(log.0[0].lr, 0.05);
    assert_eq!(log.0.last().unwrap().bank_fill, 64);
    assert!(matches!(t.run(&d, &mut (), Some(1)), Ok(())));
    assert!(matches!(t.train_step(&[d.image(0), d.image(1)], None, &[0, 1]), Err(Error::Schedule { .. })));
}

#[test]
fn loss_decreases_on_structured_data() {
    let d = synthetic(128, 16, 4, 5).unwrap();
    let cfg = TrainConfig { epochs: 8, batch_size: 16, bank_capacity: 128, ..tiny(5) };
    let mut t = trainer(cfg, &d);
    let mut log = MetricsLog::default();
    t.run(&d, &mut log, None).unwrap();
    let mean = |s: &[msf_core::train::StepMetrics]| s.iter().map(|m| m.loss as f64).sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&log.0[..8]), mean(&log.0[log.0.len() - 8..]));
    assert!(tail < head, "first {head} last {tail}");
}

fn values(m: &impl Module<f32>) -> Vec<f32> {
    m.named_tensors("").into_iter().flat_map(|(_, x, _)| x.data().to_vec()).collect()
}

#[test]
fn online_parameters_move_target_follows() {
    let d = data(16);
    let mut t = trainer(tiny(5), &d);
    let (online0, target0) = (values(&t.pair.online), values(&t.pair.target));
    t.run(&d, &mut (), Some(1)).unwrap();
    let (online1, target1) = (values(&t.pair.online), values(&t.pair.target));
    assert_ne!(online0, online1);
    assert_ne!(target0, target1);
    // The target moves by (1 - m) of the gap to the online encoder.
    for ((&a, &b), &o) in target0.iter().zip(&target1).zip(&values(&t.pair.online.encoder)) {
        assert!((b - (0.99 * a + 0.01 * o)).abs() < 1e-6);
    }
}

fn params(t: &Trainer) -> Vec<f32> {
    t.pair
        .online
        .named_tensors("")
        .into_iter()
        .filter(|(_, _, k)| *k == TensorKind::Param)
        .flat_map(|(_, x, _)| x.data().to_vec())
        .collect()
}

#[test]
fn non_finite_loss_aborts_without_updating() {
    let d = data(16);
    let mut t = trainer(tiny(5), &d);
    let images: Vec<Image> = (0..8).map(|i| d.image(i)).collect();
    t.pair.online.predictor.fc2.weight.data_mut()[0] = f32::INFINITY;
    let before: Vec<f32> = params(&t);
    let err = t.train_step(&images, None, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap_err();
    let Error::NonFiniteLoss { step, samples, .. } = err else {
        panic!("unexpected {err:?}");
    };
    assert_eq!(step, 0);
    assert_eq!(samples, (0..8).collect::<Vec<_>>());
    let after: Vec<f32> = params(&t);
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(t.step(), 0);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data(32);
    let dir = tempfile::tempdir().unwrap();
    let mut full = trainer(tiny(5), &d);
    full.run(&d, &mut (), None).unwrap();

    let mut part = trainer(tiny(5), &d);
    part.run(&d, &mut (), Some(5)).unwrap();
    let path = dir.path().join("mid.msf");
    save_checkpoint(&path, &part.to_checkpoint()).unwrap();
    drop(part);
    let mut resumed = Trainer::from_checkpoint(tiny(5), load_checkpoint(&path).unwrap(), d.len()).unwrap();
    assert_eq!(resumed.step(), 5);
    resumed.run(&d, &mut (), None).unwrap();

    let (a, b) = (dir.path().join("a.msf"), dir.path().join("b.msf"));
    save_checkpoint(&a, &full.to_checkpoint()).unwrap();
    save_checkpoint(&b, &resumed.to_checkpoint()).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn trainer_checkpoint_save_load_save_is_identical() {
    let d = data(32);
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(tiny(5), &d);
    t.run(&d, &mut (), Some(3)).unwrap();
    let (a, b) = (dir.path().join("a.msf"), dir.path().join("b.msf"));
    save_checkpoint(&a, &t.to_checkpoint()).unwrap();
    let back = Trainer::from_checkpoint(tiny(5), load_checkpoint(&a).unwrap(), d.len()).unwrap();
    assert_eq!(back.bank, t.bank);
    assert_eq!(back.norm, t.norm);
    save_checkpoint(&b, &back.to_checkpoint()).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // A mismatched configuration is refused.
    assert!(Trainer::from_checkpoint(TrainConfig { seed: 1, ..tiny(5) }, load_checkpoint(&a).unwrap(), d.len()).is_err());
}

#[test]
fn identical_runs_write_identical_files() {
    let d = data(32);
    let norm = d.pixel_stats().unwrap();
    let (r1, r2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, o1) = train(tiny(5), &d, norm, r1.path(), &mut ()).unwrap();
    let (_, o2) = train(tiny(5), &d, norm, r2.path(), &mut ()).unwrap();
    assert_eq!(fs::read(&o1.final_checkpoint).unwrap(), fs::read(&o2.final_checkpoint).unwrap());
    assert_eq!(fs::read(&o1.metrics).unwrap(), fs::read(&o2.metrics).unwrap());
    let names = |p: &std::path::Path| {
        let mut v: Vec<String> = fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(names(r1.path()), vec!["ckpt_12.msf", "ckpt_4.msf", "ckpt_8.msf", METRICS_FILE]);
    let rows = fs::read_to_string(&o1.metrics).unwrap();
    assert_eq!(rows.lines().count(), 13);

    let (_, o3) = train(TrainConfig { seed: 18, ..tiny(5) }, &d, norm, r2.path(), &mut ()).unwrap();
    assert_ne!(fs::read(&o1.final_checkpoint).unwrap(), fs::read(&o3.final_checkpoint).unwrap());
}

#[test]
fn strategies_and_same_view_run() {
    let d = data(16);
    for strategy in [ViewStrategy::StrongStrong, ViewStrategy::WeakWeak] {
        let mut t = trainer(TrainConfig { strategy, ..tiny(5) }, &d);
        t.run(&d, &mut (), Some(2)).unwrap();
    }
    let mut t = trainer(TrainConfig { same_view: true, ..tiny(1) }, &d);
    t.run(&d, &mut (), Some(1)).unwrap();
    // One view feeds both encoders: at initialization target and online
    // encoders coincide, so only the prediction head separates u and v.
    let det = t.last_detail().unwrap();
    assert!(det.losses.iter().all(|l| l.is_finite()));
}
