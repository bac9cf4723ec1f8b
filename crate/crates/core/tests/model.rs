use msf_core::model::{load_checkpoint, save_checkpoint, CheckpointData, EncoderConfig, EncoderPair, StageSpec};
use msf_core::tensor::nn::{Module, TensorKind};
use msf_core::tensor::{l2_normalize, BnMode, OptimizerState, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        stages: vec![
            StageSpec { channels: 4, kernel: 4, stride: 2, pad: 1 },
            StageSpec { channels: 8, kernel: 4, stride: 2, pad: 1 },
        ],
        proj_hidden: 16,
        embed_dim: 8,
        pred_hidden: 16,
    }
}

fn input(b: usize, side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[b, 3, side, side], (0..b * 3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn flat(m: &impl Module<f32>) -> Vec<f32> {
    m.named_tensors("").into_iter().flat_map(|(_, t, _)| t.data().to_vec()).collect()
}

#[test]
fn target_starts_as_exact_copy_and_mirrors_shapes() {
    let pair = EncoderPair::<f32>::new(&EncoderConfig::cifar10(), 0.99, 5).unwrap();
    let online = pair.online.encoder.named_tensors("");
    let target = pair.target.named_tensors("");
    assert_eq!(online.len(), target.len());
    for ((n1, a, _), (n2, b, _)) in online.iter().zip(&target) {
        assert_eq!(n1, n2);
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.data(), b.data(), "{n1}");
    }
    assert!(pair.target.named_tensors("").iter().all(|(n, _, _)| !n.starts_with("prediction")));
    let again = EncoderPair::<f32>::new(&EncoderConfig::cifar10(), 0.99, 5).unwrap();
    assert_eq!(flat(&pair.online), flat(&again.online));
    let other = EncoderPair::<f32>::new(&EncoderConfig::cifar10(), 0.99, 6).unwrap();
    assert_ne!(flat(&pair.online), flat(&other.online));
}

#[test]
fn online_and_target_differ_only_by_the_prediction_head() {
    let pair = EncoderPair::<f32>::new(&small(), 0.99, 1).unwrap();
    let x = input(6, 16, 2);
    let u = pair.target_forward(&x).unwrap();
    let z = pair.online.encoder.infer(&x, BnMode::Train).unwrap();
    let (z, _) = l2_normalize(&z, 1e-12).unwrap();
    for (a, b) in u.data().iter().zip(z.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let v = pair.online.infer(&x, BnMode::Train).unwrap();
    assert!(u.data().iter().zip(v.data()).any(|(a, b)| (a - b).abs() > 1e-3));
    for i in 0..6 {
        let n: f32 = v.row(i).iter().map(|x| x * x).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn eval_mode_rows_depend_only_on_their_image() {
    let pair = EncoderPair::<f32>::new(&small(), 0.99, 1).unwrap();
    let mut x = input(4, 16, 3);
    let per = 3 * 16 * 16;
    let first = x.data()[..per].to_vec();
    x.data_mut()[per..2 * per].copy_from_slice(&first);
    let v = pair.online.infer(&x, BnMode::Eval).unwrap();
    for (a, b) in v.row(0).iter().zip(v.row(1)) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn ema_boundaries() {
    let mut pair = EncoderPair::<f32>::new(&small(), 0.0, 1).unwrap();
    for (_, t, _) in pair.online.encoder.named_tensors_mut("") {
        t.data_mut().iter_mut().for_each(|v| *v += 0.25);
    }
    let frozen = flat(&pair.target);
    pair.momentum = 1.0;
    pair.ema_update();
    assert_eq!(flat(&pair.target), frozen);
    pair.momentum = 0.0;
    pair.ema_update();
    assert_eq!(flat(&pair.target), flat(&pair.online.encoder));
}

#[test]
fn ema_hand_value() {
    let mut pair = EncoderPair::<f32>::new(&small(), 0.99, 1).unwrap();
    pair.target.projection.fc2.bias.data_mut()[0] = 1.0;
    pair.online.encoder.projection.fc2.bias.data_mut()[0] = 0.0;
    pair.ema_update();
    assert!((pair.target.projection.fc2.bias.data()[0] - 0.99).abs() < 1e-7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ema_follows_geometric_closed_form(m in 0.5f64..0.999, n in 1usize..200, seed: u64) {
        let mut pair = EncoderPair::<f32>::new(&small(), m as f32, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Move the target away from the (frozen) online encoder, buffers included.
        for (_, t, _) in pair.target.named_tensors_mut("") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.0f32..1.0));
        }
        let t0 = flat(&pair.target);
        let online = flat(&pair.online.encoder);
        for _ in 0..n {
            pair.ema_update();
        }
        let mn = (m as f32).powi(n as i32) as f64;
        for ((&t, &a), &o) in flat(&pair.target).iter().zip(&t0).zip(&online) {
            let want = mn * a as f64 + (1.0 - mn) * o as f64;
            prop_assert!((t as f64 - want).abs() < 1e-5, "got {} want {}", t, want);
        }
        prop_assert_eq!(flat(&pair.online.encoder), online);
    }
}

#[test]
fn buffers_are_tracked_by_ema() {
    let pair = EncoderPair::<f32>::new(&small(), 0.99, 1).unwrap();
    let kinds: Vec<TensorKind> = pair.target.named_tensors("").into_iter().map(|(_, _, k)| k).collect();
    assert!(kinds.contains(&TensorKind::Buffer));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut pair = EncoderPair::<f32>::new(&small(), 0.99, 8).unwrap();
    pair.target.projection.fc1.bias.data_mut()[2] = 0.125;
    let sizes: Vec<usize> = pair.online.params_mut().iter().map(|p| p.len()).collect();
    let mut optimizer = OptimizerState::new(sizes, 0.05f32, 0.9, 1e-4).unwrap();
    optimizer.velocity[3][0] = -2.5;
    let data = CheckpointData {
        pair,
        optimizer,
        step: 123_456_789_012,
        seed: u64::MAX - 3,
        extra: Default::default(),
    };
    let (a, b) = (dir.path().join("a.msf"), dir.path().join("b.msf"));
    save_checkpoint(&a, &data).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!((loaded.step, loaded.seed), (data.step, data.seed));
    assert_eq!(flat(&loaded.pair.target), flat(&data.pair.target));
    assert_eq!(loaded.optimizer.velocity, data.optimizer.velocity);
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let bytes = std::fs::read(&a).unwrap();
    std::fs::write(&b, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&b).is_err());
}
