use mfcodec::checkpoint::Checkpoint;
use mfcodec::coder::model_digest;
use mfcodec::entropy::Quantizer;
use mfcodec::gradcheck::{assert_grads_match, finite_diff_grad};
use mfcodec::layers::{Module, Param};
use mfcodec::network::{ArchConfig, CodecModel, ContextInput, ForwardOutput};
use mfcodec::octave::MfVar;
use mfcodec::train::trainer::{FINAL_CHECKPOINT, LOG_FILE};
use mfcodec::train::*;
use mfcodec::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
}

#[test]
fn msssim_of_an_image_with_itself_is_one() {
    for (h, w) in [(256, 256), (128, 96), (250, 181)] {
        let x = synthetic_image(h as u64, h, w);
        assert!((msssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }
}

#[test]
fn msssim_is_symmetric_and_low_for_independent_noise() {
    let a = noise(&[1, 3, 192, 192], 1);
    let b = noise(&[1, 3, 192, 192], 2);
    let ab = msssim(&a, &b).unwrap();
    assert_eq!(ab, msssim(&b, &a).unwrap());
    assert!(ab < 0.5, "{ab}");
    let x = synthetic_image(3, 192, 192);
    let y = x.zip_map(&a, |u, n| (u + 0.1 * (n - 0.5)).clamp(0.0, 1.0)).unwrap();
    let v = msssim(&x, &y).unwrap();
    assert!(v > ab && v < 1.0);
}

#[test]
fn msssim_rejects_images_smaller_than_the_window() {
    let x = noise(&[1, 3, 10, 40], 0);
    assert!(msssim(&x, &x).is_err());
    assert!(msssim(&x, &noise(&[1, 3, 12, 40], 0)).is_err());
}

#[test]
fn psnr_of_a_known_error_is_exact() {
    // 3 of 75 values off by 0.5: MSE = 0.75 / 75 = 0.01.
    let x = Tensor::<f32>::zeros([1, 3, 5, 5]);
    let mut y = x.clone();
    for i in [0, 30, 74] {
        y.data_mut()[i] = 0.5;
    }
    assert_eq!(mse(&x, &y).unwrap(), 0.01);
    assert_eq!(psnr(&x, &y).unwrap(), 20.0);
    assert_eq!(msssim_db(0.9), 10.0);
}

#[test]
fn msssim_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let x = noise(&[1, 2, 24, 26], seed).cast::<f64>();
        let y = noise(&[1, 2, 24, 26], seed + 10).cast::<f64>();
        let y = x.zip_map(&y, |a, b| 0.7 * a + 0.3 * b).unwrap();
        let f = |v: &Tensor<f64>| {
            let mut t = Tape::new();
            let a = t.input(v.clone());
            let b = t.constant(y.clone());
            let s = msssim_var(&mut t, a, b)?;
            Ok(t.value(s).item())
        };
        let mut t = Tape::new();
        let a = t.input(x.clone());
        let b = t.constant(y.clone());
        let s = msssim_var(&mut t, a, b).unwrap();
        let g = t.backward(s).unwrap();
        let fd = finite_diff_grad(f, &x, 1e-6).unwrap();
        assert_grads_match("msssim", g.get(a).unwrap(), &fd, 1e-5);
    }
}

/// A forward output whose reconstruction is the input itself.
fn perfect_output(tape: &mut Tape<f64>, x: mfcodec::Var, bits: f64) -> ForwardOutput {
    let rate = tape.constant(Tensor::scalar(bits));
    let one = MfVar { hf: rate, lf: None };
    ForwardOutput {
        y: one,
        y_hat: one,
        z_hat: one,
        mu: one,
        sigma: one,
        lik_y: one,
        lik_z: one,
        x_hat: x,
        rate_hf: rate,
        rate_lf: None,
        rate,
    }
}

#[test]
fn loss_reduces_to_the_rate_term() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(noise(&[2, 3, 16, 16], 4).cast());
    let out = perfect_output(&mut tape, x, 1024.0);
    for d in [Distortion::Mse, Distortion::MsSsim] {
        let terms = rd_loss(&mut tape, x, &out, 0.3, d).unwrap();
        assert_eq!(tape.value(terms.loss).item(), 1024.0 / 512.0);
        assert_eq!(tape.value(terms.distortion).item(), 0.0);
    }

    let model = CodecModel::<f64>::new(ArchConfig::with_channels(4, 4, 0.5), 1).unwrap();
    let x = tape.constant(noise(&[1, 3, 128, 128], 5).cast());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&mut tape, x, Quantizer::TrainNoise, &mut rng).unwrap();
    let terms = rd_loss(&mut tape, x, &out, 0.0, Distortion::Mse).unwrap();
    let bpp = tape.value(out.rate).item() / (128.0 * 128.0);
    assert_eq!(tape.value(terms.loss).item(), bpp);
    assert!(tape.value(terms.distortion).item() > 0.0);
    assert!(rd_loss(&mut tape, x, &out, -1.0, Distortion::Mse).is_err());
}

/// Directional derivative of the full objective along its gradient, for
/// both distortion measures.
#[test]
fn objective_gradient_matches_its_directional_derivative() {
    let cfg = ArchConfig {
        context_input: ContextInput::Noisy,
        ..ArchConfig::with_channels(4, 4, 0.5)
    };
    let model = CodecModel::<f64>::new(cfg, 9).unwrap();
    let h = 1e-5;
    for (seed, d, lambda) in [
        (0, Distortion::Mse, 50.0),
        (1, Distortion::MsSsim, 2.0),
        (2, Distortion::Mse, 0.5),
    ] {
        let x = noise(&[1, 3, 128, 128], seed).cast::<f64>();
        let objective = |m: &CodecModel<f64>, tape: &mut Tape<f64>| {
            let xv = tape.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = m.forward(tape, xv, Quantizer::TrainNoise, &mut rng).unwrap();
            let terms = rd_loss(tape, xv, &out, lambda, d).unwrap();
            (tape.value(terms.loss).item(), terms.loss)
        };
        let mut tape = Tape::new();
        let (_, loss) = objective(&model, &mut tape);
        let grads = collect_grads(&model, &tape.backward(loss).unwrap());
        let norm = global_norm(&grads);
        let shifted = |h: f64| {
            let mut m = model.clone();
            let mut i = 0;
            m.visit_mut("", &mut |_, p| {
                p.value = p.value.zip_map(&grads[i], |v, g| v + h * g / norm).unwrap();
                i += 1;
            });
            objective(&m, &mut Tape::new()).0
        };
        let central = |h: f64| (shifted(h) - shifted(-h)) / (2.0 * h);
        let numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        let err = (numeric - norm).abs() / norm;
        assert!(err < 1e-5, "{d}: {numeric} vs {norm} ({err:.3e})");
    }
}

#[derive(Clone)]
struct Point {
    x: Param<f64>,
}

impl Module<f64> for Point {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        f(prefix, &self.x);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        f(prefix, &mut self.x);
    }
}

fn point(v: &[f64]) -> Point {
    Point {
        x: Param::new(Tensor::from_f64([v.len()], v).unwrap()),
    }
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut p = point(&[0.3, -2.0]);
    let mut st = AdamState::new(&p);
    for _ in 0..5 {
        adam_step(&mut p, &[Tensor::zeros([2])], &mut st, 0.1).unwrap();
    }
    assert_eq!(p.x.value.data(), &[0.3, -2.0]);
    assert_eq!(st.step, 5);
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let mut p = point(&[1.0, 1.0, 1.0]);
    let mut st = AdamState::new(&p);
    let g = Tensor::from_f64([3], &[3.0, -0.02, 1e4]).unwrap();
    adam_step(&mut p, &[g], &mut st, 0.01).unwrap();
    for (v, s) in p.x.value.data().iter().zip([-1.0, 1.0, -1.0]) {
        assert!((v - (1.0 + 0.01 * s)).abs() < 1e-6, "{v}");
    }
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut p = point(&[1.0]);
    let mut st = AdamState::new(&p);
    for _ in 0..500 {
        let g = p.x.value.map(|v| 2.0 * v);
        adam_step(&mut p, &[g], &mut st, 0.05).unwrap();
    }
    assert!(p.x.value.data()[0].abs() < 1e-2, "{}", p.x.value.data()[0]);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut p = point(&[1.0, 2.0]);
    let mut st = AdamState::new(&p);
    assert!(adam_step(&mut p, &[Tensor::zeros([3])], &mut st, 0.1).is_err());
    assert!(adam_step(&mut p, &[], &mut st, 0.1).is_err());
}

#[test]
fn clipping_limits_the_global_norm() {
    let mut g = vec![
        Tensor::<f64>::from_f64([2], &[3.0, 0.0]).unwrap(),
        Tensor::from_f64([1], &[4.0]).unwrap(),
    ];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && g[0].data()[1] == 0.0);
    let before = g.clone();
    clip_global_norm(&mut g, 2.0);
    assert_eq!(g, before);
}

#[test]
fn learning_rate_is_constant_then_decays_linearly() {
    let cfg = TrainConfig {
        lr: 1e-3,
        ..Default::default()
    };
    assert_eq!(cfg.lr_at(0, 100), 1e-3);
    assert_eq!(cfg.lr_at(49, 100), 1e-3);
    assert_eq!(cfg.lr_at(50, 100), 1e-3);
    assert!((cfg.lr_at(75, 100) - 5e-4).abs() < 1e-15);
    assert!(cfg.lr_at(99, 100) > 0.0 && cfg.lr_at(99, 100) < 3e-5);
    assert_eq!(cfg.lr_at(100, 100), 0.0);
    let paper = TrainConfig::default();
    assert_eq!((paper.epochs, paper.batch, paper.lr, paper.crop), (200, 8, 5e-5, 256));
    assert_eq!(paper.total_steps(20), 200 * 3);
}

fn toy_trainer(seed: u64, steps: usize) -> (Trainer, Dataset) {
    let model = CodecModel::new(ArchConfig::with_channels(4, 4, 0.5), 11).unwrap();
    let cfg = TrainConfig {
        lambda: 100.0,
        lr: 1e-3,
        batch: 2,
        crop: 128,
        seed,
        steps: Some(steps),
        ..Default::default()
    };
    let data = Dataset::new(synthetic_set(5, 3, 160, 144)).unwrap();
    (Trainer::new(model, cfg).unwrap(), data)
}

#[test]
fn fixed_seed_reproduces_the_trajectory() {
    let run = || {
        let (mut t, data) = toy_trainer(1, 6);
        let recs = t.run(&data, 6, 6, None).unwrap();
        (recs, model_digest(&t.model))
    };
    let (a, da) = run();
    let (b, db) = run();
    assert_eq!(a, b);
    assert_eq!(da, db);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|r| r.loss.is_finite() && r.psnr.is_finite()));
}

#[test]
fn resuming_from_a_checkpoint_is_bit_identical() {
    let (mut straight, data) = toy_trainer(2, 20);
    let all = straight.run(&data, 20, 20, None).unwrap();

    let (mut first, _) = toy_trainer(2, 20);
    first.run(&data, 20, 10, None).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, 10);
    let rest = resumed.run(&data, 20, 20, None).unwrap();
    assert_eq!(rest, all[10..]);
    assert_eq!(model_digest(&resumed.model), model_digest(&straight.model));
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let (mut t, data) = toy_trainer(3, 2);
    t.run(&data, 2, 2, None).unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"OCTC");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(model_digest(&back.model), model_digest(&t.model));
    assert_eq!(back.model.config, t.model.config);
    assert_eq!(back.training.as_ref().unwrap().cfg, t.cfg);

    let bare = Checkpoint::from_model(t.model.clone()).to_bytes();
    assert!(Checkpoint::from_bytes(&bare).unwrap().training.is_none());
    assert!(Trainer::from_checkpoint(Checkpoint::from_bytes(&bare).unwrap()).is_err());

    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corrupt(_))));
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn training_loop_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (t, data) = toy_trainer(4, 4);
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..t.cfg.clone()
    };
    let (model, records) = train_loop(&data, &cfg, t.model.clone(), Some(dir.path())).unwrap();
    assert_eq!(records.len(), 4);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[3], records[2].csv_row());
    for name in ["step_0000002.octc", "step_0000004.octc", FINAL_CHECKPOINT] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let last = Checkpoint::load(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(model_digest(&last.model), model_digest(&model));
}

#[test]
fn datasets_without_usable_images_are_rejected() {
    let (t, _) = toy_trainer(0, 1);
    let empty = Dataset::new(vec![]).unwrap();
    assert!(matches!(
        train_loop(&empty, &t.cfg, t.model.clone(), None),
        Err(Error::Data(_))
    ));
    let small = Dataset::new(synthetic_set(0, 2, 64, 64)).unwrap();
    assert!(matches!(
        train_loop(&small, &t.cfg, t.model.clone(), None),
        Err(Error::Data(_))
    ));
}

#[test]
fn rate_only_training_lowers_the_rate() {
    let (t, data) = toy_trainer(6, 60);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..t.cfg.clone()
    };
    let (_, recs) = train_loop(&data, &cfg, t.model.clone(), None).unwrap();
    let mean = |r: &[StepRecord]| r.iter().map(|r| r.bpp_estimate).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&recs[..10]), mean(&recs[50..]));
    assert!(tail < 0.9 * head, "{head} -> {tail}");
    assert!(recs.iter().all(|r| r.loss == r.bpp_estimate));
}
