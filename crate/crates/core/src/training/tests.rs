use super::*;
use crate::model::{DecoderVariant, DiffMae, ModelConfig};
use crate::numerics::RngStream;
use crate::patching::{MaskConfig, MaskKind};
use crate::schedule::Schedule;

fn scalar_loss(f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>, a: &[f64], b: &[f64], shape: &[usize]) -> Result<f64> {
    let mut g = Tape::new();
    let x = g.constant(Tensor::from_f64(shape, a).unwrap());
    let y = g.constant(Tensor::from_f64(shape, b).unwrap());
    let l = f(&mut g, x, y)?;
    Ok(g.value(l).item())
}

#[test]
fn simple_loss_values() {
    let t = [0.3, -0.2, 0.9, 0.0];
    assert_eq!(scalar_loss(loss_simple, &t, &t, &[2, 2]).unwrap(), 0.0);
    let plus: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
    assert!((scalar_loss(loss_simple, &plus, &t, &[2, 2]).unwrap() - 1.0).abs() < 1e-15);
    // (1 + 4 + 0 + 9) / 4
    let l = scalar_loss(loss_simple, &[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 3.0, 1.0], &[2, 2]).unwrap();
    assert!((l - 3.5).abs() < 1e-15);
    let mut g = Tape::<f64>::new();
    let (a, b) = (g.constant(Tensor::zeros(&[2, 2])), g.constant(Tensor::zeros(&[4])));
    assert!(loss_simple(&mut g, a, b).is_err());
}

#[test]
fn feature_loss_values() {
    let l = |a: &[f64], b: &[f64]| scalar_loss(loss_feature, a, b, &[1, 2]);
    assert!(l(&[1.0, 2.0], &[2.0, 4.0]).unwrap().abs() < 1e-15);
    assert!((l(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-15);
    assert!((l(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!(l(&[0.0, 0.0], &[1.0, 1.0]).is_err());
}

#[test]
fn eps_and_x0_are_interchangeable() {
    let s = Schedule::from_config(&Default::default()).unwrap();
    let mut rng = RngStream::new(1);
    let x0: Tensor<f64> = rng.randn::<f64>(&[3, 16]).map(|v| v.tanh());
    let eps: Tensor<f64> = rng.randn(&[3, 16]);
    for t in [1, 10, 500, 1000] {
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let back = x0_from_eps(&xt, &eps, s.alpha_bar(t)).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-6, "t={t}");
    }
}

#[test]
fn lr_schedule_endpoints() {
    let cfg = OptimConfig { base_lr: 1e-3, warmup_frac: 0.1, end_lr: 1e-6, ..OptimConfig::default() };
    assert_eq!(lr_at(0, 1000, &cfg), 0.0);
    assert_eq!(lr_at(100, 1000, &cfg), 1e-3);
    assert!((lr_at(50, 1000, &cfg) - 5e-4).abs() < 1e-18);
    assert!((lr_at(1000, 1000, &cfg) - 1e-6).abs() < 1e-18);
    // midpoint of the cosine leg is halfway between base and end
    assert!((lr_at(550, 1000, &cfg) - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
    let lrs: Vec<f64> = (100..=1000).map(|s| lr_at(s, 1000, &cfg)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

fn one_param(value: f64, decay: bool) -> crate::params::ParamStore<f64> {
    let mut s = crate::params::ParamStore::new();
    s.push("w", Tensor::scalar(value), decay);
    s
}

#[test]
fn adamw_zero_grad_cases() {
    let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
    let mut p = one_param(0.7, true);
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 0.1, &cfg, None).unwrap();
    assert_eq!(p.iter().next().unwrap().value.item(), 0.7);

    let cfg = OptimConfig { weight_decay: 0.5, ..OptimConfig::default() };
    let mut p = one_param(0.7, true);
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 0.1, &cfg, None).unwrap();
    assert!((p.iter().next().unwrap().value.item() - 0.7 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
}

#[test]
fn adamw_matches_scalar_hand_trace() {
    let cfg = OptimConfig { weight_decay: 0.05, beta1: 0.9, beta2: 0.95, eps: 1e-8, ..OptimConfig::default() };
    let grads = [0.5, -1.25, 0.1, 2.0];
    let lr = 0.01;
    let mut p = one_param(1.0, true);
    let mut st = AdamState::new(&p);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (k, &g) in grads.iter().enumerate() {
        adamw_step(&mut p, &[Tensor::scalar(g)], &mut st, lr, &cfg, None).unwrap();
        let k = (k + 1) as i32;
        w *= 1.0 - lr * 0.05;
        m = 0.9 * m + 0.1 * g;
        v = 0.95 * v + 0.05 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(k));
        let vhat = v / (1.0 - 0.95f64.powi(k));
        w -= lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.iter().next().unwrap().value.item() - w).abs() < 1e-12, "step {k}");
    }
    // first step of Adam moves by ~lr regardless of gradient scale
    let mut p = one_param(0.0, false);
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &[Tensor::scalar(123.0)], &mut st, 0.01, &cfg, None).unwrap();
    assert!((p.iter().next().unwrap().value.item() + 0.01).abs() < 1e-9);
}

#[test]
fn adamw_rejects_non_finite_grads_untouched() {
    let mut p = one_param(0.7, true);
    let mut st = AdamState::new(&p);
    let err = adamw_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st, 0.1, &OptimConfig::default(), None);
    assert!(err.is_err());
    assert_eq!(p.iter().next().unwrap().value.item(), 0.7);
    assert_eq!(st.step, 0);
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 0.0]).unwrap(), Tensor::scalar(4.0)];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
}

pub(crate) fn toy_images(n: usize, grid: &crate::patching::PatchGrid, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = RngStream::new(seed);
    (0..n).map(|_| rng.randn::<f64>(&grid.image_shape()).map(|v| (0.5 * v).tanh())).collect()
}

fn toy_setup(target: Target) -> (DiffMae<f64>, TrainConfig, Vec<Tensor<f64>>) {
    let mut mc = ModelConfig::gradcheck(DecoderVariant::CrossSelf);
    if target == Target::PixelPlusFeature {
        mc.feature_dim = Some(6);
    }
    let model = DiffMae::init(mc.clone(), &mut RngStream::new(11)).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 3,
        seed: 5,
        optim: OptimConfig { base_lr: 1e-3, ..OptimConfig::default() },
        mask: MaskConfig { kind: MaskKind::Random, ratio: 0.5 },
        target,
        ..TrainConfig::default()
    };
    let data = toy_images(5, &mc.grid(), 3);
    (model, cfg, data)
}

#[test]
fn training_is_deterministic_and_finite() {
    for target in Target::ALL {
        let run = || {
            let (m, c, d) = toy_setup(target);
            let mut tr = Trainer::new(m, c).unwrap();
            (0..6).map(|_| tr.train_step(&d).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "{target:?}");
        assert!(a.iter().all(|s| s.loss.is_finite() && s.loss > 0.0));
    }
}

#[test]
fn batches_walk_epoch_permutations() {
    let (m, c, d) = toy_setup(Target::Pixel);
    let tr = Trainer::new(m, c).unwrap();
    // 5 images, batch 3: steps 1..=5 cover 15 draws = 3 epochs
    let all: Vec<usize> = (1..=5).flat_map(|s| tr.batch_indices(s, d.len())).collect();
    for epoch in all.chunks(5) {
        let mut e = epoch.to_vec();
        e.sort();
        assert_eq!(e, vec![0, 1, 2, 3, 4]);
    }
}

#[test]
fn loss_only_reads_masked_tokens() {
    let (m, c, d) = toy_setup(Target::Pixel);
    let tr = Trainer::new(m, c).unwrap();
    let inputs = tr.batch_inputs(1, &d).unwrap();
    let trace = tr.model().encode(&inputs.visible, &inputs.visible_pos, inputs.batch).unwrap();
    let pred = tr.model().decode(crate::model::Head::Pixel, &inputs.noisy, &inputs.masked_pos, &inputs.ts, &trace).unwrap();
    let manual = pred.zip_map(&inputs.target, |a, b| (a - b) * (a - b)).unwrap().sum_f64() / pred.numel() as f64;
    assert!((tr.eval_loss(1, &d).unwrap() - manual).abs() < 1e-14);
    assert_eq!(inputs.target.rows(), inputs.masked_pos.len());
}

#[test]
fn feature_target_needs_feature_decoder() {
    let (m, c, _) = toy_setup(Target::Pixel);
    let c = TrainConfig { target: Target::PixelPlusFeature, ..c };
    assert!(Trainer::new(m, c).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (m, c, d) = toy_setup(Target::Pixel);
    let mut tr = Trainer::new(m, c).unwrap();
    tr.train_step(&d).unwrap();
    let bytes = tr.checkpoint().to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, tr.checkpoint());
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x01;
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(crate::Error::Digest { .. })));
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    let mut ver = bytes.clone();
    ver[8] = 9;
    assert!(matches!(Checkpoint::<f64>::from_bytes(&ver), Err(crate::Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&tr.checkpoint(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint::<f64>(&path).unwrap(), back);
}

#[test]
fn resume_matches_uninterrupted() {
    let (m, c, d) = toy_setup(Target::PixelPlusFeature);
    let mut full = Trainer::new(m.clone(), c.clone()).unwrap();
    full.run(&d, 8, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(m, c).unwrap();
    first.run(&d, 3, |_, _| Ok(())).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::<f64>::from_bytes(&bytes).unwrap()).unwrap();
    resumed.run(&d, 8, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), full.checkpoint().to_bytes().unwrap());
}
