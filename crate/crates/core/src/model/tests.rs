use super::*;
use crate::data::{gen_toy_bias, ToyBiasSpec};
use crate::nn::MlpSpec;

fn mini_config() -> AbceiConfig {
    AbceiConfig {
        encoder_depth: 2,
        encoder_width: 8,
        mi_depth: 1,
        mi_width: 8,
        disc_depth: 1,
        disc_width: 8,
        pred_depth: 1,
        pred_width: 8,
        latent_dim: 3,
        batch_size: 10,
        seed: 7,
        ..AbceiConfig::default()
    }
}

fn mini_batch() -> Batch {
    let x = Matrix::from_fn(10, 4, |r, c| ((r * 4 + c) as f64 * 0.731).sin() * 1.5);
    let t = vec![0, 1, 0, 0, 1, 1, 0, 1, 0, 0];
    let y = (0..10).map(|i| (i as f64 * 0.37).cos() + f64::from(t[i])).collect();
    Batch { x, t, y }
}

fn net_mut(model: &mut AbceiModel, which: usize) -> &mut MlpParams {
    match which {
        0 => &mut model.encoder,
        1 => &mut model.omega,
        2 => &mut model.disc,
        3 => &mut model.head0,
        _ => &mut model.head1,
    }
}

/// Central finite differences of a loss with respect to every parameter of
/// one network, compared norm-wise to the analytic gradient.
fn fd_check(model: &AbceiModel, kind: LossKind, batch: &Batch, noise: &LossNoise) -> Vec<(usize, f64)> {
    let (_, grads) = model.loss_with_gradients(kind, batch, noise).unwrap();
    let analytic = [grads.encoder, grads.omega, grads.disc, grads.head0, grads.head1];
    let h = 1e-6;
    let mut out = Vec::new();
    for (which, g) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        let mut num = 0.0;
        let mut den = 0.0;
        let mut probe = model.clone();
        for li in 0..g.layers.len() {
            for is_bias in [false, true] {
                let len = {
                    let l = &net_mut(&mut probe, which).layers()[li];
                    if is_bias { l.bias.len() } else { l.weight.len() }
                };
                for j in 0..len {
                    let bump = |delta: f64, m: &mut AbceiModel| {
                        let l = &mut net_mut(m, which).layers_mut()[li];
                        let target = if is_bias { &mut l.bias } else { &mut l.weight };
                        target.data_mut()[j] += delta;
                    };
                    bump(h, &mut probe);
                    let up = probe.loss_value(kind, batch, noise).unwrap();
                    bump(-2.0 * h, &mut probe);
                    let down = probe.loss_value(kind, batch, noise).unwrap();
                    bump(h, &mut probe);
                    let fd = (up - down) / (2.0 * h);
                    let an = if is_bias { g.layers[li].bias.data()[j] } else { g.layers[li].weight.data()[j] };
                    num += (fd - an).powi(2);
                    den += fd.powi(2).max(an.powi(2));
                }
            }
        }
        out.push((which, num.sqrt() / den.sqrt().max(1e-12)));
    }
    out
}

#[test]
fn all_four_losses_match_finite_differences() {
    let mut model = AbceiModel::new(mini_config(), 4).unwrap();
    let batch = mini_batch();
    let noise = model.sample_noise(&batch);
    for kind in [LossKind::Mi, LossKind::Discriminator, LossKind::Adversarial, LossKind::Outcome] {
        let errs = fd_check(&model, kind, &batch, &noise);
        assert!(!errs.is_empty());
        for (net, err) in errs {
            assert!(err < 1e-4, "{kind:?} net {net}: rel err {err}");
        }
    }
}

#[test]
fn trainable_sets_per_loss() {
    let mut model = AbceiModel::new(mini_config(), 4).unwrap();
    let batch = mini_batch();
    let noise = model.sample_noise(&batch);
    let present = |k| {
        let (_, g) = model.loss_with_gradients(k, &batch, &noise).unwrap();
        [g.encoder.is_some(), g.omega.is_some(), g.disc.is_some(), g.head0.is_some(), g.head1.is_some()]
    };
    assert_eq!(present(LossKind::Mi), [true, true, false, false, false]);
    assert_eq!(present(LossKind::Discriminator), [false, false, true, false, false]);
    assert_eq!(present(LossKind::Adversarial), [true, false, false, false, false]);
    assert_eq!(present(LossKind::Outcome), [true, false, false, true, true]);
}

fn constant_net(spec: &MlpSpec, c: f64) -> MlpParams {
    let mut p = MlpParams::zeros(spec).unwrap();
    let last = p.layers().len() - 1;
    p.layers_mut()[last].bias.set(0, 0, c);
    p
}

#[test]
fn constant_critics() {
    let cfg = mini_config();
    let mut model = AbceiModel::new(cfg.clone(), 4).unwrap();
    model.omega = constant_net(&cfg.mi_spec(4).unwrap(), 2.5);
    model.disc = constant_net(&cfg.disc_spec().unwrap(), -1.3);
    let batch = mini_batch();
    let noise = model.sample_noise(&batch);
    assert!(model.loss_value(LossKind::Mi, &batch, &noise).unwrap().abs() < 1e-12);
    let ld = model.loss_value(LossKind::Discriminator, &batch, &noise).unwrap();
    assert!((ld - cfg.beta).abs() < 1e-12);
    assert!(model.loss_value(LossKind::Adversarial, &batch, &noise).unwrap().abs() < 1e-12);
}

#[test]
fn linear_mi_critic_hand_value() {
    // x = h = [0, 1], swap permutation, Ω(u, v) = u + v
    let mut tape = Tape::new();
    let omega = MlpParams::from_layers(vec![crate::nn::Layer {
        weight: Matrix::column(&[1.0, 1.0]),
        bias: Matrix::zeros(1, 1),
    }])
    .unwrap()
    .bind(&mut tape, false);
    let x = tape.constant(Matrix::column(&[0.0, 1.0]));
    let h = tape.constant(Matrix::column(&[0.0, 1.0]));
    let loss = losses::mi_loss(&mut tape, &omega, x, h, &[1, 0]).unwrap();
    // positives score 0 and 2, negatives 1 and 1
    assert!((tape.scalar(loss) - (-1.0 + 1.0)).abs() < 1e-15);
    assert!(losses::mi_loss(&mut tape, &omega, x, h, &[0]).is_err());
}

fn linear_critic(w: &[f64]) -> MlpParams {
    MlpParams::from_layers(vec![crate::nn::Layer {
        weight: Matrix::column(w),
        bias: Matrix::filled(1, 1, 0.2),
    }])
    .unwrap()
}

#[test]
fn penalty_vanishes_for_unit_norm_linear_critic() {
    let mut cfg = mini_config();
    cfg.disc_depth = 1;
    let mut model = AbceiModel::new(cfg, 4).unwrap();
    model.disc = linear_critic(&[0.6, 0.8, 0.0, 0.0, 0.0, 0.0]);
    let batch = mini_batch();
    let noise = model.sample_noise(&batch);
    let ld = model.loss_value(LossKind::Discriminator, &batch, &noise).unwrap();
    let la = model.loss_value(LossKind::Adversarial, &batch, &noise).unwrap();
    // with zero penalty the critic loss is the negated encoder loss
    assert!((ld + la).abs() < 1e-12);
}

#[test]
fn critic_and_encoder_losses_cancel_without_penalty() {
    let mut cfg = mini_config();
    cfg.beta = 0.0;
    for anchor in [Anchor::Control, Anchor::Treated] {
        cfg.anchor = anchor;
        let mut model = AbceiModel::new(cfg.clone(), 4).unwrap();
        let batch = mini_batch();
        let noise = model.sample_noise(&batch);
        let ld = model.loss_value(LossKind::Discriminator, &batch, &noise).unwrap();
        let la = model.loss_value(LossKind::Adversarial, &batch, &noise).unwrap();
        assert_eq!(ld + la, 0.0);
    }
}

#[test]
fn single_group_batch_is_a_balance_error() {
    let model = AbceiModel::new(mini_config(), 4).unwrap();
    let mut batch = mini_batch();
    batch.t = vec![1; 10];
    let mut m = model.clone();
    let noise = m.sample_noise(&batch);
    assert!(noise.plan.is_none());
    assert!(matches!(
        model.loss_value(LossKind::Adversarial, &batch, &noise),
        Err(ModelError::Balance(_))
    ));
}

#[test]
fn outcome_loss_hand_values() {
    let spec = MlpSpec::new(2, vec![3], 1).unwrap();
    let mut tape = Tape::new();
    let h0 = MlpParams::zeros(&spec).unwrap().bind(&mut tape, false);
    let h1 = MlpParams::zeros(&spec).unwrap().bind(&mut tape, false);
    let h = tape.constant(Matrix::zeros(2, 2));
    let loss = losses::outcome_loss(&mut tape, [&h0, &h1], h, &[0, 1], &[-1.0, 1.0], 0.0).unwrap();
    assert_eq!(tape.scalar(loss), 1.0);

    let mut head = MlpParams::zeros(&spec).unwrap();
    head.layers_mut()[0].weight.set(0, 0, 2.0);
    head.layers_mut()[1].weight.set(1, 0, -1.0);
    let mut tape = Tape::new();
    let b0 = head.bind(&mut tape, false);
    let b1 = MlpParams::zeros(&spec).unwrap().bind(&mut tape, false);
    let h = tape.constant(Matrix::zeros(2, 2));
    let loss = losses::outcome_loss(&mut tape, [&b0, &b1], h, &[0, 1], &[0.0, 0.0], 1e-4).unwrap();
    assert!((tape.scalar(loss) - 1e-4 * 5.0).abs() < 1e-18);
}

#[test]
fn predict_cate_hand_values() {
    let cfg = mini_config();
    let mut model = AbceiModel::new(cfg.clone(), 4).unwrap();
    model.encoder = MlpParams::zeros(&cfg.encoder_spec(4).unwrap()).unwrap();
    model.head0 = constant_net(&cfg.head_spec().unwrap(), 0.5);
    model.head1 = constant_net(&cfg.head_spec().unwrap(), 2.0);
    let x = mini_batch().x;
    assert_eq!(model.predict_cate(&x).unwrap(), vec![1.5; 10]);
    assert_eq!(model.encode(&x).unwrap(), Matrix::zeros(10, 3));
    model.head1 = model.head0.clone();
    assert_eq!(model.predict_cate(&x).unwrap(), vec![0.0; 10]);
    assert!(model.predict_cate(&Matrix::zeros(2, 3)).is_err());
}

#[test]
fn predict_cate_is_row_permutation_equivariant() {
    let model = AbceiModel::new(mini_config(), 4).unwrap();
    let x = mini_batch().x;
    let perm: Vec<usize> = (0..10).map(|i| (i * 3 + 1) % 10).collect();
    let a = model.predict_cate(&x).unwrap();
    let b = model.predict_cate(&x.select_rows(&perm)).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(a[i], b[j]);
    }
}

#[test]
fn optimizer_steps_per_batch() {
    let batch = mini_batch();
    for (variant, expected) in [
        (AbceiVariant::Full, 6),
        (AbceiVariant::NoMi, 5),
        (AbceiVariant::NoAdversarial, 2),
    ] {
        let mut model = AbceiModel::new(ablate(&mini_config(), variant), 4).unwrap();
        model.train_batch(&batch).unwrap();
        assert_eq!(model.optimizer_steps(), expected, "{variant:?}");
    }
}

#[test]
fn gradient_isolation_between_lines() {
    let mut model = AbceiModel::new(mini_config(), 4).unwrap();
    let batch = mini_batch();
    let noise = model.sample_noise(&batch);
    let enc_before = model.encoder.clone();
    let disc_before = model.disc.clone();
    model.step(LossKind::Discriminator, &batch, &noise).unwrap();
    assert_eq!(model.encoder, enc_before);
    assert_ne!(model.disc, disc_before);

    let disc_before = model.disc.clone();
    model.step(LossKind::Adversarial, &batch, &noise).unwrap();
    assert_eq!(model.disc, disc_before);
    assert_ne!(model.encoder, enc_before);
}

#[test]
fn ablations_freeze_their_networks() {
    let batch = mini_batch();
    let mut no_mi = AbceiModel::new(ablate(&mini_config(), AbceiVariant::NoMi), 4).unwrap();
    let omega = no_mi.omega.clone();
    no_mi.train_batch(&batch).unwrap();
    assert_eq!(no_mi.omega, omega);

    let mut no_adv = AbceiModel::new(ablate(&mini_config(), AbceiVariant::NoAdversarial), 4).unwrap();
    let disc = no_adv.disc.clone();
    no_adv.train_batch(&batch).unwrap();
    assert_eq!(no_adv.disc, disc);

    assert_eq!(ablate(&mini_config(), AbceiVariant::Full), mini_config());
}

#[test]
fn config_validation() {
    let mut c = AbceiConfig::default();
    assert!(c.validate().is_ok());
    c.optimizer = OptimizerKind::Rmsprop;
    assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    let mut c = AbceiConfig::default();
    c.lambda = 0.0;
    assert!(c.validate().is_err());
    let mut c = AbceiConfig::default();
    c.batch_size = 1;
    assert!(c.validate().is_err());
    let parsed: AbceiConfig = serde_json::from_str(r#"{"optimizer": "rmsprop", "anchor": "treated"}"#).unwrap();
    assert_eq!(parsed.anchor, Anchor::Treated);
    assert!(parsed.validate().is_err());
    assert!(serde_json::from_str::<AbceiConfig>(r#"{"unknown": 1}"#).is_err());
}

#[test]
fn encoder_output_shape_under_wide_config() {
    let model = AbceiModel::new(AbceiConfig::default(), 25).unwrap();
    assert_eq!(model.encode(&Matrix::zeros(7, 25)).unwrap().shape(), (7, 200));
}

fn small_toy(seed: u64) -> (Dataset, Dataset) {
    let spec = ToyBiasSpec {
        n_control: 120,
        n_treated: 60,
        ..ToyBiasSpec::desk(seed)
    };
    let ds = gen_toy_bias(&spec).unwrap();
    let s = crate::data::split(&ds, &crate::data::SplitSpec::new(seed)).unwrap();
    (s.train, s.val)
}

fn quick_config(seed: u64) -> AbceiConfig {
    AbceiConfig {
        encoder_width: 16,
        mi_width: 16,
        disc_width: 16,
        pred_width: 16,
        latent_dim: 8,
        batch_size: 50,
        seed,
        ..AbceiConfig::desk()
    }
}

#[test]
fn fifty_epochs_stay_finite_and_deterministic() {
    let (train, val) = small_toy(3);
    let mut cfg = quick_config(3);
    cfg.max_epochs = 50;
    cfg.patience = 1000;
    let run = || {
        let mut m = AbceiModel::new(cfg.clone(), train.k()).unwrap();
        let report = m.fit(&train, &val, |_, _| {}).unwrap();
        (report, m.predict_cate(val.x()).unwrap())
    };
    let (a, tau_a) = run();
    assert_eq!(a.trace.len(), 50);
    assert!(a.trace.iter().all(|r| r.is_finite()));
    let (b, tau_b) = run();
    assert_eq!(a, b);
    assert_eq!(tau_a, tau_b);
}

#[test]
fn fit_restores_best_epoch() {
    let (train, val) = small_toy(4);
    let mut cfg = quick_config(4);
    cfg.max_epochs = 30;
    cfg.patience = 5;
    cfg.early_stop = EarlyStop::ValMse;
    let mut m = AbceiModel::new(cfg, train.k()).unwrap();
    let report = m.fit(&train, &val, |_, _| {}).unwrap();
    let best = &report.trace[report.best_epoch - 1];
    assert_eq!(best.val_mse, report.best_score);
    assert!((m.factual_mse(&val).unwrap() - best.val_mse).abs() < 1e-12);
    assert!(report.trace.iter().all(|r| r.val_mse >= report.best_score));
}

#[test]
fn checkpoint_roundtrip() {
    let model = AbceiModel::new(mini_config(), 4).unwrap();
    let json = serde_json::to_string(&model.to_checkpoint()).unwrap();
    let back = AbceiModel::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
    let x = mini_batch().x;
    assert_eq!(model.predict_cate(&x).unwrap(), back.predict_cate(&x).unwrap());
    assert_eq!(back.to_checkpoint(), model.to_checkpoint());
}

#[test]
fn trace_csv_header_and_rows() {
    let rec = EpochRecord {
        epoch: 1,
        l_mi: -0.5,
        l_d: 2.0,
        l_phi: 0.1,
        l_pred: 1.5,
        val_mse: 1.25,
        mi_estimate: 0.5,
    };
    let mut out = Vec::new();
    write_trace_csv(&[rec, rec], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,l_mi,l_d,l_phi,l_pred,val_mse,mi_estimate");
    assert_eq!(lines[1], "1,-0.5,2,0.1,1.5,1.25,0.5");
    assert_eq!(lines.len(), 3);
}

#[test]
fn dv_estimator_learns_dependence() {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 500;
    let rho: f64 = 0.9;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        xs.push(a);
        ys.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    let (x, y) = (Matrix::column(&xs), Matrix::column(&ys));
    let adam = crate::nn::AdamConfig {
        lr: 1e-2,
        ..Default::default()
    };
    let mut est = DvEstimator::new(1, 1, vec![16], adam, 2).unwrap();
    let perm = est.random_perm(n);
    let before = est.estimate(&x, &y, &perm).unwrap();
    for _ in 0..200 {
        est.step(&x, &y).unwrap();
    }
    let after = est.estimate(&x, &y, &perm).unwrap();
    assert!(after > before + 0.3, "before {before}, after {after}");
}
