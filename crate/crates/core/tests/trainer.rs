use clickseg::affinity::{affinity_loss, StageAffinity};
use clickseg::autodiff::Tape;
use clickseg::checkpoint::{load_model, save_model};
use clickseg::click_attention::click_loss;
use clickseg::dataset::{generate_shapes, ShapeConfig};
use clickseg::model::BiasMode;
use clickseg::tensor::Tensor;
use clickseg::trainer::{format_log, loss_and_grads, segmentation_loss, simulate_step, total_loss, train, EpochLog, LossWeights, TrainConfig};
use clickseg::model::Model;
use clickseg::{ClickSet, Error, ModelConfig, Polarity, Sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        samples_per_epoch: 6,
        model: ModelConfig { input_size: 32, ..ModelConfig::default() },
        schedule: clickseg::interaction::ClickSchedule { max_clicks: 6, continue_probability: 0.8 },
        ..TrainConfig::default()
    }
}

fn small_data() -> Vec<Sample> {
    generate_shapes(1, 8, &ShapeConfig { size: 32, max_distractors: 1 }).unwrap()
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let cfg = TrainConfig { epochs: 0, ..small_config() };
    let out = train(&cfg, &small_data(), |_| {}).unwrap();
    let fresh = Model::<f64>::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(out.model.params().tensors(), fresh.params().tensors());
    assert!(out.log.is_empty());
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let cfg = small_config();
    let data = small_data();
    let mut seen = Vec::new();
    let a = train(&cfg, &data, |e| seen.push(e.epoch)).unwrap();
    let b = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(seen, vec![0, 1]);
    assert_eq!(a.model.params().tensors(), b.model.params().tensors());
    assert_eq!(a.log, b.log);
    assert!(a.log.iter().all(|e| e.loss.is_finite() && e.seg.is_finite() && e.click.is_finite() && e.affinity.is_finite()));
    assert_ne!(a.model.params().tensors(), Model::<f64>::new(cfg.model.clone(), cfg.seed).unwrap().params().tensors());
    let c = train(&TrainConfig { seed: 1, ..cfg.clone() }, &data, |_| {}).unwrap();
    assert_ne!(a.model.params().tensors(), c.model.params().tensors());
}

#[test]
fn learning_rate_steps_down_late() {
    let cfg = TrainConfig { epochs: 20, samples_per_epoch: 1, ..small_config() };
    assert_eq!(cfg.decay_epochs(), vec![16, 19]);
    let log = train(&TrainConfig { epochs: 3, lr_decay_epochs: Some(vec![1, 2]), ..cfg.clone() }, &small_data(), |_| {}).unwrap().log;
    let lrs: Vec<f64> = log.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![cfg.lr, cfg.lr_at(16), cfg.lr_at(19)]);
    assert!((lrs[2] - cfg.lr * 0.01).abs() < 1e-18);
}

#[test]
fn zero_weights_reduce_to_segmentation_loss() {
    let cfg = small_config();
    let model = Model::<f64>::new(cfg.model.clone(), 3).unwrap();
    let sample = &small_data()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = simulate_step(&model, sample, &cfg, &mut rng).unwrap();
    let x = model.input_tensor(&input.image, &input.clicks, &input.prev_mask).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, &p, &x, &input.clicks, BiasMode::FromClicks).unwrap();
    let terms = total_loss(&mut tape, &model, &out, &input.gt, LossWeights { click: 0.0, affinity: 0.0 }).unwrap();
    assert!(terms.click.is_none() && terms.affinity.is_none());
    let seg = segmentation_loss(&mut tape, &model, out.logits, &input.gt).unwrap();
    assert_eq!(tape.value(terms.total).item().unwrap(), tape.value(seg).item().unwrap());

    let (losses, grads) = loss_and_grads(&model, &input, LossWeights { click: 1.0, affinity: 1.0 }).unwrap();
    assert!(losses.click > 0.0 && losses.affinity > 0.0);
    assert!((losses.total - (losses.seg + losses.click + losses.affinity)).abs() < 1e-12);
    assert_eq!(grads.len(), model.params().len());
}

#[test]
fn perfect_fields_and_consistent_attention_give_zero_auxiliary_loss() {
    let mut tape = Tape::<f64>::new();
    let labels = vec![Tensor::from_f64([4, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::from_f64([1, 1], &[1.0]).unwrap()];
    let fields: Vec<_> = labels.iter().map(|l| tape.constant(l.clone())).collect();
    let c = click_loss(&mut tape, &fields, &labels).unwrap().unwrap();
    assert_eq!(tape.value(c).item().unwrap(), 0.0);
    assert!(click_loss::<f64>(&mut tape, &[], &[]).unwrap().is_none());

    let eye = tape.constant(Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let fg = tape.constant(Tensor::from_f64([4, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let bg = tape.constant(Tensor::from_f64([4, 1], &[0.0, 1.0, 1.0, 0.0]).unwrap());
    let st = StageAffinity { attention: eye, s: fields[0], x_fg: fg, x_bg: bg };
    let a = affinity_loss(&mut tape, &[st]).unwrap();
    assert_eq!(tape.value(a).item().unwrap(), 0.0);
}

#[test]
fn click_loss_needs_a_positive_click() {
    let cfg = small_config();
    let model = Model::<f64>::new(cfg.model.clone(), 4).unwrap();
    let sample = &small_data()[1];
    let mut clicks = ClickSet::new();
    clicks.push(0, 0, Polarity::Negative);
    let input = clickseg::trainer::StepInput { image: sample.image.clone(), gt: sample.gt.clone(), clicks, prev_mask: Tensor::zeros([1, 32, 32]) };
    let (losses, _) = loss_and_grads(&model, &input, LossWeights { click: 1.0, affinity: 0.0 }).unwrap();
    assert_eq!(losses.click, 0.0);
    assert_eq!(losses.total, losses.seg);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data();
    let base = small_config();
    let no_ca = ModelConfig { click_attention: false, ..base.model.clone() };
    let bad = [
        TrainConfig { lr: 0.0, ..base.clone() },
        TrainConfig { lambda_click: -1.0, ..base.clone() },
        TrainConfig { model: no_ca.clone(), lambda_click: 0.0, ..base.clone() },
        TrainConfig { beta1: 1.0, ..base.clone() },
    ];
    for cfg in &bad {
        assert!(matches!(train(cfg, &data, |_| {}), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(train(&TrainConfig { model: no_ca, lambda_click: 0.0, lambda_aff: 0.0, ..base.clone() }, &data, |_| {}).is_ok());
    assert!(train::<f64>(&base, &[], |_| {}).is_err());
    let wrong_size: Vec<Sample> = generate_shapes(1, 2, &ShapeConfig::default()).unwrap();
    assert!(train(&base, &wrong_size, |_| {}).is_err());
}

#[test]
fn config_text_round_trip() {
    let cfg = TrainConfig { lr_decay_epochs: Some(vec![3, 7]), lambda_aff: 0.5, seed: 99, ..small_config() };
    let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(parsed, cfg);
    let text = "# toy\nepochs = 4\nmodel.stage_dims = 8, 8, 16, 16  # widths\nmodel.heads = 1,1,2,2\n";
    let c = TrainConfig::parse(text).unwrap();
    assert_eq!((c.epochs, c.model.stage_dims), (4, [8, 8, 16, 16]));
    assert!(TrainConfig::parse("epochs = many").is_err());
    assert!(TrainConfig::parse("colour = red").is_err());
    assert!(TrainConfig::parse("model.heads = 1,2").is_err());
    assert!(TrainConfig::parse("no equals sign").is_err());
}

#[test]
fn log_and_checkpoint_outputs() {
    let cfg = TrainConfig { epochs: 1, ..small_config() };
    let out = train(&cfg, &small_data(), |_| {}).unwrap();
    let text = format_log(&out.log);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(EpochLog::HEADER));
    assert_eq!(lines.next().unwrap().split('\t').count(), 6);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&out.model, &path).unwrap();
    let back: Model<f64> = load_model(&path).unwrap();
    assert_eq!(back.params().tensors(), out.model.params().tensors());
    assert_eq!(back.config(), out.model.config());
    let s = &small_data()[2];
    let mut clicks = ClickSet::new();
    clicks.push(16, 16, Polarity::Positive);
    let prev = Tensor::zeros([1, 32, 32]);
    assert_eq!(back.predict(&s.image, &clicks, &prev).unwrap(), out.model.predict(&s.image, &clicks, &prev).unwrap());
}
