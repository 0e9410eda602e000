//! Training: composed loss, AdamW and the simulated-click training loop.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{aggregate_attention, affinity_loss, pooled_probabilities, StageAffinity};
use crate::autodiff::{Tape, Var};
use crate::click::ClickSet;
use crate::click_attention::{click_loss, patch_labels};
use crate::config::ModelConfig;
use crate::dataset::{augment, Sample};
use crate::error::{Error, Result};
use crate::interaction::{initial_clicks, iterative_clicks, ClickSchedule, InitialClickParams};
use crate::mask::Mask;
use crate::model::{ForwardOutput, Model};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[P_EPS, 1 − P_EPS]` before the BCE.
pub const P_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by 10; `None` means 80%
    /// and 95% of `epochs`.
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lambda_click: f64,
    pub lambda_aff: f64,
    pub seed: u64,
    pub augment: bool,
    pub schedule: ClickSchedule,
    pub initial: InitialClickParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            samples_per_epoch: 200,
            lr: 1e-3,
            lr_decay_epochs: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            lambda_click: 1.0,
            lambda_aff: 1.0,
            seed: 0,
            augment: true,
            schedule: ClickSchedule::default(),
            initial: InitialClickParams::default(),
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<Vec<T>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.lambda_click >= 0.0 && self.lambda_aff >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.schedule.continue_probability) || self.schedule.max_clicks == 0 {
            return Err(Error::Config("invalid click schedule".into()));
        }
        if self.lambda_aff > 0.0 && !self.model.click_attention {
            return Err(Error::Config("lambda_aff > 0 needs model.click_attention = true".into()));
        }
        if self.lambda_click > 0.0 && !self.model.click_attention {
            return Err(Error::Config("lambda_click > 0 needs model.click_attention = true".into()));
        }
        Ok(())
    }

    pub fn decay_epochs(&self) -> Vec<usize> {
        self.lr_decay_epochs.clone().unwrap_or_else(|| {
            vec![
                (self.epochs as f64 * 0.8).round() as usize,
                (self.epochs as f64 * 0.95).round() as usize,
            ]
        })
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs().iter().filter(|&&e| epoch >= e).count();
        self.lr * 0.1f64.powi(drops as i32)
    }

    /// Parses `key = value` lines; `#` starts a comment. Unlisted keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let m = &mut c.model;
            match key {
                "epochs" => c.epochs = parse(key, value)?,
                "samples_per_epoch" => c.samples_per_epoch = parse(key, value)?,
                "lr" => c.lr = parse(key, value)?,
                "lr_decay_epochs" => {
                    c.lr_decay_epochs = if value.is_empty() || value == "auto" {
                        None
                    } else {
                        Some(value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?)
                    }
                }
                "beta1" => c.beta1 = parse(key, value)?,
                "beta2" => c.beta2 = parse(key, value)?,
                "eps" => c.eps = parse(key, value)?,
                "weight_decay" => c.weight_decay = parse(key, value)?,
                "lambda_click" => c.lambda_click = parse(key, value)?,
                "lambda_aff" => c.lambda_aff = parse(key, value)?,
                "seed" => c.seed = parse(key, value)?,
                "augment" => c.augment = parse(key, value)?,
                "max_clicks" => c.schedule.max_clicks = parse(key, value)?,
                "continue_probability" => c.schedule.continue_probability = parse(key, value)?,
                "negative_margin" => c.initial.margin = parse(key, value)?,
                "max_negatives" => c.initial.max_negatives = parse(key, value)?,
                "model.input_size" => m.input_size = parse(key, value)?,
                "model.patch_size" => m.patch_size = parse(key, value)?,
                "model.stage_dims" => m.stage_dims = parse_list(key, value)?,
                "model.heads" => m.heads = parse_list(key, value)?,
                "model.layers" => m.layers = parse_list(key, value)?,
                "model.reduction" => m.reduction = parse_list(key, value)?,
                "model.n_cls" => m.n_cls = parse(key, value)?,
                "model.mapping_dim" => m.mapping_dim = parse(key, value)?,
                "model.decoder_dim" => m.decoder_dim = parse(key, value)?,
                "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
                "model.click_radius" => m.click_radius = parse(key, value)?,
                "model.click_attention" => m.click_attention = parse(key, value)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Inverse of [`Self::parse`], listing every key.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let decay = self.lr_decay_epochs.as_ref().map_or("auto".to_string(), |v| join(v));
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("samples_per_epoch", self.samples_per_epoch.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay_epochs", decay);
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lambda_click", self.lambda_click.to_string());
        kv("lambda_aff", self.lambda_aff.to_string());
        kv("seed", self.seed.to_string());
        kv("augment", self.augment.to_string());
        kv("max_clicks", self.schedule.max_clicks.to_string());
        kv("continue_probability", self.schedule.continue_probability.to_string());
        kv("negative_margin", self.initial.margin.to_string());
        kv("max_negatives", self.initial.max_negatives.to_string());
        kv("model.input_size", m.input_size.to_string());
        kv("model.patch_size", m.patch_size.to_string());
        kv("model.stage_dims", join(&m.stage_dims));
        kv("model.heads", join(&m.heads));
        kv("model.layers", join(&m.layers));
        kv("model.reduction", join(&m.reduction));
        kv("model.n_cls", m.n_cls.to_string());
        kv("model.mapping_dim", m.mapping_dim.to_string());
        kv("model.decoder_dim", m.decoder_dim.to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        kv("model.click_radius", m.click_radius.to_string());
        kv("model.click_attention", m.click_attention.to_string());
        s
    }
}

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub click: f64,
    pub affinity: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub seg: Var,
    pub click: Option<Var>,
    pub affinity: Option<Var>,
}

/// Segmentation BCE on the upsampled probability map.
pub fn segmentation_loss<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, logits: Var, gt: &Mask) -> Result<Var> {
    let prob = model.upsampled_probability(tape, logits)?;
    let prob = tape.clamp(prob, S::lit(P_EPS), S::lit(1.0 - P_EPS))?;
    let y = tape.constant(gt.to_tensor());
    tape.bce(prob, y)
}

/// `seg + λ_click·click + λ_aff·affinity`. A term with zero weight is not
/// built; the click term is also skipped when no stage has a click-derived
/// field.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    out: &ForwardOutput,
    gt: &Mask,
    weights: LossWeights,
) -> Result<LossTerms> {
    let seg = segmentation_loss(tape, model, out.logits, gt)?;
    let mut total = seg;

    let mut click = None;
    if weights.click > 0.0 {
        let mut fields = Vec::new();
        let mut labels = Vec::new();
        for (i, st) in out.stages.iter().enumerate() {
            if let Some(sim) = st.similarity.filter(|s| s.per_click.is_some()) {
                fields.push(sim.field);
                labels.push(patch_labels(gt, i, model.config())?);
            }
        }
        click = click_loss(tape, &fields, &labels)?;
        if let Some(c) = click {
            let weighted = tape.scale(c, S::lit(weights.click))?;
            total = tape.add(total, weighted)?;
        }
    }

    let mut affinity = None;
    if weights.affinity > 0.0 {
        let prob = tape.sigmoid(out.logits)?;
        let mut stages = Vec::with_capacity(out.stages.len());
        for (i, st) in out.stages.iter().enumerate() {
            let s = st
                .bias
                .ok_or_else(|| Error::Config("affinity loss needs click attention enabled".into()))?;
            let maps: Vec<Var> = st.attention.iter().map(|r| r.post).collect();
            let attention = aggregate_attention(tape, &maps)?;
            let (x_fg, x_bg) = pooled_probabilities(tape, prob, i, model.config())?;
            stages.push(StageAffinity {
                attention,
                s,
                x_fg,
                x_bg,
            });
        }
        let a = affinity_loss(tape, &stages)?;
        let weighted = tape.scale(a, S::lit(weights.affinity))?;
        total = tape.add(total, weighted)?;
        affinity = Some(a);
    }

    Ok(LossTerms {
        total,
        seg,
        click,
        affinity,
    })
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamStore<S>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![S::zero(); t.numel()]).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Vec<S>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidInput(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (t, g) in params.tensors().iter().zip(grads) {
            if t.numel() != g.len() {
                return Err(Error::shape("adamw_step", t.shape(), &[g.len()]));
            }
        }
        self.step += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::one() - S::lit(self.beta1.powi(self.step));
        let c2 = S::one() - S::lit(self.beta2.powi(self.step));
        let (lr, eps, wd) = (S::lit(lr), S::lit(self.eps), S::lit(self.weight_decay));
        for (k, (t, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seg: f64,
    pub click: f64,
    pub affinity: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tlr\tloss\tseg\tclick\taffinity";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, self.loss, self.seg, self.click, self.affinity
        )
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.to_tsv());
        s.push('\n');
    }
    s
}

/// Training state for one gradient step.
#[derive(Clone, Debug)]
pub struct StepInput<S> {
    pub image: Tensor<S>,
    pub gt: Mask,
    pub clicks: ClickSet,
    pub prev_mask: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub seg: f64,
    pub click: f64,
    pub affinity: f64,
}

/// Forward, loss and gradients for one training input; returns the losses
/// and per-parameter gradients without updating anything.
pub fn loss_and_grads<S: Scalar>(
    model: &Model<S>,
    input: &StepInput<S>,
    weights: LossWeights,
) -> Result<(StepLosses, Vec<Vec<S>>)> {
    let x = model.input_tensor(&input.image, &input.clicks, &input.prev_mask)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, &p, &x, &input.clicks, model.default_bias())?;
    let terms = total_loss(&mut tape, model, &out, &input.gt, weights)?;
    tape.backward(terms.total)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].to_f64_lossy());
    let losses = StepLosses {
        total: value(Some(terms.total)),
        seg: value(Some(terms.seg)),
        click: value(terms.click),
        affinity: value(terms.affinity),
    };
    let grads = p
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); tape.value(v).numel()],
        })
        .collect();
    Ok((losses, grads))
}

/// Draws one simulated training input for `sample`.
pub fn simulate_step<S: Scalar>(
    model: &Model<S>,
    sample: &Sample<S>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepInput<S>> {
    let sample = if config.augment {
        augment(sample, rng)?
    } else {
        sample.clone()
    };
    let initial = initial_clicks(&sample.gt, &config.initial, rng)?;
    let (clicks, prev_mask) = iterative_clicks(model, &sample.image, &sample.gt, initial, &config.schedule, rng)?;
    Ok(StepInput {
        image: sample.image,
        gt: sample.gt,
        clicks,
        prev_mask,
    })
}

pub struct TrainOutput<S> {
    pub model: Model<S>,
    pub log: Vec<EpochLog>,
}

/// Trains from scratch. Weights are initialized from `config.seed`, and the
/// same seed drives sampling, augmentation and click simulation, so a run
/// is a pure function of `(config, dataset)`. `on_epoch` sees each epoch's
/// log as it completes.
pub fn train<S: Scalar>(
    config: &TrainConfig,
    dataset: &[Sample<S>],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput<S>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let n = config.model.input_size;
    if let Some(bad) = dataset.iter().find(|s| s.gt.height() != n || s.gt.width() != n) {
        return Err(Error::InvalidInput(format!("sample {} is not {n}x{n}", bad.id)));
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut opt = AdamW::new(model.params(), config.beta1, config.beta2, config.eps, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let weights = LossWeights {
        click: config.lambda_click,
        affinity: config.lambda_aff,
    };
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut sums = [0.0f64; 4];
        for step in 0..config.samples_per_epoch {
            let sample = &dataset[rng.gen_range(0..dataset.len())];
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step },
                other => other,
            };
            let input = simulate_step(&model, sample, config, &mut rng).map_err(diverged)?;
            let (losses, grads) = loss_and_grads(&model, &input, weights).map_err(diverged)?;
            if !losses.total.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            opt.step(model.params_mut(), &grads, lr)?;
            if model.params().tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, step });
            }
            for (s, v) in sums.iter_mut().zip([losses.total, losses.seg, losses.click, losses.affinity]) {
                *s += v;
            }
        }
        let k = config.samples_per_epoch.max(1) as f64;
        let entry = EpochLog {
            epoch,
            lr,
            loss: sums[0] / k,
            seg: sums[1] / k,
            click: sums[2] / k,
            affinity: sums[3] / k,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutput { model, log })
}
