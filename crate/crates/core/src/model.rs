//! Four-stage hierarchical patch transformer with an all-MLP decoder.
//!
//! Stage 1 embeds `p×p` patches of the 6-channel input (image, positive and
//! negative click maps, previous mask) and adds a learned position
//! embedding; later stages merge 2×2 neighbourhoods. Each stage runs
//! pre-norm transformer blocks whose attention can be biased by the click
//! similarity field of that stage.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::click::{render_click_maps, ClickSet};
use crate::click_attention::{compute_similarity, positive_patches, MappingHead, SimilarityVars};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_map, merge_index, patchify_index, upsample_nearest_index};
use crate::mask::Mask;
use crate::nn::{uniform, Linear, Norm, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of input channels after assembly.
pub const INPUT_CHANNELS: usize = 6;

/// Concatenates image `[3,H,W]`, click maps `[2,H,W]` and previous mask
/// `[1,H,W]` into `[6,H,W]`.
pub fn assemble_input<S: Scalar>(image: &Tensor<S>, click_maps: &Tensor<S>, prev_mask: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::InvalidShape(format!("image must be [3,H,W], got {s:?}"))),
    };
    if click_maps.shape() != [2, h, w] {
        return Err(Error::shape("assemble_input", &[2, h, w], click_maps.shape()));
    }
    if prev_mask.shape() != [1, h, w] {
        return Err(Error::shape("assemble_input", &[1, h, w], prev_mask.shape()));
    }
    let unit = |v: &S| *v >= S::zero() && *v <= S::one();
    if !image.data().iter().all(unit) {
        return Err(Error::InvalidInput("image values must lie in [0, 1]".into()));
    }
    if !prev_mask.data().iter().all(unit) {
        return Err(Error::InvalidInput("previous mask values must lie in [0, 1]".into()));
    }
    if !click_maps.data().iter().all(|&v| v == S::zero() || v == S::one()) {
        return Err(Error::InvalidInput("click maps must be binary".into()));
    }
    Tensor::concat_leading(&[image, click_maps, prev_mask])
}

/// How attention logits are scaled before the softmax.
#[derive(Clone, Copy, Debug)]
pub enum BiasMode<'a, S> {
    /// Plain attention.
    Off,
    /// Scale by the similarity field computed from the positive clicks.
    FromClicks,
    /// Scale by caller-supplied per-stage fields, each `[L_i, 1]`.
    Fixed(&'a [Tensor<S>]),
}

/// Pre- and post-softmax attention of one head.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub stage: usize,
    pub layer: usize,
    pub head: usize,
    /// `QKᵀ/√d`, before any click scaling.
    pub pre: Var,
    /// Row-stochastic attention actually applied to `V`.
    pub post: Var,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    /// Stage output features `f_i`, `[L_i, C_i]`.
    pub features: Var,
    /// Field used to scale attention, `[L_i, 1]`.
    pub bias: Option<Var>,
    /// Similarity computed from clicks, when [`BiasMode::FromClicks`].
    pub similarity: Option<SimilarityVars>,
    /// Distinct positively clicked patches at this stage.
    pub clicked_patches: Vec<usize>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Logits on the stage-1 grid, `[1, g, g]`.
    pub logits: Var,
    pub stages: Vec<StageOutput>,
}

/// Result of a gradient-free prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    /// Foreground probability at full resolution, `[1, H, W]`.
    pub prob: Tensor<S>,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug)]
struct SpatialReduction {
    proj: Linear,
    norm: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    sr: Option<SpatialReduction>,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Linear,
    embed_norm: Norm,
    mapping: MappingHead,
    blocks: Vec<Block>,
    out_norm: Norm,
}

#[derive(Clone, Debug)]
struct Decoder {
    project: Vec<Linear>,
    fuse: Linear,
    head: Linear,
}

/// Weights plus the layout that addresses them.
#[derive(Clone, Debug)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    pos_embed: ParamId,
    stages: Vec<Stage>,
    decoder: Decoder,
}

impl<S: Scalar> Model<S> {
    /// Freshly initialized weights drawn from ChaCha8 seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let p0 = config.patch_size;
        let pos_embed = store.add(
            "pos_embed",
            uniform(rng, vec![config.num_patches(0), config.stage_dims[0]], 0.1),
        );
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let c = config.stage_dims[i];
            let in_dim = if i == 0 {
                INPUT_CHANNELS * p0 * p0
            } else {
                4 * config.stage_dims[i - 1]
            };
            let name = format!("stage{i}");
            let embed = Linear::init(&mut store, rng, &format!("{name}.embed"), in_dim, c);
            let embed_norm = Norm::init(&mut store, &format!("{name}.embed_norm"), c);
            let mapping = MappingHead::init(&mut store, rng, &format!("{name}.mapping"), c, config.mapping_dim);
            let hidden = c * config.mlp_ratio;
            let r = config.reduction[i];
            let blocks = (0..config.layers[i])
                .map(|l| {
                    let b = format!("{name}.block{l}");
                    let norm1 = Norm::init(&mut store, &format!("{b}.norm1"), c);
                    let q = Linear::init(&mut store, rng, &format!("{b}.attn.q"), c, c);
                    let k = Linear::init(&mut store, rng, &format!("{b}.attn.k"), c, c);
                    let v = Linear::init(&mut store, rng, &format!("{b}.attn.v"), c, c);
                    let out = Linear::init(&mut store, rng, &format!("{b}.attn.out"), c, c);
                    let sr = (r > 1).then(|| SpatialReduction {
                        proj: Linear::init(&mut store, rng, &format!("{b}.attn.sr"), r * r * c, c),
                        norm: Norm::init(&mut store, &format!("{b}.attn.sr_norm"), c),
                    });
                    let norm2 = Norm::init(&mut store, &format!("{b}.norm2"), c);
                    let fc1 = Linear::init(&mut store, rng, &format!("{b}.mlp.fc1"), c, hidden);
                    let fc2 = Linear::init(&mut store, rng, &format!("{b}.mlp.fc2"), hidden, c);
                    Block {
                        norm1,
                        attn: Attention { q, k, v, out, sr },
                        norm2,
                        fc1,
                        fc2,
                    }
                })
                .collect();
            let out_norm = Norm::init(&mut store, &format!("{name}.out_norm"), c);
            stages.push(Stage {
                embed,
                embed_norm,
                mapping,
                blocks,
                out_norm,
            });
        }
        let d = config.decoder_dim;
        let project = (0..NUM_STAGES)
            .map(|i| Linear::init(&mut store, rng, &format!("decoder.project{i}"), config.stage_dims[i], d))
            .collect();
        let fuse = Linear::init(&mut store, rng, "decoder.fuse", NUM_STAGES * d, d);
        let head = Linear::init(&mut store, rng, "decoder.head", d, config.n_cls);
        Ok(Model {
            config,
            params: store,
            pos_embed,
            stages,
            decoder: Decoder { project, fuse, head },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Records the weights on `tape`; trainable ones accumulate gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Bias mode implied by the configuration.
    pub fn default_bias(&self) -> BiasMode<'static, S> {
        if self.config.click_attention {
            BiasMode::FromClicks
        } else {
            BiasMode::Off
        }
    }

    /// Renders click maps and assembles the 6-channel input.
    pub fn input_tensor(&self, image: &Tensor<S>, clicks: &ClickSet, prev_mask: &Tensor<S>) -> Result<Tensor<S>> {
        let n = self.config.input_size;
        if image.shape() != [3, n, n] {
            return Err(Error::shape("model input", &[3, n, n], image.shape()));
        }
        let maps = render_click_maps(clicks, n, n, self.config.click_radius)?;
        assemble_input(image, &maps, prev_mask)
    }

    /// Full forward pass from an assembled `[6,H,W]` input.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        input: &Tensor<S>,
        clicks: &ClickSet,
        bias: BiasMode<'_, S>,
    ) -> Result<ForwardOutput> {
        if p.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        let n = self.config.input_size;
        if input.shape() != [INPUT_CHANNELS, n, n] {
            return Err(Error::shape("forward", &[INPUT_CHANNELS, n, n], input.shape()));
        }
        clicks.check_bounds(n, n)?;
        if let BiasMode::Fixed(fields) = bias {
            if fields.len() != NUM_STAGES {
                return Err(Error::InvalidInput(format!("{} fixed fields for {NUM_STAGES} stages", fields.len())));
            }
        }

        let mut prev = self.patch_embed(tape, p, input)?;
        let mut stage_outputs = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let c = self.config.stage_dims[i];
            let side = self.config.grid_side(i);
            let mut h = if i == 0 {
                tape.add(prev, p[self.pos_embed.index()])?
            } else {
                let prev_c = self.config.stage_dims[i - 1];
                let merged = tape.gather(prev, merge_index(2 * side, prev_c, 2), vec![side * side, 4 * prev_c])?;
                stage.embed.forward(tape, p, merged)?
            };
            h = stage.embed_norm.forward(tape, p, h)?;

            let clicked_patches = positive_patches(clicks, i, &self.config)?;
            let (field, similarity) = match bias {
                BiasMode::Off => (None, None),
                BiasMode::FromClicks => {
                    let sim = compute_similarity(tape, p, h, &clicked_patches, &stage.mapping)?;
                    (Some(sim.field), Some(sim))
                }
                BiasMode::Fixed(fields) => {
                    let f = &fields[i];
                    if f.shape() != [side * side, 1] {
                        return Err(Error::shape("fixed bias", &[side * side, 1], f.shape()));
                    }
                    (Some(tape.constant(f.clone())), None)
                }
            };

            let mut attention = Vec::new();
            for (l, block) in stage.blocks.iter().enumerate() {
                let normed = block.norm1.forward(tape, p, h)?;
                let a = self.attention(tape, p, &block.attn, normed, field, i, l, side, c, &mut attention)?;
                h = tape.add(h, a)?;
                let normed = block.norm2.forward(tape, p, h)?;
                let m = block.fc1.forward(tape, p, normed)?;
                let m = tape.gelu(m)?;
                let m = block.fc2.forward(tape, p, m)?;
                h = tape.add(h, m)?;
            }
            let features = stage.out_norm.forward(tape, p, h)?;
            stage_outputs.push(StageOutput {
                features,
                bias: field,
                similarity,
                clicked_patches,
                attention,
            });
            prev = features;
        }

        let features: Vec<Var> = stage_outputs.iter().map(|s| s.features).collect();
        let logits = self.decode(tape, p, &features)?;
        Ok(ForwardOutput {
            logits,
            stages: stage_outputs,
        })
    }

    /// Flattens `p×p` patches of a `[6,H,W]` input and projects them to
    /// `C_1`, giving `[L, C_1]` before the position embedding.
    pub fn patch_embed(&self, tape: &mut Tape<S>, p: &[Var], input: &Tensor<S>) -> Result<Var> {
        let n = self.config.input_size;
        let p0 = self.config.patch_size;
        if input.shape() != [INPUT_CHANNELS, n, n] {
            return Err(Error::shape("patch_embed", &[INPUT_CHANNELS, n, n], input.shape()));
        }
        let x = tape.constant(input.clone());
        let l0 = self.config.num_patches(0);
        let patches = tape.gather(x, patchify_index(INPUT_CHANNELS, n, n, p0), vec![l0, INPUT_CHANNELS * p0 * p0])?;
        self.stages[0].embed.forward(tape, p, patches)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        attn: &Attention,
        x: Var,
        field: Option<Var>,
        stage: usize,
        layer: usize,
        side: usize,
        c: usize,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let heads = self.config.heads[stage];
        let q = attn.q.forward(tape, p, x)?;
        let source = match attn.sr {
            Some(sr) => {
                let r = self.config.reduction[stage];
                let out_side = side / r;
                let merged = tape.gather(x, merge_index(side, c, r), vec![out_side * out_side, r * r * c])?;
                let reduced = sr.proj.forward(tape, p, merged)?;
                sr.norm.forward(tape, p, reduced)?
            }
            None => x,
        };
        let k = attn.k.forward(tape, p, source)?;
        let v = attn.v.forward(tape, p, source)?;
        let (joined, maps) = multi_head_attention(tape, q, k, v, heads, field)?;
        records.extend(maps.into_iter().enumerate().map(|(head, (pre, post))| AttentionRecord {
            stage,
            layer,
            head,
            pre,
            post,
        }));
        attn.out.forward(tape, p, joined)
    }

    /// All-MLP decoder: per-stage projection to the decoder width, nearest
    /// upsampling to the stage-1 grid, concatenation, fusion and a linear
    /// head. Returns logits `[1, g, g]`.
    pub fn decode(&self, tape: &mut Tape<S>, p: &[Var], features: &[Var]) -> Result<Var> {
        if features.len() != NUM_STAGES {
            return Err(Error::InvalidInput(format!("decoder needs {NUM_STAGES} stages, got {}", features.len())));
        }
        let d = self.config.decoder_dim;
        let g = self.config.grid_side(0);
        let mut parts = Vec::with_capacity(NUM_STAGES);
        for (i, &f) in features.iter().enumerate() {
            let proj = self.decoder.project[i].forward(tape, p, f)?;
            let up = if i == 0 {
                proj
            } else {
                let side = self.config.grid_side(i);
                tape.gather(proj, upsample_nearest_index(side, d, 1 << i), vec![g * g, d])?
            };
            parts.push(up);
        }
        let cat = tape.concat(&parts)?;
        let fused = self.decoder.fuse.forward(tape, p, cat)?;
        let fused = tape.gelu(fused)?;
        let logits = self.decoder.head.forward(tape, p, fused)?;
        tape.reshape(logits, vec![1, g, g])
    }

    /// Sigmoid probabilities upsampled to full resolution, `[1, H, W]`, as a
    /// tape node so a loss can be attached.
    pub fn upsampled_probability(&self, tape: &mut Tape<S>, logits: Var) -> Result<Var> {
        let g = self.config.grid_side(0);
        let n = self.config.input_size;
        let prob = tape.sigmoid(logits)?;
        tape.resample(prob, Arc::new(bilinear_map(g, g, n, n)?))
    }

    /// Gradient-free prediction with the configured bias mode.
    pub fn predict(&self, image: &Tensor<S>, clicks: &ClickSet, prev_mask: &Tensor<S>) -> Result<Prediction<S>> {
        let input = self.input_tensor(image, clicks, prev_mask)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, &input, clicks, self.default_bias())?;
        predict_mask(tape.value(out.logits), self.config.input_size, self.config.input_size)
    }

    /// Per-stage similarity field and aggregated attention for display.
    pub fn analyze(&self, image: &Tensor<S>, clicks: &ClickSet, prev_mask: &Tensor<S>) -> Result<Vec<StageAnalysis<S>>> {
        let input = self.input_tensor(image, clicks, prev_mask)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, &input, clicks, BiasMode::FromClicks)?;
        let mut result = Vec::with_capacity(NUM_STAGES);
        for (i, st) in out.stages.iter().enumerate() {
            let maps: Vec<Var> = st.attention.iter().map(|r| r.post).collect();
            let agg = crate::affinity::aggregate_attention(&mut tape, &maps)?;
            let similarity = match st.bias {
                Some(v) => tape.value(v).clone(),
                None => Tensor::ones([self.config.num_patches(i), 1]),
            };
            result.push(StageAnalysis {
                stage: i,
                side: self.config.grid_side(i),
                similarity,
                attention: tape.value(agg).clone(),
                clicked_patches: st.clicked_patches.clone(),
            });
        }
        Ok(result)
    }
}

/// Scaled dot-product attention over `heads` column blocks of `q` (`[L, C]`),
/// `k` and `v` (`[L_k, C]`). With `bias` (`[L, 1]`), row `j` of the scaled
/// logits is multiplied by `bias[j]` before the softmax. Returns the
/// concatenated head outputs and each head's `(pre, post)` maps.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<(Var, Vec<(Var, Var)>)> {
    let c = tape.shape(q)[1];
    if heads == 0 || c % heads != 0 || tape.shape(k)[1] != c || tape.shape(v)[1] != c {
        return Err(Error::InvalidShape(format!(
            "{heads} heads over q {:?}, k {:?}, v {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let d = c / heads;
    let scale = S::one() / S::lit(d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for head in 0..heads {
        let (a, b) = (head * d, (head + 1) * d);
        let qh = tape.slice_cols(q, a, b)?;
        let kh = tape.slice_cols(k, a, b)?;
        let vh = tape.slice_cols(v, a, b)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let pre = tape.scale(logits, scale)?;
        let biased = match bias {
            Some(s) => tape.mul(pre, s)?,
            None => pre,
        };
        let post = tape.softmax(biased, 1)?;
        maps.push((pre, post));
        outs.push(tape.matmul(post, vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
    Ok((joined, maps))
}

/// Display data for one stage.
#[derive(Clone, Debug)]
pub struct StageAnalysis<S> {
    pub stage: usize,
    /// Patch grid side.
    pub side: usize,
    /// `[L, 1]` similarity field (all ones without positive clicks).
    pub similarity: Tensor<S>,
    /// Aggregated attention `[L, L_k]`.
    pub attention: Tensor<S>,
    pub clicked_patches: Vec<usize>,
}

/// Sigmoid, bilinear upsampling of a `[1, g, g]` logit grid to `H×W`, and a
/// strict `> 0.5` threshold.
pub fn predict_mask<S: Scalar>(logits: &Tensor<S>, height: usize, width: usize) -> Result<Prediction<S>> {
    let (gh, gw) = match *logits.shape() {
        [1, gh, gw] => (gh, gw),
        ref s => return Err(Error::InvalidShape(format!("logits must be [1,h,w], got {s:?}"))),
    };
    let prob: Vec<S> = logits.data().iter().map(|&v| crate::autodiff::sigmoid(v)).collect();
    let map = bilinear_map::<S>(gh, gw, height, width)?;
    let up = map.apply(&prob);
    let mask = Mask::from_values(height, width, &up, S::lit(0.5))?;
    Ok(Prediction {
        prob: Tensor::new([1, height, width], up)?,
        mask,
    })
}

/// Random model input with values in range, for tests and benchmarks.
pub fn random_input<S: Scalar>(rng: &mut impl Rng, size: usize) -> Tensor<S> {
    Tensor::from_fn([INPUT_CHANNELS, size, size], |i| {
        if (3..5).contains(&(i / (size * size))) {
            S::lit(if rng.gen_bool(0.1) { 1.0 } else { 0.0 })
        } else {
            S::lit(rng.gen::<f64>())
        }
    })
}
