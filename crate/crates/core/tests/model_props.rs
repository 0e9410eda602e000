use clickseg::autodiff::Tape;
use clickseg::model::{multi_head_attention, random_input, BiasMode, INPUT_CHANNELS};
use clickseg::tensor::Tensor;
use clickseg::{ClickSet, Model, ModelConfig, Polarity, NUM_STAGES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn zero_params(model: &mut Model, pred: impl Fn(&str) -> bool) {
    let names: Vec<String> = model.params().names().to_vec();
    for (name, tensor) in names.iter().zip(model.params_mut().tensors_mut()) {
        if pred(name) {
            tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut tape = Tape::new();
    let q = tape.constant(t([1, 2], &[0.3, -1.2]));
    let k = tape.constant(t([1, 2], &[2.0, 0.7]));
    let v = tape.constant(t([1, 2], &[4.0, -5.0]));
    let (out, maps) = multi_head_attention(&mut tape, q, k, v, 1, None).unwrap();
    assert_eq!(tape.value(maps[0].1).data(), &[1.0]);
    assert_eq!(tape.value(out).data(), &[4.0, -5.0]);
}

#[test]
fn four_token_attention_matches_reference() {
    let mut tape = Tape::new();
    let q = tape.constant(t([4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5]));
    let k = tape.constant(t([4, 2], &[0.5, -1.0, 1.0, 1.0, 0.0, 2.0, -0.5, 0.0]));
    let v = tape.constant(t([4, 2], &[1.0, 2.0, 3.0, -1.0, 0.0, 0.5, 2.0, 2.0]));
    let (out, maps) = multi_head_attention(&mut tape, q, k, v, 1, None).unwrap();
    // softmax(QKᵀ/√2)V evaluated independently in numpy
    let expected_post = [
        0.2762907035274435,
        0.39347084579921343,
        0.19400815504039637,
        0.13623029563294675,
        0.06458483864659637,
        0.2656536120267467,
        0.5387760704802101,
        0.13098547884644673,
        0.07291012499680967,
        0.42708987500319034,
        0.42708987500319034,
        0.07291012499680967,
        0.10609351816474404,
        0.151089797062063,
        0.43638920377754675,
        0.30642748099564615,
    ];
    let expected_out = [
        1.7291638321909772,
        0.5285752300417652,
        1.1235166324197299,
        0.3948750581994446,
        1.5000000000000002,
        0.07809556248564353,
        1.1722178713422253,
        0.8921468031474907,
    ];
    for (a, b) in tape.value(maps[0].1).data().iter().zip(&expected_post) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in tape.value(out).data().iter().zip(&expected_out) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn heads_split_channels_independently() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mk = |rng: &mut ChaCha8Rng| Tensor::from_fn([5, 4], |_| rng.gen_range(-1.0..1.0));
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let (joined, _) = multi_head_attention(&mut tape, qv, kv, vv, 2, None).unwrap();
    for head in 0..2 {
        let qh = tape.slice_cols(qv, 2 * head, 2 * head + 2).unwrap();
        let kh = tape.slice_cols(kv, 2 * head, 2 * head + 2).unwrap();
        let vh = tape.slice_cols(vv, 2 * head, 2 * head + 2).unwrap();
        let (single, _) = multi_head_attention(&mut tape, qh, kh, vh, 1, None).unwrap();
        let part = tape.slice_cols(joined, 2 * head, 2 * head + 2).unwrap();
        assert_eq!(tape.value(single).data(), tape.value(part).data());
    }
}

#[test]
fn patch_embedding_of_zero_input_is_zero() {
    let mut model = Model::new(ModelConfig::default(), 1).unwrap();
    zero_params(&mut model, |n| n == "stage0.embed.bias");
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let n = model.config().input_size;
    let e = model.patch_embed(&mut tape, &p, &Tensor::zeros([INPUT_CHANNELS, n, n])).unwrap();
    assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embedding_commutes_with_patch_permutation() {
    let model = Model::new(ModelConfig::default(), 2).unwrap();
    let cfg = model.config().clone();
    let (n, ps, g) = (cfg.input_size, cfg.patch_size, cfg.grid_side(0));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input: Tensor<f64> = random_input(&mut rng, n);
    let mut perm: Vec<usize> = (0..g * g).collect();
    perm.reverse();
    perm.swap(3, 40);
    // out-patch k takes the pixels of in-patch perm[k]
    let mut shuffled = Tensor::zeros([INPUT_CHANNELS, n, n]);
    for (k, &src) in perm.iter().enumerate() {
        let (ky, kx, sy, sx) = (k / g, k % g, src / g, src % g);
        for c in 0..INPUT_CHANNELS {
            for dy in 0..ps {
                for dx in 0..ps {
                    let from = c * n * n + (sy * ps + dy) * n + sx * ps + dx;
                    let to = c * n * n + (ky * ps + dy) * n + kx * ps + dx;
                    shuffled.data_mut()[to] = input.data()[from];
                }
            }
        }
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let a = model.patch_embed(&mut tape, &p, &input).unwrap();
    let b = model.patch_embed(&mut tape, &p, &shuffled).unwrap();
    let c = cfg.stage_dims[0];
    let (a, b) = (tape.value(a).data(), tape.value(b).data());
    for (k, &src) in perm.iter().enumerate() {
        assert_eq!(&b[k * c..(k + 1) * c], &a[src * c..(src + 1) * c]);
    }
}

#[test]
fn decoder_maps_zero_features_to_zero_logits() {
    let mut model = Model::new(ModelConfig::default(), 3).unwrap();
    zero_params(&mut model, |n| n.starts_with("decoder.") && n.ends_with(".bias"));
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let feats: Vec<_> = (0..NUM_STAGES)
        .map(|i| tape.constant(Tensor::zeros([cfg.num_patches(i), cfg.stage_dims[i]])))
        .collect();
    let logits = model.decode(&mut tape, &p, &feats).unwrap();
    let g = cfg.grid_side(0);
    assert_eq!(tape.shape(logits), &[1, g, g]);
    assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_keeps_spatially_constant_features_constant() {
    let model = Model::new(ModelConfig::default(), 4).unwrap();
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let feats: Vec<_> = (0..NUM_STAGES)
        .map(|i| {
            let row: Vec<f64> = (0..cfg.stage_dims[i]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = cfg.stage_dims[i];
            tape.constant(Tensor::from_fn([cfg.num_patches(i), c], |j| row[j % c]))
        })
        .collect();
    let logits = model.decode(&mut tape, &p, &feats).unwrap();
    let data = tape.value(logits).data();
    assert!(data.iter().all(|&v| v == data[0]));
}

#[test]
fn forward_shapes_and_records() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random_input(&mut rng, cfg.input_size);
    let mut clicks = ClickSet::new();
    clicks.push(10, 10, Polarity::Positive);
    clicks.push(50, 20, Polarity::Negative);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &p, &input, &clicks, BiasMode::FromClicks).unwrap();
    assert_eq!(out.stages.len(), NUM_STAGES);
    for (i, st) in out.stages.iter().enumerate() {
        let l = cfg.num_patches(i);
        assert_eq!(tape.shape(st.features), &[l, cfg.stage_dims[i]]);
        assert_eq!(st.attention.len(), cfg.layers[i] * cfg.heads[i]);
        assert_eq!(st.clicked_patches.len(), 1);
        let s = st.bias.unwrap();
        assert_eq!(tape.shape(s), &[l, 1]);
    }
    let wrong = Tensor::zeros([INPUT_CHANNELS, 8, 8]);
    assert!(model.forward(&mut tape, &p, &wrong, &clicks, BiasMode::Off).is_err());
}

#[test]
fn predict_is_deterministic_and_binary() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = cfg.input_size;
    let image = Tensor::from_fn([3, n, n], |_| rng.gen::<f64>());
    let prev = Tensor::zeros([1, n, n]);
    let mut clicks = ClickSet::new();
    clicks.push(30, 30, Polarity::Positive);
    let a = model.predict(&image, &clicks, &prev).unwrap();
    let b = model.predict(&image, &clicks, &prev).unwrap();
    assert_eq!(a, b);
    for (m, p) in a.mask.bits().iter().zip(a.prob.data()) {
        assert_eq!(*m, *p > 0.5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn biased_attention_rows_sum_to_one(seed in any::<u64>(), len in 1usize..10, lo in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |r: usize| Tensor::from_fn([r, 4], |_| rng.gen_range(-3.0..3.0));
        let (q, k, v) = (mk(len), mk(len), mk(len));
        let s = Tensor::from_fn([len, 1], |_| rng.gen_range(lo..=1.0));
        let mut tape = Tape::new();
        let (q, k, v, s) = (tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(s));
        let (_, maps) = multi_head_attention(&mut tape, q, k, v, 2, Some(s)).unwrap();
        for (_, post) in maps {
            for row in tape.value(post).data().chunks(len) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_bias_row_is_uniform(seed in any::<u64>(), len in 2usize..8, row in 0usize..8) {
        let row = row % len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || Tensor::from_fn([len, 2], |_| rng.gen_range(-3.0..3.0));
        let (q, k, v) = (mk(), mk(), mk());
        let s = Tensor::from_fn([len, 1], |i| if i == row { 0.0 } else { 1.0 });
        let mut tape = Tape::new();
        let (q, k, v, s) = (tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(s));
        let (_, maps) = multi_head_attention(&mut tape, q, k, v, 1, Some(s)).unwrap();
        let post = tape.value(maps[0].1).data();
        for &x in &post[row * len..(row + 1) * len] {
            prop_assert!((x - 1.0 / len as f64).abs() < 1e-15);
        }
    }
}
