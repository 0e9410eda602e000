use clickseg::autodiff::{Tape, Var};
use clickseg::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub type OpFn = fn(&mut Tape<f64>, &[Var]) -> clickseg::Result<Var>;

fn reduce(tape: &mut Tape<f64>, v: Var) -> clickseg::Result<Var> {
    // weighted sum so every output coordinate gets a distinct cotangent
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(Tensor::from_fn(shape, |i| 0.3 + (i as f64 * 0.731).sin()));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// `(name, input shapes, input range, op)` for each differentiable op.
pub fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), |t, v| {
            let y = t.matmul(v[0], v[1])?;
            reduce(t, y)
        }),
        ("transpose", vec![vec![3, 4]], (-1.0, 1.0), |t, v| {
            let y = t.transpose(v[0])?;
            reduce(t, y)
        }),
        ("add_broadcast", vec![vec![3, 4], vec![4]], (-1.0, 1.0), |t, v| {
            let y = t.add(v[0], v[1])?;
            reduce(t, y)
        }),
        ("sub_broadcast", vec![vec![3, 4], vec![3, 1]], (-1.0, 1.0), |t, v| {
            let y = t.sub(v[0], v[1])?;
            reduce(t, y)
        }),
        ("mul_broadcast", vec![vec![3, 4], vec![3, 1]], (-1.0, 1.0), |t, v| {
            let y = t.mul(v[0], v[1])?;
            reduce(t, y)
        }),
        ("scale", vec![vec![5]], (-1.0, 1.0), |t, v| {
            let y = t.scale(v[0], -1.7)?;
            reduce(t, y)
        }),
        ("affine", vec![vec![5]], (-1.0, 1.0), |t, v| {
            let y = t.affine(v[0], 0.5, 0.25)?;
            reduce(t, y)
        }),
        ("sigmoid", vec![vec![6]], (-3.0, 3.0), |t, v| {
            let y = t.sigmoid(v[0])?;
            reduce(t, y)
        }),
        ("relu", vec![vec![6]], (0.1, 2.0), |t, v| {
            let y = t.relu(v[0])?;
            reduce(t, y)
        }),
        ("gelu", vec![vec![6]], (-3.0, 3.0), |t, v| {
            let y = t.gelu(v[0])?;
            reduce(t, y)
        }),
        ("clamp_interior", vec![vec![6]], (0.1, 0.9), |t, v| {
            let y = t.clamp(v[0], 0.0, 1.0)?;
            reduce(t, y)
        }),
        ("softmax_rows", vec![vec![3, 5]], (-2.0, 2.0), |t, v| {
            let y = t.softmax(v[0], 1)?;
            reduce(t, y)
        }),
        ("softmax_cols", vec![vec![3, 5]], (-2.0, 2.0), |t, v| {
            let y = t.softmax(v[0], 0)?;
            reduce(t, y)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], (-1.0, 1.0), |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            reduce(t, y)
        }),
        ("row_normalize", vec![vec![4, 3]], (0.2, 1.0), |t, v| {
            let y = t.row_normalize(v[0], 1e-12)?;
            reduce(t, y)
        }),
        ("select_rows", vec![vec![5, 3]], (-1.0, 1.0), |t, v| {
            let y = t.select_rows(v[0], &[4, 1, 4])?;
            reduce(t, y)
        }),
        ("slice_cols", vec![vec![3, 6]], (-1.0, 1.0), |t, v| {
            let y = t.slice_cols(v[0], 2, 5)?;
            reduce(t, y)
        }),
        ("concat", vec![vec![3, 2], vec![3, 4]], (-1.0, 1.0), |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]])?;
            reduce(t, y)
        }),
        ("reshape", vec![vec![2, 6]], (-1.0, 1.0), |t, v| {
            let y = t.reshape(v[0], vec![3, 4])?;
            reduce(t, y)
        }),
        ("gather", vec![vec![2, 4, 4]], (-1.0, 1.0), |t, v| {
            let idx = clickseg::geometry::patchify_index(2, 4, 4, 2);
            let y = t.gather(v[0], idx, vec![4, 8])?;
            reduce(t, y)
        }),
        ("resample_bilinear", vec![vec![1, 3, 3]], (-1.0, 1.0), |t, v| {
            let map = clickseg::geometry::bilinear_map::<f64>(3, 3, 7, 5)?;
            let y = t.resample(v[0], std::sync::Arc::new(map))?;
            reduce(t, y)
        }),
        ("mean", vec![vec![4, 3]], (-1.0, 1.0), |t, v| t.mean(v[0])),
        ("mse", vec![vec![6], vec![6]], (-1.0, 1.0), |t, v| t.mse(v[0], v[1])),
        ("l1", vec![vec![6], vec![6]], (-1.0, 1.0), |t, v| t.l1(v[0], v[1])),
        ("bce", vec![vec![6]], (0.05, 0.95), |t, v| {
            let y = t.constant(Tensor::from_f64([6], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?);
            t.bce(v[0], y)
        }),
    ]
}

