use std::time::Instant;

use clickseg::dataset::{generate_shapes, ShapeConfig, TEST_SEED, TRAIN_SEED};
use clickseg::evaluation::{evaluate_noc, EvalConfig};
use clickseg::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(String::as_str).unwrap_or("full");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let shapes = ShapeConfig::default();
    let train_set = generate_shapes::<f64>(TRAIN_SEED, 1000, &shapes).unwrap();
    let test_set = generate_shapes::<f64>(TEST_SEED, 100, &shapes).unwrap();
    let mut cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    if let Some(lr) = args.get(4).and_then(|s| s.parse().ok()) {
        cfg.lr = lr;
    }
    if let Some(l) = args.get(5).and_then(|s| s.parse().ok()) {
        cfg.lambda_aff = l;
    }
    match variant {
        "base" => { cfg.model.click_attention = false; cfg.lambda_click = 0.0; cfg.lambda_aff = 0.0; }
        "ca" => { cfg.lambda_aff = 0.0; }
        _ => {}
    }
    let t = Instant::now();
    let out = train(&cfg, &train_set, |e| eprintln!("{} {:.4} seg {:.4} click {:.4} aff {:.4} [{:?}]", e.epoch, e.loss, e.seg, e.click, e.affinity, t.elapsed())).unwrap();
    let t = Instant::now();
    let rep = evaluate_noc(&out.model, &test_set, &EvalConfig::default(), None).unwrap();
    println!("{variant} seed {seed}: NoC85 {:.3} NoC90 {:.3} NoF85 {} iou@1 {:.3} iou@3 {:.3} iou@5 {:.3} eval {:?}",
        rep.noc(0.85).unwrap(), rep.noc(0.9).unwrap(), rep.nof(0.85).unwrap(), rep.curve[0].1, rep.curve[2].1, rep.curve[4].1, t.elapsed());
}
