use std::time::Instant;

use clickseg::autodiff::Tape;
use clickseg::model::{random_input, BiasMode, Model};
use clickseg::{ClickSet, ModelConfig, Polarity};
use rand::SeedableRng;

fn main() {
    let model = Model::<f64>::new(ModelConfig::default(), 0).unwrap();
    println!("params {}", model.params().numel());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let input = random_input::<f64>(&mut rng, 64);
    let mut clicks = ClickSet::new();
    clicks.push(20, 30, Polarity::Positive);
    let n = 10;
    let t = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        model.forward(&mut tape, &p, &input, &clicks, BiasMode::FromClicks).unwrap();
    }
    println!("forward {:?}", t.elapsed() / n);
    let t = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let out = model.forward(&mut tape, &p, &input, &clicks, BiasMode::FromClicks).unwrap();
        let l = tape.mean(out.logits).unwrap();
        tape.backward(l).unwrap();
    }
    println!("fwd+bwd {:?}", t.elapsed() / n);
}
