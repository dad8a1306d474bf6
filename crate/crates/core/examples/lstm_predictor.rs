//! The label predictor: stepping one token at a time (as the decoder does)
//! reproduces the unrolled training graph.
//!
//! Run with `cargo run --example lstm_predictor`.

use transducer::autodiff::{Binder, Tape};
use transducer::config::ModelConfig;
use transducer::model::Transducer;
use transducer::predictor::predictor_unroll;

fn main() -> transducer::Result<()> {
    let cfg = ModelConfig::desk_scale();
    let model = Transducer::<f32>::new(cfg.clone(), 4)?;
    let labels = cfg.tokens.encode("31415")?;

    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.params);
    let unrolled = predictor_unroll(&binder, &cfg.predictor, model.vocab(), &labels)?;
    let unrolled = unrolled.value();
    println!("unrolled outputs: {:?} (start state plus one row per label)", unrolled.shape());

    let pred = model.predictor();
    let (mut state, p0) = pred.init()?;
    let mut worst = p0.iter().zip(unrolled.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    for (i, &y) in labels.iter().enumerate() {
        let (next, p) = pred.step(&state, y)?;
        let d = p.iter().zip(unrolled.row(i + 1)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        println!("step {} token {:?}: max |step - unroll| = {d:.1e}", i + 1, cfg.tokens.symbols()[y]);
        worst = worst.max(d);
        state = next;
    }
    println!("worst deviation {worst:.1e}; last token {:?}", state.last_token());
    Ok(())
}
