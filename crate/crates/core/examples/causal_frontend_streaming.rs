//! The causal VGG frontend: 10 ms features in, 60 ms frames out, with the
//! streaming path matching the offline one chunk by chunk.
//!
//! Run with `cargo run --release --example causal_frontend_streaming`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transducer::autodiff::{Binder, Tape, Tensor};
use transducer::config::ModelConfig;
use transducer::frontend::{frontend_forward, FrontendStream};
use transducer::model::{Transducer, FRONTEND};

fn main() -> transducer::Result<()> {
    let cfg = ModelConfig::desk_scale();
    let model = Transducer::<f32>::new(cfg.clone(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 100;
    let feats = Tensor::new(vec![t, cfg.feat_dim], (0..t * cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.params);
    let offline = frontend_forward(&binder, FRONTEND, &cfg.frontend, cfg.feat_dim, tape.constant(feats.clone()))?;
    let offline = offline.value();
    println!(
        "{t} input frames -> {} output frames of width {} (reduction x{})",
        offline.rows(),
        offline.last_dim(),
        cfg.frontend.time_reduction()
    );

    let mut stream = FrontendStream::new(&model.params, FRONTEND, &cfg.frontend, cfg.feat_dim);
    let mut emitted = 0;
    let mut max_diff = 0.0f64;
    for (i, chunk) in (0..t).collect::<Vec<_>>().chunks(16).enumerate() {
        let rows: Vec<&[f32]> = chunk.iter().map(|&r| feats.row(r)).collect();
        let out = stream.push(&Tensor::stack_rows(&rows)?)?;
        for r in 0..out.rows() {
            let d = out.row(r).iter().zip(offline.row(emitted + r)).map(|(a, b)| (a - b).abs() as f64);
            max_diff = d.fold(max_diff, f64::max);
        }
        emitted += out.rows();
        println!("chunk {i}: fed {:3} frames, {emitted:2} outputs so far", ((i + 1) * 16).min(t));
    }
    emitted += stream.flush()?.rows();
    println!("after flush: {emitted} outputs, max |stream - offline| = {max_diff:.1e}");
    Ok(())
}
