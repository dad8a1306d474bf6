//! Greedy and beam search over the same encoder output. With a beam of one
//! the search is exactly greedy; wider beams rank several hypotheses.
//!
//! Run with `cargo run --release --example beam_search_decoding`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transducer::autodiff::Tensor;
use transducer::config::ModelConfig;
use transducer::decoder::{beam_search, greedy_decode, SearchOptions};
use transducer::model::Transducer;

fn main() -> transducer::Result<()> {
    let cfg = ModelConfig::desk_scale();
    let model = Transducer::<f32>::new(cfg.clone(), 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, d) = (12, cfg.encoder.d_in);
    // A stand-in encoder output, scaled up so the untrained joiner is decisive.
    let h = Tensor::new(vec![t, d], (0..t * d).map(|_| rng.gen_range(-3.0..3.0)).collect())?;

    let greedy = greedy_decode(&model, &h, 3)?;
    println!("greedy      {:?}  log p {:.3}", cfg.tokens.decode(&greedy.tokens)?, greedy.log_prob);
    for beam in [1, 4, 10] {
        let ranked = beam_search(&model, &h, SearchOptions { beam, max_symbols_per_frame: 3 })?;
        println!("beam {beam:2}:");
        for hyp in ranked.iter().take(3) {
            println!(
                "  {:12?} log p {:8.3}  emitted at frames {:?}",
                cfg.tokens.decode(&hyp.tokens)?,
                hyp.log_prob,
                hyp.frames
            );
        }
    }
    Ok(())
}
