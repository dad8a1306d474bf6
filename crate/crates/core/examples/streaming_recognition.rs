//! Streaming recognition: audio arrives in 160 ms chunks, stable partial
//! transcripts grow as the beam agrees, and each token's emission latency
//! is reported at the end.
//!
//! Run with `cargo run --release --example streaming_recognition [checkpoint]`.
//! Without a checkpoint a model is trained briefly first (about a minute).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transducer::checkpoint;
use transducer::config::RunConfig;
use transducer::dataset::synth_examples;
use transducer::decoder::{decode_audio, SearchOptions, StreamingSession};
use transducer::features::{render_tones, SAMPLE_RATE};
use transducer::model::Transducer;
use transducer::train::Trainer;

fn quick_model() -> transducer::Result<Transducer> {
    let mut run = RunConfig::desk();
    run.train.steps = 250;
    let (train, _, mean) = synth_examples(run.data.synth.as_ref().unwrap())?;
    let mut model = Transducer::new(run.model.clone(), run.train.seed)?;
    model.feature_mean = Some(mean);
    let mut trainer = Trainer::new(model, run.train)?;
    trainer.fit(&train, |m| {
        if m.step % 50 == 0 {
            println!("training step {} loss {:.3}", m.step, m.loss);
        }
    })?;
    Ok(trainer.model)
}

fn main() -> transducer::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => checkpoint::load(path)?.1,
        None => quick_model()?,
    };
    let tokens = &model.config.tokens;
    let reference = "7a3e19";
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let audio = render_tones(&tokens.encode(reference)?, &mut rng);
    let contexts = model.trained_contexts()?;
    let opts = SearchOptions::default();

    let chunk = SAMPLE_RATE as usize * 160 / 1000;
    let mut session = StreamingSession::new(&model, &contexts, opts)?;
    for (i, c) in audio.chunks(chunk).enumerate() {
        let delta = session.push_audio(c)?;
        if !delta.is_empty() {
            println!(
                "{:5} ms  +{:<4} partial {:?}",
                (i + 1) * 160,
                tokens.decode(&delta)?,
                tokens.decode(session.partial())?
            );
        }
    }
    let fin = session.finalize()?;
    println!("reference {reference:?}, final {:?}", fin.text);
    for l in &fin.latencies {
        println!(
            "  {:?} emitted for audio ending at {:4.0} ms, stable at {:4.0} ms (latency {:3.0} ms)",
            tokens.symbols()[l.token],
            l.position_ms,
            l.available_ms,
            l.latency_ms
        );
    }
    if let Some(mean) = fin.mean_latency_ms() {
        println!("mean latency {mean:.0} ms");
    }
    let offline = decode_audio(&model, &audio, &contexts, opts)?.remove(0);
    println!("offline beam search agrees: {}", offline.tokens == fin.tokens);
    Ok(())
}
