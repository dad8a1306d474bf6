//! End to end: train the desk-scale model on the synthetic tone task, then
//! score greedy and beam-10 decoding on held-out utterances.
//!
//! Run with `cargo run --release --example train_tone_task [steps] [checkpoint]`.
//! The default 800 steps take a few minutes on one core.

use std::time::Instant;

use transducer::checkpoint;
use transducer::config::RunConfig;
use transducer::dataset::synth_examples;
use transducer::decoder::SearchOptions;
use transducer::eval::{score_examples, Search};
use transducer::model::Transducer;
use transducer::train::Trainer;

fn main() -> transducer::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut run = RunConfig::desk();
    if let Some(steps) = args.next() {
        run.train.steps = steps.parse().expect("steps must be an integer");
    }
    let out = args.next();

    let synth = run.data.synth.clone().expect("desk config has a synthetic corpus");
    let (train, test, mean) = synth_examples(&synth)?;
    println!("{} training and {} test utterances", train.len(), test.len());

    let mut model = Transducer::new(run.model.clone(), run.train.seed)?;
    model.feature_mean = Some(mean);
    println!("{:?}", model.param_report());
    let mut trainer = Trainer::new(model, run.train.clone())?;
    let start = Instant::now();
    let mut window = Vec::new();
    trainer.fit(&train, |m| {
        window.push(m.loss);
        if m.step % 50 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:4}  loss {mean:7.3}  lr {:.2e}  {:5.0} s", m.step, m.lr, start.elapsed().as_secs_f64());
            window.clear();
        }
    })?;

    let model = &trainer.model;
    let contexts = model.trained_contexts()?;
    let (greedy, _) = score_examples(model, &test, &contexts, Search::Greedy { max_symbols_per_frame: 10 })?;
    let (beam, hyps) = score_examples(model, &test, &contexts, Search::Beam(SearchOptions::default()))?;
    println!("greedy token error rate  {:.2}%", 100.0 * greedy.wer);
    println!("beam-10 token error rate {:.2}%", 100.0 * beam.wer);
    for (ex, h) in test.iter().zip(&hyps).take(5) {
        println!(
            "  ref {:8}  hyp {}",
            run.model.tokens.decode(&ex.tokens)?,
            run.model.tokens.decode(&h.tokens)?
        );
    }
    if let Some(path) = out {
        checkpoint::save(&path, &run, model)?;
        println!("saved {path}");
    }
    Ok(())
}
