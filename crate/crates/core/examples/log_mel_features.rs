//! Log-Mel features from a rendered tone sequence, offline and streamed,
//! plus SpecAugment masking.
//!
//! Run with `cargo run --example log_mel_features [out.wav]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transducer::features::{
    num_frames, render_tones, spec_augment, tone_frequency, write_wav, AugmentPolicy, LogMel, LogMelStream,
    N_MELS,
};

fn main() -> transducer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = [1, 5, 9, 15];
    let audio = render_tones(&tokens, &mut rng);
    for k in tokens {
        println!("token {k:>2} -> {:7.1} Hz", tone_frequency(k));
    }
    if let Some(path) = std::env::args().nth(1) {
        write_wav(&path, &audio)?;
        println!("wrote {path}");
    }

    let mel = LogMel::new();
    let feats = mel.compute(&audio)?;
    println!(
        "{} samples -> {:?} features ({} expected frames)",
        audio.len(),
        feats.shape(),
        num_frames(audio.len())
    );

    // The loudest Mel band of each frame traces the tone pitches.
    let peaks: Vec<usize> = (0..feats.rows())
        .step_by(8)
        .map(|t| {
            let row = feats.row(t);
            (0..N_MELS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
        })
        .collect();
    println!("peak band every 80 ms: {peaks:?}");

    // Feeding 37-sample chunks gives exactly the offline frames.
    let mut stream = LogMelStream::new();
    let streamed: Vec<Vec<f32>> = audio.chunks(37).flat_map(|c| stream.push(c)).collect();
    let identical = streamed.iter().enumerate().all(|(t, f)| f.as_slice() == feats.row(t));
    println!("streamed {} frames, identical to offline: {identical}", streamed.len());

    let masked = spec_augment(&feats, &AugmentPolicy::ld(), &mut rng);
    let zeros = masked.data().iter().filter(|&&v| v == 0.0).count();
    println!("SpecAugment LD zeroed {zeros} of {} values", masked.numel());
    Ok(())
}
