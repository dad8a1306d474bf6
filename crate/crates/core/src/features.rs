//! Log-Mel features, normalization, masking augmentation and synthetic corpora.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const FRAME_PERIOD_MS: f64 = 10.0;
const LOG_FLOOR: f64 = 1e-10;

/// A feature matrix `[T×d]` tagged with its source.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatSeq {
    pub frames: Tensor,
    pub frame_period_ms: f64,
    pub source_id: String,
}

impl FeatSeq {
    pub fn new(source_id: impl Into<String>, frames: Tensor) -> Self {
        Self {
            frames,
            frame_period_ms: FRAME_PERIOD_MS,
            source_id: source_id.into(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.last_dim()
    }
}

/// Number of frames produced for `samples` samples.
pub fn num_frames(samples: usize) -> usize {
    if samples < WINDOW {
        0
    } else {
        1 + (samples - WINDOW) / HOP
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let logstep = 6.4f64.ln() / 27.0;
    if hz < min_log_hz {
        hz / f_sp
    } else {
        min_log_hz / f_sp + (hz / min_log_hz).ln() / logstep
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel < min_log_mel {
        mel * f_sp
    } else {
        min_log_hz * ((mel - min_log_mel) * logstep).exp()
    }
}

/// Windowed STFT followed by an area-normalized triangular Mel filterbank.
#[derive(Clone)]
pub struct LogMel {
    window: Vec<f64>,
    /// Per Mel bin: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("n_mels", &self.filters.len()).finish()
    }
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let n_bins = N_FFT / 2 + 1;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE as f64 / 2.0));
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
        let filters = (0..N_MELS)
            .map(|m| {
                let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (right - left);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = bin_hz(k);
                        let w = ((f - left) / (centre - left)).min((right - f) / (right - centre));
                        (w > 0.0).then_some((k, w * norm))
                    })
                    .collect();
                let first = weights.first().map_or(0, |w| w.0);
                (first, weights.into_iter().map(|w| w.1).collect())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self { window, filters, fft }
    }

    /// Log-Mel energies of one 400-sample frame.
    pub fn frame(&self, samples: &[f32]) -> Vec<f32> {
        debug_assert_eq!(samples.len(), WINDOW);
        let mut buf: Vec<Complex<f64>> = samples
            .iter()
            .zip(&self.window)
            .map(|(&s, &w)| Complex::new(s as f64 * w, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(N_FFT)
            .collect();
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|(first, w)| {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                (e + LOG_FLOOR).ln() as f32
            })
            .collect()
    }

    /// `[T×80]` features for a whole waveform, `T = 1 + ⌊(n − 400)/160⌋`.
    pub fn compute(&self, samples: &[f32]) -> Result<Tensor> {
        let t = num_frames(samples.len());
        if t == 0 {
            return Err(Error::Input(format!(
                "{} samples is shorter than one {WINDOW}-sample window",
                samples.len()
            )));
        }
        let mut data = Vec::with_capacity(t * N_MELS);
        for i in 0..t {
            data.extend(self.frame(&samples[i * HOP..i * HOP + WINDOW]));
        }
        Tensor::new(vec![t, N_MELS], data)
    }
}

/// Incremental feature extraction; frames are bit-identical to [`LogMel::compute`].
#[derive(Clone, Debug, Default)]
pub struct LogMelStream {
    mel: LogMel,
    pending: Vec<f32>,
    consumed: usize,
}

impl LogMelStream {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total samples pushed so far.
    pub fn samples_seen(&self) -> usize {
        self.consumed + self.pending.len()
    }

    /// Appends samples and returns the rows of every newly complete frame.
    pub fn push(&mut self, samples: &[f32]) -> Vec<Vec<f32>> {
        self.pending.extend_from_slice(samples);
        let mut out = Vec::new();
        let mut start = 0;
        while start + WINDOW <= self.pending.len() {
            out.push(self.mel.frame(&self.pending[start..start + WINDOW]));
            start += HOP;
        }
        self.pending.drain(..start);
        self.consumed += start;
        out
    }
}

/// Reads a mono 16 kHz WAV file into samples in `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("expected mono audio, got {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "expected {SAMPLE_RATE} Hz, got {} Hz",
            spec.sample_rate
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|s| s as f32 / 32768.0).map_err(Error::from))
            .collect(),
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map_err(Error::from)).collect()
        }
        (fmt, bits) => Err(Error::Format(format!("unsupported sample format {fmt:?}/{bits} bits"))),
    }
}

/// Writes samples as 16-bit mono 16 kHz PCM.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn wav_to_logmel(path: impl AsRef<Path>) -> Result<FeatSeq> {
    let path = path.as_ref();
    let samples = read_wav(path)?;
    let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(FeatSeq::new(id, LogMel::new().compute(&samples)?))
}

/// Per-dimension mean over every frame of `feats`.
pub fn compute_global_mean<'a>(feats: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<f64>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for f in feats {
        if sum.is_empty() {
            sum = vec![0.0; f.last_dim()];
        } else if f.last_dim() != sum.len() {
            return Err(Error::shape("compute_global_mean", &[sum.len()], f.shape()));
        }
        for r in 0..f.rows() {
            for (s, &x) in sum.iter_mut().zip(f.row(r)) {
                *s += x as f64;
            }
        }
        count += f.rows();
    }
    if count == 0 {
        return Err(Error::Input("no frames to average".into()));
    }
    Ok(sum.into_iter().map(|s| s / count as f64).collect())
}

/// Subtracts `mean` from every frame.
pub fn normalize(feats: &Tensor, mean: &[f64]) -> Result<Tensor> {
    if feats.last_dim() != mean.len() {
        return Err(Error::shape("normalize", feats.shape(), &[mean.len()]));
    }
    let d = mean.len();
    let data = feats
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (x as f64 - mean[i % d]) as f32)
        .collect();
    Tensor::new(feats.shape().to_vec(), data)
}

pub fn global_mean_normalize(feats: &[FeatSeq], mean: &[f64]) -> Result<Vec<FeatSeq>> {
    feats
        .iter()
        .map(|f| {
            Ok(FeatSeq {
                frames: normalize(&f.frames, mean)?,
                ..f.clone()
            })
        })
        .collect()
}

/// Frequency and time masking parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub n_freq_masks: usize,
    pub freq_mask_max: usize,
    pub n_time_masks: usize,
    pub time_mask_max: usize,
    pub time_mask_ratio_cap: f64,
}

impl AugmentPolicy {
    /// The "LD" policy without time warping.
    pub fn ld() -> Self {
        Self {
            n_freq_masks: 2,
            freq_mask_max: 27,
            n_time_masks: 2,
            time_mask_max: 100,
            time_mask_ratio_cap: 1.0,
        }
    }

    pub fn none() -> Self {
        Self {
            n_freq_masks: 0,
            freq_mask_max: 0,
            n_time_masks: 0,
            time_mask_max: 0,
            time_mask_ratio_cap: 0.0,
        }
    }
}

/// Zeroes columns `[start, start + width)`, clipped to the feature range.
pub fn apply_freq_mask(feats: &mut Tensor, start: usize, width: usize) {
    let d = feats.last_dim();
    let (lo, hi) = (start.min(d), start.saturating_add(width).min(d));
    for row in feats.data_mut().chunks_mut(d) {
        row[lo..hi].fill(0.0);
    }
}

/// Zeroes rows `[start, start + width)`, clipped to the sequence.
pub fn apply_time_mask(feats: &mut Tensor, start: usize, width: usize) {
    let (t, d) = (feats.rows(), feats.last_dim());
    let (lo, hi) = (start.min(t), start.saturating_add(width).min(t));
    feats.data_mut()[lo * d..hi * d].fill(0.0);
}

pub fn spec_augment(feats: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Tensor {
    let mut out = feats.clone();
    let (t, d) = (feats.rows(), feats.last_dim());
    for _ in 0..policy.n_freq_masks {
        let width = rng.gen_range(0..=policy.freq_mask_max.min(d));
        let start = rng.gen_range(0..=d - width);
        apply_freq_mask(&mut out, start, width);
    }
    let cap = ((policy.time_mask_ratio_cap * t as f64).floor() as usize).min(policy.time_mask_max);
    for _ in 0..policy.n_time_masks {
        let width = rng.gen_range(0..=cap.min(t));
        let start = rng.gen_range(0..=t - width);
        apply_time_mask(&mut out, start, width);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// Rendered tone sequences; token `k` is a sinusoid at a fixed
    /// log-spaced pitch. Features come from the real log-Mel pipeline.
    ToneDigits,
    /// Feature-domain copy task; token `k` is a fixed random 80-dim pattern.
    PatternCopy,
}

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub source_id: String,
    /// Present for tasks that synthesize a waveform.
    pub audio: Option<Vec<f32>>,
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

/// Symbols of the synthetic tasks, excluding blank.
pub const SYNTH_VOCAB: usize = 15;
const TONE_LOW_HZ: f64 = 250.0;
const TONE_HIGH_HZ: f64 = 5000.0;

/// Pitch of tone token `k ∈ [1, 15]`.
pub fn tone_frequency(k: usize) -> f64 {
    let x = (k - 1) as f64 / (SYNTH_VOCAB - 1) as f64;
    TONE_LOW_HZ * (TONE_HIGH_HZ / TONE_LOW_HZ).powf(x)
}

fn ms_to_samples(ms: f64) -> usize {
    (ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
}

/// Renders a tone sequence: each token lasts 60–120 ms, separated by
/// 30–60 ms gaps, with low-level noise throughout.
pub fn render_tones(tokens: &[usize], rng: &mut impl Rng) -> Vec<f32> {
    let mut audio = Vec::new();
    let noise = |rng: &mut dyn rand::RngCore| (rng.gen::<f32>() - 0.5) * 2e-3;
    let silence = |audio: &mut Vec<f32>, ms: f64, rng: &mut dyn rand::RngCore| {
        for _ in 0..ms_to_samples(ms) {
            audio.push(noise(rng));
        }
    };
    silence(&mut audio, rng.gen_range(40.0..80.0), rng);
    let amp = rng.gen_range(0.2..0.5f32);
    for (i, &k) in tokens.iter().enumerate() {
        if i > 0 {
            silence(&mut audio, rng.gen_range(30.0..60.0), rng);
        }
        let n = ms_to_samples(rng.gen_range(60.0..120.0));
        let f = tone_frequency(k);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let ramp = ms_to_samples(5.0);
        for j in 0..n {
            let env = (j.min(n - 1 - j) as f32 / ramp as f32).min(1.0);
            let s = (std::f64::consts::TAU * f * j as f64 / SAMPLE_RATE as f64 + phase).sin() as f32;
            audio.push(amp * env * s + noise(rng));
        }
    }
    silence(&mut audio, rng.gen_range(40.0..80.0), rng);
    audio
}

fn pattern_prototype(k: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k as u64);
    (0..N_MELS).map(|_| rng.gen_range(-1.0..1.0f32)).collect()
}

fn pattern_features(tokens: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let gap = |rows: &mut Vec<Vec<f32>>, n: usize, rng: &mut dyn rand::RngCore| {
        for _ in 0..n {
            rows.push((0..N_MELS).map(|_| (rng.gen::<f32>() - 0.5) * 0.1).collect());
        }
    };
    gap(&mut rows, rng.gen_range(3..6), rng);
    for (i, &k) in tokens.iter().enumerate() {
        if i > 0 {
            gap(&mut rows, rng.gen_range(2..5), rng);
        }
        let proto = pattern_prototype(k);
        for _ in 0..rng.gen_range(6..=12) {
            rows.push(proto.iter().map(|p| p + (rng.gen::<f32>() - 0.5) * 0.2).collect());
        }
    }
    gap(&mut rows, rng.gen_range(3..6), rng);
    let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::stack_rows(&refs)
}

/// Draws one labelled utterance with `U ∈ [1, max_tokens]` tokens.
pub fn synth_utterance(
    task: SynthTask,
    max_tokens: usize,
    source_id: impl Into<String>,
    rng: &mut impl Rng,
) -> Result<SynthUtterance> {
    if max_tokens == 0 {
        return Err(Error::Input("synthetic utterances need at least one token".into()));
    }
    let u = rng.gen_range(1..=max_tokens);
    let tokens: Vec<usize> = (0..u).map(|_| rng.gen_range(1..=SYNTH_VOCAB)).collect();
    synth_from_tokens(task, &tokens, source_id, rng)
}

/// Renders a given label sequence.
pub fn synth_from_tokens(
    task: SynthTask,
    tokens: &[usize],
    source_id: impl Into<String>,
    rng: &mut impl Rng,
) -> Result<SynthUtterance> {
    if tokens.is_empty() {
        return Err(Error::Input("synthetic utterances need at least one token".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&k| k == 0 || k > SYNTH_VOCAB) {
        return Err(Error::Input(format!("token {bad} outside synthetic vocabulary")));
    }
    let (audio, features) = match task {
        SynthTask::ToneDigits => {
            let audio = render_tones(tokens, rng);
            let feats = LogMel::new().compute(&audio)?;
            (Some(audio), feats)
        }
        SynthTask::PatternCopy => (None, pattern_features(tokens, rng)?),
    };
    Ok(SynthUtterance {
        source_id: source_id.into(),
        audio,
        features,
        tokens: tokens.to_vec(),
    })
}

/// `n` utterances from one seed; identical seeds give identical corpora.
pub fn synth_corpus(task: SynthTask, n: usize, max_tokens: usize, seed: u64) -> Result<Vec<SynthUtterance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synth_utterance(task, max_tokens, format!("synth-{seed}-{i:05}"), &mut rng))
        .collect()
}
