//! Error rates, attention cost accounting and the model property suite.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Binder, Tape, Tensor};
use crate::checkpoint;
use crate::config::{AttentionContext, EncoderConfig};
use crate::decoder::{beam_search, decode_audio, greedy_decode, SearchOptions, StreamingSession};
use crate::encoder::{encoder_forward, window_ranges, EncoderStream};
use crate::error::{Error, Result};
use crate::frontend::{frontend_forward, FrontendStream};
use crate::loss::{rnnt_brute_force, rnnt_loss};
use crate::model::{Transducer, ENCODER, FRONTEND};
use crate::predictor::predictor_unroll;
use crate::train::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Substitute,
    Insert,
    Delete,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ErrorRateReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
    pub wer: f64,
}

impl ErrorRateReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Adds another report's counts, e.g. to score a whole corpus.
    pub fn merge(&mut self, other: &ErrorRateReport) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_words += other.reference_words;
        self.wer = if self.reference_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.reference_words as f64
        };
    }
}

/// Minimum-cost alignment of `hyp` against `reference`, with unit costs.
/// Among equal-cost alignments substitution is preferred to insertion and
/// insertion to deletion, deciding from the end of both sequences.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = Vec::with_capacity(n.max(m));
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same { EditOp::Match } else { EditOp::Substitute });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.push(EditOp::Insert);
            j -= 1;
        } else {
            ops.push(EditOp::Delete);
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Counts substitutions, insertions and deletions. An empty reference has
/// no defined error rate.
pub fn edit_distance_align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<ErrorRateReport> {
    if reference.is_empty() {
        return Err(Error::Input("error rate is undefined for an empty reference".into()));
    }
    let mut r = ErrorRateReport {
        reference_words: reference.len(),
        ..ErrorRateReport::default()
    };
    for op in align(reference, hyp) {
        match op {
            EditOp::Match => {}
            EditOp::Substitute => r.substitutions += 1,
            EditOp::Insert => r.insertions += 1,
            EditOp::Delete => r.deletions += 1,
        }
    }
    r.wer = r.errors() as f64 / r.reference_words as f64;
    Ok(r)
}

/// Splits on ASCII whitespace and lower-cases each word.
pub fn words(text: &str) -> Vec<String> {
    text.split_ascii_whitespace().map(str::to_lowercase).collect()
}

pub fn word_error_rate(reference: &str, hyp: &str) -> Result<ErrorRateReport> {
    edit_distance_align(&words(reference), &words(hyp))
}

pub fn token_error_rate(reference: &[usize], hyp: &[usize]) -> Result<ErrorRateReport> {
    edit_distance_align(reference, hyp)
}

/// Pooled error rate over `(reference, hypothesis)` pairs.
pub fn corpus_error_rate<'a, T: PartialEq + 'a>(
    pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>,
) -> Result<ErrorRateReport> {
    let mut total = ErrorRateReport::default();
    for (r, h) in pairs {
        total.merge(&edit_distance_align(r, h)?);
    }
    if total.reference_words == 0 {
        return Err(Error::Input("no references to score".into()));
    }
    Ok(total)
}

/// Search used to turn encoder output into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    Greedy { max_symbols_per_frame: usize },
    Beam(SearchOptions),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Recognition {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Recognizes prepared (normalized) features.
pub fn recognize(model: &Transducer, feats: &Tensor, contexts: &[AttentionContext], search: Search) -> Result<Recognition> {
    let h = model.encode(feats, contexts)?;
    match search {
        Search::Greedy { max_symbols_per_frame } => {
            let d = greedy_decode(model, &h, max_symbols_per_frame)?;
            Ok(Recognition {
                tokens: d.tokens,
                log_prob: d.log_prob,
            })
        }
        Search::Beam(opts) => {
            let top = beam_search(model, &h, opts)?.remove(0);
            Ok(Recognition {
                tokens: top.tokens,
                log_prob: top.log_prob,
            })
        }
    }
}

/// Decodes every example (in parallel, results in input order) and pools
/// the token error rate.
pub fn score_examples(
    model: &Transducer,
    data: &[Example],
    contexts: &[AttentionContext],
    search: Search,
) -> Result<(ErrorRateReport, Vec<Recognition>)> {
    let hyps = data
        .par_iter()
        .map(|ex| recognize(model, &ex.features, contexts, search))
        .collect::<Result<Vec<_>>>()?;
    let report = corpus_error_rate(data.iter().zip(&hyps).map(|(ex, h)| (ex.tokens.as_slice(), h.tokens.as_slice())))?;
    Ok((report, hyps))
}

fn clipped_sum(t: u64, limit: Option<usize>) -> u64 {
    // Σ_{i<t} min(i, limit)
    match limit {
        None => t * t.saturating_sub(1) / 2,
        Some(l) => {
            let l = l as u64;
            let m = t.min(l + 1);
            m * m.saturating_sub(1) / 2 + l * (t - m)
        }
    }
}

/// Number of visible `(query, key)` pairs for `t` frames:
/// `Σ_t min(t, L) + min(T−1−t, R) + 1`.
pub fn attention_pairs(t: usize, ctx: AttentionContext) -> u64 {
    let t = t as u64;
    t + clipped_sum(t, ctx.left) + clipped_sum(t, ctx.right)
}

/// Multiply-adds spent on `QKᵀ` and the weighted sum of values across the
/// encoder, with `ctx` in every layer.
pub fn attention_flops(t: usize, ctx: AttentionContext, cfg: &EncoderConfig) -> u64 {
    attention_pairs(t, ctx) * 2 * cfg.d_in as u64 * cfg.num_layers as u64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityProfile {
    pub lengths: Vec<usize>,
    pub flops: Vec<u64>,
    /// Least-squares slope of `ln FLOPs` against `ln T`.
    pub exponent: f64,
}

pub fn complexity_profile(lengths: &[usize], ctx: AttentionContext, cfg: &EncoderConfig) -> Result<ComplexityProfile> {
    if lengths.len() < 2 || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(
            "need at least two strictly increasing positive lengths".into(),
        ));
    }
    let flops: Vec<u64> = lengths.iter().map(|&t| attention_flops(t, ctx, cfg)).collect();
    let xs: Vec<f64> = lengths.iter().map(|&t| (t as f64).ln()).collect();
    let ys: Vec<f64> = flops.iter().map(|&f| (f as f64).ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(ComplexityProfile {
        lengths: lengths.to_vec(),
        flops,
        exponent: sxy / sxx,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub t: usize,
    pub pairs: u64,
    pub wallclock_ms: f64,
}

/// Times one windowed attention pass of width `d` per length. Timings are
/// machine dependent and informational; `pairs` is exact.
pub fn bench_attention(lengths: &[usize], ctx: AttentionContext, d: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let mut rand_tensor = || Tensor::new(vec![t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (q, k, v) = (rand_tensor()?, rand_tensor()?, rand_tensor()?);
        let ranges = window_ranges(t, ctx);
        let tape = Tape::<f32>::new();
        let start = Instant::now();
        let out = tape
            .constant(q)
            .windowed_attention(tape.constant(k), tape.constant(v), &ranges, 1.0 / (d as f64).sqrt())?;
        std::hint::black_box(out.value());
        rows.push(BenchRow {
            t,
            pairs: attention_pairs(t, ctx),
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(rows)
}

/// Which group of properties [`run_property_suite`] executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Structural,
    Streaming,
    Numeric,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "structural" => Ok(Suite::Structural),
            "streaming" => Ok(Suite::Streaming),
            "numeric" => Ok(Suite::Numeric),
            _ => Err(Error::Input(format!(
                "unknown suite {s:?}; expected all, structural, streaming or numeric"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub status: Status,
    pub max_deviation: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl PropertyResult {
    /// Passes when `deviation <= tolerance`.
    fn bounded(name: &'static str, deviation: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: if deviation <= tolerance { Status::Pass } else { Status::Fail },
            max_deviation: Some(deviation),
            tolerance: Some(tolerance),
            detail: detail.into(),
        }
    }

    fn skip(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: Status::Skip,
            max_deviation: None,
            tolerance: None,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub suite: Suite,
    pub properties: Vec<PropertyResult>,
    pub passed: bool,
}

/// Loads `path` and checks the model against its architectural invariants.
pub fn run_property_suite(path: impl AsRef<Path>, suite: Suite) -> Result<PropertyReport> {
    let (_, model) = checkpoint::load(path)?;
    check_model(&model, suite)
}

type Check = fn(&Transducer, &mut ChaCha8Rng) -> Result<PropertyResult>;

const CHECKS: &[(Suite, Check)] = &[
    (Suite::Structural, frame_rate),
    (Suite::Structural, causality),
    (Suite::Structural, lookahead_sensitivity),
    (Suite::Structural, truncation_equivalence),
    (Suite::Streaming, frontend_streaming),
    (Suite::Streaming, encoder_streaming),
    (Suite::Streaming, streaming_decode),
    (Suite::Numeric, predictor_step_unroll),
    (Suite::Numeric, loss_oracle),
    (Suite::Numeric, beam_one_is_greedy),
];

pub fn check_model(model: &Transducer, suite: Suite) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5157_e000);
    let mut properties = Vec::new();
    for (group, check) in CHECKS {
        if suite == Suite::All || suite == *group {
            properties.push(check(model, &mut rng)?);
        }
    }
    let passed = properties.iter().all(|p| p.status != Status::Fail);
    Ok(PropertyReport {
        suite,
        properties,
        passed,
    })
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn row_diff(a: &Tensor, b: &Tensor, r: usize) -> f64 {
    a.row(r)
        .iter()
        .zip(b.row(r))
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn stack(rows: &[Vec<f32>], cols: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(vec![0, cols]));
    }
    let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::stack_rows(&refs)
}

fn frontend_offline(model: &Transducer, feats: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.params);
    let cfg = &model.config;
    let y = frontend_forward(&binder, FRONTEND, &cfg.frontend, cfg.feat_dim, tape.constant(feats.clone()))?;
    Ok((*y.value()).clone())
}

fn encoder_offline(model: &Transducer, x: &Tensor, contexts: &[AttentionContext]) -> Result<Tensor> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.params);
    let y = encoder_forward(&binder, ENCODER, &model.config.encoder, contexts, tape.constant(x.clone()))?;
    Ok((*y.value()).clone())
}

fn frame_rate(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let cfg = &model.config;
    let mut mismatches = 0;
    let lengths: Vec<usize> = (1..=13).chain([37, 60, 61, 100]).collect();
    for &t in &lengths {
        let y = frontend_offline(model, &random_tensor(t, cfg.feat_dim, rng)?)?;
        if y.rows() != cfg.frontend.output_len(t) {
            mismatches += 1;
        }
    }
    Ok(PropertyResult::bounded(
        "frame_rate",
        mismatches as f64,
        0.0,
        format!(
            "frontend output length equals ceil(T/{}) on {} lengths",
            cfg.frontend.time_reduction(),
            lengths.len()
        ),
    ))
}

/// Output frame probed by the look-ahead checks, with the sequence length
/// used for it.
fn probe_geometry(lookahead: usize) -> (usize, usize) {
    let t = 2;
    (t, t + lookahead + 6)
}

fn causality(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let contexts = model.trained_contexts()?;
    let Some(la) = model.config.encoder.total_lookahead()? else {
        return Ok(PropertyResult::skip("causality", "unlimited right context"));
    };
    let (t, len) = probe_geometry(la);
    let red = model.config.frontend.time_reduction();
    let feats = random_tensor(len * red, model.config.feat_dim, rng)?;
    let base = model.encode(&feats, &contexts)?;
    let mut perturbed = feats.clone();
    let first = (t + la + 1) * red;
    for v in &mut perturbed.data_mut()[first * model.config.feat_dim..] {
        *v += rng.gen_range(-1.0..1.0);
    }
    let moved = model.encode(&perturbed, &contexts)?;
    let dev = (0..=t).map(|r| row_diff(&base, &moved, r)).fold(0.0, f64::max);
    Ok(PropertyResult::bounded(
        "causality",
        dev,
        1e-6,
        format!("outputs 0..={t} ignore input frames from {first} on (look-ahead {la} encoder frames)"),
    ))
}

fn lookahead_sensitivity(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let contexts = model.trained_contexts()?;
    let Some(la) = model.config.encoder.total_lookahead()? else {
        return Ok(PropertyResult::skip("lookahead_sensitivity", "unlimited right context"));
    };
    if la == 0 {
        return Ok(PropertyResult::skip("lookahead_sensitivity", "encoder has no look-ahead"));
    }
    let (t, len) = probe_geometry(la);
    let x = random_tensor(len, model.config.encoder.d_in, rng)?;
    let base = encoder_offline(model, &x, &contexts)?;
    let mut response = 0.0f64;
    for s in t + 1..=t + la {
        let mut p = x.clone();
        // Random, not uniform: layer norm cancels a constant shift.
        for v in &mut p.data_mut()[s * x.last_dim()..(s + 1) * x.last_dim()] {
            *v += rng.gen_range(-1.0..1.0);
        }
        response = response.max(row_diff(&base, &encoder_offline(model, &p, &contexts)?, t));
    }
    Ok(PropertyResult {
        name: "lookahead_sensitivity",
        status: if response > 0.0 { Status::Pass } else { Status::Fail },
        max_deviation: Some(response),
        tolerance: None,
        detail: format!("output {t} responds to some frame in ({t}, {}]", t + la),
    })
}

fn truncation_equivalence(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let n = model.config.encoder.num_layers;
    let mut dev = 0.0f64;
    for len in [8, 32] {
        let x = random_tensor(len, model.config.encoder.d_in, rng)?;
        let wide = encoder_offline(model, &x, &vec![AttentionContext::new(len - 1, len - 1); n])?;
        let full = encoder_offline(model, &x, &vec![AttentionContext::UNLIMITED; n])?;
        dev = dev.max(max_abs_diff(&wide, &full));
    }
    Ok(PropertyResult::bounded(
        "truncation_equivalence",
        dev,
        1e-5,
        "contexts (T-1, T-1) match unlimited attention for T in {8, 32}",
    ))
}

fn frontend_streaming(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let cfg = &model.config;
    let feats = random_tensor(97, cfg.feat_dim, rng)?;
    let offline = frontend_offline(model, &feats)?;
    let mut dev = 0.0f64;
    for chunk in [1, 7, 16] {
        let mut s = FrontendStream::new(&model.params, FRONTEND, &cfg.frontend, cfg.feat_dim);
        let mut rows = Vec::new();
        for start in (0..feats.rows()).step_by(chunk) {
            let part: Vec<&[f32]> = (start..(start + chunk).min(feats.rows())).map(|r| feats.row(r)).collect();
            let out = s.push(&Tensor::stack_rows(&part)?)?;
            rows.extend((0..out.rows()).map(|r| out.row(r).to_vec()));
        }
        let out = s.flush()?;
        rows.extend((0..out.rows()).map(|r| out.row(r).to_vec()));
        dev = dev.max(max_abs_diff(&stack(&rows, cfg.frontend.proj_out)?, &offline));
    }
    Ok(PropertyResult::bounded(
        "frontend_streaming",
        dev,
        1e-5,
        "chunks of 1, 7 and 16 frames reproduce the offline frontend",
    ))
}

fn encoder_streaming(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let contexts = model.trained_contexts()?;
    if contexts.iter().any(|c| !c.is_finite()) {
        return Ok(PropertyResult::skip("encoder_streaming", "unlimited contexts cannot stream"));
    }
    let d = model.config.encoder.d_in;
    let x = random_tensor(20, d, rng)?;
    let offline = encoder_offline(model, &x, &contexts)?;
    let mut dev = 0.0f64;
    for chunk in [1, 3, 20] {
        let mut s = EncoderStream::new(&model.params, ENCODER, &model.config.encoder, &contexts)?;
        let mut rows = Vec::new();
        for start in (0..x.rows()).step_by(chunk) {
            let part: Vec<&[f32]> = (start..(start + chunk).min(x.rows())).map(|r| x.row(r)).collect();
            let out = s.push(&Tensor::stack_rows(&part)?)?;
            rows.extend((0..out.rows()).map(|r| out.row(r).to_vec()));
        }
        let out = s.flush()?;
        rows.extend((0..out.rows()).map(|r| out.row(r).to_vec()));
        dev = dev.max(max_abs_diff(&stack(&rows, d)?, &offline));
    }
    Ok(PropertyResult::bounded(
        "encoder_streaming",
        dev,
        1e-5,
        "chunks of 1, 3 and 20 frames reproduce the offline encoder",
    ))
}

fn streaming_decode(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let contexts = model.trained_contexts()?;
    if contexts.iter().any(|c| !c.is_finite()) {
        return Ok(PropertyResult::skip("streaming_decode", "unlimited contexts cannot stream"));
    }
    let audio: Vec<f32> = (0..9600).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let opts = SearchOptions {
        beam: 4,
        max_symbols_per_frame: 4,
    };
    let offline = decode_audio(model, &audio, &contexts, opts)?.remove(0);
    let mut mismatches = 0;
    for chunk in [112, 1600] {
        let mut s = StreamingSession::new(model, &contexts, opts)?;
        for c in audio.chunks(chunk) {
            s.push_audio(c)?;
        }
        if s.finalize()?.tokens != offline.tokens {
            mismatches += 1;
        }
    }
    Ok(PropertyResult::bounded(
        "streaming_decode",
        mismatches as f64,
        0.0,
        "streamed transcripts equal offline beam search for 7 ms and 100 ms chunks",
    ))
}

fn predictor_step_unroll(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let v = model.vocab();
    if v < 2 {
        return Ok(PropertyResult::skip("predictor_step_unroll", "inventory has no labels"));
    }
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(1..v)).collect();
    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.params);
    let unrolled = predictor_unroll(&binder, &model.config.predictor, v, &labels)?;
    let unrolled = unrolled.value();
    let pred = model.predictor();
    let (mut state, p0) = pred.init()?;
    let mut rows = vec![p0];
    for &y in &labels {
        let (next, p) = pred.step(&state, y)?;
        rows.push(p);
        state = next;
    }
    let stepped = stack(&rows, unrolled.last_dim())?;
    Ok(PropertyResult::bounded(
        "predictor_step_unroll",
        max_abs_diff(&stepped, &unrolled),
        1e-5,
        "incremental predictor steps match the unrolled label history",
    ))
}

fn loss_oracle(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let v = model.vocab();
    if v < 2 {
        return Ok(PropertyResult::skip("loss_oracle", "inventory has no labels"));
    }
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(1..v)).collect();
    let frames = 3;
    let h = random_tensor(frames, model.config.encoder.d_in, rng)?;
    let tape = Tape::new();
    let binder = Binder::new(&tape, &model.params);
    let z = model.lattice_graph(&binder, tape.constant(h), &labels)?;
    let logits = z.value().to_f64_vec();
    let dp = rnnt_loss(&logits, frames, &labels, v)?.loss;
    let bf = rnnt_brute_force(&logits, frames, &labels, v)?.loss;
    Ok(PropertyResult::bounded(
        "loss_oracle",
        (dp - bf).abs(),
        1e-6,
        "lattice recursion equals explicit path enumeration on the model's own lattice",
    ))
}

fn beam_one_is_greedy(model: &Transducer, rng: &mut ChaCha8Rng) -> Result<PropertyResult> {
    let h = random_tensor(8, model.config.encoder.d_in, rng)?;
    let cap = 3;
    let greedy = greedy_decode(model, &h, cap)?;
    let top = beam_search(
        model,
        &h,
        SearchOptions {
            beam: 1,
            max_symbols_per_frame: cap,
        },
    )?
    .remove(0);
    let dev = if top.tokens == greedy.tokens {
        (top.log_prob - greedy.log_prob).abs()
    } else {
        f64::INFINITY
    };
    Ok(PropertyResult::bounded(
        "beam_one_is_greedy",
        dev,
        1e-6,
        "a beam of one follows the greedy path",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::truncation_mask;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    #[test]
    fn hand_checked_fixtures() {
        let same = word_error_rate("a b c", "a b c").unwrap();
        assert_eq!(same.wer, 0.0);
        let del = word_error_rate("a b c", "a c").unwrap();
        assert_eq!((del.substitutions, del.insertions, del.deletions), (0, 0, 1));
        assert_eq!(del.wer, 1.0 / 3.0);
        let over = word_error_rate("a", "b c").unwrap();
        assert_eq!((over.substitutions, over.insertions, over.deletions), (1, 1, 0));
        assert_eq!(over.wer, 2.0);
        assert!(matches!(word_error_rate("", "a"), Err(Error::Input(_))));
        assert!(matches!(word_error_rate("  \t", ""), Err(Error::Input(_))));
    }

    #[test]
    fn tokenization_folds_case_and_whitespace() {
        assert_eq!(w(" The  CAT\tsat\n"), vec!["the", "cat", "sat"]);
        assert_eq!(word_error_rate("Hello World", "hello   world").unwrap().wer, 0.0);
    }

    #[test]
    fn ties_prefer_substitution_then_insertion() {
        // "a b" → "b a": two substitutions rather than an insertion and a deletion.
        assert_eq!(
            align(&w("a b"), &w("b a")),
            vec![EditOp::Substitute, EditOp::Substitute]
        );
        // "a" → "b b": aligned from the end, the last word substitutes.
        assert_eq!(align(&w("a"), &w("b b")), vec![EditOp::Insert, EditOp::Substitute]);
        // Pure deletions when the hypothesis is empty.
        assert_eq!(edit_distance_align(&w("x y"), &[]).unwrap().deletions, 2);
    }

    #[test]
    fn corpus_rate_pools_counts() {
        let refs = [w("a b c d"), w("e f")];
        let hyps = [w("a b c d"), w("e g")];
        let r = corpus_error_rate(refs.iter().zip(&hyps).map(|(r, h)| (r.as_slice(), h.as_slice()))).unwrap();
        assert_eq!(r.errors(), 1);
        assert_eq!(r.wer, 1.0 / 6.0);
    }

    fn levenshtein(a: &[u8], b: &[u8]) -> usize {
        // Recursive definition, memoized; independent of the table above.
        fn go(a: &[u8], b: &[u8], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
            if a.is_empty() || b.is_empty() {
                return a.len() + b.len();
            }
            if let Some(&v) = memo.get(&(a.len(), b.len())) {
                return v;
            }
            let v = (go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
                .min(go(&a[1..], b, memo) + 1)
                .min(go(a, &b[1..], memo) + 1);
            memo.insert((a.len(), b.len()), v);
            v
        }
        go(a, b, &mut Default::default())
    }

    proptest! {
        #[test]
        fn total_is_symmetric_and_minimal(
            a in prop::collection::vec(0u8..4, 1..9),
            b in prop::collection::vec(0u8..4, 1..9),
        ) {
            let ab = edit_distance_align(&a, &b).unwrap();
            let ba = edit_distance_align(&b, &a).unwrap();
            prop_assert_eq!(ab.errors(), ba.errors());
            prop_assert_eq!(ab.errors(), levenshtein(&a, &b));
            prop_assert_eq!(ab.insertions + a.len(), ab.deletions + b.len());
        }
    }

    fn mask_pairs(t: usize, ctx: AttentionContext) -> u64 {
        truncation_mask(t, ctx).iter().filter(|&&m| m).count() as u64
    }

    #[test]
    fn closed_form_pairs_match_mask_counts() {
        assert_eq!(attention_pairs(1000, AttentionContext::UNLIMITED), 1_000_000);
        assert_eq!(attention_pairs(1000, AttentionContext::new(0, 0)), 1000);
        let direct: u64 = (0..1000u64).map(|t| t.min(32) + (999 - t).min(4) + 1).sum();
        assert_eq!(attention_pairs(1000, AttentionContext::new(32, 4)), direct);
        assert_eq!(mask_pairs(1000, AttentionContext::new(32, 4)), direct);
        for t in [1, 2, 5, 33, 40] {
            for ctx in [
                AttentionContext::new(32, 4),
                AttentionContext::new(4, 0),
                AttentionContext::new(0, 7),
                AttentionContext::UNLIMITED,
                AttentionContext { left: None, right: Some(2) },
            ] {
                assert_eq!(attention_pairs(t, ctx), mask_pairs(t, ctx), "t {t} ctx {ctx}");
            }
        }
    }

    #[test]
    fn doubling_ratio_is_linear_when_truncated_and_quadratic_otherwise() {
        let cfg = crate::config::ModelConfig::full_scale().encoder;
        let ratio = |ctx| attention_flops(2048, ctx, &cfg) as f64 / attention_flops(1024, ctx, &cfg) as f64;
        let truncated = ratio(AttentionContext::new(32, 4));
        assert!((1.8..=2.2).contains(&truncated), "{truncated}");
        let full = ratio(AttentionContext::UNLIMITED);
        assert!((3.9..=4.1).contains(&full), "{full}");
        // The unlimited/truncated ratio grows linearly in T.
        let gap = |t| attention_pairs(t, AttentionContext::UNLIMITED) as f64 / attention_pairs(t, AttentionContext::new(32, 4)) as f64;
        assert!((gap(4096) / gap(2048) - 2.0).abs() < 0.05);
    }

    #[test]
    fn fitted_exponent() {
        let cfg = crate::config::ModelConfig::desk_scale().encoder;
        let lengths = [128, 256, 512, 1024];
        let lin = complexity_profile(&lengths, AttentionContext::new(32, 4), &cfg).unwrap();
        assert!(lin.flops.windows(2).all(|w| w[0] < w[1]));
        assert!((lin.exponent - 1.0).abs() < 0.1, "{}", lin.exponent);
        let quad = complexity_profile(&lengths, AttentionContext::UNLIMITED, &cfg).unwrap();
        assert!((quad.exponent - 2.0).abs() < 1e-9);
        assert!(complexity_profile(&[4, 4], AttentionContext::UNLIMITED, &cfg).is_err());
    }

    #[test]
    fn bench_reports_exact_pairs() {
        let rows = bench_attention(&[16, 32], AttentionContext::new(4, 1), 8, 0).unwrap();
        assert_eq!(rows[1].pairs, attention_pairs(32, AttentionContext::new(4, 1)));
        assert!(rows.iter().all(|r| r.wallclock_ms >= 0.0));
    }

    fn small_model() -> Transducer {
        let mut cfg = crate::config::ModelConfig::desk_scale();
        cfg.encoder.num_layers = 2;
        Transducer::new(cfg, 11).unwrap()
    }

    #[test]
    fn fresh_model_passes_every_property() {
        let report = check_model(&small_model(), Suite::All).unwrap();
        assert_eq!(report.properties.len(), CHECKS.len());
        for p in &report.properties {
            assert_eq!(p.status, Status::Pass, "{p:?}");
        }
        assert!(report.passed);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["properties"][0]["status"], "pass");
    }

    #[test]
    fn selected_suite_runs_only_its_group() {
        let report = check_model(&small_model(), Suite::Numeric).unwrap();
        let names: Vec<_> = report.properties.iter().map(|p| p.name).collect();
        assert_eq!(names, ["predictor_step_unroll", "loss_oracle", "beam_one_is_greedy"]);
    }

    #[test]
    fn broken_checkpoints_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_property_suite(dir.path().join("none"), Suite::All), Err(Error::Io(_))));
        let path = dir.path().join("m.ckpt");
        let mut run = crate::config::RunConfig::desk();
        run.model = small_model().config;
        checkpoint::save(&path, &run, &small_model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(run_property_suite(&path, Suite::All), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("streaming".parse::<Suite>().unwrap(), Suite::Streaming);
        assert!("everything".parse::<Suite>().is_err());
    }
}
