//! Greedy and beam-search decoding, and streaming recognition sessions.
//!
//! Beam search is frame-synchronous. Within a frame, each round extends every
//! active hypothesis by blank (which moves it to the next frame's set) and by
//! every label (which keeps it active). Label extensions survive when they
//! rank among the round's best `beam` candidates; a blank extension survives
//! unless `beam` labels of its own hypothesis outrank it, so with a beam of
//! one the search is greedy. Hypotheses reaching the next frame with the same tokens are
//! merged by log-sum-exp. A frame ends when no active hypothesis can beat the
//! `beam`-th finished one, or after `max_symbols_per_frame` label rounds.
//! There is no length normalization.

use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::{log_add, log_softmax_row, Tensor};
use crate::config::AttentionContext;
use crate::encoder::EncoderStream;
use crate::error::{Error, Result};
use crate::features::{self, LogMelStream};
use crate::frontend::FrontendStream;
use crate::joiner::Joiner;
use crate::model::{Transducer, ENCODER, FRONTEND};
use crate::predictor::{Predictor, PredictorState};
use crate::tokens::BLANK;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchOptions {
    pub beam: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            beam: 10,
            max_symbols_per_frame: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Encoder frame at which each token was emitted.
    pub frames: Vec<usize>,
    pub predictor_state: PredictorState,
}

struct PredEntry {
    state: PredictorState,
    proj: Vec<f32>,
}

/// Predictor outputs keyed by token history, shared across hypotheses.
struct PredictorCache<'m> {
    predictor: Predictor<'m>,
    joiner: Joiner<'m>,
    entries: HashMap<Vec<usize>, Rc<PredEntry>>,
}

impl<'m> PredictorCache<'m> {
    fn new(model: &'m Transducer) -> Result<Self> {
        let predictor = model.predictor();
        let joiner = model.joiner()?;
        let (state, p) = predictor.init()?;
        let proj = joiner.project_predictor(&p)?;
        let mut entries = HashMap::new();
        entries.insert(Vec::new(), Rc::new(PredEntry { state, proj }));
        Ok(Self {
            predictor,
            joiner,
            entries,
        })
    }

    /// Entry for `tokens`; the entry for its prefix must already exist.
    fn get(&mut self, tokens: &[usize]) -> Result<Rc<PredEntry>> {
        if let Some(e) = self.entries.get(tokens) {
            return Ok(e.clone());
        }
        let (last, prefix) = tokens.split_last().expect("empty history is always cached");
        let parent = self.get(prefix)?;
        let (state, p) = self.predictor.step(&parent.state, *last)?;
        let entry = Rc::new(PredEntry {
            state,
            proj: self.joiner.project_predictor(&p)?,
        });
        self.entries.insert(tokens.to_vec(), entry.clone());
        Ok(entry)
    }

    fn log_probs(&mut self, enc_proj: &[f32], tokens: &[usize]) -> Result<Vec<f64>> {
        let entry = self.get(tokens)?;
        Ok(log_softmax_row(&self.joiner.logits(enc_proj, &entry.proj)))
    }
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    frames: Vec<usize>,
    score: f64,
}

/// Greedy result: the single best path and its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Takes the most probable symbol at each lattice position; blank advances
/// the frame, and after `max_symbols` labels in one frame blank is forced.
pub fn greedy_decode(model: &Transducer, h: &Tensor, max_symbols: usize) -> Result<Decoded> {
    let mut cache = PredictorCache::new(model)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for t in 0..h.rows() {
        let enc = cache.joiner.project_encoder(h.row(t))?;
        let mut emitted = 0;
        loop {
            let lp = cache.log_probs(&enc, &tokens)?;
            let k = if emitted == max_symbols { BLANK } else { argmax(&lp) };
            log_prob += lp[k];
            if k == BLANK {
                break;
            }
            tokens.push(k);
            emitted += 1;
        }
    }
    Ok(Decoded { tokens, log_prob })
}

/// Incremental frame-synchronous beam search.
pub struct BeamSearch<'m> {
    cache: PredictorCache<'m>,
    opts: SearchOptions,
    hyps: Vec<Hyp>,
    frame: usize,
}

impl<'m> BeamSearch<'m> {
    pub fn new(model: &'m Transducer, opts: SearchOptions) -> Result<Self> {
        if opts.beam == 0 {
            return Err(Error::Input("beam must be at least 1".into()));
        }
        Ok(Self {
            cache: PredictorCache::new(model)?,
            opts,
            hyps: vec![Hyp {
                tokens: Vec::new(),
                frames: Vec::new(),
                score: 0.0,
            }],
            frame: 0,
        })
    }

    pub fn frames_consumed(&self) -> usize {
        self.frame
    }

    /// Consumes one encoder output row.
    pub fn advance(&mut self, h_row: &[f32]) -> Result<()> {
        let enc = self.cache.joiner.project_encoder(h_row)?;
        let beam = self.opts.beam;
        let mut active = std::mem::take(&mut self.hyps);
        let mut done: Vec<Hyp> = Vec::new();
        for round in 0..=self.opts.max_symbols_per_frame {
            // (score, local log-prob, source hyp, symbol); order of insertion
            // puts each hyp's blank before its labels.
            let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
            for (i, hyp) in active.iter().enumerate() {
                let lp = self.cache.log_probs(&enc, &hyp.tokens)?;
                cands.push((hyp.score + lp[BLANK], lp[BLANK], i, BLANK));
                if round < self.opts.max_symbols_per_frame {
                    for (k, &l) in lp.iter().enumerate().skip(1) {
                        cands.push((hyp.score + l, l, i, k));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
            // Label extensions must rank in the round's top `beam`. A blank
            // extension survives unless `beam` labels of its own hypothesis
            // outrank it, so finished paths never compete with unfinished
            // extensions of other hypotheses.
            let mut outranked_by_own = vec![0usize; active.len()];
            let mut next_active = Vec::new();
            for (rank, (score, _, i, k)) in cands.into_iter().enumerate() {
                let src = &active[i];
                if k != BLANK {
                    outranked_by_own[i] += 1;
                    if rank < beam {
                        let mut tokens = src.tokens.clone();
                        tokens.push(k);
                        let mut frames = src.frames.clone();
                        frames.push(self.frame);
                        next_active.push(Hyp { tokens, frames, score });
                    }
                    continue;
                }
                if outranked_by_own[i] >= beam {
                    continue;
                }
                match done.iter_mut().find(|d| d.tokens == src.tokens) {
                    Some(d) => {
                        if score > d.score {
                            d.frames = src.frames.clone();
                        }
                        d.score = log_add(d.score, score);
                    }
                    None => done.push(Hyp {
                        tokens: src.tokens.clone(),
                        frames: src.frames.clone(),
                        score,
                    }),
                }
            }
            active = next_active;
            if active.is_empty() {
                break;
            }
            if done.len() >= beam {
                let mut scores: Vec<f64> = done.iter().map(|d| d.score).collect();
                scores.sort_by(|a, b| b.total_cmp(a));
                let best_active = active.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
                if best_active <= scores[beam - 1] {
                    break;
                }
            }
        }
        done.sort_by(|a, b| b.score.total_cmp(&a.score));
        done.truncate(beam);
        self.hyps = done;
        self.frame += 1;
        Ok(())
    }

    /// Longest common token prefix of the current beam.
    pub fn stable_prefix(&self) -> &[usize] {
        let first = &self.hyps[0].tokens;
        let n = self.hyps.iter().fold(first.len(), |n, h| {
            n.min(h.tokens.iter().zip(first).take_while(|(a, b)| a == b).count())
        });
        &first[..n]
    }

    /// Current hypotheses ranked by score.
    pub fn ranked(&mut self) -> Result<Vec<Hypothesis>> {
        self.hyps
            .clone()
            .into_iter()
            .map(|h| {
                let state = self.cache.get(&h.tokens)?.state.clone();
                Ok(Hypothesis {
                    tokens: h.tokens,
                    log_prob: h.score,
                    frames: h.frames,
                    predictor_state: state,
                })
            })
            .collect()
    }
}

/// Ranked hypotheses for encoder output `h` (at most `opts.beam`).
pub fn beam_search(model: &Transducer, h: &Tensor, opts: SearchOptions) -> Result<Vec<Hypothesis>> {
    let mut search = BeamSearch::new(model, opts)?;
    for t in 0..h.rows() {
        search.advance(h.row(t))?;
    }
    search.ranked()
}

/// Offline recognition of raw audio with the given contexts.
pub fn decode_audio(
    model: &Transducer,
    samples: &[f32],
    contexts: &[AttentionContext],
    opts: SearchOptions,
) -> Result<Vec<Hypothesis>> {
    let feats = model.prepare_features(&features::LogMel::new().compute(samples)?)?;
    let h = model.encode(&feats, contexts)?;
    beam_search(model, &h, opts)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TokenLatency {
    pub token: usize,
    /// Audio position of the end of the emitting encoder frame.
    pub position_ms: f64,
    /// Audio consumed when the token became stable.
    pub available_ms: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FinalTranscript {
    pub tokens: Vec<usize>,
    pub text: String,
    pub log_prob: f64,
    pub latencies: Vec<TokenLatency>,
}

impl FinalTranscript {
    pub fn mean_latency_ms(&self) -> Option<f64> {
        (!self.latencies.is_empty())
            .then(|| self.latencies.iter().map(|l| l.latency_ms).sum::<f64>() / self.latencies.len() as f64)
    }
}

/// Streaming recognizer: audio in, prefix-stable partial transcripts out.
pub struct StreamingSession<'m> {
    model: &'m Transducer,
    mel: LogMelStream,
    frontend: FrontendStream<'m>,
    encoder: EncoderStream<'m>,
    search: BeamSearch<'m>,
    stable: Vec<usize>,
    stable_at_ms: Vec<f64>,
    finished: bool,
}

impl<'m> StreamingSession<'m> {
    pub fn new(model: &'m Transducer, contexts: &[AttentionContext], opts: SearchOptions) -> Result<Self> {
        let cfg = &model.config;
        Ok(Self {
            model,
            mel: LogMelStream::new(),
            frontend: FrontendStream::new(&model.params, FRONTEND, &cfg.frontend, cfg.feat_dim),
            encoder: EncoderStream::new(&model.params, ENCODER, &cfg.encoder, contexts)?,
            search: BeamSearch::new(model, opts)?,
            stable: Vec::new(),
            stable_at_ms: Vec::new(),
            finished: false,
        })
    }

    fn audio_ms(&self) -> f64 {
        self.mel.samples_seen() as f64 * 1000.0 / features::SAMPLE_RATE as f64
    }

    fn frame_ms(&self) -> f64 {
        features::FRAME_PERIOD_MS * self.model.config.frontend.time_reduction() as f64
    }

    fn decode_rows(&mut self, h: &Tensor) -> Result<Vec<usize>> {
        for t in 0..h.rows() {
            self.search.advance(h.row(t))?;
        }
        let prefix = self.search.stable_prefix();
        let delta = prefix[self.stable.len().min(prefix.len())..].to_vec();
        let now = self.audio_ms();
        self.stable.extend_from_slice(&delta);
        self.stable_at_ms.extend(delta.iter().map(|_| now));
        Ok(delta)
    }

    /// Feeds audio and returns tokens newly appended to the stable partial.
    pub fn push_audio(&mut self, samples: &[f32]) -> Result<Vec<usize>> {
        if self.finished {
            return Err(Error::State("session already finalized".into()));
        }
        let rows = self.mel.push(samples);
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let feats = self.model.prepare_features(&Tensor::stack_rows(&refs)?)?;
        let x = self.frontend.push(&feats)?;
        let h = self.encoder.push(&x)?;
        self.decode_rows(&h)
    }

    pub fn partial(&self) -> &[usize] {
        &self.stable
    }

    /// Flushes pending windows and look-ahead, then completes the search.
    pub fn finalize(&mut self) -> Result<FinalTranscript> {
        if self.finished {
            return Err(Error::State("session already finalized".into()));
        }
        self.finished = true;
        let x = self.frontend.flush()?;
        let mut h = self.encoder.push(&x)?;
        let rest = self.encoder.flush()?;
        if rest.rows() > 0 {
            let mut all: Vec<&[f32]> = (0..h.rows()).map(|r| h.row(r)).collect();
            all.extend((0..rest.rows()).map(|r| rest.row(r)));
            h = Tensor::stack_rows(&all)?;
        }
        self.decode_rows(&h)?;
        let best = self.search.ranked()?.into_iter().next().expect("beam is never empty");
        let now = self.audio_ms();
        let frame_ms = self.frame_ms();
        let latencies = best
            .tokens
            .iter()
            .zip(&best.frames)
            .enumerate()
            .map(|(i, (&token, &frame))| {
                let available_ms = self.stable_at_ms.get(i).copied().unwrap_or(now);
                let position_ms = (frame + 1) as f64 * frame_ms;
                TokenLatency {
                    token,
                    position_ms,
                    available_ms,
                    latency_ms: available_ms - position_ms,
                }
            })
            .collect();
        Ok(FinalTranscript {
            text: self.model.config.tokens.decode(&best.tokens)?,
            tokens: best.tokens,
            log_prob: best.log_prob,
            latencies,
        })
    }
}
