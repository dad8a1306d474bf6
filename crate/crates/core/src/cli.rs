//! The `transducer` command line.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, missing or
//! malformed files, invalid configs), 2 when an internal invariant fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::config::{AttentionContext, RunConfig};
use crate::dataset::{self, CacheEntry, TEST_SPLIT, TRAIN_SPLIT};
use crate::decoder::{decode_audio, SearchOptions, StreamingSession};
use crate::error::{Error, Result};
use crate::eval::{self, Recognition, Search, Suite};
use crate::features::{self, FRAME_PERIOD_MS, SAMPLE_RATE};
use crate::model::Transducer;
use crate::train::Trainer;

#[derive(Debug, Parser)]
#[command(name = "transducer", version, about = "Streaming Transformer-Transducer speech recognition")]
struct Cli {
    /// Worker threads for per-utterance work; output order does not depend on it.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract log-Mel features from an audio manifest (or the config's
    /// synthetic corpus) into a feature cache directory.
    Prep(PrepArgs),
    /// Train a model and write a checkpoint; prints one JSON line per step.
    Train(TrainArgs),
    /// Offline recognition; prints one JSON line per utterance.
    Decode(DecodeArgs),
    /// Streaming recognition of one WAV file, fed in fixed-size chunks.
    Stream(StreamArgs),
    /// Attention pair counts and timings per sequence length, as CSV.
    BenchAttention(BenchArgs),
    /// Word error rate between line-aligned reference and hypothesis files.
    Wer(WerArgs),
    /// Run the model property suite against a checkpoint.
    Verify(VerifyArgs),
    /// Summarize a checkpoint or config: parameter counts, contexts, latency.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct PrepArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Audio manifest, JSON lines of {"audio", "label", "id"?}; overrides the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest held out as the test split.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Output cache directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the synthetic corpus; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Feature cache written by `prep`; without one the config's synthetic corpus is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Number of optimizer steps; 0 writes the initial model.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for initialization, batching and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder context `L,R` for every layer (-1 = unlimited).
    #[arg(long, value_parser = parse_context, allow_hyphen_values = true)]
    context: Option<(i64, i64)>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Beam width; defaults to the checkpoint's decode section.
    #[arg(long)]
    beam: Option<usize>,
    /// Labels allowed per encoder frame.
    #[arg(long)]
    max_symbols: Option<usize>,
    /// Decode-time context `L,R` (-1 = unlimited); differs from training only for experiments.
    #[arg(long, value_parser = parse_context, allow_hyphen_values = true)]
    context: Option<(i64, i64)>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Audio manifest (JSON lines); labels, when present, are scored.
    #[arg(long, conflicts_with = "features")]
    manifest: Option<PathBuf>,
    /// Feature cache directory written by `prep`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Cache split to decode.
    #[arg(long, default_value = TEST_SPLIT)]
    split: String,
    /// Greedy search instead of beam search.
    #[arg(long)]
    greedy: bool,
    #[command(flatten)]
    search: SearchArgs,
    /// WAV files to decode.
    wavs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct StreamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    /// Chunk size in milliseconds.
    #[arg(long, default_value_t = 160.0)]
    chunk_ms: f64,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    lengths: Vec<usize>,
    /// Context `L,R` (-1 = unlimited).
    #[arg(long, value_parser = parse_context, allow_hyphen_values = true, default_value = "32,4")]
    context: (i64, i64),
    /// Model width used for timing.
    #[arg(long, default_value_t = 512)]
    d_model: usize,
}

#[derive(Debug, Args)]
struct WerArgs {
    /// Reference transcripts, one utterance per line.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis transcripts, line-aligned with the references.
    #[arg(long)]
    hyp: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// all, structural, streaming or numeric.
    #[arg(long, default_value = "all")]
    suite: String,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_context(s: &str) -> std::result::Result<(i64, i64), String> {
    let (l, r) = s
        .split_once(',')
        .ok_or_else(|| format!("expected L,R but got {s:?}"))?;
    let l: i64 = l.trim().parse().map_err(|e| format!("left context: {e}"))?;
    let r: i64 = r.trim().parse().map_err(|e| format!("right context: {e}"))?;
    AttentionContext::from_signed(l, r).map_err(|e| e.to_string())?;
    Ok((l, r))
}

/// Runs the command line with explicit output streams and returns the exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs as usize).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker threads: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli.command, out, err)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_internal() {
                2
            } else {
                1
            }
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

fn dispatch(cmd: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    match cmd {
        Command::Prep(a) => prep(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Decode(a) => decode(a, out, err),
        Command::Stream(a) => stream(a, out, err),
        Command::BenchAttention(a) => bench(a, out),
        Command::Wer(a) => wer(a, out),
        Command::Verify(a) => verify(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn emit(out: &mut (dyn Write + Send), value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn audio_entries(manifest: &Path, split: &str, run: &RunConfig) -> Result<Vec<CacheEntry>> {
    dataset::read_audio_manifest(manifest)?
        .into_par_iter()
        .map(|(rec, path)| {
            let label = rec
                .label
                .clone()
                .ok_or_else(|| Error::Input(format!("{}: manifest entry has no label", rec.audio)))?;
            run.model.tokens.encode(&label)?;
            let feats = features::wav_to_logmel(&path)?;
            Ok(CacheEntry {
                split: split.to_string(),
                source_id: rec.source_id(),
                features: feats.frames,
                label,
            })
        })
        .collect()
}

fn prep(a: PrepArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let mut run = RunConfig::load(&a.config)?;
    let manifest = a.manifest.or_else(|| run.data.train_manifest.as_ref().map(PathBuf::from));
    let mut entries = Vec::new();
    let mut audio_written = 0;
    if let Some(m) = manifest {
        entries.extend(audio_entries(&m, TRAIN_SPLIT, &run)?);
        if let Some(t) = &a.test_manifest {
            entries.extend(audio_entries(t, TEST_SPLIT, &run)?);
        }
    } else {
        let synth = run
            .data
            .synth
            .as_mut()
            .ok_or_else(|| Error::Config("no manifest given and the config has no synthetic corpus".into()))?;
        if let Some(seed) = a.seed {
            synth.seed = seed;
        }
        let (train, test) = dataset::synth_splits(synth)?;
        let test_audio = a.out.join("test_audio");
        let mut records = Vec::new();
        for (split, corpus) in [(TRAIN_SPLIT, &train), (TEST_SPLIT, &test)] {
            for u in corpus {
                let label = run.model.tokens.decode(&u.tokens)?;
                if split == TEST_SPLIT {
                    if let Some(audio) = &u.audio {
                        std::fs::create_dir_all(&test_audio)?;
                        let name = format!("{}.wav", u.source_id);
                        features::write_wav(test_audio.join(&name), audio)?;
                        records.push(dataset::AudioRecord {
                            audio: format!("test_audio/{name}"),
                            label: Some(label.clone()),
                            id: Some(u.source_id.clone()),
                        });
                    }
                }
                entries.push(CacheEntry {
                    split: split.to_string(),
                    source_id: u.source_id.clone(),
                    features: u.features.clone(),
                    label,
                });
            }
        }
        if !records.is_empty() {
            dataset::write_jsonl(a.out.join("test_audio.jsonl"), &records)?;
            audio_written = records.len();
        }
    }
    let meta = serde_json::to_string(&json!({ "data": run.data }))?;
    dataset::write_cache(&a.out, &entries, &meta)?;
    let count = |s: &str| entries.iter().filter(|e| e.split == s).count();
    emit(
        out,
        &json!({
            "cache": a.out.display().to_string(),
            "train_utterances": count(TRAIN_SPLIT),
            "test_utterances": count(TEST_SPLIT),
            "test_audio_files": audio_written,
        }),
    )?;
    Ok(0)
}

fn train(a: TrainArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some((l, r)) = a.context {
        run.model.encoder.set_context(AttentionContext::from_signed(l, r)?);
        run.model.validate()?;
    }
    let cache = a.data.clone().or_else(|| run.data.feature_cache.as_ref().map(PathBuf::from));
    let (data, mean) = match cache {
        Some(dir) => {
            let (rows, mean) = dataset::read_cache_split(&dir, TRAIN_SPLIT)?;
            let data = dataset::to_examples(rows.iter().map(|(_, f, l)| (f, l.as_str())), &mean, &run.model.tokens)?;
            (data, mean)
        }
        None => {
            let synth = run
                .data
                .synth
                .as_ref()
                .ok_or_else(|| Error::Config("no feature cache given and the config has no synthetic corpus".into()))?;
            let (train, _, mean) = dataset::synth_examples(synth)?;
            (train, mean)
        }
    };
    let mut model = Transducer::new(run.model.clone(), run.train.seed)?;
    model.feature_mean = Some(mean);
    let mut trainer = Trainer::new(model, run.train.clone())?;
    if run.train.steps > 0 {
        let mut io_error = None;
        trainer.fit(&data, |m| {
            if io_error.is_none() {
                io_error = emit(out, m).err();
            }
        })?;
        if let Some(e) = io_error {
            return Err(e);
        }
    }
    checkpoint::save(&a.out, &run, &trainer.model)?;
    writeln!(err, "wrote {} after {} steps", a.out.display(), trainer.steps_taken())?;
    Ok(0)
}

fn search_for(run: &RunConfig, args: &SearchArgs, greedy: bool) -> Search {
    let max_symbols = args.max_symbols.unwrap_or(run.decode.max_symbols_per_frame);
    if greedy {
        return Search::Greedy {
            max_symbols_per_frame: max_symbols,
        };
    }
    Search::Beam(SearchOptions {
        beam: args.beam.unwrap_or(run.decode.beam),
        max_symbols_per_frame: max_symbols,
    })
}

/// Decode-time contexts, warning on stderr when they exceed training.
fn contexts_for(run: &mut RunConfig, model: &Transducer, args: &SearchArgs, err: &mut (dyn Write + Send)) -> Result<Vec<AttentionContext>> {
    if let Some(c) = args.context {
        run.decode.context_override = Some(c);
    }
    if let Some(w) = run.context_mismatch_warning() {
        writeln!(err, "warning: {w}")?;
    }
    match run.decode.context_override {
        Some((l, r)) => Ok(vec![AttentionContext::from_signed(l, r)?; model.config.encoder.num_layers]),
        None => model.trained_contexts(),
    }
}

#[derive(Serialize)]
struct DecodeLine<'a> {
    id: &'a str,
    text: String,
    tokens: &'a [usize],
    log_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    errors: Option<usize>,
}

fn decode(a: DecodeArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let (mut run, model) = checkpoint::load(&a.checkpoint)?;
    let contexts = contexts_for(&mut run, &model, &a.search, err)?;
    let search = search_for(&run, &a.search, a.greedy);
    // (id, prepared features, reference label)
    let inputs: Vec<(String, Tensor, Option<String>)> = if let Some(dir) = &a.features {
        let (rows, _) = dataset::read_cache_split(dir, &a.split)?;
        rows.into_iter()
            .map(|(name, f, label)| Ok((name, model.prepare_features(&f)?, Some(label))))
            .collect::<Result<_>>()?
    } else {
        let mut items: Vec<(String, PathBuf, Option<String>)> = Vec::new();
        if let Some(m) = &a.manifest {
            for (rec, path) in dataset::read_audio_manifest(m)? {
                items.push((rec.source_id(), path, rec.label));
            }
        }
        for w in &a.wavs {
            items.push((w.display().to_string(), w.clone(), None));
        }
        if items.is_empty() {
            return Err(Error::Input("nothing to decode; pass --manifest, --features or WAV files".into()));
        }
        items
            .into_par_iter()
            .map(|(id, path, label)| {
                let feats = features::wav_to_logmel(&path)?.frames;
                Ok((id, model.prepare_features(&feats)?, label))
            })
            .collect::<Result<_>>()?
    };
    let results: Vec<Recognition> = inputs
        .par_iter()
        .map(|(_, f, _)| eval::recognize(&model, f, &contexts, search))
        .collect::<Result<_>>()?;
    let mut total = eval::ErrorRateReport::default();
    for ((id, _, label), r) in inputs.iter().zip(&results) {
        let text = model.config.tokens.decode(&r.tokens)?;
        let errors = match label {
            Some(l) => {
                let reference = model.config.tokens.encode(l)?;
                let rep = eval::token_error_rate(&reference, &r.tokens)?;
                total.merge(&rep);
                Some(rep.errors())
            }
            None => None,
        };
        emit(
            out,
            &DecodeLine {
                id,
                text,
                tokens: &r.tokens,
                log_prob: r.log_prob,
                reference: label.as_deref(),
                errors,
            },
        )?;
    }
    if total.reference_words > 0 {
        serde_json::to_writer(&mut *err, &json!({ "token_error_rate": total }))?;
        writeln!(err)?;
    }
    Ok(0)
}

fn stream(a: StreamArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<i32> {
    let (mut run, model) = checkpoint::load(&a.checkpoint)?;
    let contexts = contexts_for(&mut run, &model, &a.search, err)?;
    let opts = match search_for(&run, &a.search, false) {
        Search::Beam(o) => o,
        Search::Greedy { .. } => unreachable!("streaming always uses beam search"),
    };
    if !(a.chunk_ms > 0.0) {
        return Err(Error::Input("--chunk-ms must be positive".into()));
    }
    let chunk = ((a.chunk_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize).max(1);
    let audio = features::read_wav(&a.audio)?;
    let mut session = StreamingSession::new(&model, &contexts, opts)?;
    let mut fed = 0;
    for c in audio.chunks(chunk) {
        let delta = session.push_audio(c)?;
        fed += c.len();
        if !delta.is_empty() {
            emit(
                out,
                &json!({
                    "event": "partial",
                    "audio_ms": fed as f64 * 1000.0 / SAMPLE_RATE as f64,
                    "new": model.config.tokens.decode(&delta)?,
                    "text": model.config.tokens.decode(session.partial())?,
                }),
            )?;
        }
    }
    let fin = session.finalize()?;
    emit(
        out,
        &json!({
            "event": "final",
            "text": fin.text,
            "tokens": fin.tokens,
            "log_prob": fin.log_prob,
            "mean_latency_ms": fin.mean_latency_ms(),
            "latencies": fin.latencies,
        }),
    )?;
    // The offline result is the reference for the streamed one.
    let offline = decode_audio(&model, &audio, &contexts, opts)?.remove(0);
    if offline.tokens != fin.tokens {
        return Err(Error::contract("stream", "streamed transcript differs from offline decoding"));
    }
    Ok(0)
}

fn bench(a: BenchArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    if a.lengths.is_empty() || a.lengths.contains(&0) {
        return Err(Error::Input("--lengths needs positive values".into()));
    }
    let ctx = AttentionContext::from_signed(a.context.0, a.context.1)?;
    writeln!(out, "t,pairs,wallclock_ms")?;
    for row in eval::bench_attention(&a.lengths, ctx, a.d_model, 0)? {
        writeln!(out, "{},{},{:.3}", row.t, row.pairs, row.wallclock_ms)?;
    }
    Ok(0)
}

fn wer(a: WerArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let refs = std::fs::read_to_string(&a.reference)?;
    let hyps = std::fs::read_to_string(&a.hyp)?;
    let refs: Vec<&str> = refs.lines().collect();
    let hyps: Vec<&str> = hyps.lines().collect();
    if refs.len() != hyps.len() {
        return Err(Error::Input(format!(
            "{} reference lines but {} hypothesis lines",
            refs.len(),
            hyps.len()
        )));
    }
    let mut total = eval::ErrorRateReport::default();
    for (i, (r, h)) in refs.iter().zip(&hyps).enumerate() {
        let rep = eval::word_error_rate(r, h).map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?;
        total.merge(&rep);
    }
    if refs.is_empty() {
        return Err(Error::Input("reference file is empty".into()));
    }
    emit(out, &json!({ "utterances": refs.len(), "report": total }))?;
    Ok(0)
}

fn verify(a: VerifyArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let suite: Suite = a.suite.parse()?;
    let report = eval::run_property_suite(&a.checkpoint, suite)?;
    emit(out, &report)?;
    Ok(if report.passed { 0 } else { 2 })
}

fn inspect(a: InspectArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let (run, model) = match (&a.checkpoint, &a.config) {
        (Some(c), _) => checkpoint::load(c)?,
        (None, Some(c)) => {
            let run = RunConfig::load(c)?;
            let model = Transducer::new(run.model.clone(), run.train.seed)?;
            (run, model)
        }
        (None, None) => return Err(Error::Input("pass --checkpoint or --config".into())),
    };
    let params = model.param_report();
    let cfg = &model.config;
    let frame_ms = FRAME_PERIOD_MS * cfg.frontend.time_reduction() as f64;
    let lookahead = cfg.encoder.total_lookahead()?;
    let contexts: Vec<(i64, i64)> = model.trained_contexts()?.iter().map(|c| c.to_signed()).collect();
    emit(
        out,
        &json!({
            "params": params,
            "encoder_predictor_joiner": params.encoder + params.predictor + params.joiner,
            "vocab": model.vocab(),
            "encoder_layers": cfg.encoder.num_layers,
            "d_model": cfg.encoder.d_in,
            "contexts": contexts,
            "frame_period_ms": frame_ms,
            "lookahead_frames": lookahead,
            "lookahead_ms": lookahead.map(|f| f as f64 * frame_ms),
            "feature_mean": model.feature_mean.is_some(),
            "train_steps": run.train.steps,
            "context_warning": run.context_mismatch_warning(),
        }),
    )?;
    Ok(0)
}
