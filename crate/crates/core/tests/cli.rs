use std::path::{Path, PathBuf};

use serde_json::Value;
use transducer::cli;
use transducer::config::RunConfig;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Outcome {
    fn json_lines(&self) -> Vec<Value> {
        self.stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }
}

fn run(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("transducer").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// Desk config shrunk to one layer and a few dozen utterances.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut run = RunConfig::desk();
    run.model.encoder.num_layers = 1;
    let synth = run.data.synth.as_mut().unwrap();
    synth.train_utterances = 12;
    synth.test_utterances = 3;
    synth.max_tokens = 3;
    run.train.batch_size = 2;
    run.decode.beam = 3;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_match_presets() {
    assert_eq!(RunConfig::load(configs_dir().join("desk.json")).unwrap(), RunConfig::desk());
    assert_eq!(RunConfig::load(configs_dir().join("full.json")).unwrap(), RunConfig::full());
}

#[test]
fn prep_train_decode_stream_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cache = dir.path().join("cache");

    let prep = run(&["prep", "--config", s(&cfg), "--out", s(&cache)]);
    assert_eq!(prep.code, 0, "{}", prep.stderr);
    let summary = &prep.json_lines()[0];
    assert_eq!(summary["train_utterances"], 12);
    assert_eq!(summary["test_audio_files"], 3);
    let cache_lines = std::fs::read_to_string(cache.join("cache.jsonl")).unwrap();
    let first: Value = serde_json::from_str(cache_lines.lines().next().unwrap()).unwrap();
    for key in ["source_id", "num_frames", "label"] {
        assert!(first.get(key).is_some(), "cache manifest lacks {key}");
    }
    let train_lines = std::fs::read_to_string(cache.join("train.jsonl")).unwrap();
    let first: Value = serde_json::from_str(train_lines.lines().next().unwrap()).unwrap();
    assert!(first["feature_tensor_name"].as_str().unwrap().starts_with("train/"));
    assert!(first.get("label_string").is_some());

    let ckpt0 = dir.path().join("init.ckpt");
    let init = run(&["train", "--config", s(&cfg), "--out", s(&ckpt0), "--steps", "0"]);
    assert_eq!(init.code, 0, "{}", init.stderr);
    assert!(init.stdout.is_empty());
    let verify = run(&["verify", "--checkpoint", s(&ckpt0)]);
    assert_eq!(verify.code, 0, "{}", verify.stdout);
    assert_eq!(verify.json_lines()[0]["passed"], true);

    let ckpt = dir.path().join("m.ckpt");
    let trained = run(&["train", "--config", s(&cfg), "--data", s(&cache), "--out", s(&ckpt), "--steps", "2"]);
    assert_eq!(trained.code, 0, "{}", trained.stderr);
    let steps = trained.json_lines();
    assert_eq!(steps.len(), 2);
    assert_eq!(steps[1]["step"], 2);
    assert!(steps[0]["loss"].as_f64().unwrap() > 0.0);

    let manifest = cache.join("test_audio.jsonl");
    let a = run(&["decode", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.json_lines().len(), 3);
    assert!(a.stderr.contains("token_error_rate"));
    let b = run(&["--jobs", "3", "decode", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]);
    assert_eq!(a.stdout, b.stdout);
    let from_cache = run(&["decode", "--checkpoint", s(&ckpt), "--features", s(&cache), "--greedy"]);
    assert_eq!(from_cache.code, 0, "{}", from_cache.stderr);
    assert_eq!(from_cache.json_lines().len(), 3);

    let wav = std::fs::read_dir(cache.join("test_audio")).unwrap().next().unwrap().unwrap().path();
    let st = run(&["stream", "--checkpoint", s(&ckpt), "--audio", s(&wav), "--chunk-ms", "10"]);
    assert_eq!(st.code, 0, "{}", st.stderr);
    let last = st.json_lines().pop().unwrap();
    assert_eq!(last["event"], "final");

    let wide = run(&["decode", "--checkpoint", s(&ckpt), "--context", "-1,-1", s(&wav)]);
    assert_eq!(wide.code, 0);
    assert!(wide.stderr.contains("warning"), "{}", wide.stderr);

    let insp = run(&["inspect", "--checkpoint", s(&ckpt)]);
    assert_eq!(insp.json_lines()[0]["lookahead_ms"], 240.0);
}

#[test]
fn corrupted_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&ckpt), "--steps", "0"]).code, 0);
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let v = run(&["verify", "--checkpoint", s(&ckpt)]);
    assert_eq!(v.code, 1);
    assert!(v.stderr.contains("checkpoint"), "{}", v.stderr);
    assert_eq!(run(&["verify", "--checkpoint", s(&dir.path().join("nope"))]).code, 1);
}

#[test]
fn wer_reports_pooled_counts() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("ref.txt");
    let h = dir.path().join("hyp.txt");
    std::fs::write(&r, "a b c\nA\n").unwrap();
    std::fs::write(&h, "a c\nb c\n").unwrap();
    let out = run(&["wer", "--ref", s(&r), "--hyp", s(&h)]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let rep = &out.json_lines()[0]["report"];
    assert_eq!(rep["substitutions"], 1);
    assert_eq!(rep["insertions"], 1);
    assert_eq!(rep["deletions"], 1);
    assert_eq!(rep["reference_words"], 4);
    assert_eq!(rep["wer"], 0.75);

    std::fs::write(&h, "a c\n").unwrap();
    assert_eq!(run(&["wer", "--ref", s(&r), "--hyp", s(&h)]).code, 1);
    std::fs::write(&r, "\nx\n").unwrap();
    std::fs::write(&h, "y\nx\n").unwrap();
    assert_eq!(run(&["wer", "--ref", s(&r), "--hyp", s(&h)]).code, 1);
}

#[test]
fn bench_attention_prints_csv() {
    let out = run(&["bench-attention", "--lengths", "16,32", "--context", "4,1", "--d-model", "8"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let lines: Vec<&str> = out.stdout.lines().collect();
    assert_eq!(lines[0], "t,pairs,wallclock_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("16,"));
}

#[test]
fn inspect_full_config_counts_parameters() {
    let out = run(&["inspect", "--config", s(&configs_dir().join("full.json"))]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let v = &out.json_lines()[0];
    assert_eq!(v["params"]["total"], 45_813_344);
    assert_eq!(v["encoder_predictor_joiner"], 45_046_048);
    assert_eq!(v["frame_period_ms"], 60.0);
    assert_eq!(v["lookahead_ms"], 12.0 * 4.0 * 60.0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["train", "--bogus"]).code, 1);
    assert_eq!(run(&["inspect", "--config", "/does/not/exist.json"]).code, 1);
    assert_eq!(run(&["bench-attention", "--context", "4"]).code, 1);
    assert_eq!(run(&["verify", "--checkpoint", "x", "--suite", "nope"]).code, 1);
    let help = run(&["--help"]);
    assert_eq!(help.code, 0);
    for sub in ["prep", "train", "decode", "stream", "bench-attention", "wer", "verify", "inspect"] {
        assert!(help.stdout.contains(sub), "help lacks {sub}");
    }
}
