//! Manifests and the on-disk feature cache.
//!
//! A cache directory holds `features.bin` (a tensor container with one
//! tensor per utterance, named `{split}/{source_id}`, plus the training-split
//! global mean), `cache.jsonl` with one [`CacheRecord`] per utterance, and
//! one `{split}.jsonl` of [`TrainingRecord`]s per split.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint::{read_container, write_container, FEATURE_MEAN};
use crate::config::SynthDataConfig;
use crate::error::{Error, Result};
use crate::features::{compute_global_mean, normalize, synth_corpus, SynthUtterance};
use crate::tokens::TokenInventory;
use crate::train::Example;

pub const FEATURES_FILE: &str = "features.bin";
pub const CACHE_MANIFEST: &str = "cache.jsonl";
pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

/// One line of an audio manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioRecord {
    pub audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl AudioRecord {
    pub fn source_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            Path::new(&self.audio)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.audio.clone())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub source_id: String,
    pub num_frames: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub feature_tensor_name: String,
    pub label_string: String,
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an audio manifest, resolving each path to an absolute location.
pub fn read_audio_manifest(path: impl AsRef<Path>) -> Result<Vec<(AudioRecord, PathBuf)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_jsonl::<AudioRecord>(path)?
        .into_iter()
        .map(|r| {
            let p = base.join(&r.audio);
            (r, p)
        })
        .collect())
}

/// A labelled utterance ready to be cached.
#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub split: String,
    pub source_id: String,
    /// Raw (unnormalized) log-Mel features.
    pub features: Tensor,
    pub label: String,
}

pub fn tensor_name(split: &str, source_id: &str) -> String {
    format!("{split}/{source_id}")
}

/// Writes a cache directory. The stored mean is taken over the training
/// split only.
pub fn write_cache(dir: impl AsRef<Path>, entries: &[CacheEntry], metadata_json: &str) -> Result<Vec<f64>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let train: Vec<&Tensor> = entries.iter().filter(|e| e.split == TRAIN_SPLIT).map(|e| &e.features).collect();
    if train.is_empty() {
        return Err(Error::Input("feature cache needs at least one training utterance".into()));
    }
    let mean = compute_global_mean(train)?;
    let mean_tensor = Tensor::from_f64(vec![mean.len()], &mean)?;
    let names: Vec<String> = entries.iter().map(|e| tensor_name(&e.split, &e.source_id)).collect();
    let mut tensors: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(entries.iter().map(|e| &e.features)).collect();
    tensors.push((FEATURE_MEAN, &mean_tensor));
    let file = std::fs::File::create(dir.join(FEATURES_FILE))?;
    write_container(BufWriter::new(file), metadata_json, &tensors)?;

    let records: Vec<CacheRecord> = entries
        .iter()
        .map(|e| CacheRecord {
            source_id: e.source_id.clone(),
            num_frames: e.features.rows(),
            label: e.label.clone(),
        })
        .collect();
    write_jsonl(dir.join(CACHE_MANIFEST), &records)?;
    let mut splits: Vec<&str> = entries.iter().map(|e| e.split.as_str()).collect();
    splits.sort_unstable();
    splits.dedup();
    for split in splits {
        let lines: Vec<TrainingRecord> = entries
            .iter()
            .zip(&names)
            .filter(|(e, _)| e.split == split)
            .map(|(e, n)| TrainingRecord {
                feature_tensor_name: n.clone(),
                label_string: e.label.clone(),
            })
            .collect();
        write_jsonl(dir.join(format!("{split}.jsonl")), &lines)?;
    }
    Ok(mean)
}

/// One split of a cache: `(tensor name, raw features, label)` in manifest
/// order, and the stored global mean.
pub fn read_cache_split(dir: impl AsRef<Path>, split: &str) -> Result<(Vec<(String, Tensor, String)>, Vec<f64>)> {
    let dir = dir.as_ref();
    let records: Vec<TrainingRecord> = read_jsonl(dir.join(format!("{split}.jsonl")))?;
    let (_, tensors) = read_container(BufReader::new(std::fs::File::open(dir.join(FEATURES_FILE))?))?;
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mean = by_name
        .remove(FEATURE_MEAN)
        .ok_or_else(|| Error::Checkpoint(format!("{FEATURES_FILE} has no {FEATURE_MEAN}")))?
        .to_f64_vec();
    let rows = records
        .into_iter()
        .map(|r| {
            let t = by_name
                .remove(&r.feature_tensor_name)
                .ok_or_else(|| Error::Input(format!("tensor {} missing from cache", r.feature_tensor_name)))?;
            Ok((r.feature_tensor_name, t, r.label_string))
        })
        .collect::<Result<_>>()?;
    Ok((rows, mean))
}

/// Normalizes raw features and encodes labels into training examples.
pub fn to_examples<'a>(
    items: impl IntoIterator<Item = (&'a Tensor, &'a str)>,
    mean: &[f64],
    tokens: &TokenInventory,
) -> Result<Vec<Example>> {
    items
        .into_iter()
        .map(|(f, label)| {
            Ok(Example {
                features: normalize(f, mean)?,
                tokens: tokens.encode(label)?,
            })
        })
        .collect()
}

/// Training and test corpora for a synthetic data section. The test split
/// uses the next seed.
pub fn synth_splits(cfg: &SynthDataConfig) -> Result<(Vec<SynthUtterance>, Vec<SynthUtterance>)> {
    let train = synth_corpus(cfg.task, cfg.train_utterances, cfg.max_tokens, cfg.seed)?;
    let test = synth_corpus(cfg.task, cfg.test_utterances, cfg.max_tokens, cfg.seed.wrapping_add(1))?;
    Ok((train, test))
}

/// Normalized examples for both synthetic splits, with the training mean.
pub fn synth_examples(cfg: &SynthDataConfig) -> Result<(Vec<Example>, Vec<Example>, Vec<f64>)> {
    let (train, test) = synth_splits(cfg)?;
    let mean = compute_global_mean(train.iter().map(|u| &u.features))?;
    let prep = |c: &[SynthUtterance]| -> Result<Vec<Example>> {
        c.iter()
            .map(|u| {
                Ok(Example {
                    features: normalize(&u.features, &mean)?,
                    tokens: u.tokens.clone(),
                })
            })
            .collect()
    };
    Ok((prep(&train)?, prep(&test)?, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            CacheEntry {
                split: TRAIN_SPLIT.into(),
                source_id: "a".into(),
                features: Tensor::full(vec![3, 2], 1.0),
                label: "01".into(),
            },
            CacheEntry {
                split: TRAIN_SPLIT.into(),
                source_id: "b".into(),
                features: Tensor::full(vec![1, 2], 3.0),
                label: "2".into(),
            },
            CacheEntry {
                split: TEST_SPLIT.into(),
                source_id: "c".into(),
                features: Tensor::full(vec![2, 2], 9.0),
                label: "3".into(),
            },
        ];
        let mean = write_cache(dir.path(), &entries, "{}").unwrap();
        assert_eq!(mean, vec![1.5, 1.5]);
        let (train, stored) = read_cache_split(dir.path(), TRAIN_SPLIT).unwrap();
        assert_eq!(stored, mean);
        assert_eq!(train.len(), 2);
        assert_eq!(train[0].0, "train/a");
        assert_eq!(train[1].2, "2");
        let cache: Vec<CacheRecord> = read_jsonl(dir.path().join(CACHE_MANIFEST)).unwrap();
        assert_eq!(cache[2].num_frames, 2);
        let (test, _) = read_cache_split(dir.path(), TEST_SPLIT).unwrap();
        assert_eq!(test[0].1, entries[2].features);
        let ex = to_examples(test.iter().map(|(_, f, l)| (f, l.as_str())), &mean, &TokenInventory::tone_digits()).unwrap();
        assert_eq!(ex[0].tokens, vec![4]);
        assert_eq!(ex[0].features.data()[0], 7.5);
    }

    #[test]
    fn bad_manifest_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"audio\": \"x.wav\"}\n\nnot json\n").unwrap();
        let err = read_audio_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn source_id_defaults_to_file_stem() {
        let r = AudioRecord {
            audio: "dir/utt7.wav".into(),
            label: None,
            id: None,
        };
        assert_eq!(r.source_id(), "utt7");
    }
}
