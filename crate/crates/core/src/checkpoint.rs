//! Binary tensor container used for checkpoints and feature caches.
//!
//! Layout (little endian): magic `TTRANSDU`, `u32` version, `u64` config
//! length and UTF-8 JSON config, `u64` tensor count, then per tensor a `u32`
//! name length, the name, `u32` rank, `u64` dims and `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Transducer;

const MAGIC: &[u8; 8] = b"TTRANSDU";
const VERSION: u32 = 1;
pub const FEATURE_MEAN: &str = "features.global_mean";
/// Cap on a single length field, to reject corrupt headers before allocating.
const MAX_FIELD: u64 = 1 << 34;

pub fn write_container(mut w: impl Write, config_json: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let v = u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes"));
        if v > MAX_FIELD {
            return Err(Error::Checkpoint(format!("implausible {what} {v}")));
        }
        Ok(v)
    }
}

/// Returns the config JSON and named tensors in file order.
pub fn read_container(r: impl Read) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { inner: r };
    if r.bytes(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a tensor container".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u64("config length")? as usize;
    let config = String::from_utf8(r.bytes(n, "config")?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let count = r.u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.bytes(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel as u64 > MAX_FIELD {
            return Err(Error::Checkpoint(format!("tensor {name} is implausibly large")));
        }
        let raw = r.bytes(numel * 4, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((config, tensors))
}

/// Writes `model` with `run` embedded as the config blob.
pub fn save(path: impl AsRef<Path>, run: &RunConfig, model: &Transducer) -> Result<()> {
    if run.model != model.config {
        return Err(Error::Config("run config does not describe this model".into()));
    }
    let json = serde_json::to_string_pretty(run)?;
    let mean = model
        .feature_mean
        .as_ref()
        .map(|m| Tensor::from_f64(vec![m.len()], m))
        .transpose()?;
    let mut tensors: Vec<(&str, &Tensor)> = model.params.iter().collect();
    if let Some(m) = &mean {
        tensors.push((FEATURE_MEAN, m));
    }
    let file = std::fs::File::create(path)?;
    write_container(std::io::BufWriter::new(file), &json, &tensors)
}

/// Loads a checkpoint, checking every parameter against the embedded config.
pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, Transducer)> {
    let file = std::fs::File::open(path)?;
    let (json, tensors) = read_container(std::io::BufReader::new(file))?;
    let run = RunConfig::from_json(&json).map_err(|e| Error::Checkpoint(format!("config blob: {e}")))?;
    let mut model = Transducer::new(run.model.clone(), 0)?;
    let mut seen = 0;
    for (name, t) in tensors {
        if name == FEATURE_MEAN {
            model.feature_mean = Some(t.to_f64_vec());
            continue;
        }
        let slot = model
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} of {} parameters",
            model.params.len()
        )));
    }
    Ok((run, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::desk();
        run.model.encoder.num_layers = 1;
        run
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let run = tiny_run();
        let mut model = Transducer::new(run.model.clone(), 4).unwrap();
        model.feature_mean = Some(vec![0.5; 80]);
        save(&path, &run, &model).unwrap();
        let (run2, back) = load(&path).unwrap();
        assert_eq!(run2, run);
        assert_eq!(back.feature_mean, model.feature_mean);
        for ((a, x), (b, y)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corruption_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let run = tiny_run();
        save(&path, &run, &Transducer::new(run.model.clone(), 4).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 3] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load(&path), Err(Error::Checkpoint(_))), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load(dir.path().join("missing")), Err(Error::Io(_))));
    }
}
