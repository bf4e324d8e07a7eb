//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian: magic "GTCK", format version (u32),
//! entry count (u32), then per entry sorted by parameter path: path length
//! (u32), UTF-8 path, rank (u32), dimensions (u64 each), then the values as
//! raw f64 bits. Raw bits make the round-trip exact, and the sorted order
//! makes equal states produce byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"GTCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut sorted: Vec<&(String, &Tensor)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Checkpoint(format!(
                "duplicate parameter path {}",
                pair[0].0
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(sorted.len() as u32).to_le_bytes())?;
    for (name, tensor) in sorted {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, not a checkpoint file"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r, "entry count")?;
    let mut out = BTreeMap::new();
    for i in 0..count {
        let name_len = read_u32(&mut r, "path length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::Checkpoint(format!("truncated path in entry {i}")))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint(format!("non-UTF-8 path in entry {i}")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data in {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        if out.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter path {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(out)
}

/// Writes every tensor of the model, running statistics included.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    save_checkpoint(path, &model.collect_state())
}

/// Strict load: the file must contain exactly the model's parameter set with
/// matching shapes.
pub fn load_model_into(path: &Path, model: &mut Model) -> Result<()> {
    let loaded = load_checkpoint(path)?;
    let mut state = model.collect_state_mut();
    if state.len() != loaded.len() {
        let have: Vec<&String> = loaded.keys().collect();
        let want: Vec<&String> = state.iter().map(|(n, _)| n).collect();
        let missing: Vec<&&String> = want.iter().filter(|n| !loaded.contains_key(**n)).collect();
        let extra: Vec<&&String> = have.iter().filter(|n| !want.contains(n)).collect();
        return Err(Error::Checkpoint(format!(
            "parameter set mismatch: {} in file, {} in model; missing {missing:?}, unexpected {extra:?}",
            loaded.len(),
            state.len()
        )));
    }
    for (name, tensor) in &mut state {
        let src = loaded.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("file has no entry for model parameter {name}"))
        })?;
        if src.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: file shape {:?} does not match model shape {:?}",
                src.shape(),
                tensor.shape()
            )));
        }
        **tensor = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbeddingKind, ModelConfig};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 4,
            embed_channels: 4,
            head_hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t1 = Tensor::randn(&[3, 4], 2.0, &mut rng);
        let t2 = Tensor::from_vec(&[4], vec![0.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let entries = vec![("b.weight".to_string(), &t1), ("a.bias".to_string(), &t2)];
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded["b.weight"], t1);
        let back = &loaded["a.bias"];
        for (a, b) in back.data().iter().zip(t2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn equal_states_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.ckpt");
        let p2 = dir.path().join("m2.ckpt");
        let m1 = Model::new(tiny_cfg(), 7).unwrap();
        let m2 = Model::new(tiny_cfg(), 7).unwrap();
        save_model(&p1, &m1).unwrap();
        save_model(&p2, &m2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn model_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let src = Model::new(tiny_cfg(), 2).unwrap();
        save_model(&path, &src).unwrap();
        let mut dst = Model::new(tiny_cfg(), 99).unwrap();
        load_model_into(&path, &mut dst).unwrap();
        for ((n1, t1), (n2, t2)) in src.collect_state().iter().zip(dst.collect_state().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2, "mismatch at {n1}");
        }
    }

    #[test]
    fn mismatched_architectures_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let src = Model::new(tiny_cfg(), 3).unwrap();
        save_model(&path, &src).unwrap();
        let mut bigger = Model::new(
            ModelConfig {
                channels: 8,
                embed_channels: 8,
                head_hidden: 8,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        assert!(load_model_into(&path, &mut bigger).is_err());
        let mut other_kind = Model::new(
            ModelConfig {
                embedding: EmbeddingKind::DwXcorr,
                ..tiny_cfg()
            },
            3,
        )
        .unwrap();
        assert!(load_model_into(&path, &mut other_kind).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
        let good = dir.path().join("good.ckpt");
        let t = Tensor::zeros(&[2, 2]);
        save_checkpoint(&good, &[("x".to_string(), &t)]).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
