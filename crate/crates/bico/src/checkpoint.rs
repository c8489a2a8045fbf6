//! The BICO binary tensor container and parameter fingerprinting.
//!
//! Layout (all integers little-endian):
//!   magic "BICO" | version u32 | metadata_len u32 | metadata JSON (UTF-8)
//!   | tensor_count u32 | per tensor: name_len u32, name, dtype u8 (0 = f32),
//!     rank u8, dims u32 each, raw row-major f32 data.

use crate::error::{BicoError, Result};
use crate::param::ParamStore;
use crate::prompt::PromptTokens;
use crate::scene::SceneSpec;
use crate::tensor::Tensor;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"BICO";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_container<W: Write>(
    mut w: W,
    metadata: &Value,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(metadata)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[DTYPE_F32])?;
        let dims = tensor.dims();
        if dims.len() > u8::MAX as usize {
            return Err(BicoError::Checkpoint {
                reason: format!("tensor `{name}` rank {} too large", dims.len()),
            });
        }
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_container<R: Read>(mut r: R) -> Result<(Value, Vec<(String, Tensor<f32>)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(BicoError::Checkpoint {
            reason: format!("bad magic {:02x?}", magic),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(BicoError::Checkpoint {
            reason: format!("unsupported version {version}"),
        });
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let metadata: Value = serde_json::from_slice(&meta_buf)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|e| BicoError::Checkpoint {
            reason: format!("tensor name is not UTF-8: {e}"),
        })?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(BicoError::Checkpoint {
                reason: format!("unknown dtype byte {}", dtype[0]),
            });
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0f32; numel];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::new(dims, data)?));
    }
    Ok((metadata, tensors))
}

pub fn write_container_file(
    path: &Path,
    metadata: &Value,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_container(&mut w, metadata, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_container_file(path: &Path) -> Result<(Value, Vec<(String, Tensor<f32>)>)> {
    let file = std::fs::File::open(path)?;
    read_container(std::io::BufReader::new(file))
}

/// Content hash of a parameter store: names, dims, and raw little-endian
/// values, in sorted name order.
pub fn fingerprint(store: &ParamStore<f32>) -> String {
    let mut hasher = Sha256::new();
    for (name, p) in store.iter() {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((p.value.dims().len() as u32).to_le_bytes());
        for &d in p.value.dims() {
            hasher.update((d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn store_tensors(store: &ParamStore<f32>) -> Vec<(String, &Tensor<f32>)> {
    store
        .iter()
        .map(|(name, p)| (name.to_string(), &p.value))
        .collect()
}

pub fn tensors_into_store(tensors: Vec<(String, Tensor<f32>)>) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.insert(&name, t, false);
    }
    store
}

// ── corpus item containers ───────────────────────────────────────────

pub fn save_corpus_item(
    path: &Path,
    spec: &SceneSpec,
    prompt: &PromptTokens,
    video: &Tensor<f32>,
) -> Result<()> {
    let metadata = serde_json::json!({
        "kind": "corpus_item",
        "spec": spec,
        "prompt_ids": prompt.ids,
    });
    write_container_file(path, &metadata, &[("video".to_string(), video)])
}

pub fn load_corpus_item(path: &Path) -> Result<(SceneSpec, Vec<u32>, Tensor<f32>)> {
    let (metadata, tensors) = read_container_file(path)?;
    expect_kind(&metadata, "corpus_item")?;
    let spec: SceneSpec = serde_json::from_value(
        metadata
            .get("spec")
            .cloned()
            .ok_or_else(|| BicoError::Checkpoint {
                reason: "corpus item missing spec".to_string(),
            })?,
    )?;
    let prompt_ids: Vec<u32> = serde_json::from_value(
        metadata
            .get("prompt_ids")
            .cloned()
            .unwrap_or(Value::Array(vec![])),
    )?;
    let video = tensors
        .into_iter()
        .find(|(n, _)| n == "video")
        .map(|(_, t)| t)
        .ok_or_else(|| BicoError::Checkpoint {
            reason: "corpus item missing video tensor".to_string(),
        })?;
    Ok((spec, prompt_ids, video))
}

pub fn expect_kind(metadata: &Value, kind: &str) -> Result<()> {
    let got = metadata.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if got != kind {
        return Err(BicoError::Checkpoint {
            reason: format!("expected kind `{kind}`, got `{got}`"),
        });
    }
    Ok(())
}

/// Generic single-video container (kind `corpus_item` with provenance
/// metadata) used by the compose/export commands.
pub fn save_video(path: &Path, video: &Tensor<f32>, extra_metadata: Value) -> Result<()> {
    let mut metadata = serde_json::json!({ "kind": "corpus_item" });
    if let (Value::Object(dst), Value::Object(src)) = (&mut metadata, extra_metadata) {
        for (k, v) in src {
            dst.insert(k, v);
        }
    }
    write_container_file(path, &metadata, &[("video".to_string(), video)])
}

pub fn load_video(path: &Path) -> Result<(Value, Tensor<f32>)> {
    let (metadata, tensors) = read_container_file(path)?;
    let video = tensors
        .into_iter()
        .find(|(n, _)| n == "video")
        .map(|(_, t)| t)
        .ok_or_else(|| BicoError::Checkpoint {
            reason: "container has no video tensor".to_string(),
        })?;
    Ok((metadata, video))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[2, 2, 4], 0.5, &mut rng);
        let meta = serde_json::json!({"kind": "base", "note": "x"});
        let mut buf = Vec::new();
        write_container(
            &mut buf,
            &meta,
            &[("alpha".to_string(), &a), ("beta".to_string(), &b)],
        )
        .unwrap();
        let (meta2, tensors) = read_container(buf.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "alpha");
        assert!(tensors[0].1.bit_eq(&a));
        assert!(tensors[1].1.bit_eq(&b));
    }

    #[test]
    fn rejects_unknown_version_and_dtype() {
        let meta = serde_json::json!({});
        let t = Tensor::<f32>::zeros(&[1, 1]);
        let mut buf = Vec::new();
        write_container(&mut buf, &meta, &[("t".to_string(), &t)]).unwrap();
        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(read_container(bad_version.as_slice()).is_err());
        // dtype byte sits after magic+version+meta_len+meta+count+name_len+name
        let meta_len = u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]) as usize;
        let dtype_pos = 12 + meta_len + 4 + 4 + 1;
        let mut bad_dtype = buf.clone();
        bad_dtype[dtype_pos] = 7;
        assert!(read_container(bad_dtype.as_slice()).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2, 2], 1.0f32), true);
        let fp1 = fingerprint(&store);
        assert_eq!(fp1, fingerprint(&store));
        store.get_mut("w").data_mut()[0] = 1.0 + 1e-6;
        assert_ne!(fp1, fingerprint(&store));
    }
}
