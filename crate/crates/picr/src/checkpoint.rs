//! Model checkpoint archive: one file holding every named parameter array
//! plus the serialized codec configuration.
//!
//! Layout: 8-byte magic `PICKPT01`, big-endian u32 JSON header length, the
//! JSON header (config + tensor index), then all tensor data as little-endian
//! f64 in index order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PICKPT01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// element offset into the payload
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: CodecConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save(codec: &Codec, path: &Path) -> Result<()> {
    let params = codec.named_params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload: Vec<f64> = Vec::new();
    for (name, t) in &params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            len: t.numel(),
        });
        payload.extend_from_slice(&t.data());
    }
    let header = serde_json::to_vec(&Header {
        config: codec.config.clone(),
        tensors,
    })?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u32).to_be_bytes())?;
    f.write_all(&header)?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Codec> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a picr checkpoint",
            path.display()
        )));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let hlen = u32::from_be_bytes(len4) as usize;
    let mut hbytes = vec![0u8; hlen];
    f.read_exact(&mut hbytes)?;
    let header: Header = serde_json::from_slice(&hbytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let codec = Codec::new(header.config, 0)?;
    let params: HashMap<String, _> = codec.named_params().into_iter().collect();
    if params.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} tensors, model expects {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for entry in &header.tensors {
        let t = params.get(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!("unknown tensor {} in archive", entry.name))
        })?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} shape {:?} does not match model {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint("archive payload truncated".into()));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        t.set_data(&data);
    }
    Ok(codec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let codec = Codec::new(CodecConfig::toy(), 7).unwrap();
        save(&codec, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, codec.config);
        let a = codec.named_params();
        let b: HashMap<String, _> = loaded.named_params().into_iter().collect();
        for (name, t) in a {
            assert_eq!(t.to_vec(), b[&name].to_vec(), "{name} drifted");
        }
    }

    #[test]
    fn missing_checkpoint_is_a_distinct_error() {
        assert!(matches!(
            load(Path::new("/nonexistent/model.ckpt")),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
