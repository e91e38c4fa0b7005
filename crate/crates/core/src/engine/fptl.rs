//! FPTL v1 tensor container.
//!
//! Layout: the 8-byte magic `FPTL0001`, a little-endian `u64` header length,
//! a UTF-8 JSON header mapping tensor names to `{shape, dtype, offset}`, then
//! the raw little-endian `f32` payload. Offsets are in bytes from the start of
//! the payload. The header also carries the model config under `__config__`.
//!
//! Tensor names:
//!
//! ```text
//! tok_emb                        [vocab, d]
//! pos_emb                        [max_seq, d]
//! blocks.{i}.ln1.{weight,bias}   [d]
//! blocks.{i}.attn.{q,k,v,o}.weight [d, d]   .bias [d]
//! blocks.{i}.ln2.{weight,bias}   [d]
//! blocks.{i}.mlp.fc.weight       [d_ff, d]  .bias [d_ff]
//! blocks.{i}.mlp.proj.weight     [d, d_ff]  .bias [d]
//! final_norm.{weight,bias}       [d]        (absent means identity)
//! unembed.weight                 [vocab, d]
//! unembed.bias                   [vocab]
//! ```
//!
//! The tokenizer lives beside the weights as `vocab.json` and `merges.txt`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{Block, EngineError, LayerNorm, Linear, ModelBundle, ModelConfig};
use super::tensor::Matrix;
use super::tokenizer::{Tokenizer, TokenizerError, TokenizerMode};

pub const MAGIC: &[u8; 8] = b"FPTL0001";
pub const CONFIG_KEY: &str = "__config__";
pub const WEIGHTS_FILE: &str = "model.fptl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";

#[derive(Debug, Error)]
pub enum FptlError {
    #[error("bad magic: expected FPTL0001")]
    BadMagic,
    #[error("file truncated: need {needed} bytes, have {len}")]
    TruncatedFile { needed: u64, len: u64 },
    #[error("shape mismatch for {tensor}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unsupported dtype {dtype} for {tensor}")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T, E = FptlError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

fn named_tensors(b: &ModelBundle<f32>) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    let mat = |m: &Matrix<f32>| m.shape().to_vec();
    out.push((
        "tok_emb".into(),
        mat(&b.token_embedding),
        b.token_embedding.as_slice(),
    ));
    out.push((
        "pos_emb".into(),
        mat(&b.position_embedding),
        b.position_embedding.as_slice(),
    ));
    for (i, blk) in b.blocks.iter().enumerate() {
        let p = |s: &str| format!("blocks.{i}.{s}");
        for (name, ln) in [("ln1", &blk.ln1), ("ln2", &blk.ln2)] {
            out.push((
                p(&format!("{name}.weight")),
                vec![ln.weight.len()],
                &ln.weight,
            ));
            out.push((p(&format!("{name}.bias")), vec![ln.bias.len()], &ln.bias));
        }
        for (name, lin) in [
            ("attn.q", &blk.q),
            ("attn.k", &blk.k),
            ("attn.v", &blk.v),
            ("attn.o", &blk.o),
            ("mlp.fc", &blk.fc),
            ("mlp.proj", &blk.proj),
        ] {
            out.push((
                p(&format!("{name}.weight")),
                mat(&lin.weight),
                lin.weight.as_slice(),
            ));
            out.push((p(&format!("{name}.bias")), vec![lin.bias.len()], &lin.bias));
        }
    }
    if let Some(ln) = &b.final_norm {
        out.push((
            "final_norm.weight".into(),
            vec![ln.weight.len()],
            &ln.weight,
        ));
        out.push(("final_norm.bias".into(), vec![ln.bias.len()], &ln.bias));
    }
    out.push((
        "unembed.weight".into(),
        mat(&b.unembedding),
        b.unembedding.as_slice(),
    ));
    out.push((
        "unembed.bias".into(),
        vec![b.output_bias.len()],
        &b.output_bias,
    ));
    out
}

/// Serializes the weights and config (not the tokenizer).
pub fn to_bytes(bundle: &ModelBundle<f32>) -> Vec<u8> {
    let tensors = named_tensors(bundle);
    let mut header = serde_json::Map::new();
    header.insert(
        CONFIG_KEY.into(),
        serde_json::to_value(&bundle.config).expect("config serializes"),
    );
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        let entry = TensorEntry {
            shape: shape.clone(),
            dtype: "f32".into(),
            offset,
        };
        header.insert(
            name.clone(),
            serde_json::to_value(entry).expect("entry serializes"),
        );
        offset += 4 * data.len() as u64;
    }
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, data) in &tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    entries: BTreeMap<String, TensorEntry>,
    payload: &'a [u8],
    payload_start: u64,
    file_len: u64,
}

impl Reader<'_> {
    fn tensor(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| FptlError::MissingTensor(name.to_string()))?;
        if e.dtype != "f32" {
            return Err(FptlError::UnsupportedDtype {
                tensor: name.into(),
                dtype: e.dtype.clone(),
            });
        }
        if e.shape != expected {
            return Err(FptlError::ShapeMismatch {
                tensor: name.into(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        let n: usize = expected.iter().product();
        let end = e.offset + 4 * n as u64;
        if end > self.payload.len() as u64 {
            return Err(FptlError::TruncatedFile {
                needed: self.payload_start + end,
                len: self.file_len,
            });
        }
        Ok(self.payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        Ok(Matrix::from_vec(
            rows,
            cols,
            self.tensor(name, &[rows, cols])?,
        ))
    }

    fn linear(&self, prefix: &str, out: usize, inp: usize) -> Result<Linear<f32>> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"), out, inp)?,
            bias: self.tensor(&format!("{prefix}.bias"), &[out])?,
        })
    }

    fn norm(&self, prefix: &str, d: usize) -> Result<LayerNorm<f32>> {
        Ok(LayerNorm {
            weight: self.tensor(&format!("{prefix}.weight"), &[d])?,
            bias: self.tensor(&format!("{prefix}.bias"), &[d])?,
        })
    }
}

/// Parses an FPTL v1 image. Fails without returning a partial bundle.
pub fn from_bytes(bytes: &[u8], tokenizer: Arc<Tokenizer>) -> Result<ModelBundle<f32>> {
    let file_len = bytes.len() as u64;
    if bytes.len() < 8 {
        return Err(if MAGIC.starts_with(bytes) {
            FptlError::TruncatedFile {
                needed: 16,
                len: file_len,
            }
        } else {
            FptlError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(FptlError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(FptlError::TruncatedFile {
            needed: 16,
            len: file_len,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = 16u64.saturating_add(header_len);
    if payload_start > file_len {
        return Err(FptlError::TruncatedFile {
            needed: payload_start,
            len: file_len,
        });
    }
    let mut header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[16..payload_start as usize])
            .map_err(|e| FptlError::BadHeader(e.to_string()))?;
    let config: ModelConfig = match header.remove(CONFIG_KEY) {
        Some(v) => serde_json::from_value(v).map_err(|e| FptlError::BadHeader(e.to_string()))?,
        None => return Err(FptlError::MissingTensor(CONFIG_KEY.into())),
    };
    config.validate()?;
    let entries = header
        .into_iter()
        .map(|(k, v)| {
            let e: TensorEntry =
                serde_json::from_value(v).map_err(|e| FptlError::BadHeader(format!("{k}: {e}")))?;
            Ok((k, e))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let r = Reader {
        entries,
        payload: &bytes[payload_start as usize..],
        payload_start,
        file_len,
    };

    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let blocks = (0..config.n_layers)
        .map(|i| {
            let p = |s: &str| format!("blocks.{i}.{s}");
            Ok(Block {
                ln1: r.norm(&p("ln1"), d)?,
                q: r.linear(&p("attn.q"), d, d)?,
                k: r.linear(&p("attn.k"), d, d)?,
                v: r.linear(&p("attn.v"), d, d)?,
                o: r.linear(&p("attn.o"), d, d)?,
                ln2: r.norm(&p("ln2"), d)?,
                fc: r.linear(&p("mlp.fc"), f, d)?,
                proj: r.linear(&p("mlp.proj"), d, f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let final_norm = if r.entries.contains_key("final_norm.weight") {
        Some(r.norm("final_norm", d)?)
    } else {
        None
    };
    let bundle = ModelBundle {
        token_embedding: r.matrix("tok_emb", v, d)?,
        position_embedding: r.matrix("pos_emb", config.max_seq, d)?,
        blocks,
        final_norm,
        unembedding: r.matrix("unembed.weight", v, d)?,
        output_bias: r.tensor("unembed.bias", &[v])?,
        config,
        tokenizer,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FptlError + '_ {
    move |source| FptlError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_weights(bundle: &ModelBundle<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(bundle)).map_err(io_err(path))
}

pub fn load_weights(path: &Path, tokenizer: Arc<Tokenizer>) -> Result<ModelBundle<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, tokenizer)
}

/// Writes `model.fptl`, `vocab.json` and (in BPE mode) `merges.txt` into `dir`.
pub fn save_bundle(bundle: &ModelBundle<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_weights(bundle, &dir.join(WEIGHTS_FILE))?;
    let vocab = dir.join(VOCAB_FILE);
    std::fs::write(&vocab, bundle.tokenizer.vocab_json()).map_err(io_err(&vocab))?;
    if bundle.tokenizer.mode() == TokenizerMode::Bpe {
        let merges = dir.join(MERGES_FILE);
        std::fs::write(&merges, bundle.tokenizer.merges_text()).map_err(io_err(&merges))?;
    }
    Ok(())
}

/// Reads a directory written by [`save_bundle`]. The tokenizer mode comes
/// from the config stored in the weights header.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle<f32>> {
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights).map_err(io_err(&weights))?;
    let mode = peek_config(&bytes)?.tokenizer_mode;
    let merges = dir.join(MERGES_FILE);
    let merges = (mode == TokenizerMode::Bpe).then_some(merges.as_path());
    let tokenizer = Tokenizer::from_files(mode, &dir.join(VOCAB_FILE), merges)?;
    from_bytes(&bytes, Arc::new(tokenizer))
}

/// Reads only the config entry of an FPTL image.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            FptlError::BadMagic
        } else {
            FptlError::TruncatedFile {
                needed: 16,
                len: bytes.len() as u64,
            }
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(FptlError::BadMagic);
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = 16u64.saturating_add(header_len);
    if end > bytes.len() as u64 {
        return Err(FptlError::TruncatedFile {
            needed: end,
            len: bytes.len() as u64,
        });
    }
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[16..end as usize])
            .map_err(|e| FptlError::BadHeader(e.to_string()))?;
    let cfg = header
        .get(CONFIG_KEY)
        .ok_or_else(|| FptlError::MissingTensor(CONFIG_KEY.into()))?;
    serde_json::from_value(cfg.clone()).map_err(|e| FptlError::BadHeader(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::toy::{make_toy_model, ToyOptions};

    fn toy() -> ModelBundle<f32> {
        make_toy_model(7, &ToyOptions::default()).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let b = toy();
        let bytes = to_bytes(&b);
        let back = from_bytes(&bytes, Arc::clone(&b.tokenizer)).unwrap();
        assert_eq!(back, b);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let b = toy();
        let bytes = to_bytes(&b);
        for cut in [4, 12, 40, bytes.len() - 1] {
            assert!(
                matches!(
                    from_bytes(&bytes[..cut], Arc::clone(&b.tokenizer)),
                    Err(FptlError::TruncatedFile { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let b = toy();
        let mut bytes = to_bytes(&b);
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes, b.tokenizer.clone()),
            Err(FptlError::BadMagic)
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let b = toy();
        let mut cfg = b.config.clone();
        cfg.d_ff += 1;
        let mut bad = b.clone();
        bad.config = cfg;
        let bytes = to_bytes(&bad);
        assert!(matches!(
            from_bytes(&bytes, b.tokenizer.clone()),
            Err(FptlError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bundle_directory_roundtrip() {
        let b = toy();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn identity_final_norm_survives() {
        let mut b = toy();
        b.final_norm = None;
        let back = from_bytes(&to_bytes(&b), b.tokenizer.clone()).unwrap();
        assert!(back.final_norm.is_none());
    }
}
