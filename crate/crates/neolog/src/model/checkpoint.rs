//! Binary checkpoint format (`NEO1`).
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "NEO1" | version | n_layers d_model n_heads context vocab_size base_size
//! vocab_path_len | vocab_path (UTF-8)
//! tensors as row-major little-endian f32, in order:
//!   embedding, positional,
//!   per layer: ln1_gamma ln1_beta w_qkv b_qkv w_o b_o
//!              ln2_gamma ln2_beta w1 b1 w2 b2,
//!   lnf_gamma lnf_beta w_out b_out
//! ```
//!
//! Tensor shapes follow from the header, so there are no per-tensor markers;
//! a read must consume the file exactly.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

use super::{LayerParams, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NEO1";
const CHECKPOINT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_arr1(buf: &mut Vec<u8>, a: &Array1<f32>) {
    for &v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_arr2(buf: &mut Vec<u8>, a: &Array2<f32>) {
    for &v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises the model (plus the path of its companion vocabulary file)
/// into the `NEO1` byte layout.
pub fn checkpoint_bytes(params: &ModelParams<f32>, vocab_path: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    let c = &params.config;
    for dim in [
        c.n_layers,
        c.d_model,
        c.n_heads,
        c.context,
        c.vocab_size,
        c.base_size,
    ] {
        push_u32(&mut buf, dim as u32);
    }
    push_u32(&mut buf, vocab_path.len() as u32);
    buf.extend_from_slice(vocab_path.as_bytes());

    push_arr2(&mut buf, &params.embedding);
    push_arr2(&mut buf, &params.positional);
    for l in &params.layers {
        push_arr1(&mut buf, &l.ln1_gamma);
        push_arr1(&mut buf, &l.ln1_beta);
        push_arr2(&mut buf, &l.w_qkv);
        push_arr1(&mut buf, &l.b_qkv);
        push_arr2(&mut buf, &l.w_o);
        push_arr1(&mut buf, &l.b_o);
        push_arr1(&mut buf, &l.ln2_gamma);
        push_arr1(&mut buf, &l.ln2_beta);
        push_arr2(&mut buf, &l.w1);
        push_arr1(&mut buf, &l.b1);
        push_arr2(&mut buf, &l.w2);
        push_arr1(&mut buf, &l.b2);
    }
    push_arr1(&mut buf, &params.lnf_gamma);
    push_arr1(&mut buf, &params.lnf_beta);
    push_arr2(&mut buf, &params.w_out);
    push_arr1(&mut buf, &params.b_out);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "{}: truncated at byte {}",
                self.path, self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn arr1(&mut self, n: usize) -> Result<Array1<f32>> {
        let bytes = self.take(4 * n)?;
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Array1::from_vec(v))
    }

    fn arr2(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let bytes = self.take(4 * rows * cols)?;
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Array2::from_shape_vec((rows, cols), v)
            .map_err(|e| Error::CheckpointFormat(format!("{}: {e}", self.path)))
    }
}

/// Parses `NEO1` bytes back into parameters plus the stored vocabulary path.
pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<(ModelParams<f32>, String)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: origin.to_string(),
    };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "{origin}: bad magic {magic:?}"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "{origin}: unsupported version {version}"
        )));
    }
    let config = ModelConfig {
        n_layers: r.u32()? as usize,
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        context: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        base_size: r.u32()? as usize,
    };
    config
        .validate()
        .map_err(|e| Error::CheckpointFormat(format!("{origin}: {e}")))?;
    let path_len = r.u32()? as usize;
    let vocab_path = std::str::from_utf8(r.take(path_len)?)
        .map_err(|_| Error::CheckpointFormat(format!("{origin}: vocab path is not UTF-8")))?
        .to_string();

    let d = config.d_model;
    let embedding = r.arr2(config.vocab_size, d)?;
    let positional = r.arr2(config.context, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_gamma: r.arr1(d)?,
            ln1_beta: r.arr1(d)?,
            w_qkv: r.arr2(d, 3 * d)?,
            b_qkv: r.arr1(3 * d)?,
            w_o: r.arr2(d, d)?,
            b_o: r.arr1(d)?,
            ln2_gamma: r.arr1(d)?,
            ln2_beta: r.arr1(d)?,
            w1: r.arr2(d, config.d_ff())?,
            b1: r.arr1(config.d_ff())?,
            w2: r.arr2(config.d_ff(), d)?,
            b2: r.arr1(d)?,
        });
    }
    let params = ModelParams {
        lnf_gamma: r.arr1(d)?,
        lnf_beta: r.arr1(d)?,
        w_out: r.arr2(d, config.base_size)?,
        b_out: r.arr1(config.base_size)?,
        embedding,
        positional,
        layers,
        config,
    };
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "{origin}: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((params, vocab_path))
}

pub fn save_checkpoint(params: &ModelParams<f32>, vocab_path: &str, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, vocab_path))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ModelParams<f32> {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            context: 24,
            vocab_size: 13,
            base_size: 11,
        };
        let mut p = ModelParams::<f32>::init(
            ModelConfig {
                vocab_size: 11,
                ..config
            },
            42,
        )
        .unwrap();
        p.attach_embedding_row(&vec![0.25; 16]).unwrap();
        p.attach_embedding_row(&vec![-0.5; 16]).unwrap();
        p
    }

    #[test]
    fn round_trip_preserves_everything() {
        let params = sample_params();
        let bytes = checkpoint_bytes(&params, "model.vocab");
        let (back, vocab_path) = checkpoint_from_bytes(&bytes, "<mem>").unwrap();
        assert_eq!(vocab_path, "model.vocab");
        assert_eq!(params, back);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let params = sample_params();
        let bytes = checkpoint_bytes(&params, "model.vocab");
        let (back, path) = checkpoint_from_bytes(&bytes, "<mem>").unwrap();
        assert_eq!(checkpoint_bytes(&back, &path), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.neo1");
        let params = sample_params();
        save_checkpoint(&params, "model.vocab", &path).unwrap();
        let (back, vocab_path) = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(vocab_path, "model.vocab");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let params = sample_params();
        let mut bytes = checkpoint_bytes(&params, "v");
        bytes[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bytes, "<mem>"),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let params = sample_params();
        let mut bytes = checkpoint_bytes(&params, "v");
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bytes, "<mem>"),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let params = sample_params();
        let bytes = checkpoint_bytes(&params, "v");
        let short = &bytes[..bytes.len() - 5];
        assert!(matches!(
            checkpoint_from_bytes(short, "<mem>"),
            Err(Error::CheckpointFormat(_))
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            checkpoint_from_bytes(&long, "<mem>"),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn negative_zero_and_subnormals_survive() {
        let mut params = sample_params();
        params.w_out[[0, 0]] = -0.0;
        params.w_out[[0, 1]] = f32::MIN_POSITIVE / 2.0; // subnormal
        let bytes = checkpoint_bytes(&params, "v");
        let (back, _) = checkpoint_from_bytes(&bytes, "<mem>").unwrap();
        assert_eq!(back.w_out[[0, 0]].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.w_out[[0, 1]], f32::MIN_POSITIVE / 2.0);
    }
}
