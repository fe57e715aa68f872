//! Binary weight file.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ESDL"
//! 4       4     format version (u32, currently 1)
//! 8       28    num_layers, hidden_dim, num_heads, ffn_dim, vocab_size,
//!               mask_token_id, eos_token_id (u32 each)
//! 36      4     rope_base (f32)
//! 40      ...   tensors as raw row-major f32, in this order:
//!               embedding [vocab x d]
//!               per layer: attn_norm [d], wq, wk, wv, wo [d x d], ffn_norm [d],
//!                          w_gate [d x d_ff], w_up [d x d_ff], w_down [d_ff x d]
//!               final_norm [d]
//!               head [d x vocab]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerWeights, Model, ModelConfig, ModelWeights};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const WEIGHT_FILE_MAGIC: [u8; 4] = *b"ESDL";
pub const WEIGHT_FILE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 40;

struct Section {
    name: String,
    rows: usize,
    cols: usize,
}

fn sections(cfg: &ModelConfig) -> Vec<Section> {
    let (d, f, v) = (cfg.dim(), cfg.ffn(), cfg.vocab());
    let s = |name: String, rows, cols| Section { name, rows, cols };
    let mut out = vec![s("embedding".into(), v, d)];
    for l in 0..cfg.layers() {
        out.push(s(format!("layers.{l}.attn_norm"), 1, d));
        out.push(s(format!("layers.{l}.wq"), d, d));
        out.push(s(format!("layers.{l}.wk"), d, d));
        out.push(s(format!("layers.{l}.wv"), d, d));
        out.push(s(format!("layers.{l}.wo"), d, d));
        out.push(s(format!("layers.{l}.ffn_norm"), 1, d));
        out.push(s(format!("layers.{l}.w_gate"), d, f));
        out.push(s(format!("layers.{l}.w_up"), d, f));
        out.push(s(format!("layers.{l}.w_down"), f, d));
    }
    out.push(s("final_norm".into(), 1, d));
    out.push(s("head".into(), d, v));
    out
}

fn tensors(w: &ModelWeights) -> Vec<&[f32]> {
    let mut out: Vec<&[f32]> = vec![w.embedding.data()];
    for l in &w.layers {
        out.extend([
            l.attn_norm.as_slice(),
            l.wq.data(),
            l.wk.data(),
            l.wv.data(),
            l.wo.data(),
            l.ffn_norm.as_slice(),
            l.w_gate.data(),
            l.w_up.data(),
            l.w_down.data(),
        ]);
    }
    out.push(&w.final_norm);
    out.push(w.head.data());
    out
}

pub(crate) fn write_f32s<W: Write>(out: &mut W, data: &[f32]) -> std::io::Result<()> {
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(input: &mut R, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

impl Model {
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let c = &self.config;
        out.write_all(&WEIGHT_FILE_MAGIC)?;
        out.write_all(&WEIGHT_FILE_VERSION.to_le_bytes())?;
        for v in [
            c.num_layers,
            c.hidden_dim,
            c.num_heads,
            c.ffn_dim,
            c.vocab_size,
            c.mask_token_id,
            c.eos_token_id,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&c.rope_base.to_le_bytes())?;
        for t in tensors(&self.weights) {
            write_f32s(out, t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Self::read_from(BufReader::new(file), len)
    }

    /// Parses a weight file of `len` bytes. Magic, version and config are
    /// checked and the total size is compared against the config before any
    /// tensor buffer is allocated.
    pub fn read_from<R: Read>(mut input: R, len: u64) -> Result<Self> {
        if len < 4 {
            return Err(format_err(len, "truncated: missing section 'magic'"));
        }
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if magic != WEIGHT_FILE_MAGIC {
            return Err(format_err(0, format!("bad magic {magic:?}, expected \"ESDL\"")));
        }
        if len < HEADER_LEN {
            return Err(format_err(len, "truncated: missing section 'header'"));
        }
        let mut header = [0u8; (HEADER_LEN - 4) as usize];
        input.read_exact(&mut header)?;
        let word = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
        let version = word(0);
        if version != WEIGHT_FILE_VERSION {
            return Err(format_err(4, format!("unsupported format version {version}")));
        }
        let config = ModelConfig {
            num_layers: word(1),
            hidden_dim: word(2),
            num_heads: word(3),
            ffn_dim: word(4),
            vocab_size: word(5),
            mask_token_id: word(6),
            eos_token_id: word(7),
            rope_base: f32::from_bits(word(8)),
        };
        config
            .validate()
            .map_err(|e| format_err(8, format!("invalid model header: {e}")))?;

        let secs = sections(&config);
        let mut offset = HEADER_LEN;
        for s in &secs {
            let end = offset + (s.rows * s.cols * 4) as u64;
            if end > len {
                return Err(format_err(
                    len,
                    format!(
                        "truncated: missing section '{}' (needs bytes {offset}..{end})",
                        s.name
                    ),
                ));
            }
            offset = end;
        }
        if offset != len {
            return Err(format_err(
                offset,
                format!("{} trailing bytes after last section", len - offset),
            ));
        }

        let mut read = |s: &Section| -> Result<Matrix> {
            Matrix::from_vec(s.rows, s.cols, read_f32s(&mut input, s.rows * s.cols)?)
        };
        let mut it = secs.iter();
        let mut next = || read(it.next().expect("section list matches layout"));
        let embedding = next()?;
        let mut layers = Vec::with_capacity(config.layers());
        for _ in 0..config.layers() {
            layers.push(LayerWeights {
                attn_norm: next()?.into_data(),
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                ffn_norm: next()?.into_data(),
                w_gate: next()?,
                w_up: next()?,
                w_down: next()?,
            });
        }
        let final_norm = next()?.into_data();
        let head = next()?;
        let weights = ModelWeights {
            embedding,
            layers,
            final_norm,
            head,
        };
        if tensors(&weights).iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(format_err(HEADER_LEN, "non-finite weight value"));
        }
        Ok(Model { config, weights })
    }
}
