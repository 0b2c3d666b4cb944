//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VNMTCKPT"            8-byte magic
//! u32                   format version
//! u64, bytes            TOML header: config, counters, noise state, vocabularies
//! u32                   tensor count
//! per tensor            u16 name length, name, u8 rank, u64 dims.., u8 element bits (32|64)
//! payloads              row-major, in table order
//! u32                   CRC-32 of the payload bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{NoiseSource, ParameterStore};
use crate::tensor::Precision;
use crate::training::{Adadelta, TrainConfig};

pub const MAGIC: &[u8; 8] = b"VNMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const SQ_GRAD_PREFIX: &str = "adadelta.sq_grad/";
const SQ_UPDATE_PREFIX: &str = "adadelta.sq_update/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub model: Model,
    pub optimizer: Adadelta,
    pub noise: NoiseSource,
    pub epoch: usize,
    pub step: u64,
}

impl PartialEq for NoiseSource {
    fn eq(&self, other: &Self) -> bool {
        self.seed() == other.seed() && self.word_pos() == other.word_pos()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: usize,
    step: u64,
    noise_seed: u64,
    noise_word_pos: String,
    src_vocab_size: usize,
    tgt_vocab_size: usize,
    config: TrainConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

struct Entry<'a> {
    name: String,
    rows: usize,
    cols: usize,
    bits: u8,
    data: &'a [f64],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            step: self.step,
            noise_seed: self.noise.seed(),
            noise_word_pos: self.noise.word_pos().to_string(),
            src_vocab_size: self.model.src_vocab,
            tgt_vocab_size: self.model.tgt_vocab,
            config: self.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
        };
        let header = toml::to_string(&header).map_err(|e| Error::Format(format!("header: {e}")))?;

        let param_bits = self.model.precision().bits();
        let mut entries = Vec::new();
        for (name, p) in self.model.store.iter() {
            entries.push(Entry {
                name: format!("{PARAM_PREFIX}{name}"),
                rows: p.rows,
                cols: p.cols,
                bits: param_bits,
                data: &p.value,
            });
        }
        for (prefix, acc) in [(SQ_GRAD_PREFIX, &self.optimizer.sq_grad), (SQ_UPDATE_PREFIX, &self.optimizer.sq_update)] {
            for (name, v) in acc {
                let p = self.model.store.get(name).ok_or_else(|| {
                    Error::Format(format!("optimizer state for unknown parameter `{name}`"))
                })?;
                entries.push(Entry {
                    name: format!("{prefix}{name}"),
                    rows: p.rows,
                    cols: p.cols,
                    bits: 64,
                    data: v,
                });
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(2);
            out.extend_from_slice(&(e.rows as u64).to_le_bytes());
            out.extend_from_slice(&(e.cols as u64).to_le_bytes());
            out.push(e.bits);
        }
        let mut payload = Vec::new();
        for e in &entries {
            for &x in e.data {
                if e.bits == 32 {
                    payload.extend_from_slice(&(x as f32).to_le_bytes());
                } else {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
        let header: Header = toml::from_str(header).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Format("header and preamble disagree on the format version".into()));
        }

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
            let rank = r.u8()?;
            if rank != 2 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}, expected 2")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let bits = r.u8()?;
            if bits != 32 && bits != 64 {
                return Err(Error::Format(format!("tensor `{name}` has {bits}-bit elements")));
            }
            table.push((name, rows, cols, bits));
        }
        let payload_len: usize = table.iter().map(|(_, r, c, b)| r * c * (*b as usize / 8)).sum();
        let payload = r.take(payload_len)?;
        let crc = r.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checksum".into()));
        }

        let precision = header.config.precision;
        let mut store = ParameterStore::new(precision);
        let mut optimizer = Adadelta {
            rho: header.config.rho,
            delta: header.config.delta,
            sq_grad: Default::default(),
            sq_update: Default::default(),
        };
        let mut p = Reader { bytes: payload, pos: 0 };
        for (name, rows, cols, bits) in table {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(if bits == 32 { f32::from_le_bytes(p.array()?) as f64 } else { f64::from_le_bytes(p.array()?) });
            }
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                if bits != precision.bits() {
                    return Err(Error::Format(format!("parameter `{n}` stored at {bits} bits, config says {}", precision.bits())));
                }
                store.insert(n, rows, cols, data)?;
            } else if let Some(n) = name.strip_prefix(SQ_GRAD_PREFIX) {
                optimizer.sq_grad.insert(n.to_string(), data);
            } else if let Some(n) = name.strip_prefix(SQ_UPDATE_PREFIX) {
                optimizer.sq_update.insert(n.to_string(), data);
            } else {
                return Err(Error::Format(format!("unexpected tensor `{name}`")));
            }
        }

        let src_vocab = header.src_vocab.reindex()?;
        let tgt_vocab = header.tgt_vocab.reindex()?;
        if src_vocab.len() != header.src_vocab_size || tgt_vocab.len() != header.tgt_vocab_size {
            return Err(Error::Format("vocabulary sizes disagree with the model".into()));
        }
        let check_rows = |name: &str, want: usize| -> Result<()> {
            match store.get(name) {
                Some(p) if p.rows == want => Ok(()),
                _ => Err(Error::Format(format!("`{name}` does not match a vocabulary of {want}"))),
            }
        };
        check_rows("enc.src_emb", src_vocab.len())?;
        check_rows("dec.emb", tgt_vocab.len())?;
        check_rows("out.W_o", tgt_vocab.len())?;

        let word_pos: u128 = header
            .noise_word_pos
            .parse()
            .map_err(|_| Error::Format("bad noise position".into()))?;
        Ok(Checkpoint {
            model: Model {
                dims: header.config.dims,
                src_vocab: header.src_vocab_size,
                tgt_vocab: header.tgt_vocab_size,
                store,
            },
            config: header.config,
            src_vocab,
            tgt_vocab,
            optimizer,
            noise: NoiseSource::resume(header.noise_seed, word_pos),
            epoch: header.epoch,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn precision(&self) -> Precision {
        self.model.precision()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("checkpoint is truncated".into())),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
