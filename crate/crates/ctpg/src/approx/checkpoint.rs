//! Self-describing checkpoint container: schema version, named parameter
//! blocks with shape descriptors, little-endian f64 values, and the RNG state.

use super::{NetSpec, ParamBlock, Shape};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CTPGCKPT";
const VERSION: u32 = 1;

pub struct CheckpointData {
    pub blocks: Vec<(String, ParamBlock)>,
    pub rng: ChaCha8Rng,
}

pub fn write_checkpoint(
    path: &Path,
    blocks: &[(String, &ParamBlock)],
    rng: &ChaCha8Rng,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, block) in blocks {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        match block.shape() {
            Shape::Table { rows, cols } => {
                buf.push(0);
                buf.extend_from_slice(&(*rows as u64).to_le_bytes());
                buf.extend_from_slice(&(*cols as u64).to_le_bytes());
            }
            Shape::Net(spec) => {
                buf.push(1);
                buf.extend_from_slice(&(spec.input_dim as u64).to_le_bytes());
                buf.extend_from_slice(&(spec.output_dim as u64).to_le_bytes());
                buf.extend_from_slice(&(spec.hidden.len() as u16).to_le_bytes());
                for h in &spec.hidden {
                    buf.extend_from_slice(&(*h as u64).to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    buf.extend_from_slice(&rng.get_stream().to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad block name".into()))?;
        let tag = r.take(1)?[0];
        let shape = match tag {
            0 => Shape::Table {
                rows: r.u64()? as usize,
                cols: r.u64()? as usize,
            },
            1 => {
                let input_dim = r.u64()? as usize;
                let output_dim = r.u64()? as usize;
                let n_hidden = r.u16()? as usize;
                let mut hidden = Vec::with_capacity(n_hidden);
                for _ in 0..n_hidden {
                    hidden.push(r.u64()? as usize);
                }
                Shape::Net(NetSpec::new(input_dim, hidden, output_dim))
            }
            _ => return Err(Error::Checkpoint(format!("unknown shape tag {tag}"))),
        };
        let n_values = r.u64()? as usize;
        let mut values = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        blocks.push((
            name,
            ParamBlock::from_values(shape, values)
                .map_err(|e| Error::Checkpoint(format!("shape/value mismatch: {e}")))?,
        ));
    }
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let stream = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(CheckpointData { blocks, rng })
}
