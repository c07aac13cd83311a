//! Binary checkpoint: `BSPL`, u32 version, u32-length JSON header, tensor
//! records, CRC32 of everything before it. All integers little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BSpell;
use crate::config::BSpellConfig;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::textpipe::{CharInventory, Vocab};

pub const MAGIC: &[u8; 4] = b"BSPL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Position of the training rng stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, as a decimal string (u128 does not fit JSON numbers).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BSpellConfig,
    vocab: String,
    inventory: String,
    rng: RngState,
    step: u64,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: BSpell<f32>,
    pub vocab: Vocab,
    pub inventory: CharInventory,
    pub rng: RngState,
    pub step: u64,
}

fn named_tensors(model: &BSpell<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut v: Vec<(String, &Tensor<f32>)> = model.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
    v.extend(model.semnet.buffers());
    v
}

/// Serialises a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ck.model.config.clone(),
        vocab: ck.vocab.to_tsv(),
        inventory: ck.inventory.to_file_string(),
        rng: ck.rng,
        step: ck.step,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 4 * ck.model.num_params() + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = named_tensors(&ck.model);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt("record runs past end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes. Nothing is returned unless the whole file checks out.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing BSPL magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch (truncated or damaged file)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let vocab = Vocab::parse_tsv(&header.vocab)?;
    let inventory = CharInventory::parse(&header.inventory)?;
    if vocab.num_classes() != header.config.num_classes || inventory.len() != header.config.semanticnet.num_chars {
        return Err(Error::Corrupt("config disagrees with stored vocabulary or inventory".into()));
    }
    // Initial values are overwritten below; the rng only has to build shapes.
    let mut model = BSpell::<f32>::new(header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32()? as usize;
    let mut records = std::collections::BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Corrupt(format!("unsupported dtype tag {dtype} for {name}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if records.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after tensor records".into()));
    }
    let mut fill = |name: &str, slot: &mut Tensor<f32>| -> Result<()> {
        let t = records
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Corrupt(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    };
    for p in model.params_mut() {
        let name = p.name.clone();
        fill(&name, &mut p.value)?;
    }
    for (name, t) in model.semnet.buffers_mut() {
        fill(&name, t)?;
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        model,
        vocab,
        inventory,
        rng: header.rng,
        step: header.step,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    crate::cli::write_atomic_with(path, |w| {
        use std::io::Write;
        w.write_all(&bytes)?;
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
