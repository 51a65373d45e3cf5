//! Portable binary checkpoints.
//!
//! Layout: magic `SXTP`, little-endian u32 format version, a
//! length-prefixed UTF-8 metadata block of `key = value` lines, then one
//! record per tensor: u32 name length, name bytes, 1-byte rank,
//! little-endian u64 dims, row-major little-endian IEEE-754 f32 payload,
//! and an 8-byte CRC-64 of the record. Tensors are ordered by section
//! (parameters, then Adam first/second moments) and name, so a
//! save/load/save round trip is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SXTP";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "optim.m/";
const MOMENT_V: &str = "optim.v/";

/// Serialisable RNG snapshot (seed plus stream position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// A full training snapshot: model tensors, optimizer moments, RNG state
/// and the step counter.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, step: u64, params: BTreeMap<String, Tensor>, rng: RngState) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            step,
            config,
            params,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            rng,
        }
    }

    /// Validate that the stored tensor names exactly match a model registry.
    pub fn check_registry(&self, names: impl Iterator<Item = String>) -> Result<()> {
        let expected: std::collections::BTreeSet<String> = names.collect();
        let got: std::collections::BTreeSet<String> = self.params.keys().cloned().collect();
        if expected != got {
            let missing: Vec<_> = expected.difference(&got).take(3).cloned().collect();
            let extra: Vec<_> = got.difference(&expected).take(3).cloned().collect();
            return Err(Error::Checkpoint(format!(
                "tensor names do not match the model registry (missing {:?}, unexpected {:?})",
                missing, extra
            )));
        }
        Ok(())
    }
}

// CRC-64/ECMA-182, bitwise MSB-first, no reflection, init and xorout 0.
const CRC64_POLY: u64 = 0x42F0_E1EB_A9EA_3693;

fn crc64(bytes: &[u8]) -> u64 {
    let mut crc: u64 = 0;
    for &b in bytes {
        crc ^= (b as u64) << 56;
        for _ in 0..8 {
            crc = if crc & (1 << 63) != 0 {
                (crc << 1) ^ CRC64_POLY
            } else {
                crc << 1
            };
        }
    }
    crc
}

fn metadata_text(ckpt: &Checkpoint) -> String {
    let c = &ckpt.config;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("step", ckpt.step.to_string());
    kv("model.enc_layers", c.enc_layers.to_string());
    kv("model.dec_layers", c.dec_layers.to_string());
    kv("model.d_model", c.d_model.to_string());
    kv("model.enc_ffn", c.enc_ffn.to_string());
    kv("model.dec_ffn", c.dec_ffn.to_string());
    kv("model.heads", c.heads.to_string());
    kv("model.pde_enabled", c.pde_enabled.to_string());
    kv("model.pde_layer", c.pde_layer.to_string());
    kv("model.dropout", format!("{:e}", c.dropout));
    kv("model.vocab_size", c.vocab_size.to_string());
    kv("model.max_positions", c.max_positions.to_string());
    kv("model.n_target_langs", c.n_target_langs.to_string());
    kv("rng.seed", hex(&ckpt.rng.seed));
    kv("rng.word_pos", ckpt.rng.word_pos.to_string());
    s
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Checkpoint("odd hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| Error::Checkpoint(format!("bad hex byte {:?}", &s[i..i + 2])))
        })
        .collect()
}

fn parse_metadata(text: &str) -> Result<(u64, ModelConfig, RngState)> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Checkpoint(format!("malformed metadata line {:?}", line)));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("metadata key {} missing", k)))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata key {} is not an integer", k)))
    };
    let step: u64 = get("step")?
        .parse()
        .map_err(|_| Error::Checkpoint("metadata step is not an integer".into()))?;
    let config = ModelConfig {
        enc_layers: parse_usize("model.enc_layers")?,
        dec_layers: parse_usize("model.dec_layers")?,
        d_model: parse_usize("model.d_model")?,
        enc_ffn: parse_usize("model.enc_ffn")?,
        dec_ffn: parse_usize("model.dec_ffn")?,
        heads: parse_usize("model.heads")?,
        pde_enabled: get("model.pde_enabled")? == "true",
        pde_layer: parse_usize("model.pde_layer")?,
        dropout: get("model.dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("metadata dropout is not a number".into()))?,
        vocab_size: parse_usize("model.vocab_size")?,
        max_positions: parse_usize("model.max_positions")?,
        n_target_langs: parse_usize("model.n_target_langs")?,
    };
    let seed_bytes = unhex(get("rng.seed")?)?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = get("rng.word_pos")?
        .parse()
        .map_err(|_| Error::Checkpoint("rng word_pos is not an integer".into()))?;
    Ok((step, config, RngState { seed, word_pos }))
}

fn write_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor) -> Result<()> {
    if tensor.dims().len() > u8::MAX as usize {
        return Err(Error::Checkpoint(format!("tensor {} rank too large", name)));
    }
    let mut record = Vec::with_capacity(16 + name.len() + tensor.len() * 4);
    record.extend_from_slice(&(name.len() as u32).to_le_bytes());
    record.extend_from_slice(name.as_bytes());
    record.push(tensor.dims().len() as u8);
    for &d in tensor.dims() {
        record.extend_from_slice(&(d as u64).to_le_bytes());
    }
    record.extend_from_slice(&tensor.to_f32_le_bytes());
    let crc = crc64(&record);
    out.extend_from_slice(&record);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(())
}

/// Serialise a checkpoint to bytes (also used to diff payloads in tests).
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    let meta = metadata_text(ckpt);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in &ckpt.params {
        write_record(&mut out, name, t)?;
    }
    for (name, t) in &ckpt.adam_m {
        write_record(&mut out, &format!("{MOMENT_M}{name}"), t)?;
    }
    for (name, t) in &ckpt.adam_v {
        write_record(&mut out, &format!("{MOMENT_V}{name}"), t)?;
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated file while reading {}", what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {})",
            version, FORMAT_VERSION
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let (step, config, rng) = parse_metadata(meta)?;
    let mut params = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    while !r.done() {
        let record_start = r.pos;
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&format!("dims of {}", name))? as usize);
        }
        let n: usize = dims.iter().product();
        if n == 0 || n > (1 << 32) {
            return Err(Error::Checkpoint(format!(
                "tensor {} has invalid dims {:?}",
                name, dims
            )));
        }
        let payload = r.take(n * 4, &format!("payload of {}", name))?;
        let record_end = r.pos;
        let stored_crc = r.u64(&format!("checksum of {}", name))?;
        let actual_crc = crc64(&bytes[record_start..record_end]);
        if stored_crc != actual_crc {
            return Err(Error::Checkpoint(format!("checksum mismatch in tensor {}", name)));
        }
        let tensor = Tensor::from_f32_le_bytes(&dims, payload)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {}", name, e)))?;
        if let Some(stripped) = name.strip_prefix(MOMENT_M) {
            adam_m.insert(stripped.to_string(), tensor);
        } else if let Some(stripped) = name.strip_prefix(MOMENT_V) {
            adam_v.insert(stripped.to_string(), tensor);
        } else {
            params.insert(name, tensor);
        }
    }
    Ok(Checkpoint {
        version,
        step,
        config,
        params,
        adam_m,
        adam_v,
        rng,
    })
}
