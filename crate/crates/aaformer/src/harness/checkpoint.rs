//! Binary checkpoint persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AAFK" | version u32 | section*      section := tag[4] | len u64 | payload | sha256[32]
//! ```
//!
//! Sections appear in fixed order: `CFG ` (config + seed as JSON), `MET `
//! (step and epoch counters), `TEN ` (named tensor table with raw f64 bits),
//! `OPT ` (Adam moments), `RNG ` (ChaCha seed and word position). Each
//! section carries its own SHA-256, so any flipped byte surfaces as an
//! integrity error rather than silently corrupt training state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::optim::{AdamSlot, AdamState};
use super::HarnessError;

pub const MAGIC: &[u8; 4] = b"AAFK";
pub const VERSION: u32 = 1;

const TAG_CONFIG: &[u8; 4] = b"CFG ";
const TAG_META: &[u8; 4] = b"MET ";
const TAG_TENSORS: &[u8; 4] = b"TEN ";
const TAG_OPT: &[u8; 4] = b"OPT ";
const TAG_RNG: &[u8; 4] = b"RNG ";

/// Batch-sampler RNG state: the ChaCha seed plus stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

/// A full training snapshot. Loading one restores training bit-for-bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub run: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub adam: AdamState,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct ConfigPayload {
    run: RunConfig,
    seed: u64,
}

fn err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

struct SectionWriter<W: Write> {
    out: W,
}

impl<W: Write> SectionWriter<W> {
    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) -> Result<(), HarnessError> {
        self.out.write_all(tag)?;
        self.out.write_all(&(payload.len() as u64).to_le_bytes())?;
        self.out.write_all(payload)?;
        let digest = Sha256::digest(payload);
        self.out.write_all(&digest)?;
        Ok(())
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = SectionWriter { out: BufWriter::new(File::create(path)?) };
    w.out.write_all(MAGIC)?;
    w.out.write_all(&ck.version.to_le_bytes())?;

    let cfg_json = serde_json::to_vec(&ConfigPayload { run: ck.run.clone(), seed: ck.seed })
        .map_err(|e| err(format!("config serialization: {e}")))?;
    w.section(TAG_CONFIG, &cfg_json)?;

    let mut meta = Vec::with_capacity(16);
    meta.extend_from_slice(&ck.step.to_le_bytes());
    meta.extend_from_slice(&ck.epoch.to_le_bytes());
    w.section(TAG_META, &meta)?;

    let mut ten = Vec::new();
    ten.extend_from_slice(&(ck.tensors.len() as u64).to_le_bytes());
    for (name, shape, values) in &ck.tensors {
        push_str(&mut ten, name);
        ten.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            ten.extend_from_slice(&(d as u64).to_le_bytes());
        }
        push_f64s(&mut ten, values);
    }
    w.section(TAG_TENSORS, &ten)?;

    let mut opt = Vec::new();
    opt.extend_from_slice(&ck.adam.step_count.to_le_bytes());
    opt.extend_from_slice(&(ck.adam.slots.len() as u64).to_le_bytes());
    for (name, slot) in &ck.adam.slots {
        push_str(&mut opt, name);
        push_f64s(&mut opt, &slot.m);
        push_f64s(&mut opt, &slot.v);
    }
    w.section(TAG_OPT, &opt)?;

    let mut rng = Vec::with_capacity(48);
    rng.extend_from_slice(&ck.rng.seed);
    rng.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    w.section(TAG_RNG, &rng)?;

    w.out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        if self.pos + n > self.data.len() {
            return Err(err("truncated payload"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, HarnessError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| err("length overflows usize"))
    }

    fn string(&mut self) -> Result<String, HarnessError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("invalid utf-8 name"))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, HarnessError> {
        let n = self.len()?;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn read_section<R: Read>(r: &mut R, expect_tag: &[u8; 4]) -> Result<Vec<u8>, HarnessError> {
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)
        .map_err(|_| err(format!("missing section {:?}", String::from_utf8_lossy(expect_tag))))?;
    if &tag != expect_tag {
        return Err(err(format!(
            "expected section {:?}, found {:?}",
            String::from_utf8_lossy(expect_tag),
            String::from_utf8_lossy(&tag)
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|_| err("truncated section length"))?;
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| err("bad length"))?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|_| err("truncated section payload"))?;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(|_| err("truncated section checksum"))?;
    if Sha256::digest(&payload).as_slice() != digest {
        return Err(err(format!(
            "checksum mismatch in section {:?}",
            String::from_utf8_lossy(expect_tag)
        )));
    }
    Ok(payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| err("file too short for header"))?;
    if &magic != MAGIC {
        return Err(err("bad magic: not a checkpoint file"));
    }
    let mut version_bytes = [0u8; 4];
    r.read_exact(&mut version_bytes).map_err(|_| err("truncated version"))?;
    let version = u32::from_le_bytes(version_bytes);
    if version != VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }

    let cfg_payload = read_section(&mut r, TAG_CONFIG)?;
    let cfg: ConfigPayload = serde_json::from_slice(&cfg_payload)
        .map_err(|e| err(format!("config deserialization: {e}")))?;

    let meta = read_section(&mut r, TAG_META)?;
    let mut cur = Cursor { data: &meta, pos: 0 };
    let step = cur.u64()?;
    let epoch = cur.u64()?;
    if !cur.done() {
        return Err(err("trailing bytes in meta section"));
    }

    let ten = read_section(&mut r, TAG_TENSORS)?;
    let mut cur = Cursor { data: &ten, pos: 0 };
    let count = cur.len()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let ndim = cur.len()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.len()?);
        }
        let values = cur.f64s()?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(err(format!("tensor '{name}' shape/value mismatch")));
        }
        tensors.push((name, shape, values));
    }
    if !cur.done() {
        return Err(err("trailing bytes in tensor section"));
    }

    let opt = read_section(&mut r, TAG_OPT)?;
    let mut cur = Cursor { data: &opt, pos: 0 };
    let step_count = cur.u64()?;
    let slots_len = cur.len()?;
    let mut slots = Vec::with_capacity(slots_len);
    for _ in 0..slots_len {
        let name = cur.string()?;
        let m = cur.f64s()?;
        let v = cur.f64s()?;
        slots.push((name, AdamSlot { m, v }));
    }
    if !cur.done() {
        return Err(err("trailing bytes in optimizer section"));
    }

    let rng_payload = read_section(&mut r, TAG_RNG)?;
    let mut cur = Cursor { data: &rng_payload, pos: 0 };
    let seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
    if !cur.done() {
        return Err(err("trailing bytes in rng section"));
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(err("trailing bytes after final section"));
    }

    Ok(Checkpoint {
        version,
        run: cfg.run,
        seed: cfg.seed,
        step,
        epoch,
        tensors,
        adam: AdamState { step_count, slots },
        rng: RngState { seed, word_pos },
    })
}
