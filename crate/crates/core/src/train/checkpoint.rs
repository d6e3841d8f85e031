//! Binary checkpoint format, all integers and scalars little-endian:
//!
//! ```text
//! magic            8 bytes  "DMOECKPT"
//! version          u32
//! precision        u8       bytes per scalar (4 or 8)
//! config           u64 length + UTF-8 JSON of the run config
//! config hash      64 bytes ASCII hex SHA-256 of the compact config JSON
//! step             u64
//! param count      u32
//!   per param:     u32 name length, name, u32 rank, u64 dims, scalars
//! adam t           u64
//!   per param:     first-moment scalars, then second-moment scalars
//! block count      u32
//!   per block:     u8 has_bank; if 1: u64 experts, u64 hidden, u64 t,
//!                  u64 length + JSON bank options, scalars of Ê
//! checksum         32 bytes SHA-256 of everything above
//! ```

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::model::LanguageModel;
use super::optim::AdamW;
use super::trainer::Trainer;
use super::{Corpus, RunConfig, TrainError};
use crate::moe::{DefaultVectorBank, DefaultVectorOptions};
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DMOECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<(), TrainError> {
    let mut w = Vec::new();
    w.extend_from_slice(CHECKPOINT_MAGIC);
    w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.push(T::PRECISION.bytes() as u8);
    put_bytes(
        &mut w,
        serde_json::to_string(&trainer.config)
            .expect("config serializes")
            .as_bytes(),
    );
    w.extend_from_slice(trainer.config.hash().as_bytes());
    w.extend_from_slice(&trainer.step.to_le_bytes());

    let params = &trainer.model.params;
    w.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        w.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        w.extend_from_slice(p.name.as_bytes());
        w.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_scalars(&mut w, p.value.data());
    }

    w.extend_from_slice(&trainer.opt.t.to_le_bytes());
    for (m, v) in trainer.opt.m.iter().zip(&trainer.opt.v) {
        put_scalars(&mut w, m.data());
        put_scalars(&mut w, v.data());
    }

    w.extend_from_slice(&(trainer.model.banks.len() as u32).to_le_bytes());
    for bank in &trainer.model.banks {
        match bank {
            None => w.push(0),
            Some(b) => {
                w.push(1);
                w.extend_from_slice(&(b.num_experts() as u64).to_le_bytes());
                w.extend_from_slice(&(b.hidden() as u64).to_le_bytes());
                w.extend_from_slice(&b.step().to_le_bytes());
                put_bytes(
                    &mut w,
                    serde_json::to_string(b.options())
                        .expect("options serialize")
                        .as_bytes(),
                );
                put_scalars(&mut w, b.vectors());
            }
        }
    }
    let digest = Sha256::digest(&w);
    w.extend_from_slice(&digest);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &w).map_err(|e| TrainError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

/// Restores a trainer. The model is rebuilt from the stored config and every
/// parameter name and shape must match.
/// Scalar width in bits and run config of a checkpoint, read from its header
/// without verifying the checksum or loading tensors.
pub fn checkpoint_header(path: &Path) -> Result<(usize, RunConfig), TrainError> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let width = r.u8()? as usize;
    let config_text =
        String::from_utf8(r.bytes()?.to_vec()).map_err(|_| bad("config is not UTF-8"))?;
    Ok((width * 8, RunConfig::from_json(&config_text)?))
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    corpus: Arc<Corpus>,
) -> Result<Trainer<T>, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
        return Err(bad("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let width = r.u8()? as usize;
    if width != T::PRECISION.bytes() {
        return Err(bad(&format!(
            "stored with {}-bit scalars, loading as {}-bit",
            width * 8,
            T::PRECISION.bytes() * 8
        )));
    }
    let config_text =
        String::from_utf8(r.bytes()?.to_vec()).map_err(|_| bad("config is not UTF-8"))?;
    let config = RunConfig::from_json(&config_text)?;
    let hash = std::str::from_utf8(r.take(64)?).map_err(|_| bad("hash is not ASCII"))?;
    if hash != config.hash() {
        return Err(bad("config hash does not match stored config"));
    }
    let step = r.u64()?;

    if let Some(v) = config.model.vocab_size {
        corpus.check_vocab(v)?;
    }
    let mut model = LanguageModel::<T>::new(&config.model, corpus.vocab_size())?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(bad(&format!(
            "{count} parameters stored, model has {}",
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if name != p.name || dims != p.value.shape() {
            return Err(bad(&format!(
                "parameter {name} {dims:?} does not match model's {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        r.scalars_into(p.value.data_mut())?;
    }

    let mut opt = AdamW::new(&config.train, &model.params);
    opt.t = r.u64()?;
    for (m, v) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
        r.scalars_into(m.data_mut())?;
        r.scalars_into(v.data_mut())?;
    }

    let blocks = r.u32()? as usize;
    if blocks != model.banks.len() {
        return Err(bad(&format!(
            "{blocks} blocks stored, model has {}",
            model.banks.len()
        )));
    }
    for slot in model.banks.iter_mut() {
        let present = r.u8()? == 1;
        if present != slot.is_some() {
            return Err(bad("default-vector bank layout does not match model"));
        }
        if !present {
            continue;
        }
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let t = r.u64()?;
        let options: DefaultVectorOptions =
            serde_json::from_slice(r.bytes()?).map_err(|e| bad(&format!("bank options: {e}")))?;
        let mut vectors = vec![T::zero(); n * d];
        r.scalars_into(&mut vectors)?;
        *slot = Some(DefaultVectorBank::from_parts(n, d, vectors, t, options)?);
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Trainer::from_parts(config, corpus, model, opt, step)
}

fn bad(msg: &str) -> TrainError {
    TrainError::Checkpoint(msg.to_string())
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u64).to_le_bytes());
    w.extend_from_slice(b);
}

fn put_scalars<T: Scalar>(w: &mut Vec<u8>, xs: &[T]) {
    for &x in xs {
        x.write_le(w);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], TrainError> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn scalars_into<T: Scalar>(&mut self, out: &mut [T]) -> Result<(), TrainError> {
        let w = T::PRECISION.bytes();
        let raw = self.take(out.len() * w)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(w)) {
            *o = T::read_le(c);
        }
        Ok(())
    }
}
