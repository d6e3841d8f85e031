use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::TrainError;

/// Byte-level corpus split into train and validation streams. Each token
/// carries the index of the file it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Distinct bytes in ascending order; token `i` stands for `vocab[i]`.
    pub vocab: Vec<u8>,
    pub train: Vec<usize>,
    pub train_tags: Vec<usize>,
    pub val: Vec<usize>,
    pub val_tags: Vec<usize>,
    pub tag_names: Vec<String>,
}

/// Reads each file as one source tag and splits it at `train_ratio`.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P], train_ratio: f64) -> Result<Corpus, TrainError> {
    let mut sources = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|source| TrainError::Io {
            path: p.display().to_string(),
            source,
        })?;
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        sources.push((name, bytes));
    }
    Corpus::from_sources(&sources, train_ratio)
}

impl Corpus {
    pub fn from_sources(
        sources: &[(String, Vec<u8>)],
        train_ratio: f64,
    ) -> Result<Self, TrainError> {
        if sources.is_empty() {
            return Err(TrainError::Corpus("no corpus files given".into()));
        }
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(TrainError::Corpus(format!(
                "train ratio {train_ratio} outside (0, 1)"
            )));
        }
        let mut seen = [false; 256];
        for (name, bytes) in sources {
            if bytes.is_empty() {
                return Err(TrainError::Corpus(format!("{name}: empty file")));
            }
            bytes.iter().for_each(|&b| seen[b as usize] = true);
        }
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut id = [usize::MAX; 256];
        for (i, &b) in vocab.iter().enumerate() {
            id[b as usize] = i;
        }

        let mut c = Corpus {
            vocab,
            train: Vec::new(),
            train_tags: Vec::new(),
            val: Vec::new(),
            val_tags: Vec::new(),
            tag_names: Vec::new(),
        };
        for (tag, (name, bytes)) in sources.iter().enumerate() {
            let cut = (bytes.len() as f64 * train_ratio).floor() as usize;
            if cut == 0 || cut == bytes.len() {
                return Err(TrainError::Corpus(format!(
                    "{name}: {} bytes is too short to split at {train_ratio}",
                    bytes.len()
                )));
            }
            c.train.extend(bytes[..cut].iter().map(|&b| id[b as usize]));
            c.train_tags.extend(std::iter::repeat_n(tag, cut));
            c.val.extend(bytes[cut..].iter().map(|&b| id[b as usize]));
            c.val_tags
                .extend(std::iter::repeat_n(tag, bytes.len() - cut));
            c.tag_names.push(name.clone());
        }
        Ok(c)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Fails if the alphabet does not fit a model with `limit` output classes.
    pub fn check_vocab(&self, limit: usize) -> Result<(), TrainError> {
        if self.vocab.len() > limit {
            return Err(TrainError::VocabOverflow {
                found: self.vocab.len(),
                limit,
            });
        }
        Ok(())
    }

    pub fn decode(&self, tokens: &[usize]) -> Vec<u8> {
        tokens.iter().map(|&t| self.vocab[t]).collect()
    }

    /// SHA-256 over the vocabulary followed by the train and validation token
    /// ids (one byte each).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(&self.vocab);
        for stream in [&self.train, &self.val] {
            let bytes: Vec<u8> = stream.iter().map(|&t| t as u8).collect();
            h.update(&bytes);
        }
        super::config::hex(&h.finalize())
    }
}

/// `batch_size` sequences of `seq_len` inputs and next-token targets, stored
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Source tag of each input token.
    pub tags: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn num_tokens(&self) -> usize {
        self.inputs.len()
    }

    /// Rows `[start, start + count)` of the batch.
    pub fn slice(&self, start: usize, count: usize) -> Batch {
        let r = start * self.seq_len..(start + count) * self.seq_len;
        Batch {
            inputs: self.inputs[r.clone()].to_vec(),
            targets: self.targets[r.clone()].to_vec(),
            tags: self.tags[r].to_vec(),
            batch_size: count,
            seq_len: self.seq_len,
        }
    }
}

/// Random training windows. The batch for a step depends only on
/// `(seed, step)`, so a resumed run sees the same data as an uninterrupted one.
pub fn sample_batch(
    tokens: &[usize],
    tags: &[usize],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    step: u64,
) -> Result<Batch, TrainError> {
    if tokens.len() < seq_len + 1 {
        return Err(TrainError::Corpus(format!(
            "{} training tokens cannot fill a window of {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let mut b = Batch {
        inputs: Vec::with_capacity(batch_size * seq_len),
        targets: Vec::with_capacity(batch_size * seq_len),
        tags: Vec::with_capacity(batch_size * seq_len),
        batch_size,
        seq_len,
    };
    for _ in 0..batch_size {
        let start = rng.random_range(0..=tokens.len() - seq_len - 1);
        b.inputs.extend_from_slice(&tokens[start..start + seq_len]);
        b.targets
            .extend_from_slice(&tokens[start + 1..start + seq_len + 1]);
        b.tags.extend_from_slice(&tags[start..start + seq_len]);
    }
    Ok(b)
}

/// Consecutive non-overlapping windows of the validation stream; every
/// validation token after the first is predicted exactly once per window
/// set. At most `max_windows` windows when nonzero.
pub fn eval_windows(
    tokens: &[usize],
    tags: &[usize],
    seq_len: usize,
    max_windows: usize,
) -> Result<Batch, TrainError> {
    if tokens.len() < seq_len + 1 {
        return Err(TrainError::EmptyValidation);
    }
    let mut count = (tokens.len() - 1) / seq_len;
    if max_windows > 0 {
        count = count.min(max_windows);
    }
    let mut b = Batch {
        inputs: Vec::with_capacity(count * seq_len),
        targets: Vec::with_capacity(count * seq_len),
        tags: Vec::with_capacity(count * seq_len),
        batch_size: count,
        seq_len,
    };
    for w in 0..count {
        let s = w * seq_len;
        b.inputs.extend_from_slice(&tokens[s..s + seq_len]);
        b.targets.extend_from_slice(&tokens[s + 1..s + seq_len + 1]);
        b.tags.extend_from_slice(&tags[s..s + seq_len]);
    }
    Ok(b)
}
