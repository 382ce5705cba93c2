//! Raw byte corpora and their train/dev/test split.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub len: usize,
    pub distinct_bytes: usize,
    /// `train = [0, train_end)`, `dev = [train_end, dev_end)`, `test = [dev_end, len)`.
    pub train_end: usize,
    pub dev_end: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    pub stats: CorpusStats,
}

/// 90 / 5 / 5 split offsets by byte count.
pub fn split_offsets(len: usize) -> (usize, usize) {
    (len * 90 / 100, len * 95 / 100)
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let mut seen = [false; 256];
        for &b in &bytes {
            seen[b as usize] = true;
        }
        let (train_end, dev_end) = split_offsets(bytes.len());
        let stats = CorpusStats {
            len: bytes.len(),
            distinct_bytes: seen.iter().filter(|&&s| s).count(),
            train_end,
            dev_end,
            crc32: crc32fast::hash(&bytes),
        };
        Ok(Corpus { bytes, stats })
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.stats.train_end]
    }

    pub fn dev(&self) -> &[u8] {
        &self.bytes[self.stats.train_end..self.stats.dev_end]
    }

    pub fn test(&self) -> &[u8] {
        &self.bytes[self.stats.dev_end..]
    }
}

/// Reads a file as raw bytes, without any transcoding.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    Corpus::from_bytes(bytes)
        .map_err(|_| Error::Data(format!("corpus {} is empty", path.display())))
}

/// `pattern` repeated until `len` bytes.
pub fn periodic_corpus(pattern: &[u8], len: usize) -> Vec<u8> {
    pattern.iter().copied().cycle().take(len).collect()
}
