use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// A byte-level corpus split into contiguous train/val/test streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Distinct bytes present, ascending; id `i` stands for `vocab[i]`.
    pub vocab: Vec<u8>,
    pub ids: Vec<usize>,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], splits: [f64; 3]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let mut present = [false; 256];
        for &b in bytes {
            present[b as usize] = true;
        }
        let vocab: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
        let mut lookup = [0usize; 256];
        for (i, &b) in vocab.iter().enumerate() {
            lookup[b as usize] = i;
        }
        let ids: Vec<usize> = bytes.iter().map(|&b| lookup[b as usize]).collect();
        let n = ids.len();
        let n_train = (n as f64 * splits[0]).floor() as usize;
        let n_val = (n as f64 * splits[1]).floor() as usize;
        Ok(Self {
            vocab,
            ids,
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..n,
        })
    }

    pub fn train(&self) -> &[usize] {
        &self.ids[self.train.clone()]
    }

    pub fn val(&self) -> &[usize] {
        &self.ids[self.val.clone()]
    }

    pub fn test(&self) -> &[usize] {
        &self.ids[self.test.clone()]
    }

    pub fn split(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(self.train()),
            "val" => Some(self.val()),
            "test" => Some(self.test()),
            _ => None,
        }
    }
}

pub fn load_corpus(path: &Path, splits: [f64; 3]) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_bytes(&bytes, splits)
}
