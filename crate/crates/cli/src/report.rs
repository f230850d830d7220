//! Report envelope, input digests and output files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use revlab::seqcore::Corpus;

/// The corpus shipped with the binary; the same text `revlab::demo::demo_corpus` generates.
pub const DEMO_CORPUS: &str = include_str!("../data/demo_corpus.txt");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct InputDigest {
    pub source: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Reads a corpus file, or the bundled demo corpus when `path` is `None`.
pub fn load_corpus(path: Option<&Path>) -> anyhow::Result<(Corpus, InputDigest)> {
    let (text, source) = match path {
        Some(p) => (
            std::fs::read_to_string(p)
                .with_context(|| format!("cannot read corpus {}", p.display()))?,
            "file".to_string(),
        ),
        None => (DEMO_CORPUS.to_string(), "bundled_demo".to_string()),
    };
    let digest = InputDigest {
        source,
        sha256: sha256_hex(text.as_bytes()),
        bytes: text.len(),
    };
    Ok((Corpus::from_text(&text), digest))
}

#[derive(Serialize)]
pub struct Envelope<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub config: &'a C,
    pub inputs: BTreeMap<&'a str, InputDigest>,
    pub passed: Option<bool>,
    pub result: Value,
}

impl<C: Serialize> Envelope<'_, C> {
    pub fn to_json(&self) -> anyhow::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Writes `name` into the output directory, creating it as needed.
pub fn write_output(
    dir: Option<&Path>,
    name: &str,
    contents: &str,
) -> anyhow::Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(Some(path))
}
