use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Splits raw text into documents at blank lines. Lines of one document are
/// kept joined by `\n`.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

/// Reads documents from each file in order; a document never spans files.
pub fn read_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        docs.extend(split_documents(&text));
    }
    Ok(docs)
}
