//! JSON and JSONL helpers shared by the commands.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::builder::QaExample;
use crate::error::{Error, Result};

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One compact JSON value per line.
pub fn to_jsonl<S: Serialize>(items: &[S]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl<D: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<D>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_examples(path: &Path, examples: &[QaExample]) -> Result<()> {
    fs::write(path, to_jsonl(examples)?).map_err(|e| Error::io(path, e))
}

pub fn load_examples(path: &Path) -> Result<Vec<QaExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let examples: Vec<QaExample> = parse_jsonl(&text, path)?;
    for e in &examples {
        e.check()?;
    }
    Ok(examples)
}
