use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MoceError, Result};

/// One instruction/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// Parses line-delimited JSON records. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_dataset(text: &str, context: &str) -> Result<Vec<InstructionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionRecord = serde_json::from_str(line)
            .map_err(|e| MoceError::format(context, format!("line {}: {e}", i + 1)))?;
        if rec.instruction.trim().is_empty() {
            return Err(MoceError::format(
                context,
                format!("line {}: empty instruction", i + 1),
            ));
        }
        if rec.response.trim().is_empty() {
            return Err(MoceError::format(
                context,
                format!("line {}: empty response", i + 1),
            ));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(MoceError::contract(format!(
            "{context}: dataset has no records"
        )));
    }
    Ok(out)
}

pub fn ingest_dataset(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MoceError::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn dataset_to_string(records: &[InstructionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[InstructionRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_string(records)).map_err(|e| MoceError::io(path, e))
}
