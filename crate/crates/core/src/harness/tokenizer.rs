use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::dataset::InstructionRecord;
use crate::error::{MoceError, Result};
use crate::model::Example;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";
const SPECIALS: [&str; 4] = [UNK, BOS, SEP, EOS];

/// Whitespace word vocabulary with four reserved tokens at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(MoceError::format(
                    "vocabulary",
                    format!("entry {i} is empty or contains whitespace"),
                ));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(MoceError::format(
                    "vocabulary",
                    format!("duplicate entry {w:?}"),
                ));
            }
        }
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(MoceError::format(
                "vocabulary",
                format!("must start with {SPECIALS:?}"),
            ));
        }
        Ok(Self { words, index })
    }

    /// Reserved tokens followed by every word of every record, sorted.
    pub fn build(records: &[InstructionRecord]) -> Self {
        let mut seen = BTreeSet::new();
        for r in records {
            seen.extend(r.instruction.split_whitespace());
            seen.extend(r.response.split_whitespace());
        }
        let words = SPECIALS
            .iter()
            .copied()
            .chain(seen.into_iter().filter(|w| !SPECIALS.contains(w)))
            .map(String::from)
            .collect();
        Self::from_words(words).expect("built vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn sep(&self) -> usize {
        2
    }

    pub fn eos(&self) -> usize {
        3
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.unk())
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `<bos> instruction <sep>`: the prompt a response is generated from.
    pub fn prompt(&self, instruction: &str) -> Vec<usize> {
        let mut p = vec![self.bos()];
        p.extend(self.encode(instruction));
        p.push(self.sep());
        p
    }

    /// Teacher-forced example supervising the response and the closing `<eos>`.
    pub fn example(&self, record: &InstructionRecord, group: usize) -> Example {
        let mut seq = self.prompt(&record.instruction);
        let first_target = seq.len() - 1;
        seq.extend(self.encode(&record.response));
        seq.push(self.eos());
        let tokens = seq[..seq.len() - 1].to_vec();
        let targets = seq[1..].to_vec();
        let positions = (first_target..tokens.len()).collect();
        Example {
            tokens,
            targets,
            positions,
            group,
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut out = self.words.join("\n");
        out.push('\n');
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| MoceError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MoceError::io(path, e))?;
        Self::from_words(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }
}
