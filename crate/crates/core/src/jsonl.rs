//! Line-delimited JSON records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::Token;
use crate::world::{Demonstration, DemonstrationSet, OverlapTag, PromptSet};

pub fn to_string<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_string(records).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PromptRecord {
    x: Vec<Token>,
}

pub fn write_demonstrations(path: &Path, demos: &DemonstrationSet) -> Result<()> {
    write(path, &demos.pairs)
}

pub fn read_demonstrations(path: &Path, provenance: &str) -> Result<DemonstrationSet> {
    Ok(DemonstrationSet {
        pairs: read::<Demonstration>(path)?,
        provenance: provenance.to_string(),
    })
}

pub fn write_prompts(path: &Path, prompts: &PromptSet) -> Result<()> {
    let records: Vec<PromptRecord> = prompts
        .prompts
        .iter()
        .map(|x| PromptRecord { x: x.clone() })
        .collect();
    write(path, &records)
}

pub fn read_prompts(path: &Path, tag: OverlapTag) -> Result<PromptSet> {
    Ok(PromptSet::new(
        read::<PromptRecord>(path)?.into_iter().map(|r| r.x).collect(),
        tag,
    ))
}
