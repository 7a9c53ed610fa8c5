use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ScoreEntry, ScoreSet};
use crate::error::{Error, Result};
use crate::synth::Label;

#[derive(Serialize, Deserialize)]
struct Row {
    score: f64,
    label: u8,
    domain: usize,
}

/// CSV with header `score,label,domain`; label 1 is real, 0 fake.
pub fn write_scores<W: Write>(set: &ScoreSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in set.entries() {
        w.serialize(Row {
            score: e.score,
            label: e.label as u8,
            domain: e.domain,
        })
        .map_err(|e| Error::Data(format!("writing scores: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores<R: Read>(input: R) -> Result<ScoreSet> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Data(format!("score file: {e}")))?;
    if header != vec!["score", "label", "domain"] {
        return Err(Error::Data(format!(
            "score file header must be `score,label,domain`, got {header:?}"
        )));
    }
    let entries = r
        .deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| Error::Data(format!("score file: {e}")))?;
            Ok(ScoreEntry {
                score: row.score,
                label: Label::from_bit(row.label)?,
                domain: row.domain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(entries)
}
