//! Word and character error rates.
//!
//! Words are whitespace-separated tokens. Characters exclude whitespace.
//! Rates are aggregated corpus-wide: total edits over total reference length.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::Result;
use crate::model::Model;

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// (edits, reference words).
pub fn word_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    (edit_distance(&r, &h), r.len())
}

/// (edits, reference characters), ignoring whitespace.
pub fn char_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let h: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    (edit_distance(&r, &h), r.len())
}

/// One row of the per-utterance report; `edit_distance` and `ref_len` are
/// character-level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "hyp")]
    pub hypothesis: String,
    pub edit_distance: usize,
    pub ref_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub utterances: Vec<UtteranceScore>,
    pub word_edits: usize,
    pub words: usize,
    pub char_edits: usize,
    pub chars: usize,
}

impl ScoreReport {
    pub fn push(&mut self, id: &str, reference: &str, hypothesis: &str) {
        let (we, wn) = word_errors(reference, hypothesis);
        let (ce, cn) = char_errors(reference, hypothesis);
        self.word_edits += we;
        self.words += wn;
        self.char_edits += ce;
        self.chars += cn;
        self.utterances.push(UtteranceScore {
            id: id.to_string(),
            reference: reference.to_string(),
            hypothesis: hypothesis.to_string(),
            edit_distance: ce,
            ref_len: cn,
        });
    }

    pub fn wer(&self) -> f64 {
        self.word_edits as f64 / self.words.max(1) as f64
    }

    pub fn cer(&self) -> f64 {
        self.char_edits as f64 / self.chars.max(1) as f64
    }

    /// CSV with header `id,ref,hyp,edit_distance,ref_len`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.utterances {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Ctc,
    Attention,
}

/// Greedy-decodes every utterance and scores it against its transcript.
pub fn evaluate(model: &Model, utts: &[Utterance], mode: DecodeMode) -> Result<ScoreReport> {
    let hyps: Vec<String> = utts
        .par_iter()
        .map(|u| {
            let t = match mode {
                DecodeMode::Ctc => model.decode_ctc(&u.video)?,
                DecodeMode::Attention => model.decode_attention(&u.video, 2 * u.frames())?,
            };
            Ok(t.text)
        })
        .collect::<Result<_>>()?;
    let mut report = ScoreReport::default();
    for (u, h) in utts.iter().zip(&hyps) {
        report.push(&u.id, &u.transcript.text, h);
    }
    Ok(report)
}
