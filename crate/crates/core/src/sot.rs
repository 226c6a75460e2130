//! Serialized output training (SOT) transcripts: speakers' sentences in
//! first-in first-out order, separated by `<sc>`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SC_TOKEN: &str = "<sc>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    #[serde(rename = "speaker")]
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub words: Vec<String>,
}

impl Utterance {
    pub fn new(speaker_id: impl Into<String>, start_s: f64, end_s: f64, words: &[&str]) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            start_s,
            end_s,
            words: words.iter().map(|w| w.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) || self.end_s <= self.start_s {
            return Err(Error::invalid(format!(
                "utterance of `{}` has invalid span [{}, {}]",
                self.speaker_id, self.start_s, self.end_s
            )));
        }
        if self.words.is_empty() {
            return Err(Error::invalid(format!("utterance of `{}` has no words", self.speaker_id)));
        }
        if self.words.iter().any(|w| w == SC_TOKEN) {
            return Err(Error::invalid("utterance words may not contain the separator token"));
        }
        Ok(())
    }
}

/// Token stream with one speaker label per token (separators included).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SotTranscript {
    pub tokens: Vec<String>,
    #[serde(rename = "speakers")]
    pub token_speakers: Vec<String>,
}

/// One speaker's stretch of a transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<String>,
    pub speakers: Vec<String>,
}

impl SotTranscript {
    pub fn new(tokens: Vec<String>, token_speakers: Vec<String>) -> Result<Self> {
        if tokens.len() != token_speakers.len() {
            return Err(Error::shape(format!(
                "{} tokens but {} speaker labels",
                tokens.len(),
                token_speakers.len()
            )));
        }
        Ok(Self { tokens, token_speakers })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the reference-transcript invariants: no leading, trailing or
    /// doubled separator, and neighbouring sentences by different speakers.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.token_speakers.len() {
            return Err(Error::shape("token and speaker label counts differ"));
        }
        split_strict(&self.tokens)?;
        let sentences = self.sentences();
        for pair in sentences.windows(2) {
            if pair[0].speakers.first() == pair[1].speakers.first() {
                return Err(Error::invalid(
                    "consecutive sentences must belong to different speakers",
                ));
            }
        }
        Ok(())
    }

    /// Splits on separators, dropping empty stretches. Never fails, so it is
    /// usable on hypotheses.
    pub fn sentences(&self) -> Vec<Sentence> {
        let mut out = Vec::new();
        let mut cur = Sentence {
            words: Vec::new(),
            speakers: Vec::new(),
        };
        for (tok, spk) in self.tokens.iter().zip(&self.token_speakers) {
            if tok == SC_TOKEN {
                if !cur.words.is_empty() {
                    out.push(std::mem::replace(
                        &mut cur,
                        Sentence {
                            words: Vec::new(),
                            speakers: Vec::new(),
                        },
                    ));
                }
            } else {
                cur.words.push(tok.clone());
                cur.speakers.push(spk.clone());
            }
        }
        if !cur.words.is_empty() {
            out.push(cur);
        }
        out
    }

    /// Words and their labels with separators removed.
    pub fn words(&self) -> (Vec<String>, Vec<String>) {
        self.tokens
            .iter()
            .zip(&self.token_speakers)
            .filter(|(t, _)| *t != SC_TOKEN)
            .map(|(t, s)| (t.clone(), s.clone()))
            .unzip()
    }
}

fn split_strict(tokens: &[String]) -> Result<Vec<Vec<String>>> {
    let mut out = vec![Vec::new()];
    for (i, tok) in tokens.iter().enumerate() {
        if tok == SC_TOKEN {
            if out.last().is_some_and(|s| s.is_empty()) {
                return Err(Error::invalid(if i == 0 {
                    "transcript starts with a separator".to_string()
                } else {
                    format!("doubled separator at token {i}")
                }));
            }
            out.push(Vec::new());
        } else {
            out.last_mut().expect("non-empty").push(tok.clone());
        }
    }
    if !tokens.is_empty() && out.last().is_some_and(|s| s.is_empty()) {
        return Err(Error::invalid("transcript ends with a separator"));
    }
    if tokens.is_empty() {
        out.clear();
    }
    Ok(out)
}

/// Orders speakers by first onset, concatenates each speaker's utterances in
/// time order and separates speakers with `<sc>`. A separator is labelled
/// with the speaker whose sentence it closes.
pub fn serialize_fifo(utterances: &[Utterance]) -> Result<SotTranscript> {
    let mut by_speaker: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in utterances {
        u.validate()?;
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(u);
    }
    let mut order: Vec<(f64, &str, Vec<&Utterance>)> = by_speaker
        .into_iter()
        .map(|(spk, mut us)| {
            us.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            (us[0].start_s, spk, us)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    for pair in order.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::invalid(format!(
                "speakers `{}` and `{}` start at the same time {}",
                pair[0].1, pair[1].1, pair[0].0
            )));
        }
    }
    let mut tokens = Vec::new();
    let mut speakers = Vec::new();
    for (i, (_, spk, us)) in order.iter().enumerate() {
        if i > 0 {
            tokens.push(SC_TOKEN.to_string());
            speakers.push(order[i - 1].1.to_string());
        }
        for u in us {
            for w in &u.words {
                tokens.push(w.clone());
                speakers.push(spk.to_string());
            }
        }
    }
    SotTranscript::new(tokens, speakers)
}

/// Splits a well-formed transcript into per-speaker sentences.
pub fn deserialize(transcript: &SotTranscript) -> Result<Vec<Vec<String>>> {
    if transcript.tokens.len() != transcript.token_speakers.len() {
        return Err(Error::shape("token and speaker label counts differ"));
    }
    split_strict(&transcript.tokens)
}

/// `#<sc> + 1`, or 0 for an empty sequence.
pub fn speaker_count<S: AsRef<str>>(tokens: &[S]) -> usize {
    if tokens.is_empty() {
        0
    } else {
        tokens.iter().filter(|t| t.as_ref() == SC_TOKEN).count() + 1
    }
}

/// On-disk transcript: tokens, labels and the utterances they came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptFile {
    pub tokens: Vec<String>,
    pub speakers: Vec<String>,
    #[serde(default)]
    pub utterances: Vec<Utterance>,
}

impl TranscriptFile {
    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self> {
        let t = serialize_fifo(&utterances)?;
        Ok(Self {
            tokens: t.tokens,
            speakers: t.token_speakers,
            utterances,
        })
    }

    pub fn transcript(&self) -> Result<SotTranscript> {
        SotTranscript::new(self.tokens.clone(), self.speakers.clone())
    }
}

impl From<SotTranscript> for TranscriptFile {
    fn from(t: SotTranscript) -> Self {
        Self {
            tokens: t.tokens,
            speakers: t.token_speakers,
            utterances: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_speaker_fifo() {
        let t = serialize_fifo(&[
            Utterance::new("B", 1.2, 2.0, &["hi"]),
            Utterance::new("A", 0.0, 1.5, &["hello", "world"]),
        ])
        .unwrap();
        assert_eq!(t.tokens, strs(&["hello", "world", "<sc>", "hi"]));
        assert_eq!(t.token_speakers, strs(&["A", "A", "A", "B"]));
        t.validate().unwrap();
    }

    #[test]
    fn single_speaker_has_no_separator() {
        let t = serialize_fifo(&[
            Utterance::new("A", 2.0, 3.0, &["c"]),
            Utterance::new("A", 0.0, 1.0, &["a", "b"]),
        ])
        .unwrap();
        assert_eq!(t.tokens, strs(&["a", "b", "c"]));
        assert_eq!(speaker_count(&t.tokens), 1);
    }

    #[test]
    fn tied_starts_are_rejected() {
        let err = serialize_fifo(&[Utterance::new("A", 1.0, 2.0, &["a"]), Utterance::new("B", 1.0, 2.5, &["b"])]);
        assert!(err.is_err());
    }

    #[test]
    fn malformed_separators() {
        let t = |toks: &[&str]| SotTranscript::new(strs(toks), vec!["A".into(); toks.len()]).unwrap();
        assert!(deserialize(&t(&["<sc>", "w"])).is_err());
        assert!(deserialize(&t(&["w", "<sc>"])).is_err());
        assert!(deserialize(&t(&["w", "<sc>", "<sc>", "v"])).is_err());
        assert_eq!(deserialize(&t(&["w", "v"])).unwrap(), vec![strs(&["w", "v"])]);
        assert!(deserialize(&t(&[])).unwrap().is_empty());
    }

    #[test]
    fn counts() {
        assert_eq!(speaker_count(&strs(&["w1", "<sc>", "w2", "<sc>", "w3"])), 3);
        assert_eq!(speaker_count(&strs(&["w1", "w2"])), 1);
        assert_eq!(speaker_count::<String>(&[]), 0);
    }

    #[test]
    fn lenient_sentences_skip_empty_stretches() {
        let t = SotTranscript::new(strs(&["<sc>", "a", "<sc>", "<sc>", "b"]), strs(&["X", "A", "A", "B", "B"])).unwrap();
        let s = t.sentences();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].words, strs(&["b"]));
    }
}
