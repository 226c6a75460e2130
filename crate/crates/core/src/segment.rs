//! Meeting segmentation into utterance groups: fixed chunk/hop windows whose
//! boundaries are pushed out of speaker-overlap regions and word interiors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sot::{TranscriptFile, Utterance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAnnotation {
    pub word: String,
    #[serde(rename = "speaker")]
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl WordAnnotation {
    pub fn new(word: &str, speaker: &str, start_s: f64, end_s: f64) -> Self {
        Self {
            word: word.to_string(),
            speaker_id: speaker.to_string(),
            start_s,
            end_s,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) || self.start_s < 0.0 || self.end_s <= self.start_s {
            return Err(Error::invalid(format!(
                "word `{}` has bad times [{}, {}]",
                self.word, self.start_s, self.end_s
            )));
        }
        Ok(())
    }
}

/// Reads one JSON word annotation per non-empty line.
pub fn read_word_annotations<R: BufRead>(reader: R) -> Result<Vec<WordAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: WordAnnotation =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("line {}: {e}", i + 1)))?;
        w.validate().map_err(|e| Error::format(format!("line {}: {e}", i + 1)))?;
        out.push(w);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub chunk_s: f64,
    pub hop_s: f64,
    /// Distance kept from an overlap region when a boundary is moved out of it.
    pub overlap_margin_s: f64,
    pub max_iterations: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            chunk_s: 5.0,
            hop_s: 2.0,
            overlap_margin_s: 2.0,
            max_iterations: 10,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.chunk_s, self.hop_s, self.overlap_margin_s]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || self.hop_s > self.chunk_s {
            return Err(Error::invalid(format!(
                "need 0 < hop ({}) <= chunk ({}) and a positive margin ({})",
                self.hop_s, self.chunk_s, self.overlap_margin_s
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    /// Strict interior membership; the endpoints themselves are outside.
    pub fn strictly_contains(&self, t: f64) -> bool {
        self.start_s < t && t < self.end_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceGroup {
    pub start_s: f64,
    pub end_s: f64,
    pub words: Vec<WordAnnotation>,
    pub n_speakers: usize,
}

impl UtteranceGroup {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Consecutive same-speaker words become one utterance.
    pub fn utterances(&self) -> Vec<Utterance> {
        let mut out: Vec<Utterance> = Vec::new();
        for w in &self.words {
            match out.last_mut() {
                Some(u) if u.speaker_id == w.speaker_id => {
                    u.end_s = u.end_s.max(w.end_s);
                    u.words.push(w.word.clone());
                }
                _ => out.push(Utterance {
                    speaker_id: w.speaker_id.clone(),
                    start_s: w.start_s,
                    end_s: w.end_s,
                    words: vec![w.word.clone()],
                }),
            }
        }
        out
    }

    /// FIFO-serialized transcript of the group.
    pub fn transcript_file(&self) -> Result<TranscriptFile> {
        TranscriptFile::from_utterances(self.utterances())
    }
}

/// Maximal intervals where words of at least two different speakers are active.
pub fn find_overlap_regions(words: &[WordAnnotation]) -> Vec<Interval> {
    let mut events: Vec<(f64, bool, &str)> = Vec::with_capacity(2 * words.len());
    for w in words {
        events.push((w.start_s, true, &w.speaker_id));
        events.push((w.end_s, false, &w.speaker_id));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut active: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out: Vec<Interval> = Vec::new();
    let mut open: Option<f64> = None;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            let (_, is_start, spk) = events[i];
            if is_start {
                *active.entry(spk).or_default() += 1;
            } else if let Some(c) = active.get_mut(spk) {
                *c -= 1;
                if *c == 0 {
                    active.remove(spk);
                }
            }
            i += 1;
        }
        let overlapping = active.len() >= 2;
        match (open, overlapping) {
            (None, true) => open = Some(t),
            (Some(s), false) => {
                if t > s {
                    out.push(Interval { start_s: s, end_s: t });
                }
                open = None;
            }
            _ => {}
        }
    }
    out
}

fn merged_spans(words: &[WordAnnotation]) -> Vec<Interval> {
    let mut spans: Vec<Interval> = words
        .iter()
        .map(|w| Interval {
            start_s: w.start_s,
            end_s: w.end_s,
        })
        .collect();
    spans.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut out: Vec<Interval> = Vec::new();
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start_s <= last.end_s => last.end_s = last.end_s.max(s.end_s),
            _ => out.push(s),
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Start,
    End,
}

struct Boundaries<'a> {
    overlaps: &'a [Interval],
    words: &'a [WordAnnotation],
    speech: &'a [Interval],
    cfg: &'a SegmentationConfig,
}

impl Boundaries<'_> {
    fn is_clear(&self, t: f64) -> bool {
        !self.overlaps.iter().any(|r| r.strictly_contains(t))
            && !self.words.iter().any(|w| w.start_s < t && t < w.end_s)
    }

    /// Overlap rule first, then word snapping, repeated until stable.
    fn adjust(&self, mut t: f64, side: Side) -> f64 {
        for _ in 0..self.cfg.max_iterations {
            let before = t;
            if let Some(r) = self.overlaps.iter().find(|r| r.strictly_contains(t)) {
                t = match side {
                    Side::Start => (r.start_s - self.cfg.overlap_margin_s).max(0.0),
                    Side::End => r.end_s + self.cfg.overlap_margin_s,
                };
            }
            if let Some(w) = self.words.iter().find(|w| w.start_s < t && t < w.end_s) {
                t = match side {
                    Side::Start => w.start_s,
                    Side::End => w.end_s,
                };
            }
            if t == before {
                return t;
            }
        }
        if self.is_clear(t) {
            return t;
        }
        // Still inside speech after the cap: fall back to the edge of the
        // surrounding stretch of continuous speech.
        let span = self
            .speech
            .iter()
            .find(|s| s.strictly_contains(t))
            .copied()
            .expect("a blocked boundary lies inside some word");
        match side {
            Side::Start => span.start_s,
            Side::End => span.end_s,
        }
    }
}

/// Splits a meeting into utterance groups. Raw windows `[k*hop, k*hop + chunk]`
/// start at time zero; boundaries only ever move outward, so every word lands
/// in at least one group.
pub fn segment_meeting(words: &[WordAnnotation], cfg: &SegmentationConfig) -> Result<Vec<UtteranceGroup>> {
    cfg.validate()?;
    if words.is_empty() {
        return Err(Error::invalid("meeting has no words"));
    }
    for w in words {
        w.validate()?;
    }
    let mut sorted = words.to_vec();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));
    let overlaps = find_overlap_regions(&sorted);
    let speech = merged_spans(&sorted);
    let rules = Boundaries {
        overlaps: &overlaps,
        words: &sorted,
        speech: &speech,
        cfg,
    };
    let last_start = sorted.iter().map(|w| w.start_s).fold(0.0, f64::max);
    let n_windows = (last_start / cfg.hop_s).floor() as usize + 1;

    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut groups = Vec::new();
    for k in 0..n_windows {
        let raw_start = k as f64 * cfg.hop_s;
        let start = rules.adjust(raw_start, Side::Start);
        let end = rules.adjust(raw_start + cfg.chunk_s, Side::End);
        let members: Vec<usize> = (0..sorted.len())
            .filter(|&i| sorted[i].start_s >= start && sorted[i].end_s <= end)
            .collect();
        if members.is_empty() || !seen.insert(members.clone()) {
            continue;
        }
        let words: Vec<WordAnnotation> = members.iter().map(|&i| sorted[i].clone()).collect();
        let n_speakers = words.iter().map(|w| w.speaker_id.as_str()).collect::<BTreeSet<_>>().len();
        groups.push(UtteranceGroup {
            start_s: start,
            end_s: end,
            words,
            n_speakers,
        });
    }
    Ok(groups)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub segments: usize,
    pub avg_duration_s: f64,
    pub total_duration_h: f64,
    pub words: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Keyed by the number of speakers in a group.
    pub buckets: BTreeMap<usize, BucketStats>,
    pub total: BucketStats,
}

fn finish(segments: usize, seconds: f64, words: usize) -> BucketStats {
    BucketStats {
        segments,
        avg_duration_s: if segments == 0 { 0.0 } else { seconds / segments as f64 },
        total_duration_h: seconds / 3600.0,
        words,
    }
}

pub fn dataset_stats(groups: &[UtteranceGroup]) -> DatasetStats {
    let mut acc: BTreeMap<usize, (usize, f64, usize)> = BTreeMap::new();
    for g in groups {
        let e = acc.entry(g.n_speakers).or_default();
        e.0 += 1;
        e.1 += g.duration_s();
        e.2 += g.words.len();
    }
    let (n, secs, words) = acc
        .values()
        .fold((0, 0.0, 0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
    DatasetStats {
        buckets: acc.into_iter().map(|(k, (a, b, c))| (k, finish(a, b, c))).collect(),
        total: finish(n, secs, words),
    }
}

impl DatasetStats {
    /// Aligned text table, one row per speaker count plus a total row.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>10} {:>14} {:>14} {:>10}\n",
            "#speakers", "#segments", "avg dur (s)", "total dur (h)", "#words"
        );
        let row = |out: &mut String, label: &str, b: &BucketStats| {
            let _ = writeln!(
                out,
                "{:<10} {:>10} {:>14.2} {:>14.3} {:>10}",
                label, b.segments, b.avg_duration_s, b.total_duration_h, b.words
            );
        };
        for (k, b) in &self.buckets {
            row(&mut out, &k.to_string(), b);
        }
        row(&mut out, "total", &self.total);
        out
    }
}

/// A random meeting of short words on a 10 ms grid; speakers take turns with
/// frequent interruptions so overlaps are common.
pub fn random_meeting<R: Rng + ?Sized>(rng: &mut R, n_speakers: usize, duration_s: f64) -> Vec<WordAnnotation> {
    let grid = |t: f64| (t * 100.0).round() / 100.0;
    let mut words = Vec::new();
    for s in 0..n_speakers {
        let mut t = grid(rng.random_range(0.0..duration_s / 4.0));
        while t < duration_s {
            let run = rng.random_range(1..8);
            for _ in 0..run {
                let len = grid(rng.random_range(0.1..0.8)).max(0.01);
                words.push(WordAnnotation::new(
                    &format!("w{}", rng.random_range(0..50)),
                    &format!("S{s}"),
                    t,
                    t + len,
                ));
                t = grid(t + len + rng.random_range(0.0..0.3));
            }
            t = grid(t + rng.random_range(0.5..6.0));
        }
    }
    words.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    words
}
