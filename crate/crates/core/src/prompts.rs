//! Caption curation and synonym/hyponym prompt augmentation.
//!
//! Spans are `[start, end)` offsets in Unicode scalar values, so they index
//! the same characters as Python string slicing on the consumer side.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{word_spans, ClassEntry, ClassTable, PhraseMatcher};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMatch {
    pub class_id: u32,
    pub start: usize,
    pub end: usize,
    pub matched_word: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Raw,
    Augmented { parent_index: usize, replacement: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub matches: Vec<ClassMatch>,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl PromptRecord {
    /// The text covered by a char-offset span.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        let (b0, b1) = char_to_byte_range(&self.text, start, end);
        &self.text[b0..b1]
    }
}

fn char_to_byte_range(text: &str, start: usize, end: usize) -> (usize, usize) {
    let mut idx = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b0 = idx.nth(start).expect("span start in bounds");
    let b1 = if end == start {
        b0
    } else {
        idx.nth(end - start - 1).expect("span end in bounds")
    };
    (b0, b1)
}

/// Replacement words per class id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SynonymTable {
    pub per_class: BTreeMap<u32, Vec<String>>,
}

impl SynonymTable {
    /// Parses `{"class_name": ["word", ...]}`, resolving names through `table`.
    pub fn from_json(json: &str, table: &ClassTable) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("synonyms: {e}")))?;
        let mut per_class = BTreeMap::new();
        for (name, words) in raw {
            let class = table
                .by_name(&name)
                .ok_or_else(|| Error::Config(format!("synonyms name unknown class {name:?}")))?;
            if words.is_empty() {
                return Err(Error::Config(format!("empty synonym list for {name:?}")));
            }
            for w in &words {
                if w.trim().is_empty() || w.to_lowercase() != *w {
                    return Err(Error::Config(format!(
                        "synonym {w:?} for {name:?} must be nonempty lowercase"
                    )));
                }
            }
            per_class.insert(class.id, words);
        }
        Ok(SynonymTable { per_class })
    }

    pub fn from_file(path: impl AsRef<Path>, table: &ClassTable) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, table)
    }

    pub fn get(&self, class_id: u32) -> &[String] {
        self.per_class.get(&class_id).map_or(&[], |v| v.as_slice())
    }
}

impl ClassTable {
    /// This table with each class's synonyms added to its match words; words
    /// already claimed by another class are left with that class.
    pub fn with_synonyms(&self, syn: &SynonymTable) -> ClassTable {
        let mut taken: BTreeMap<String, u32> = BTreeMap::new();
        for c in self.classes() {
            for w in &c.match_words {
                taken.insert(w.clone(), c.id);
            }
        }
        let classes: Vec<ClassEntry> = self
            .classes()
            .iter()
            .map(|c| {
                let mut entry = c.clone();
                for w in syn.get(c.id) {
                    if !taken.contains_key(w) {
                        taken.insert(w.clone(), c.id);
                        entry.match_words.push(w.clone());
                    }
                }
                entry
            })
            .collect();
        ClassTable::new(classes).expect("extending a valid table keeps it valid")
    }
}

fn find_matches(text: &str, matcher: &PhraseMatcher) -> Vec<ClassMatch> {
    let spans = word_spans(text);
    let words: Vec<String> = spans.iter().map(|&(s, e)| text[s..e].to_lowercase()).collect();
    let mut byte_to_char = vec![0usize; text.len() + 1];
    let mut count = 0;
    for (b, _) in text.char_indices() {
        byte_to_char[b] = count;
        count += 1;
    }
    byte_to_char[text.len()] = count;
    matcher
        .find_all(&words)
        .into_iter()
        .map(|m| ClassMatch {
            class_id: m.class_id,
            start: byte_to_char[spans[m.start].0],
            end: byte_to_char[spans[m.end - 1].1],
            matched_word: m.phrase,
        })
        .collect()
}

/// Keeps captions containing at least one class word (whole-word,
/// case-insensitive), recording every match.
pub fn curate<S: AsRef<str>>(corpus: &[S], table: &ClassTable) -> Vec<PromptRecord> {
    let matcher = table.matcher();
    corpus
        .iter()
        .filter_map(|caption| {
            let text = caption.as_ref();
            let matches = find_matches(text, &matcher);
            (!matches.is_empty()).then(|| PromptRecord {
                text: text.to_string(),
                matches,
                origin: Origin::Raw,
                score: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentPolicy {
    /// Every (matched word, synonym) pair.
    OnePerSynonym,
    /// `k` distinct pairs per record, drawn with a seeded generator.
    Sample { k: usize, seed: u64 },
}

impl Default for AugmentPolicy {
    /// One sampled variant per record, which doubles the corpus.
    fn default() -> Self {
        AugmentPolicy::Sample { k: 1, seed: 0 }
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    match original.chars().next() {
        Some(c) if c.is_uppercase() => {
            let mut chars = replacement.chars();
            chars
                .next()
                .map(|f| f.to_uppercase().chain(chars).collect())
                .unwrap_or_default()
        }
        _ => replacement.to_string(),
    }
}

fn variant(parent: &PromptRecord, parent_index: usize, which: usize, synonym: &str) -> PromptRecord {
    let m = &parent.matches[which];
    let (b0, b1) = char_to_byte_range(&parent.text, m.start, m.end);
    let replacement = match_case(&parent.text[b0..b1], synonym);
    let new_len = replacement.chars().count();
    let text = format!("{}{}{}", &parent.text[..b0], replacement, &parent.text[b1..]);
    let shift = new_len as isize - (m.end - m.start) as isize;
    let matches = parent
        .matches
        .iter()
        .enumerate()
        .map(|(i, other)| match i.cmp(&which) {
            std::cmp::Ordering::Less => other.clone(),
            std::cmp::Ordering::Equal => ClassMatch {
                class_id: m.class_id,
                start: m.start,
                end: m.start + new_len,
                matched_word: synonym.to_string(),
            },
            std::cmp::Ordering::Greater => ClassMatch {
                start: (other.start as isize + shift) as usize,
                end: (other.end as isize + shift) as usize,
                ..other.clone()
            },
        })
        .collect();
    PromptRecord {
        text,
        matches,
        origin: Origin::Augmented {
            parent_index,
            replacement: synonym.to_string(),
        },
        score: None,
    }
}

/// Returns the input records followed by their variants. Each variant replaces
/// exactly one matched span with one synonym of its class; `parent_index`
/// points at the parent's position in the returned list.
pub fn augment(records: &[PromptRecord], syn: &SynonymTable, policy: AugmentPolicy) -> Vec<PromptRecord> {
    let mut out: Vec<PromptRecord> = records.to_vec();
    let mut rng = match policy {
        AugmentPolicy::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        AugmentPolicy::OnePerSynonym => None,
    };
    for (pi, rec) in records.iter().enumerate() {
        let candidates: Vec<(usize, &str)> = rec
            .matches
            .iter()
            .enumerate()
            .flat_map(|(mi, m)| syn.get(m.class_id).iter().map(move |w| (mi, w.as_str())))
            .collect();
        let chosen: Vec<usize> = match (policy, rng.as_mut()) {
            (AugmentPolicy::Sample { k, .. }, Some(rng)) => {
                let amount = k.min(candidates.len());
                let mut idx = rand::seq::index::sample(rng, candidates.len(), amount).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..candidates.len()).collect(),
        };
        for ci in chosen {
            let (mi, w) = candidates[ci];
            out.push(variant(rec, pi, mi, w));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFilter {
    TopK(usize),
    AtLeast(f64),
}

/// Top-k by descending score (stable, so ties keep corpus order), or every
/// record scoring at least the threshold in corpus order.
pub fn filter_by_score(records: &[PromptRecord], filter: ScoreFilter) -> Result<Vec<PromptRecord>> {
    let scores: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.score.ok_or(Error::ScoreMissing(i)))
        .collect::<Result<_>>()?;
    match filter {
        ScoreFilter::TopK(k) => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            Ok(order.into_iter().take(k).map(|i| records[i].clone()).collect())
        }
        ScoreFilter::AtLeast(t) => Ok(records
            .iter()
            .zip(&scores)
            .filter(|(_, &s)| s >= t)
            .map(|(r, _)| r.clone())
            .collect()),
    }
}

/// Applies an `index<TAB>score` sidecar (optional `index` header line).
pub fn attach_scores(records: &mut [PromptRecord], tsv: &str) -> Result<()> {
    for (lineno, line) in tsv.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (idx, score) = (fields.next().unwrap_or(""), fields.next().unwrap_or(""));
        if lineno == 0 && idx == "index" {
            continue;
        }
        let bad = || Error::Config(format!("scores line {}: {line:?}", lineno + 1));
        let idx: usize = idx.trim().parse().map_err(|_| bad())?;
        let score: f64 = score.trim().parse().map_err(|_| bad())?;
        let rec = records.get_mut(idx).ok_or_else(|| {
            Error::Config(format!("scores line {} refers to missing record {idx}", lineno + 1))
        })?;
        rec.score = Some(score);
    }
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[PromptRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ClassTable {
        ClassTable::new(vec![
            ClassEntry { id: 1, name: "car".into(), match_words: vec!["car".into(), "cars".into()] },
            ClassEntry {
                id: 2,
                name: "bicycle".into(),
                match_words: vec!["bicycle".into(), "bike".into(), "bikes".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn curate_keeps_matching_captions() {
        let recs = curate(&["a red car on a road", "a sunny day"], &table());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].matches.len(), 1);
        let m = &recs[0].matches[0];
        assert_eq!((m.start, m.end, m.class_id), (6, 9, 1));
        assert_eq!(recs[0].span_text(m.start, m.end), "car");
    }

    #[test]
    fn curate_plural_and_word_boundary() {
        assert_eq!(curate(&["two cars parked"], &table()).len(), 1);
        assert!(curate(&["carpet on the floor"], &table()).is_empty());
        assert_eq!(curate(&["A CAR."], &table()).len(), 1);
    }

    #[test]
    fn spans_count_characters_not_bytes() {
        let recs = curate(&["café → car"], &table());
        let m = &recs[0].matches[0];
        assert_eq!((m.start, m.end), (7, 10));
        assert_eq!(recs[0].span_text(m.start, m.end), "car");
    }

    #[test]
    fn single_replacement() {
        let syn = SynonymTable { per_class: BTreeMap::from([(2, vec!["bicycle".to_string()])]) };
        let recs = curate(&["a bike leaning on a wall"], &table());
        let out = augment(&recs, &syn, AugmentPolicy::OnePerSynonym);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].text, "a bicycle leaning on a wall");
        assert_eq!(
            out[1].origin,
            Origin::Augmented { parent_index: 0, replacement: "bicycle".into() }
        );
        assert_eq!(out[1].matches[0].end, 9);
    }

    #[test]
    fn later_spans_shift_and_case_is_kept() {
        let syn = SynonymTable {
            per_class: BTreeMap::from([(1, vec!["automobile".to_string()])]),
        };
        let recs = curate(&["Car next to a bike"], &table());
        let out = augment(&recs, &syn, AugmentPolicy::OnePerSynonym);
        assert_eq!(out[1].text, "Automobile next to a bike");
        let bike = &out[1].matches[1];
        assert_eq!(out[1].span_text(bike.start, bike.end), "bike");
    }

    #[test]
    fn sampling_caps_at_available_variants() {
        let syn = SynonymTable { per_class: BTreeMap::from([(1, vec!["auto".to_string()])]) };
        let recs = curate(&["a car"], &table());
        let out = augment(&recs, &syn, AugmentPolicy::Sample { k: 5, seed: 3 });
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn score_filters() {
        let mut recs = curate(&["car a", "car b", "car c"], &table());
        attach_scores(&mut recs, "index\tscore\n0\t0.9\n1\t0.5\n2\t0.7\n").unwrap();
        let top = filter_by_score(&recs, ScoreFilter::TopK(2)).unwrap();
        assert_eq!(top.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), ["car a", "car c"]);
        let thr = filter_by_score(&recs, ScoreFilter::AtLeast(0.6)).unwrap();
        assert_eq!(thr.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), ["car a", "car c"]);
        assert_eq!(filter_by_score(&recs, ScoreFilter::TopK(10)).unwrap().len(), 3);
    }

    #[test]
    fn ties_keep_earlier_record() {
        let mut recs = curate(&["car a", "car b", "car c"], &table());
        attach_scores(&mut recs, "0\t0.5\n1\t0.8\n2\t0.5\n").unwrap();
        let top = filter_by_score(&recs, ScoreFilter::TopK(2)).unwrap();
        assert_eq!(top[1].text, "car a");
    }

    #[test]
    fn missing_score_is_an_error() {
        let mut recs = curate(&["car a", "car b"], &table());
        attach_scores(&mut recs, "0\t0.5\n").unwrap();
        assert!(matches!(
            filter_by_score(&recs, ScoreFilter::TopK(1)),
            Err(Error::ScoreMissing(1))
        ));
        assert!(attach_scores(&mut recs, "7\t0.5\n").is_err());
    }

    #[test]
    fn synonym_file_resolves_names() {
        let syn = SynonymTable::from_json(r#"{"bicycle": ["cycle", "bmx"]}"#, &table()).unwrap();
        assert_eq!(syn.get(2).len(), 2);
        assert!(SynonymTable::from_json(r#"{"plane": ["jet"]}"#, &table()).is_err());
        assert!(SynonymTable::from_json(r#"{"car": []}"#, &table()).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let syn = SynonymTable { per_class: BTreeMap::from([(1, vec!["auto".to_string()])]) };
        let recs = augment(&curate(&["a car"], &table()), &syn, AugmentPolicy::OnePerSynonym);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        fs::write(&p, &buf).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
    }
}
