//! Per-class continuous maps from fused token attention.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{FusedAttention, TokenMeta};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    /// Lowercase words or space-separated phrases that name the class.
    pub match_words: Vec<String>,
}

/// Foreground classes with ids `1..=N`; the id doubles as the palette index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    classes: Vec<ClassEntry>,
}

impl ClassTable {
    pub fn new(mut classes: Vec<ClassEntry>) -> Result<Self> {
        classes.sort_by_key(|c| c.id);
        let mut owner: HashMap<&str, u32> = HashMap::new();
        for (i, class) in classes.iter().enumerate() {
            if class.id as usize != i + 1 {
                return Err(Error::Config(format!(
                    "class ids must be contiguous from 1; found {} at rank {}",
                    class.id,
                    i + 1
                )));
            }
            if class.match_words.is_empty() {
                return Err(Error::Config(format!("class {} has no match words", class.name)));
            }
            for w in &class.match_words {
                if w.is_empty() || w.trim() != w {
                    return Err(Error::Config(format!("bad match word {w:?} in class {}", class.name)));
                }
                if w.to_lowercase() != *w {
                    return Err(Error::Config(format!("match word {w:?} is not lowercase")));
                }
                if let Some(prev) = owner.insert(w, class.id) {
                    if prev != class.id {
                        return Err(Error::Config(format!(
                            "match word {w:?} claimed by classes {prev} and {}",
                            class.id
                        )));
                    }
                }
            }
        }
        Ok(ClassTable { classes })
    }

    /// Reads `classes.json`: `[{"id", "name", "match_words": [...]}]`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let classes: Vec<ClassEntry> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::new(classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn get(&self, id: u32) -> Option<&ClassEntry> {
        id.checked_sub(1).and_then(|i| self.classes.get(i as usize))
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub(crate) fn matcher(&self) -> PhraseMatcher {
        PhraseMatcher::new(
            self.classes
                .iter()
                .flat_map(|c| c.match_words.iter().map(move |w| (c.id, w.as_str()))),
        )
    }
}

/// Splits text into maximal alphanumeric runs: `(byte start, byte end)`.
pub(crate) fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Longest-first exact matching of (possibly multi-word) phrases over a word
/// sequence.
#[derive(Debug, Clone)]
pub(crate) struct PhraseMatcher {
    // first word -> (phrase words, class id, phrase), longest phrases first
    by_head: HashMap<String, Vec<(Vec<String>, u32, String)>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PhraseMatch {
    pub class_id: u32,
    /// Word-index range `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub phrase: String,
}

impl PhraseMatcher {
    pub(crate) fn new<'a>(phrases: impl IntoIterator<Item = (u32, &'a str)>) -> Self {
        let mut by_head: HashMap<String, Vec<(Vec<String>, u32, String)>> = HashMap::new();
        for (id, phrase) in phrases {
            let words: Vec<String> = word_spans(phrase)
                .into_iter()
                .map(|(s, e)| phrase[s..e].to_lowercase())
                .collect();
            if words.is_empty() {
                continue;
            }
            by_head
                .entry(words[0].clone())
                .or_default()
                .push((words, id, phrase.to_string()));
        }
        for v in by_head.values_mut() {
            v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.2.cmp(&b.2)));
        }
        PhraseMatcher { by_head }
    }

    /// `words` must already be lowercase.
    pub(crate) fn find_all(&self, words: &[String]) -> Vec<PhraseMatch> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let hit = self.by_head.get(&words[i]).and_then(|cands| {
                cands
                    .iter()
                    .find(|(pw, _, _)| words.len() - i >= pw.len() && words[i..i + pw.len()] == pw[..])
            });
            match hit {
                Some((pw, id, phrase)) => {
                    out.push(PhraseMatch {
                        class_id: *id,
                        start: i,
                        end: i + pw.len(),
                        phrase: phrase.clone(),
                    });
                    i += pw.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Token positions relevant to each class, indexed by `class_id - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenRelevance {
    pub tau: Vec<Vec<usize>>,
}

impl TokenRelevance {
    pub fn positions(&self, class_id: u32) -> &[usize] {
        &self.tau[class_id as usize - 1]
    }

    pub fn num_classes(&self) -> usize {
        self.tau.len()
    }

    /// Every referenced position, sorted and deduplicated.
    pub fn all_positions(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.tau.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn present_classes(&self) -> Vec<u32> {
        (1..=self.tau.len() as u32)
            .filter(|&c| !self.positions(c).is_empty())
            .collect()
    }
}

/// Normalized text of one subword piece: tokenizer end-of-word markers and
/// surrounding punctuation removed.
fn clean_piece(text: &str) -> String {
    let t = text.strip_suffix("</w>").unwrap_or(text);
    t.trim_start_matches(['Ġ', '▁'])
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Groups subword tokens into words and collects, per class, the positions
/// of every token belonging to an exactly matching word (or phrase).
pub fn build_token_index(tokens: &[TokenMeta], table: &ClassTable) -> TokenRelevance {
    let mut words: BTreeMap<usize, (String, Vec<usize>)> = BTreeMap::new();
    for tok in tokens {
        if let Some(w) = tok.word_index {
            let entry = words.entry(w).or_default();
            entry.0.push_str(&clean_piece(&tok.text));
            entry.1.push(tok.position);
        }
    }
    let (texts, positions): (Vec<String>, Vec<Vec<usize>>) = words.into_values().unzip();

    let mut tau = vec![Vec::new(); table.len()];
    for m in table.matcher().find_all(&texts) {
        let slot = &mut tau[m.class_id as usize - 1];
        for p in &positions[m.start..m.end] {
            slot.extend_from_slice(p);
        }
    }
    for v in &mut tau {
        v.sort_unstable();
    }
    TokenRelevance { tau }
}

/// Per-class maps for classes `1..=N` (no background yet).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMaps {
    pub width: usize,
    pub height: usize,
    /// `[N][height][width]`
    pub maps: Vec<f32>,
    /// Indexed by `class_id - 1`.
    pub present: Vec<bool>,
}

impl ClassMaps {
    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn plane(&self, class_id: u32) -> &[f32] {
        let n = self.width * self.height;
        let i = class_id as usize - 1;
        &self.maps[i * n..(i + 1) * n]
    }

    fn plane_mut(&mut self, class_id: u32) -> &mut [f32] {
        let n = self.width * self.height;
        let i = class_id as usize - 1;
        &mut self.maps[i * n..(i + 1) * n]
    }

    pub fn present_classes(&self) -> Vec<u32> {
        (1..=self.present.len() as u32)
            .filter(|&c| self.present[c as usize - 1])
            .collect()
    }
}

/// Mean of the relevant token channels for each class; classes with no
/// relevant tokens get an all-zero map and are marked absent.
///
/// Panics if a position in `rel` was not fused.
pub fn aggregate_class_maps(fused: &FusedAttention, rel: &TokenRelevance) -> ClassMaps {
    let (w, h) = (fused.width, fused.height);
    let n = rel.num_classes();
    let stride = fused.channels();
    let mut maps = vec![0.0f32; n * w * h];
    let mut present = vec![false; n];
    for (ci, positions) in rel.tau.iter().enumerate() {
        if positions.is_empty() {
            continue;
        }
        present[ci] = true;
        let channels: Vec<usize> = positions
            .iter()
            .map(|&p| {
                fused
                    .channel_of(p)
                    .unwrap_or_else(|| panic!("token position {p} missing from fused attention"))
            })
            .collect();
        let count = channels.len() as f32;
        let plane = &mut maps[ci * w * h..(ci + 1) * w * h];
        for (dst, px) in plane.iter_mut().zip(fused.maps.chunks_exact(stride)) {
            let sum: f32 = channels.iter().map(|&ch| px[ch]).sum();
            *dst = sum / count;
        }
    }
    ClassMaps {
        width: w,
        height: h,
        maps,
        present,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    #[default]
    PerClassMax,
    GlobalMax,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-class-max" | "per_class_max" => Ok(NormMode::PerClassMax),
            "global-max" | "global_max" => Ok(NormMode::GlobalMax),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

fn plane_max(plane: &[f32]) -> f32 {
    plane.iter().copied().fold(0.0, f32::max)
}

/// Rescales present maps into `[0, 1]`; all-zero maps stay zero.
pub fn normalize_maps(raw: &ClassMaps, mode: NormMode) -> ClassMaps {
    let mut out = raw.clone();
    let present = raw.present_classes();
    match mode {
        NormMode::PerClassMax => {
            for &c in &present {
                let m = plane_max(raw.plane(c));
                if m > 0.0 {
                    out.plane_mut(c).iter_mut().for_each(|v| *v /= m);
                }
            }
        }
        NormMode::GlobalMax => {
            let m = present
                .iter()
                .map(|&c| plane_max(raw.plane(c)))
                .fold(0.0, f32::max);
            if m > 0.0 {
                for &c in &present {
                    out.plane_mut(c).iter_mut().for_each(|v| *v /= m);
                }
            }
        }
    }
    out
}

/// Background plus foreground probability maps fed to labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMaps {
    pub width: usize,
    pub height: usize,
    /// `[N + 1][height][width]`, channel 0 is background.
    pub maps: Vec<f32>,
    pub beta: f32,
    /// Foreground class ids with at least one relevant token, ascending.
    pub present: Vec<u32>,
}

impl ClassProbMaps {
    /// Number of labels including background.
    pub fn num_labels(&self) -> usize {
        self.maps.len() / (self.width * self.height)
    }

    pub fn plane(&self, label: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.maps[label * n..(label + 1) * n]
    }

    pub fn is_present(&self, label: usize) -> bool {
        label == 0 || self.present.binary_search(&(label as u32)).is_ok()
    }

    /// Background followed by the present classes.
    pub fn active_labels(&self) -> Vec<usize> {
        std::iter::once(0)
            .chain(self.present.iter().map(|&c| c as usize))
            .collect()
    }
}

/// Adds the background channel `clamp(1 - max_c A_c - beta, 0, 1)`, the max
/// running over present classes only.
pub fn background_map(normalized: &ClassMaps, beta: f32) -> Result<ClassProbMaps> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    let present = normalized.present_classes();
    if present.is_empty() {
        return Err(Error::Config("prompt matched no class".into()));
    }
    let n = normalized.width * normalized.height;
    let mut maps = Vec::with_capacity(n * (normalized.num_classes() + 1));
    maps.resize(n, 0.0);
    let mut fg_max = vec![0.0f32; n];
    for &c in &present {
        for (m, &v) in fg_max.iter_mut().zip(normalized.plane(c)) {
            *m = m.max(v);
        }
    }
    for (bg, &m) in maps.iter_mut().zip(&fg_max) {
        *bg = (1.0 - m - beta).clamp(0.0, 1.0);
    }
    maps.extend_from_slice(&normalized.maps);
    Ok(ClassProbMaps {
        width: normalized.width,
        height: normalized.height,
        maps,
        beta,
        present,
    })
}
