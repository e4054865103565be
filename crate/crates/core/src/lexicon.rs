//! Syllable inventory, character romanization and fuzzy syllable lookup.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keymap::KeyLayout;

pub const BUNDLED_SYLLABLES: &str = include_str!("../data/syllables.txt");
pub const BUNDLED_CHARS: &str = include_str!("../data/chars.tsv");
/// One sentence per line, every character in the bundled lexicon.
pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");

/// How a pinyin chunk relates to its syllable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChunkMode {
    Perfect,
    Abbreviated,
}

impl ChunkMode {
    pub fn tag(self) -> &'static str {
        match self {
            ChunkMode::Perfect => "P",
            ChunkMode::Abbreviated => "A",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyllableEntry {
    pub text: String,
    /// Abbreviation form: the first letter, or `zh`/`ch`/`sh`.
    pub initial: String,
}

impl SyllableEntry {
    fn new(text: &str) -> Self {
        let initial = if ["zh", "ch", "sh"].iter().any(|p| text.starts_with(p)) && text.len() > 2 {
            text[..2].to_string()
        } else {
            text[..1].to_string()
        };
        SyllableEntry {
            text: text.to_string(),
            initial,
        }
    }

    /// Every accepted abbreviation. `zhong` is abbreviated both as `zh` and `z`.
    pub fn abbreviations(&self) -> impl Iterator<Item = &str> {
        let short = (self.initial.len() > 1).then(|| &self.initial[..1]);
        std::iter::once(self.initial.as_str()).chain(short)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharEntry {
    pub ch: char,
    /// Readings, most frequent first.
    pub pinyins: Vec<String>,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserWord {
    pub word: String,
    pub pinyin: Vec<String>,
    pub boost: f64,
}

impl UserWord {
    pub fn new(word: &str, pinyin: &[&str], boost: f64) -> Result<Self> {
        let w = UserWord {
            word: word.to_string(),
            pinyin: pinyin.iter().map(|s| s.to_string()).collect(),
            boost,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.word.chars().count() != self.pinyin.len() {
            return Err(Error::Validation(format!(
                "user word {} has {} characters but {} syllables",
                self.word,
                self.word.chars().count(),
                self.pinyin.len()
            )));
        }
        if !(self.boost >= 1.0 && self.boost.is_finite()) {
            return Err(Error::Validation(format!(
                "user word {} has boost {}, expected a finite value >= 1",
                self.word, self.boost
            )));
        }
        Ok(())
    }
}

/// Parses `word<TAB>pin'yin<TAB>boost` lines.
pub fn parse_user_words(text: &str) -> Result<Vec<UserWord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(i + 1, "expected word<TAB>pinyin<TAB>boost"));
        }
        let boost: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad boost {:?}", fields[2])))?;
        let pinyin: Vec<&str> = fields[1].split('\'').map(str::trim).collect();
        let word = UserWord::new(fields[0].trim(), &pinyin, boost)
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push(word);
    }
    Ok(out)
}

/// Unrestricted Damerau-Levenshtein distance; an adjacent swap costs one edit.
pub fn damerau(a: &str, b: &str) -> usize {
    strsim::damerau_levenshtein(a, b)
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: Vec<(char, u32)>,
    syllables: Vec<u32>,
    abbreviations: Vec<u32>,
}

/// Prefix tree over key images of syllables and abbreviations.
#[derive(Debug, Clone)]
pub(crate) struct KeyTrie {
    nodes: Vec<TrieNode>,
}

impl KeyTrie {
    fn new() -> Self {
        KeyTrie {
            nodes: vec![TrieNode::default()],
        }
    }

    fn insert(&mut self, keys: impl Iterator<Item = char>) -> usize {
        let mut at = 0usize;
        for k in keys {
            at = match self.nodes[at].children.iter().find(|(c, _)| *c == k) {
                Some(&(_, next)) => next as usize,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[at].children.push((k, next as u32));
                    next
                }
            };
        }
        at
    }

    /// Walks `keys` from the root, yielding `(consumed, syllables, abbreviations)`
    /// at every node that terminates an entry.
    pub(crate) fn walk<'a>(
        &'a self,
        keys: &'a [char],
    ) -> impl Iterator<Item = (usize, &'a [u32], &'a [u32])> + 'a {
        let mut at = Some(0usize);
        keys.iter().enumerate().map_while(move |(i, k)| {
            let node = &self.nodes[at?];
            let next = node.children.iter().find(|(c, _)| c == k)?.1 as usize;
            at = Some(next);
            let n = &self.nodes[next];
            Some((i + 1, n.syllables.as_slice(), n.abbreviations.as_slice()))
        })
    }
}

#[derive(Debug, Clone)]
struct LayoutIndex {
    trie: KeyTrie,
    /// Key image of each syllable.
    images: Vec<String>,
    /// Deletion neighbourhood (the image itself plus every single-key
    /// deletion) mapped to syllable ids.
    deletions: HashMap<String, Vec<u32>>,
    max_image_len: usize,
}

fn deletion_neighbourhood(s: &str) -> BTreeSet<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = BTreeSet::new();
    out.insert(s.to_string());
    for skip in 0..chars.len() {
        let v: String = chars
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != skip)
            .map(|(_, c)| *c)
            .collect();
        out.insert(v);
    }
    out
}

impl LayoutIndex {
    fn build(layout: KeyLayout, syllables: &[SyllableEntry], abbreviations: &[String]) -> Self {
        let image = |s: &str| -> String { s.chars().filter_map(|c| layout.key_of(c)).collect() };
        let mut trie = KeyTrie::new();
        let mut images = Vec::with_capacity(syllables.len());
        let mut deletions: HashMap<String, Vec<u32>> = HashMap::new();
        let mut max_image_len = 0;
        for (id, syl) in syllables.iter().enumerate() {
            let img = image(&syl.text);
            max_image_len = max_image_len.max(img.chars().count());
            let node = trie.insert(img.chars());
            trie.nodes[node].syllables.push(id as u32);
            for d in deletion_neighbourhood(&img) {
                deletions.entry(d).or_default().push(id as u32);
            }
            images.push(img);
        }
        for (id, abbr) in abbreviations.iter().enumerate() {
            let node = trie.insert(image(abbr).chars());
            trie.nodes[node].abbreviations.push(id as u32);
        }
        LayoutIndex {
            trie,
            images,
            deletions,
            max_image_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    syllables: Vec<SyllableEntry>,
    syllable_ids: HashMap<String, u32>,
    abbreviations: Vec<String>,
    abbreviation_ids: HashMap<String, u32>,
    /// abbreviation id -> syllable ids it stands for
    abbreviation_targets: Vec<Vec<u32>>,
    chars: Vec<CharEntry>,
    char_ids: HashMap<char, u32>,
    /// syllable id -> char ids with that reading, by descending frequency
    by_reading: Vec<Vec<u32>>,
    /// abbreviation id -> char ids with a reading it abbreviates
    by_abbreviation: Vec<Vec<u32>>,
    full: LayoutIndex,
    keypad: LayoutIndex,
}

fn is_pinyin(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase())
}

impl Lexicon {
    /// The bundled desk-scale lexicon.
    pub fn bundled() -> &'static Lexicon {
        Self::bundled_shared()
    }

    pub fn bundled_shared() -> &'static Arc<Lexicon> {
        static LEXICON: OnceLock<Arc<Lexicon>> = OnceLock::new();
        LEXICON.get_or_init(|| {
            Arc::new(load_lexicon(BUNDLED_SYLLABLES, BUNDLED_CHARS).expect("bundled lexicon is well formed"))
        })
    }

    /// Loads `syllables.txt` and `chars.tsv` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Lexicon> {
        let syllables = std::fs::read_to_string(dir.join("syllables.txt"))?;
        let chars = std::fs::read_to_string(dir.join("chars.tsv"))?;
        load_lexicon(&syllables, &chars)
    }

    pub fn syllables(&self) -> &[SyllableEntry] {
        &self.syllables
    }

    pub fn syllable(&self, id: u32) -> &SyllableEntry {
        &self.syllables[id as usize]
    }

    pub fn syllable_id(&self, text: &str) -> Option<u32> {
        self.syllable_ids.get(text).copied()
    }

    pub fn is_syllable(&self, text: &str) -> bool {
        self.syllable_ids.contains_key(text)
    }

    /// All abbreviation forms, sorted.
    pub fn abbreviations(&self) -> &[String] {
        &self.abbreviations
    }

    pub fn is_abbreviation(&self, text: &str) -> bool {
        self.abbreviation_ids.contains_key(text)
    }

    pub fn abbreviation_id(&self, text: &str) -> Option<u32> {
        self.abbreviation_ids.get(text).copied()
    }

    /// Syllables an abbreviation can stand for.
    pub fn expand_abbreviation(&self, abbr: &str) -> impl Iterator<Item = &SyllableEntry> {
        self.abbreviation_ids
            .get(abbr)
            .map(|&id| self.abbreviation_targets[id as usize].as_slice())
            .unwrap_or(&[])
            .iter()
            .map(|&s| &self.syllables[s as usize])
    }

    pub fn chars(&self) -> &[CharEntry] {
        &self.chars
    }

    pub fn char_count(&self) -> usize {
        self.chars.len()
    }

    pub fn char_entry(&self, ch: char) -> Option<&CharEntry> {
        self.char_ids.get(&ch).map(|&i| &self.chars[i as usize])
    }

    pub fn contains_char(&self, ch: char) -> bool {
        self.char_ids.contains_key(&ch)
    }

    /// Characters with the given reading, most frequent first.
    pub fn chars_for_syllable(&self, syllable: &str) -> impl Iterator<Item = &CharEntry> {
        let ids = self
            .syllable_ids
            .get(syllable)
            .map(|&id| self.by_reading[id as usize].as_slice())
            .unwrap_or(&[]);
        ids.iter().map(|&i| &self.chars[i as usize])
    }

    /// Characters with a reading that `abbr` abbreviates, most frequent first.
    pub fn chars_for_abbreviation(&self, abbr: &str) -> impl Iterator<Item = &CharEntry> {
        let ids = self
            .abbreviation_ids
            .get(abbr)
            .map(|&id| self.by_abbreviation[id as usize].as_slice())
            .unwrap_or(&[]);
        ids.iter().map(|&i| &self.chars[i as usize])
    }

    /// Romanizes a character: its most frequent reading, or that reading's initial.
    pub fn c2p(&self, ch: char, mode: ChunkMode) -> Result<&str> {
        let entry = self.char_entry(ch).ok_or_else(|| Error::NotFound {
            kind: "character",
            what: ch.to_string(),
        })?;
        let reading = &entry.pinyins[0];
        Ok(match mode {
            ChunkMode::Perfect => reading,
            ChunkMode::Abbreviated => {
                let id = self.syllable_ids[reading.as_str()];
                &self.syllables[id as usize].initial
            }
        })
    }

    /// Every romanization of a character under `mode`: all readings, or all
    /// accepted abbreviations of all readings.
    pub fn c2p_all(&self, ch: char, mode: ChunkMode) -> Result<Vec<&str>> {
        let entry = self.char_entry(ch).ok_or_else(|| Error::NotFound {
            kind: "character",
            what: ch.to_string(),
        })?;
        let mut out: Vec<&str> = Vec::new();
        for reading in &entry.pinyins {
            match mode {
                ChunkMode::Perfect => out.push(reading),
                ChunkMode::Abbreviated => {
                    let syl = &self.syllables[self.syllable_ids[reading.as_str()] as usize];
                    out.extend(syl.abbreviations());
                }
            }
        }
        let mut seen = BTreeSet::new();
        out.retain(|s| seen.insert(*s));
        Ok(out)
    }

    /// Canonical syllables within one edit of `chunk`, exact matches first.
    ///
    /// Letters in the chunk are mapped through the layout before comparing,
    /// so on the keypad the distance is counted in keys. Digits are taken as
    /// keys directly.
    pub fn fuzzy_expansions(&self, chunk: &str, layout: KeyLayout) -> Vec<(String, usize)> {
        let image: String = chunk
            .chars()
            .filter_map(|c| {
                let c = c.to_ascii_lowercase();
                layout.key_of(c).or_else(|| layout.is_key(c).then_some(c))
            })
            .collect();
        self.fuzzy_ids(&image, layout)
            .into_iter()
            .map(|(id, d)| (self.syllables[id as usize].text.clone(), d))
            .collect()
    }

    /// Same as [`fuzzy_expansions`](Self::fuzzy_expansions) over a key image,
    /// returning syllable ids.
    pub(crate) fn fuzzy_ids(&self, image: &str, layout: KeyLayout) -> Vec<(u32, usize)> {
        let index = self.index(layout);
        let mut seen = BTreeSet::new();
        for d in deletion_neighbourhood(image) {
            if let Some(ids) = index.deletions.get(&d) {
                seen.extend(ids.iter().copied());
            }
        }
        let mut out: Vec<(u32, usize)> = seen
            .into_iter()
            .filter_map(|id| {
                let d = damerau(image, &index.images[id as usize]);
                (d <= 1).then_some((id, d))
            })
            .collect();
        out.sort_by(|a, b| {
            a.1.cmp(&b.1)
                .then_with(|| self.syllables[a.0 as usize].text.cmp(&self.syllables[b.0 as usize].text))
        });
        out
    }

    pub(crate) fn trie(&self, layout: KeyLayout) -> &KeyTrie {
        &self.index(layout).trie
    }

    pub(crate) fn max_syllable_keys(&self, layout: KeyLayout) -> usize {
        self.index(layout).max_image_len
    }

    fn index(&self, layout: KeyLayout) -> &LayoutIndex {
        match layout {
            KeyLayout::TwentySixKey => &self.full,
            KeyLayout::NineKey => &self.keypad,
        }
    }
}

/// Builds a lexicon from a syllable list and a `char<TAB>pinyin,...<TAB>freq` table.
pub fn load_lexicon(syllable_table: &str, char_table: &str) -> Result<Lexicon> {
    let mut syllables = Vec::new();
    let mut syllable_ids = HashMap::new();
    for (i, line) in syllable_table.lines().enumerate() {
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if !is_pinyin(text) {
            return Err(Error::parse(i + 1, format!("bad syllable {text:?}")));
        }
        if syllable_ids.contains_key(text) {
            continue;
        }
        syllable_ids.insert(text.to_string(), syllables.len() as u32);
        syllables.push(SyllableEntry::new(text));
    }
    if syllables.is_empty() {
        return Err(Error::Validation("no syllables".into()));
    }

    let mut merged: BTreeMap<char, (usize, Vec<String>, u64)> = BTreeMap::new();
    for (i, line) in char_table.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(i + 1, "expected char<TAB>pinyin<TAB>frequency"));
        }
        let mut cs = fields[0].chars();
        let ch = match (cs.next(), cs.next()) {
            (Some(c), None) => c,
            _ => return Err(Error::parse(i + 1, format!("expected one character, got {:?}", fields[0]))),
        };
        let frequency: u64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad frequency {:?}", fields[2])))?;
        let entry = merged.entry(ch).or_insert((i, Vec::new(), 0));
        for p in fields[1].split(',').map(str::trim) {
            if !is_pinyin(p) {
                return Err(Error::parse(i + 1, format!("bad pinyin {p:?}")));
            }
            if !syllable_ids.contains_key(p) {
                return Err(Error::Validation(format!(
                    "line {}: {ch} has reading {p:?} outside the syllable inventory",
                    i + 1
                )));
            }
            if !entry.1.iter().any(|q| q == p) {
                entry.1.push(p.to_string());
            }
        }
        entry.2 += frequency;
    }
    if merged.is_empty() {
        return Err(Error::Validation("no characters".into()));
    }
    let mut rows: Vec<_> = merged.into_iter().collect();
    // keep file order so that ties in frequency stay stable
    rows.sort_by_key(|(_, (line, _, _))| *line);
    let chars: Vec<CharEntry> = rows
        .into_iter()
        .map(|(ch, (_, pinyins, frequency))| CharEntry {
            ch,
            pinyins,
            frequency,
        })
        .collect();
    let char_ids: HashMap<char, u32> = chars.iter().enumerate().map(|(i, c)| (c.ch, i as u32)).collect();

    let mut abbreviation_set = BTreeSet::new();
    for s in &syllables {
        abbreviation_set.extend(s.abbreviations().map(str::to_string));
    }
    let abbreviations: Vec<String> = abbreviation_set.into_iter().collect();
    let abbreviation_ids: HashMap<String, u32> = abbreviations
        .iter()
        .enumerate()
        .map(|(i, a)| (a.clone(), i as u32))
        .collect();
    let mut abbreviation_targets = vec![Vec::new(); abbreviations.len()];
    for (id, s) in syllables.iter().enumerate() {
        for a in s.abbreviations() {
            abbreviation_targets[abbreviation_ids[a] as usize].push(id as u32);
        }
    }

    let mut by_reading = vec![Vec::new(); syllables.len()];
    let mut by_abbreviation: Vec<Vec<u32>> = vec![Vec::new(); abbreviations.len()];
    for (cid, c) in chars.iter().enumerate() {
        let mut abbrs = BTreeSet::new();
        for p in &c.pinyins {
            let sid = syllable_ids[p.as_str()];
            by_reading[sid as usize].push(cid as u32);
            abbrs.extend(syllables[sid as usize].abbreviations().map(|a| abbreviation_ids[a]));
        }
        for a in abbrs {
            by_abbreviation[a as usize].push(cid as u32);
        }
    }
    let by_freq = |ids: &mut Vec<u32>| {
        ids.sort_by(|&a, &b| {
            chars[b as usize]
                .frequency
                .cmp(&chars[a as usize].frequency)
                .then(chars[a as usize].ch.cmp(&chars[b as usize].ch))
        })
    };
    by_reading.iter_mut().for_each(by_freq);
    by_abbreviation.iter_mut().for_each(by_freq);

    let full = LayoutIndex::build(KeyLayout::TwentySixKey, &syllables, &abbreviations);
    let keypad = LayoutIndex::build(KeyLayout::NineKey, &syllables, &abbreviations);
    Ok(Lexicon {
        syllables,
        syllable_ids,
        abbreviations,
        abbreviation_ids,
        abbreviation_targets,
        chars,
        char_ids,
        by_reading,
        by_abbreviation,
        full,
        keypad,
    })
}

impl fmt::Display for ChunkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChunkMode::Perfect => "perfect",
            ChunkMode::Abbreviated => "abbreviated",
        })
    }
}

impl FromStr for ChunkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" | "P" => Ok(ChunkMode::Perfect),
            "abbreviated" | "A" => Ok(ChunkMode::Abbreviated),
            _ => Err(Error::Config(format!("unknown chunk mode {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TINY_SYLLABLES: &str = "wo\nai\nni\nzhong\nzi\n";

    #[test]
    fn bundled_counts() {
        let lex = Lexicon::bundled();
        let lines = BUNDLED_SYLLABLES.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(lines, 411);
        assert_eq!(lex.syllables().len(), lines);
        let rows = BUNDLED_CHARS.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(lex.char_count(), rows);
    }

    #[test]
    fn small_tables() {
        let lex = load_lexicon(TINY_SYLLABLES, "我\two\t10\n爱\tai\t5\n你\tni\t7\n中\tzhong\t3\n字\tzi\t1\n").unwrap();
        assert_eq!(lex.syllables().len(), 5);
        assert_eq!(lex.char_count(), 5);
    }

    #[test]
    fn empty_char_table_is_rejected() {
        let err = load_lexicon(TINY_SYLLABLES, "").unwrap_err();
        assert_eq!(err.to_string(), "validation error: no characters");
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = load_lexicon(TINY_SYLLABLES, "我\two\t10\n爱\tai\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = load_lexicon(TINY_SYLLABLES, "我\two\tx\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = load_lexicon(TINY_SYLLABLES, "我\twoo\t1\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn duplicate_rows_are_merged() {
        let merged = load_lexicon(TINY_SYLLABLES, "我\two\t10\n爱\tai\t4\n我\two\t5\n").unwrap();
        let single = load_lexicon(TINY_SYLLABLES, "我\two\t15\n爱\tai\t4\n").unwrap();
        assert_eq!(merged.char_entry('我'), single.char_entry('我'));
        assert_eq!(merged.char_entry('我').unwrap().frequency, 15);
    }

    #[test]
    fn romanization() {
        let lex = Lexicon::bundled();
        assert_eq!(lex.c2p('玩', ChunkMode::Perfect).unwrap(), "wan");
        assert_eq!(lex.c2p('我', ChunkMode::Abbreviated).unwrap(), "w");
        assert_eq!(lex.c2p('处', ChunkMode::Perfect).unwrap(), "chu");
        assert_eq!(lex.c2p('中', ChunkMode::Abbreviated).unwrap(), "zh");
        assert_eq!(lex.c2p_all('中', ChunkMode::Abbreviated).unwrap(), vec!["zh", "z"]);
        assert!(lex.c2p_all('行', ChunkMode::Perfect).unwrap().contains(&"hang"));
        assert!(matches!(lex.c2p('Ω', ChunkMode::Perfect), Err(Error::NotFound { .. })));
    }

    #[test]
    fn abbreviation_is_prefix_of_reading() {
        let lex = Lexicon::bundled();
        for c in lex.chars() {
            let full = lex.c2p(c.ch, ChunkMode::Perfect).unwrap();
            let abbr = lex.c2p(c.ch, ChunkMode::Abbreviated).unwrap();
            assert!(full.starts_with(abbr), "{} {full} {abbr}", c.ch);
        }
        for s in lex.syllables() {
            assert!(s.text.starts_with(&s.initial));
        }
    }

    #[test]
    fn noise_examples() {
        let lex = Lexicon::bundled();
        let l = KeyLayout::TwentySixKey;
        assert!(lex.fuzzy_expansions("rna", l).contains(&("ran".into(), 1)));
        assert!(lex.fuzzy_expansions("uan", l).contains(&("yan".into(), 1)));
        assert!(lex.fuzzy_expansions("zzi", l).contains(&("zi".into(), 1)));
        assert!(lex.fuzzy_expansions("ya", l).contains(&("yan".into(), 1)));
        let wo = lex.fuzzy_expansions("wo", l);
        assert_eq!(wo[0], ("wo".into(), 0));
        assert!(wo[1..].iter().all(|(_, d)| *d == 1));
    }

    #[test]
    fn keypad_expansions_use_key_distance() {
        let lex = Lexicon::bundled();
        let k = KeyLayout::NineKey;
        let exact = lex.fuzzy_expansions("96", k);
        assert!(exact.contains(&("wo".into(), 0)));
        assert!(exact.contains(&("yo".into(), 0)));
        // "xo" types the same keys as "wo"
        assert!(lex.fuzzy_expansions("xo", k).contains(&("wo".into(), 0)));
    }

    #[test]
    fn zero_distance_iff_syllable() {
        let lex = Lexicon::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let len = rng.gen_range(1..=5);
            let chunk: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let exp = lex.fuzzy_expansions(&chunk, KeyLayout::TwentySixKey);
            let has_zero = exp.iter().any(|(_, d)| *d == 0);
            assert_eq!(has_zero, lex.is_syllable(&chunk), "{chunk}");
            // brute force over the inventory
            let brute: BTreeSet<String> = lex
                .syllables()
                .iter()
                .filter(|s| damerau(&chunk, &s.text) <= 1)
                .map(|s| s.text.clone())
                .collect();
            let got: BTreeSet<String> = exp.into_iter().map(|(s, _)| s).collect();
            assert_eq!(got, brute, "{chunk}");
        }
    }

    #[test]
    fn damerau_is_a_metric_on_the_inventory() {
        let lex = Lexicon::bundled();
        let syl: Vec<&str> = lex.syllables().iter().map(|s| s.text.as_str()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(damerau("ran", "rna"), 1);
        for _ in 0..20_000 {
            let a = syl[rng.gen_range(0..syl.len())];
            let b = syl[rng.gen_range(0..syl.len())];
            let c = syl[rng.gen_range(0..syl.len())];
            assert_eq!(damerau(a, b), damerau(b, a));
            assert!(damerau(a, c) <= damerau(a, b) + damerau(b, c), "{a} {b} {c}");
        }
    }

    #[test]
    fn user_words() {
        let words = parse_user_words("婉莹\twan'ying\t10\n").unwrap();
        assert_eq!(words[0].pinyin, vec!["wan", "ying"]);
        assert!(parse_user_words("婉莹\twan\t10\n").is_err());
        assert!(parse_user_words("婉莹\twan'ying\t0.5\n").is_err());
    }
}
