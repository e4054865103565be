//! Pinyin segmentation lattice over raw keystrokes.
//!
//! Every arc spans a run of keys and carries the [`Syllable`] it is read
//! as: a full syllable, an abbreviation, or (when noise is allowed) a
//! syllable one edit away from the typed keys. A path from node 0 to the
//! last node is a complete segmentation ("pyseg") of the input.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::keymap::{KeyLayout, KeySequence};
use crate::lexicon::{ChunkMode, Lexicon};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Syllable {
    /// Letters consumed; on the keypad, the realization chosen for the digits.
    pub raw_chunk: String,
    /// Target syllable, or abbreviation for abbreviated chunks.
    pub canonical: String,
    pub mode: ChunkMode,
    pub noise_distance: u8,
    /// Number of keystrokes consumed.
    pub key_len: usize,
}

impl Syllable {
    pub fn exact(text: &str, mode: ChunkMode) -> Self {
        Syllable {
            raw_chunk: text.to_string(),
            canonical: text.to_string(),
            mode,
            noise_distance: 0,
            key_len: text.len(),
        }
    }

    pub fn is_noisy(&self) -> bool {
        self.noise_distance > 0
    }
}

impl fmt::Display for Syllable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_noisy() {
            write!(f, "{}>{}", self.raw_chunk, self.canonical)
        } else {
            f.write_str(&self.raw_chunk)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Perfect,
    Abbreviated,
    RandomAbbreviated,
    Noisy,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [
        InputMode::Perfect,
        InputMode::Abbreviated,
        InputMode::RandomAbbreviated,
        InputMode::Noisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Perfect => "perfect",
            InputMode::Abbreviated => "abbreviated",
            InputMode::RandomAbbreviated => "random_abbreviated",
            InputMode::Noisy => "noisy",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InputMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        InputMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown input mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PysegPath {
    pub syllables: Vec<Syllable>,
    pub input_mode: InputMode,
}

impl PysegPath {
    pub fn new(syllables: Vec<Syllable>) -> Self {
        let input_mode = classify_syllables(&syllables);
        PysegPath {
            syllables,
            input_mode,
        }
    }

    pub fn raw_chunks(&self) -> Vec<&str> {
        self.syllables.iter().map(|s| s.raw_chunk.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.syllables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.syllables.is_empty()
    }

    pub fn noise(&self) -> usize {
        self.syllables.iter().map(|s| s.noise_distance as usize).sum()
    }

    /// Chunks joined with apostrophes, e.g. `wo'ba'n`.
    pub fn display(&self) -> String {
        self.syllables.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("'")
    }

    /// Like [`display`](Self::display) with a per-chunk mode tag, e.g. `wo:P'b:A`.
    pub fn display_tagged(&self) -> String {
        self.syllables
            .iter()
            .map(|s| format!("{s}:{}", if s.is_noisy() { "N" } else { s.mode.tag() }))
            .collect::<Vec<_>>()
            .join("'")
    }
}

fn classify_syllables(syllables: &[Syllable]) -> InputMode {
    if syllables.iter().any(|s| s.noise_distance > 0) {
        InputMode::Noisy
    } else if syllables.iter().all(|s| s.mode == ChunkMode::Perfect) {
        InputMode::Perfect
    } else if syllables.iter().all(|s| s.mode == ChunkMode::Abbreviated) {
        InputMode::Abbreviated
    } else {
        InputMode::RandomAbbreviated
    }
}

/// Input mode of a complete segmentation.
pub fn classify_mode(path: &PysegPath) -> InputMode {
    classify_syllables(&path.syllables)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub allow_noise: bool,
    /// Noisy chunks permitted on a single path.
    pub max_noise_chunks: usize,
    /// Emit abbreviation arcs on the keypad.
    pub keypad_abbreviations: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            allow_noise: false,
            max_noise_chunks: 1,
            keypad_abbreviations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticeArc {
    pub from: usize,
    pub to: usize,
    pub syllable: Syllable,
}

#[derive(Debug, Clone)]
pub struct SegLattice {
    keys: KeySequence,
    arcs: Vec<LatticeArc>,
    outgoing: Vec<Vec<u32>>,
    max_noise_chunks: usize,
}

impl SegLattice {
    pub fn keys(&self) -> &KeySequence {
        &self.keys
    }

    /// Number of keystrokes; nodes run from 0 to this value.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn arcs(&self) -> &[LatticeArc] {
        &self.arcs
    }

    pub fn arc(&self, id: u32) -> &LatticeArc {
        &self.arcs[id as usize]
    }

    /// Arcs leaving `node` that lie on some complete path.
    pub fn outgoing(&self, node: usize) -> &[u32] {
        self.outgoing.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn max_noise_chunks(&self) -> usize {
        self.max_noise_chunks
    }

    /// True when no complete path exists.
    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }
}

/// Builds the lattice with default settings and the given noise switch.
pub fn build_lattice(x: &KeySequence, lex: &Lexicon, allow_noise: bool) -> Result<SegLattice> {
    build_lattice_with(
        x,
        lex,
        &SegmentConfig {
            allow_noise,
            ..SegmentConfig::default()
        },
    )
}

/// Builds the segmentation lattice over `x`.
///
/// Returns [`Error::EmptyLattice`](crate::Error::EmptyLattice) when the keys
/// cannot be covered; callers may retry with noise enabled. An empty key
/// sequence yields an empty lattice.
pub fn build_lattice_with(x: &KeySequence, lex: &Lexicon, cfg: &SegmentConfig) -> Result<SegLattice> {
    let layout = x.layout();
    let keys = x.symbols();
    let m = keys.len();
    let mut found: BTreeSet<LatticeArc> = BTreeSet::new();
    let trie = lex.trie(layout);
    let abbreviations = layout == KeyLayout::TwentySixKey || cfg.keypad_abbreviations;

    for from in 0..m {
        for (len, syllables, abbrs) in trie.walk(&keys[from..]) {
            let to = from + len;
            for &sid in syllables {
                let text = &lex.syllable(sid).text;
                found.insert(LatticeArc {
                    from,
                    to,
                    syllable: Syllable::exact(text, ChunkMode::Perfect),
                });
            }
            if abbreviations {
                for &aid in abbrs {
                    let text = &lex.abbreviations()[aid as usize];
                    found.insert(LatticeArc {
                        from,
                        to,
                        syllable: Syllable::exact(text, ChunkMode::Abbreviated),
                    });
                }
            }
        }
        if cfg.allow_noise && cfg.max_noise_chunks > 0 {
            let longest = (lex.max_syllable_keys(layout) + 1).min(m - from);
            for len in 1..=longest {
                let span = &keys[from..from + len];
                let image: String = span.iter().collect();
                for (sid, d) in lex.fuzzy_ids(&image, layout) {
                    if d != 1 {
                        continue;
                    }
                    let canonical = &lex.syllable(sid).text;
                    found.insert(LatticeArc {
                        from,
                        to: from + len,
                        syllable: Syllable {
                            raw_chunk: realize(span, canonical, layout),
                            canonical: canonical.clone(),
                            mode: ChunkMode::Perfect,
                            noise_distance: 1,
                            key_len: len,
                        },
                    });
                }
            }
        }
    }

    // keep arcs on some 0 -> m path
    let mut forward = vec![false; m + 1];
    forward[0] = true;
    let mut by_from: Vec<Vec<&LatticeArc>> = vec![Vec::new(); m + 1];
    for a in &found {
        by_from[a.from].push(a);
    }
    for node in 0..=m {
        if forward[node] {
            for a in &by_from[node] {
                forward[a.to] = true;
            }
        }
    }
    let mut backward = vec![false; m + 1];
    backward[m] = true;
    for node in (0..=m).rev() {
        if by_from[node].iter().any(|a| backward[a.to]) {
            backward[node] = true;
        }
    }
    if m > 0 && !forward[m] {
        return Err(crate::Error::EmptyLattice(x.to_string()));
    }

    let arcs: Vec<LatticeArc> = found
        .into_iter()
        .filter(|a| forward[a.from] && backward[a.to])
        .collect();
    let mut outgoing = vec![Vec::new(); m + 1];
    for (i, a) in arcs.iter().enumerate() {
        outgoing[a.from].push(i as u32);
    }
    Ok(SegLattice {
        keys: x.clone(),
        arcs,
        outgoing,
        max_noise_chunks: if cfg.allow_noise { cfg.max_noise_chunks } else { 0 },
    })
}

/// Picks letters for a key span that stay aligned with `target`, so that the
/// letter-level edit distance equals the key-level one.
pub(crate) fn realize(span: &[char], target: &str, layout: KeyLayout) -> String {
    if layout == KeyLayout::TwentySixKey {
        return span.iter().collect();
    }
    let letters: Vec<char> = target.chars().collect();
    let image: Vec<char> = letters.iter().map(|&c| layout.key_of(c).unwrap_or(c)).collect();
    let (n, k) = (span.len(), image.len());
    // optimal string alignment table
    let mut d = vec![vec![0usize; k + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=k {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=k {
            let cost = usize::from(span[i - 1] != image[j - 1]);
            let mut best = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            if i > 1 && j > 1 && span[i - 1] == image[j - 2] && span[i - 2] == image[j - 1] {
                best = best.min(d[i - 2][j - 2] + 1);
            }
            d[i][j] = best;
        }
    }
    let first = |key: char| layout.letters_of(key).chars().next().unwrap_or(key);
    let mut out = Vec::with_capacity(n);
    let (mut i, mut j) = (n, k);
    while i > 0 {
        if j > 0 {
            let cost = usize::from(span[i - 1] != image[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + cost {
                out.push(if cost == 0 { letters[j - 1] } else { first(span[i - 1]) });
                i -= 1;
                j -= 1;
                continue;
            }
            if i > 1 && j > 1 && span[i - 1] == image[j - 2] && span[i - 2] == image[j - 1] && d[i][j] == d[i - 2][j - 2] + 1 {
                out.push(letters[j - 2]);
                out.push(letters[j - 1]);
                i -= 2;
                j -= 2;
                continue;
            }
            if d[i][j] == d[i][j - 1] + 1 {
                j -= 1;
                continue;
            }
        }
        out.push(first(span[i - 1]));
        i -= 1;
    }
    out.reverse();
    out.into_iter().collect()
}

/// Pre-rank key: fewer noisy chunks, then more perfect chunks, then fewer chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
struct PathCost {
    noise: usize,
    imperfect: isize,
    chunks: usize,
}

impl PathCost {
    fn of(s: &Syllable) -> Self {
        PathCost {
            noise: s.noise_distance as usize,
            imperfect: -isize::from(s.mode == ChunkMode::Perfect && s.noise_distance == 0),
            chunks: 1,
        }
    }

    fn plus(self, o: PathCost) -> Self {
        PathCost {
            noise: self.noise + o.noise,
            imperfect: self.imperfect + o.imperfect,
            chunks: self.chunks + o.chunks,
        }
    }
}

#[derive(Debug, Clone)]
struct Suffix {
    cost: PathCost,
    noisy_chunks: usize,
    arcs: Vec<u32>,
}

fn compare_suffix(lat: &SegLattice, a: &Suffix, b: &Suffix) -> Ordering {
    a.cost.cmp(&b.cost).then_with(|| {
        let ka = a.arcs.iter().map(|&i| &lat.arcs[i as usize].syllable);
        let kb = b.arcs.iter().map(|&i| &lat.arcs[i as usize].syllable);
        ka.cmp(kb)
    })
}

/// Complete paths in pre-rank order, at most `limit` of them.
///
/// Exhaustive whenever the lattice holds no more than `limit` paths.
pub fn enumerate_pysegs(lat: &SegLattice, limit: usize) -> Vec<PysegPath> {
    let limit = limit.max(1);
    let m = lat.len();
    if m == 0 || lat.is_empty() {
        return Vec::new();
    }
    let mut best: Vec<Vec<Suffix>> = vec![Vec::new(); m + 1];
    best[m].push(Suffix {
        cost: PathCost::default(),
        noisy_chunks: 0,
        arcs: Vec::new(),
    });
    for node in (0..m).rev() {
        let mut merged: Vec<Suffix> = Vec::new();
        for &aid in lat.outgoing(node) {
            let arc = lat.arc(aid);
            let noisy = usize::from(arc.syllable.is_noisy());
            for tail in &best[arc.to] {
                if tail.noisy_chunks + noisy > lat.max_noise_chunks {
                    continue;
                }
                let mut arcs = Vec::with_capacity(tail.arcs.len() + 1);
                arcs.push(aid);
                arcs.extend_from_slice(&tail.arcs);
                merged.push(Suffix {
                    cost: PathCost::of(&arc.syllable).plus(tail.cost),
                    noisy_chunks: tail.noisy_chunks + noisy,
                    arcs,
                });
            }
        }
        merged.sort_by(|a, b| compare_suffix(lat, a, b));
        merged.truncate(limit);
        best[node] = merged;
    }
    std::mem::take(&mut best[0])
        .into_iter()
        .map(|s| PysegPath::new(s.arcs.iter().map(|&i| lat.arc(i).syllable.clone()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keymap::{p2i, restores_exactly};

    fn x26(s: &str) -> KeySequence {
        KeySequence::parse(s, KeyLayout::TwentySixKey).unwrap()
    }

    fn shapes(paths: &[PysegPath]) -> Vec<String> {
        paths.iter().map(|p| p.display()).collect()
    }

    #[test]
    fn woban_paths() {
        let lex = Lexicon::bundled();
        let lat = build_lattice(&x26("woban"), lex, false).unwrap();
        let paths = enumerate_pysegs(&lat, 1000);
        let all = shapes(&paths);
        for expected in ["wo'ban", "w'o'b'a'n", "wo'ba'n"] {
            assert!(all.iter().any(|p| p == expected), "{expected} missing from {all:?}");
        }
        assert_eq!(paths[0].display(), "wo'ban");
        for p in &paths {
            assert!(restores_exactly(&p.raw_chunks(), lat.keys()).unwrap());
        }
    }

    #[test]
    fn modes() {
        let lex = Lexicon::bundled();
        let lat = build_lattice(&x26("woban"), lex, false).unwrap();
        let paths = enumerate_pysegs(&lat, 1000);
        let find = |shape: &str, mode: InputMode| {
            paths
                .iter()
                .find(|p| p.display() == shape && p.input_mode == mode)
                .unwrap_or_else(|| panic!("{shape} {mode}"))
                .clone()
        };
        assert_eq!(classify_mode(&find("wo'ban", InputMode::Perfect)), InputMode::Perfect);
        let all_abbr = find("w'o'b'a'n", InputMode::Abbreviated);
        assert!(all_abbr.syllables.iter().all(|s| s.mode == ChunkMode::Abbreviated));
        assert_eq!(classify_mode(&find("wo'ba'n", InputMode::RandomAbbreviated)), InputMode::RandomAbbreviated);
    }

    #[test]
    fn keypad_arcs() {
        let lex = Lexicon::bundled();
        let x = KeySequence::parse("96", KeyLayout::NineKey).unwrap();
        let lat = build_lattice(&x, lex, false).unwrap();
        assert!(lat
            .arcs()
            .iter()
            .any(|a| a.from == 0 && a.to == 2 && a.syllable.canonical == "wo" && a.syllable.mode == ChunkMode::Perfect));
        for a in lat.arcs() {
            let restored = p2i(&[a.syllable.raw_chunk.as_str()], KeyLayout::NineKey).unwrap();
            assert_eq!(restored.symbols(), &x.symbols()[a.from..a.to]);
        }
    }

    #[test]
    fn single_key() {
        let lex = Lexicon::bundled();
        let lat = build_lattice(&x26("q"), lex, false).unwrap();
        assert_eq!(lat.arcs().len(), 1);
        assert_eq!(lat.arcs()[0].syllable, Syllable::exact("q", ChunkMode::Abbreviated));
    }

    #[test]
    fn wo_top_one_is_perfect() {
        let lex = Lexicon::bundled();
        let lat = build_lattice(&x26("wo"), lex, false).unwrap();
        let top = enumerate_pysegs(&lat, 1);
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].display(), "wo");
        assert_eq!(top[0].input_mode, InputMode::Perfect);
        let all = enumerate_pysegs(&lat, 100);
        assert!(all.iter().any(|p| p.display() == "w'o"));
    }

    #[test]
    fn empty_input() {
        let lex = Lexicon::bundled();
        let x = KeySequence::parse("", KeyLayout::TwentySixKey).unwrap();
        let lat = build_lattice(&x, lex, false).unwrap();
        assert!(enumerate_pysegs(&lat, 10).is_empty());
    }

    #[test]
    fn uncoverable_input_signals_empty_lattice() {
        let lex = Lexicon::bundled();
        // 'i', 'u' and 'v' never start a syllable
        let err = build_lattice(&x26("iuv"), lex, false).unwrap_err();
        assert!(matches!(err, crate::Error::EmptyLattice(_)));
    }

    #[test]
    fn noisy_arcs() {
        let lex = Lexicon::bundled();
        let lat = build_lattice(&x26("rna"), lex, true).unwrap();
        let arc = lat
            .arcs()
            .iter()
            .find(|a| a.syllable.canonical == "ran" && a.syllable.is_noisy() && a.to == 3)
            .expect("rna -> ran");
        assert_eq!(arc.syllable.raw_chunk, "rna");
        assert_eq!(arc.syllable.key_len, 3);
        let clean = build_lattice(&x26("rna"), lex, false).unwrap();
        let noisy: BTreeSet<_> = lat.arcs().iter().cloned().collect();
        assert!(clean.arcs().iter().all(|a| noisy.contains(a)));
        // at most one noisy chunk per path
        for p in enumerate_pysegs(&lat, 10_000) {
            assert!(p.syllables.iter().filter(|s| s.is_noisy()).count() <= 1);
        }
    }

    #[test]
    fn keypad_noise_realization_tracks_target() {
        // zhi typed with the last two keys swapped: 9 4 4 -> 9 4 4 is symmetric,
        // so use "ran" (7 2 6) typed as 7 6 2
        let span: Vec<char> = "762".chars().collect();
        let raw = realize(&span, "ran", KeyLayout::NineKey);
        assert_eq!(raw, "rna");
        let span: Vec<char> = "7266".chars().collect();
        let raw = realize(&span, "ran", KeyLayout::NineKey);
        assert_eq!(p2i(&[raw.as_str()], KeyLayout::NineKey).unwrap().to_string(), "7266");
        assert_eq!(crate::lexicon::damerau(&raw, "ran"), 1);
    }

    #[test]
    fn keypad_arc_bound() {
        let lex = Lexicon::bundled();
        let x = p2i(&["wo", "ai", "zi", "ran"], KeyLayout::NineKey).unwrap();
        let lat = build_lattice(&x, lex, true).unwrap();
        let m = x.len();
        assert!(lat.arcs().len() <= lex.syllables().len() * m * m);
    }
}
