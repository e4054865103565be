//! Test-set generation for every input mode, typo injection, and top-K
//! precision scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::keymap::{p2i, KeyLayout, KeySequence};
use crate::lexicon::{ChunkMode, Lexicon};
use crate::scorer::{Extension, ScorerContract};
use crate::segmentation::InputMode;

pub const TESTSET_HEADER: &str = "gold\tkeys\tlayout\tmode\tnoise_type";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    ExtraKey,
    MissingKey,
    Transposition,
    WrongKey,
}

impl NoiseType {
    pub const ALL: [NoiseType; 4] = [
        NoiseType::ExtraKey,
        NoiseType::MissingKey,
        NoiseType::Transposition,
        NoiseType::WrongKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::ExtraKey => "extra_key",
            NoiseType::MissingKey => "missing_key",
            NoiseType::Transposition => "transposition",
            NoiseType::WrongKey => "wrong_key",
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseType::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub gold: String,
    pub keys: KeySequence,
    pub mode: InputMode,
    pub noise_type: Option<NoiseType>,
}

impl TestCase {
    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.gold,
            self.keys,
            self.keys.layout(),
            self.mode,
            self.noise_type.map_or("-", NoiseType::name)
        )
    }
}

const QWERTY: [&str; 3] = ["qwertyuiop", "asdfghjkl", "zxcvbnm"];
const KEYPAD: [&str; 3] = ["123", "456", "789"];

/// Keys physically adjacent to `key` on the layout, in row-major order.
pub fn neighbor_keys(key: char, layout: KeyLayout) -> Vec<char> {
    if !layout.is_key(key) {
        return Vec::new();
    }
    let rows: &[&str] = match layout {
        KeyLayout::TwentySixKey => &QWERTY,
        KeyLayout::NineKey => &KEYPAD,
    };
    let grid: Vec<Vec<char>> = rows.iter().map(|r| r.chars().collect()).collect();
    let Some((r, c)) = grid
        .iter()
        .enumerate()
        .find_map(|(r, row)| row.iter().position(|&k| k == key).map(|c| (r, c)))
    else {
        return Vec::new();
    };
    // qwerty rows are staggered, keypad rows are a square grid
    let offsets: &[(i32, i32)] = match layout {
        KeyLayout::TwentySixKey => &[(-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0)],
        KeyLayout::NineKey => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut out = Vec::new();
    for &(dr, dc) in offsets {
        let (nr, nc) = (r as i32 + dr, c as i32 + dc);
        if nr < 0 || nc < 0 {
            continue;
        }
        if let Some(&k) = grid.get(nr as usize).and_then(|row| row.get(nc as usize)) {
            if layout.is_key(k) {
                out.push(k);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Applies one corruption at position `pos` of `keys`. For a transposition
/// `pos` and `pos + 1` are swapped; a wrong key is replaced by its
/// `choice`-th neighbour (mod the neighbour count).
pub fn inject_noise_at(keys: &[char], noise: NoiseType, pos: usize, choice: usize, layout: KeyLayout) -> Result<Vec<char>> {
    let bad = |why: &str| Error::Validation(format!("cannot apply {noise} at {pos} of {}: {why}", keys.iter().collect::<String>()));
    if pos >= keys.len() {
        return Err(bad("position out of range"));
    }
    let mut out = keys.to_vec();
    match noise {
        NoiseType::ExtraKey => out.insert(pos, keys[pos]),
        NoiseType::MissingKey => {
            if keys.len() < 2 {
                return Err(bad("too short"));
            }
            out.remove(pos);
        }
        NoiseType::Transposition => {
            if pos + 1 >= keys.len() {
                return Err(bad("no following key"));
            }
            if keys[pos] == keys[pos + 1] {
                return Err(bad("swapping equal keys is not a corruption"));
            }
            out.swap(pos, pos + 1);
        }
        NoiseType::WrongKey => {
            let near = neighbor_keys(keys[pos], layout);
            if near.is_empty() {
                return Err(bad("key has no neighbours"));
            }
            out[pos] = near[choice % near.len()];
        }
    }
    Ok(out)
}

fn legal_positions(keys: &[char], noise: NoiseType) -> Vec<usize> {
    match noise {
        NoiseType::ExtraKey | NoiseType::WrongKey => (0..keys.len()).collect(),
        NoiseType::MissingKey if keys.len() >= 2 => (0..keys.len()).collect(),
        NoiseType::MissingKey => Vec::new(),
        NoiseType::Transposition => (0..keys.len().saturating_sub(1))
            .filter(|&i| keys[i] != keys[i + 1])
            .collect(),
    }
}

/// Types `pinyin` on `layout` with exactly one corruption inside one
/// syllable, both chosen by `rng`.
pub fn inject_noise<R: Rng + ?Sized>(
    pinyin: &[String],
    noise: NoiseType,
    layout: KeyLayout,
    rng: &mut R,
) -> Result<KeySequence> {
    inject_noise_n(pinyin, noise, layout, 1, rng)
}

/// Like [`inject_noise`] with `count` corruptions, each in a different
/// syllable.
pub fn inject_noise_n<R: Rng + ?Sized>(
    pinyin: &[String],
    noise: NoiseType,
    layout: KeyLayout,
    count: usize,
    rng: &mut R,
) -> Result<KeySequence> {
    if pinyin.is_empty() {
        return Err(Error::Validation("cannot corrupt an empty pinyin sequence".into()));
    }
    let typed: Vec<Vec<char>> = pinyin
        .iter()
        .map(|s| p2i(&[s], layout).map(|k| k.symbols().to_vec()))
        .collect::<Result<_>>()?;
    let eligible: Vec<usize> = (0..typed.len())
        .filter(|&i| !legal_positions(&typed[i], noise).is_empty())
        .collect();
    if count == 0 || eligible.len() < count {
        return Err(Error::Validation(format!(
            "{} is too short for {count} {noise} corruption(s)",
            pinyin.join("'")
        )));
    }
    let targets: Vec<usize> = if count == 1 {
        eligible.choose(rng).copied().into_iter().collect()
    } else {
        eligible.choose_multiple(rng, count).copied().collect()
    };
    let mut keys = Vec::new();
    for (i, syl) in typed.iter().enumerate() {
        if targets.contains(&i) {
            let positions = legal_positions(syl, noise);
            let pos = *positions.choose(rng).expect("eligible syllable has a position");
            let choice = rng.gen_range(0..8);
            keys.extend(inject_noise_at(syl, noise, pos, choice, layout)?);
        } else {
            keys.extend_from_slice(syl);
        }
    }
    KeySequence::parse(&keys.into_iter().collect::<String>(), layout)
}

/// Keys for `gold` typed in a noise-free `mode`.
pub fn type_sentence<R: Rng + ?Sized>(
    gold: &str,
    lex: &Lexicon,
    mode: InputMode,
    layout: KeyLayout,
    rng: &mut R,
) -> Result<KeySequence> {
    let mut chunks = Vec::new();
    for ch in gold.chars() {
        let full = lex.c2p(ch, ChunkMode::Perfect)?;
        let abbreviate = match mode {
            InputMode::Perfect | InputMode::Noisy => false,
            InputMode::Abbreviated => true,
            InputMode::RandomAbbreviated => rng.gen_bool(0.5),
        };
        chunks.push(if abbreviate { full[..1].to_string() } else { full.to_string() });
    }
    p2i(&chunks, layout)
}

fn mode_seed(seed: u64, mode: InputMode) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (mode as u64 + 1)
}

/// Samples `n` cases per mode from in-lexicon corpus sentences. Noisy cases
/// cycle through the four corruption types, one corruption each.
pub fn gen_testset(
    corpus: &str,
    lex: &Lexicon,
    modes: &[InputMode],
    layout: KeyLayout,
    seed: u64,
    n: usize,
) -> Result<Vec<TestCase>> {
    gen_testset_with(corpus, lex, modes, layout, seed, n, 1)
}

/// [`gen_testset`] with `errors_per_case` corruptions in every noisy case.
pub fn gen_testset_with(
    corpus: &str,
    lex: &Lexicon,
    modes: &[InputMode],
    layout: KeyLayout,
    seed: u64,
    n: usize,
    errors_per_case: usize,
) -> Result<Vec<TestCase>> {
    if errors_per_case == 0 {
        return Err(Error::Config("noisy cases need at least one corruption".into()));
    }
    let sentences: Vec<&str> = corpus
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && l.chars().all(|c| lex.contains_char(c)))
        .collect();
    if sentences.len() < n {
        return Err(Error::Validation(format!(
            "need {n} in-lexicon sentences per mode, corpus has {} (short by {})",
            sentences.len(),
            n - sentences.len()
        )));
    }
    let mut out = Vec::with_capacity(n * modes.len());
    for &mode in modes {
        let mut rng = ChaCha8Rng::seed_from_u64(mode_seed(seed, mode));
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.shuffle(&mut rng);
        let mut produced = 0;
        for idx in order {
            if produced == n {
                break;
            }
            let gold = sentences[idx];
            let case = if mode == InputMode::Noisy {
                let noise = NoiseType::ALL[produced % NoiseType::ALL.len()];
                let pinyin: Vec<String> = gold
                    .chars()
                    .map(|c| lex.c2p(c, ChunkMode::Perfect).map(str::to_string))
                    .collect::<Result<_>>()?;
                match inject_noise_n(&pinyin, noise, layout, errors_per_case, &mut rng) {
                    Ok(keys) => TestCase {
                        gold: gold.to_string(),
                        keys,
                        mode,
                        noise_type: Some(noise),
                    },
                    Err(_) => continue,
                }
            } else {
                TestCase {
                    gold: gold.to_string(),
                    keys: type_sentence(gold, lex, mode, layout, &mut rng)?,
                    mode,
                    noise_type: None,
                }
            };
            out.push(case);
            produced += 1;
        }
        if produced < n {
            return Err(Error::Validation(format!(
                "only {produced} of {n} {mode} cases could be generated (short by {})",
                n - produced
            )));
        }
    }
    Ok(out)
}

pub fn write_testset(cases: &[TestCase]) -> String {
    let mut s = String::from(TESTSET_HEADER);
    s.push('\n');
    for c in cases {
        s.push_str(&c.to_tsv_row());
        s.push('\n');
    }
    s
}

pub fn parse_testset(text: &str) -> Result<Vec<TestCase>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line == TESTSET_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::parse(i + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let layout: KeyLayout = f[2].parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?;
        let mode: InputMode = f[3].parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?;
        let noise_type = match f[4] {
            "-" | "" => None,
            t => Some(t.parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?),
        };
        if noise_type.is_some() != (mode == InputMode::Noisy) {
            return Err(Error::parse(i + 1, "noise type must be given exactly for noisy cases"));
        }
        out.push(TestCase {
            gold: f[0].to_string(),
            keys: KeySequence::parse(f[1], layout).map_err(|e| Error::parse(i + 1, e.to_string()))?,
            mode,
            noise_type,
        });
    }
    Ok(out)
}

/// Loads `sentence<TAB>pinyin` rows, pinyin separated by spaces or
/// apostrophes, as perfect-pinyin cases.
pub fn load_sentence_pinyin(text: &str, layout: KeyLayout) -> Result<Vec<TestCase>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (gold, pinyin) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(i + 1, "expected sentence<TAB>pinyin"))?;
        let chunks: Vec<String> = pinyin
            .split([' ', '\''])
            .filter(|s| !s.is_empty())
            .map(|s| s.trim_end_matches(|c: char| c.is_ascii_digit()).to_ascii_lowercase())
            .collect();
        if chunks.len() != gold.chars().count() {
            return Err(Error::parse(
                i + 1,
                format!("{} syllables for {} characters", chunks.len(), gold.chars().count()),
            ));
        }
        out.push(TestCase {
            gold: gold.to_string(),
            keys: p2i(&chunks, layout).map_err(|e| Error::parse(i + 1, e.to_string()))?,
            mode: InputMode::Perfect,
            noise_type: None,
        });
    }
    Ok(out)
}

/// 1-based rank of `gold` in `candidates`.
pub fn rank_of<S: AsRef<str>>(candidates: &[S], gold: &str) -> Option<usize> {
    candidates.iter().position(|c| c.as_ref() == gold).map(|i| i + 1)
}

/// Fraction of cases whose gold string is among the first `k` candidates.
pub fn p_at_k<S: AsRef<str>>(results: &[Vec<S>], golds: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if results.is_empty() || results.len() != golds.len() {
        return Err(Error::Validation(format!(
            "need a non-empty, equal number of results and golds ({} vs {})",
            results.len(),
            golds.len()
        )));
    }
    let ranks: Vec<Option<usize>> = results.iter().zip(golds).map(|(r, g)| rank_of(r, g)).collect();
    p_at_k_ranks(&ranks, k)
}

/// P@K from 1-based gold ranks (`None` for a miss).
pub fn p_at_k_ranks(ranks: &[Option<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Validation("empty case set".into()));
    }
    let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Per mode: case count and P@K for each requested K.
    pub by_mode: BTreeMap<InputMode, (usize, Vec<f64>)>,
    pub overall: (usize, Vec<f64>),
    /// Cases the decoder could not segment at all.
    pub undecodable: usize,
}

impl EvalReport {
    /// Mode-by-metric table, tab separated.
    pub fn table(&self) -> String {
        let mut s = String::from("mode\tcases");
        for k in &self.ks {
            s.push_str(&format!("\tP@{k}"));
        }
        s.push('\n');
        let row = |name: &str, (n, ps): &(usize, Vec<f64>)| {
            let mut r = format!("{name}\t{n}");
            for p in ps {
                r.push_str(&format!("\t{:.4}", p));
            }
            r.push('\n');
            r
        };
        for (mode, entry) in &self.by_mode {
            s.push_str(&row(mode.name(), entry));
        }
        s.push_str(&row("all", &self.overall));
        s
    }
}

/// Gold ranks for every case, decoded in parallel with `cfg.top_k` raised to
/// `depth`.
pub fn gold_ranks(
    cases: &[TestCase],
    scorer: &dyn ScorerContract,
    lex: &Lexicon,
    cfg: &DecodeConfig,
    depth: usize,
) -> Vec<Option<Option<usize>>> {
    let cfg = DecodeConfig {
        top_k: depth.max(cfg.top_k),
        beam_width_pyseg: cfg.beam_width_pyseg.max(depth),
        beam_width_char: cfg.beam_width_char.max(depth),
        ..cfg.clone()
    };
    cases
        .par_iter()
        .map(|case| {
            decode(&case.keys, scorer, lex, &Extension::default(), &cfg)
                .ok()
                .map(|cands| rank_of(&cands.iter().map(|c| c.chars.as_str()).collect::<Vec<_>>(), &case.gold))
        })
        .collect()
}

/// Decodes every case and reports P@K per input mode. Undecodable cases
/// count as misses.
pub fn evaluate(
    cases: &[TestCase],
    scorer: &dyn ScorerContract,
    lex: &Lexicon,
    cfg: &DecodeConfig,
    ks: &[usize],
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("K values must be positive".into()));
    }
    let depth = *ks.iter().max().expect("non-empty");
    let ranks = gold_ranks(cases, scorer, lex, cfg, depth);
    let undecodable = ranks.iter().filter(|r| r.is_none()).count();
    let flat: Vec<Option<usize>> = ranks.into_iter().map(Option::flatten).collect();
    let metrics = |rs: &[Option<usize>]| -> Result<Vec<f64>> { ks.iter().map(|&k| p_at_k_ranks(rs, k)).collect() };
    let mut grouped: BTreeMap<InputMode, Vec<Option<usize>>> = BTreeMap::new();
    for (case, r) in cases.iter().zip(&flat) {
        grouped.entry(case.mode).or_default().push(*r);
    }
    let mut by_mode = BTreeMap::new();
    for (mode, rs) in grouped {
        by_mode.insert(mode, (rs.len(), metrics(&rs)?));
    }
    Ok(EvalReport {
        ks: ks.to_vec(),
        by_mode,
        overall: (flat.len(), metrics(&flat)?),
        undecodable,
    })
}
